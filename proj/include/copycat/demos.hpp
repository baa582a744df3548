#pragma once

#include "copycat/envs.hpp"

#include <Eigen/Dense>

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace copycat::demos {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Record {
  int t = 0;
  Vector observation;
  Vector action;           // expert label
  Vector executed_action;  // what was actually applied (differs under noise)
  Vector hidden_velocity;  // analysis and auxiliary targets only
};

struct Trajectory {
  std::uint64_t episode_seed = 0;
  std::vector<Record> records;
};

enum class Boundary { repeat_first, zero_pad };
const char* boundary_name(Boundary b);

struct CollectOptions {
  int episodes = 200;
  double noise_prob = 0.0;
  double noise_scale = 0.5;  // executed = label + U(-scale, scale) on noisy steps
  std::uint64_t seed = 0;
};

/// Rolls out the privileged expert. Noise perturbs execution only; labels
/// stay clean.
std::vector<Trajectory> collect(const envs::EnvConfig& config, const CollectOptions& options);

/// Newest-first stack [o_t, o_{t-1}, ..., o_{t-H}] flattened to one row.
Vector stack_history(const Trajectory& traj, std::size_t t, int history, Boundary boundary);
/// The window for every step of a trajectory (rows = steps).
Matrix stack_history(const Trajectory& traj, int history, Boundary boundary);

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Read counter that restarts at zero in every copy.
class AccessCounter {
 public:
  AccessCounter() = default;
  AccessCounter(const AccessCounter&) {}
  AccessCounter& operator=(const AccessCounter&) { return *this; }
  void bump() const { n_.fetch_add(1); }
  std::int64_t value() const { return n_.load(); }

 private:
  mutable std::atomic<std::int64_t> n_{0};
};

/// Samples are every (trajectory, t) with t >= 1. Inputs, targets and
/// privileged fields are exposed through separate accessors so that input
/// assembly never touches the hidden state.
class DemoDataset {
 public:
  struct Sample {
    std::uint32_t trajectory;
    std::uint32_t t;
  };

  DemoDataset(envs::EnvConfig config, std::vector<Trajectory> trajectories, int history,
              Boundary boundary = Boundary::repeat_first, std::uint64_t split_seed = 0,
              double train_fraction = 0.9);

  const envs::EnvConfig& env_config() const { return config_; }
  const std::vector<Trajectory>& trajectories() const { return trajectories_; }
  int history() const { return history_; }
  Boundary boundary() const { return boundary_; }
  std::uint64_t split_seed() const { return split_seed_; }
  double train_fraction() const { return train_fraction_; }
  int obs_dim() const { return obs_dim_; }
  int action_dim() const { return action_dim_; }
  int window_dim() const { return (history_ + 1) * obs_dim_; }
  std::span<const Sample> samples() const { return samples_; }
  std::span<const std::size_t> train_indices() const { return train_; }
  std::span<const std::size_t> val_indices() const { return val_; }
  std::vector<std::uint32_t> train_episodes() const;
  std::vector<std::uint32_t> val_episodes() const;

  // Inputs.
  Matrix windows(std::span<const std::size_t> idx) const;
  Matrix current_observations(std::span<const std::size_t> idx) const;

  // Targets.
  Matrix actions(std::span<const std::size_t> idx) const;
  /// a_{t-lag}; steps before the episode start use a_0.
  Matrix lagged_actions(std::span<const std::size_t> idx, int lag = 1) const;
  /// a_t - a_{t-1}, computed once at construction.
  Matrix residuals(std::span<const std::size_t> idx) const;
  Matrix velocity_targets(std::span<const std::size_t> idx) const;
  /// Divides velocity targets; BrakeTown uses v_max so targets lie in [0, 1].
  double velocity_scale() const { return velocity_scale_; }
  int velocity_dim() const;

  // Privileged access (analysis only). Counted so tests can audit that
  // training input assembly never reads it.
  Vector hidden_velocity(std::size_t sample) const;
  std::int64_t hidden_reads() const { return hidden_reads_.value(); }

  /// Appends trajectories (DAgger aggregation). The existing split is kept;
  /// new episodes join the train split.
  DemoDataset with_trajectories(std::vector<Trajectory> extra) const;

 private:
  void build();

  envs::EnvConfig config_;
  std::vector<Trajectory> trajectories_;
  int history_;
  Boundary boundary_;
  std::uint64_t split_seed_;
  double train_fraction_;
  int obs_dim_ = 0;
  int action_dim_ = 0;
  double velocity_scale_ = 1.0;
  std::vector<Sample> samples_;
  std::vector<std::size_t> train_;
  std::vector<std::size_t> val_;
  std::vector<bool> train_episode_;
  Matrix windows_;
  Matrix residuals_;
  AccessCounter hidden_reads_;
};

/// Bucket fractions of ||a_t - a_{t-1}||^2 over [0,1e-3), [1e-3,1e-2),
/// [1e-2,1e-1), [1e-1,inf).
struct ResidualHistogram {
  static constexpr std::array<double, 3> kEdges{1e-3, 1e-2, 1e-1};
  std::array<double, 4> fractions{};
  std::size_t count = 0;
};

ResidualHistogram residual_stats(const DemoDataset& dataset);
ResidualHistogram residual_stats(std::span<const Trajectory> trajectories);

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

struct DatasetFileInfo {
  std::uint32_t version = 0;
  std::uint64_t env_hash = 0;
  int history = 0;
  std::uint64_t seed = 0;
};

/// Binary file: magic, version, JSON header (env config, hash, H, seed,
/// boundary), then length-prefixed trajectories of raw doubles.
void save_dataset(const std::filesystem::path& path, const DemoDataset& dataset,
                  std::uint64_t collect_seed);
/// expected_history < 0 accepts whatever the file holds.
DemoDataset load_dataset(const std::filesystem::path& path, int expected_history = -1,
                         DatasetFileInfo* info = nullptr);

}  // namespace copycat::demos
