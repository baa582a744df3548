#pragma once

// Imitation methods: single-observation and history behavioural cloning,
// the two-stream residual-action model, the baselines that fight copycat
// shortcuts (history dropout, adversarial feature removal, keyframe
// reweighting, DAgger) and the ablations of the two-stream model.

#include "copycat/demos.hpp"
#include "copycat/envs.hpp"
#include "copycat/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace copycat::methods {

using Matrix = Eigen::MatrixXd;

enum class MethodKind {
  bcso,
  bcoh,
  ours,
  hd,
  fca,
  keyframe,
  dagger,
  memory_only_residual,
  memory_only_learned,
  memory_obj_at,
  memory_obj_aprev,
  ours_no_stopgrad,
  ours_multibranch,
  two_stream_bcoh,
  two_stream_keyframe,
};

const char* method_name(MethodKind kind);
MethodKind parse_method(const std::string& name);
const std::vector<MethodKind>& all_methods();

/// Methods built on the memory + policy stream pair.
bool is_two_stream(MethodKind kind);

enum class LossKind { l1, l2 };

class MethodError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MethodConfig {
  MethodKind kind = MethodKind::bcoh;
  int history = 6;
  int hidden = 64;
  int memory_dim = 32;
  LossKind loss = LossKind::l1;
  double alpha = 0.95;          // action vs. velocity-regression weight
  bool aux_velocity = true;
  nn::AdamConfig adam{1e-3, 0.9, 0.999, 1e-8, 0.0};
  std::int64_t lr_decay_threshold = 300;  // iterations without a new best val loss
  double lr_decay_rate = 0.1;
  double lr_lower_bound = 1e-7;
  int iterations = 3000;
  int batch_size = 64;
  std::uint64_t seed = 0;
  int eval_every = 100;

  double hd_dropout = 0.5;
  double fca_lambda = 0.5;
  double keyframe_kappa = 10.0;
  int dagger_rounds = 5;
  int dagger_episodes = 20;
  std::int64_t dagger_budget = 30000;
  int dagger_round_iterations = 600;
  int branches = 1;

  // Inputs are ZCA-whitened with train-split statistics (all methods alike).
  bool whiten = true;
  double whiten_eps = 1e-9;

  void validate() const;
  /// Defaults for an environment (loss, velocity head, weight decay).
  static MethodConfig defaults_for(const envs::EnvConfig& env, MethodKind kind);
};

nlohmann::json to_json(const MethodConfig& config);
/// Applies every field present in `j` on top of `base`.
MethodConfig method_config_from_json(const nlohmann::json& j, MethodConfig base = {});
std::uint64_t config_hash(const MethodConfig& config);

struct TrainRecord {
  int iteration = 0;
  double train_loss = 0.0;   // the method's supervised objective
  double aux_loss = 0.0;     // memory loss, adversary loss, ... (0 when none)
  double learning_rate = 0.0;
  double val_loss = -1.0;    // action loss on the val split, -1 when not evaluated
};

struct TrainReport {
  std::vector<TrainRecord> records;
  double wall_seconds = 0.0;
  std::int64_t expert_queries = 0;
  std::vector<std::size_t> dataset_sizes;  // DAgger: after each aggregation

  double final_val_loss() const;
  void write_csv(const std::filesystem::path& path) const;
};

/// A frozen set of networks plus how to run them.
struct TrainedPolicy {
  MethodKind kind = MethodKind::bcoh;
  int history = 0;
  int obs_dim = 0;
  int action_dim = 0;
  std::map<std::string, nn::Mlp> nets;
  std::map<std::string, std::string> metadata;

  bool two_stream() const { return is_two_stream(kind); }
  bool needs_prev_action() const { return kind == MethodKind::memory_only_residual; }

  /// windows: rows of newest-first stacked observations (H+1 frames).
  /// prev_actions: only read by the residual controller. Output clamped to [-1, 1].
  Matrix act(const Matrix& windows, const Matrix* prev_actions = nullptr) const;
  /// Same as act() with m_t replaced by zeros (two-stream fusion check).
  Matrix act_without_memory(const Matrix& windows) const;
  /// m_t for two-stream methods, otherwise the penultimate single-stream feature.
  Matrix features(const Matrix& windows) const;
  /// Feature at hidden layer `layer` of the single-stream encoder (-1 = last).
  Matrix encoder_features(const Matrix& windows, int layer = -1) const;

  void save(const std::filesystem::path& path, std::uint64_t seed) const;
  static TrainedPolicy load(const std::filesystem::path& path);
};

struct TrainResult {
  TrainedPolicy policy;
  TrainReport report;
};

/// Optional per-iteration observer (iteration, record).
using Observer = std::function<void(const TrainRecord&)>;

TrainResult train_bc(const demos::DemoDataset& dataset, const MethodConfig& config,
                     const Observer& observer = {});
TrainResult train_ours(const demos::DemoDataset& dataset, const MethodConfig& config,
                       const Observer& observer = {});
TrainResult train_hd(const demos::DemoDataset& dataset, const MethodConfig& config,
                     const Observer& observer = {});
TrainResult train_fca(const demos::DemoDataset& dataset, const MethodConfig& config,
                      const Observer& observer = {});
TrainResult train_keyframe(const demos::DemoDataset& dataset, const MethodConfig& config,
                           const Observer& observer = {});
TrainResult train_dagger(const demos::DemoDataset& dataset, const MethodConfig& config,
                         const Observer& observer = {});
TrainResult train_ablation(const demos::DemoDataset& dataset, const MethodConfig& config,
                           const Observer& observer = {});

/// Dispatches on config.kind.
TrainResult train(const demos::DemoDataset& dataset, const MethodConfig& config,
                  const Observer& observer = {});

/// ZCA whitening fit on the rows of `x`, packaged as a one-layer identity
/// Mlp so it persists with the other networks. Identity when !enabled.
nn::Mlp fit_whitener(const Matrix& x, double eps, bool enabled = true);

/// Keyframe sample weights 1 + kappa * |a_t - a_{t-1}|_1, normalized to
/// mean 1 over the train split (indexed by sample id).
Eigen::VectorXd keyframe_weights(const demos::DemoDataset& dataset, double kappa);

/// Runs a policy in closed loop, keeping its own observation history.
class PolicyRunner {
 public:
  PolicyRunner(const TrainedPolicy& policy, demos::Boundary boundary = demos::Boundary::repeat_first);
  void reset();
  /// Feeds the newest observation and returns the action to execute.
  Eigen::VectorXd act(const Eigen::VectorXd& observation);
  const Eigen::VectorXd& window() const { return window_; }

 private:
  const TrainedPolicy& policy_;
  demos::Boundary boundary_;
  std::vector<Eigen::VectorXd> frames_;  // newest first
  Eigen::VectorXd window_;
  Eigen::VectorXd prev_action_;
};

}  // namespace copycat::methods
