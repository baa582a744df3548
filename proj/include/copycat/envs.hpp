#pragma once

// Partially observed control tasks with privileged scripted experts.
//
// BrakeTown: a car on a 1-D road meets pedestrian crossings. The car's
// velocity is never observed; the expert sees everything and brakes
// smoothly (rate-limited), which makes consecutive actions nearly equal.
//
// HiddenVelocity: a d-dimensional damped spring system tracking a moving
// reference; only positions are observed.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace copycat::envs {

using Vector = Eigen::VectorXd;

enum class Status { running, success, collision, timeout };
const char* status_name(Status s);

class TerminalStepError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EpisodeOutcome {
  Status status = Status::running;
  int steps = 0;
  double episode_return = 0.0;
};

// ---------------------------------------------------------------------------
// BrakeTown

enum class Traffic { regular, dense };
enum class ObsMode { vector, pixel_strip };

struct BrakeTownConfig {
  double road_length = 100.0;
  double dt = 0.1;
  double v_max = 10.0;
  double v_cruise = 8.0;
  double accel_scale = 4.0;       // velocity change per second at |a| = 1
  double view_range = 40.0;
  double brake_distance = 16.0;
  double crossing_width = 2.0;
  double pedestrian_rate = 0.02;  // crossings per unit distance at regular traffic
  int crossing_min_steps = 40;
  int crossing_max_steps = 100;
  Traffic traffic = Traffic::dense;
  int time_limit = 300;
  ObsMode obs_mode = ObsMode::vector;
  int strip_cells = 50;
  int visible_pedestrians = 2;
  double slew_limit = 0.06;       // expert |a_t - a_{t-1}| bound
  double cruise_gain = 0.12;      // expert P gain toward v_cruise (per unit velocity)
  double v_stop_eps = 1e-3;
  double collision_penalty = 100.0;
  double first_crossing_min = 30.0;  // no crossing closer to the start than this

  double effective_rate() const {
    return traffic == Traffic::dense ? 2.0 * pedestrian_rate : pedestrian_rate;
  }
  /// Steps of warning before a crossing activates (pedestrian at the curb).
  int lookahead_steps() const;
  int obs_dim() const;
  void validate() const;
};

struct Pedestrian {
  double position = 0.0;  // crossing centre
  int start = 0;          // first active step
  int end = 0;            // one past last active step

  bool active(int t) const { return t >= start && t < end; }
};

struct BrakeTownState {
  double x = 0.0;
  double v = 0.0;
  int t = 0;
  std::vector<Pedestrian> pedestrians;
  Status status = Status::running;
};

BrakeTownState reset(const BrakeTownConfig& config, std::uint64_t episode_seed);
Vector observe(const BrakeTownConfig& config, const BrakeTownState& state);

struct StepResult {
  Vector observation;
  double reward = 0.0;
  Status status = Status::running;
};

/// Advances one step. Actions are clamped to [-1, 1].
StepResult step(const BrakeTownConfig& config, BrakeTownState& state, double action);

double env_reward(const BrakeTownConfig& config, const BrakeTownState& before,
                  const BrakeTownState& after);

/// Is the crossing flagged to the agent (crossing now or about to)?
bool pedestrian_flagged(const BrakeTownConfig& config, const Pedestrian& p, int t);

/// Rate-limited cruise controller that brakes for flagged crossings ahead.
/// Keeps its own previous action, so one instance per episode.
class BrakeTownExpert {
 public:
  explicit BrakeTownExpert(const BrakeTownConfig& config) : config_(config) {}
  void reset() { prev_ = 0.0; }
  double act(const BrakeTownState& state);
  /// The unconstrained target the expert slews toward.
  double target(const BrakeTownState& state) const;

 private:
  BrakeTownConfig config_;
  double prev_ = 0.0;
};

// ---------------------------------------------------------------------------
// HiddenVelocity

struct HiddenVelocityConfig {
  int dim = 2;
  double stiffness = 1.0;
  double damping = 0.1;
  double gain = 4.0;          // actuation strength
  double dt = 0.05;
  int horizon = 200;
  int reference_terms = 3;    // sinusoids per axis
  double reference_amplitude = 0.6;
  std::uint64_t reference_seed = 7;
  double kp = 12.0;
  double kd = 6.0;
  double slew_limit = 0.2;

  int obs_dim() const { return 2 * dim; }
  /// Spectral radius of the zero-action discrete dynamics.
  double spectral_radius() const;
  void validate() const;
};

struct HiddenVelocityState {
  Vector q;
  Vector qd;
  int t = 0;
  // Reference: per axis, sum of amplitude * sin(freq * time + phase).
  Eigen::MatrixXd amplitude, frequency, phase;  // dim x terms
  Status status = Status::running;

  Vector reference(double time) const;
  Vector reference_rate(double time) const;
};

HiddenVelocityState reset(const HiddenVelocityConfig& config, std::uint64_t episode_seed);
Vector observe(const HiddenVelocityConfig& config, const HiddenVelocityState& state);
StepResult step(const HiddenVelocityConfig& config, HiddenVelocityState& state,
                const Vector& action);
/// Negative squared tracking error at the state's current step.
double env_reward(const HiddenVelocityConfig& config, const HiddenVelocityState& state);

class HiddenVelocityExpert {
 public:
  explicit HiddenVelocityExpert(const HiddenVelocityConfig& config) : config_(config) {}
  void reset() { prev_.resize(0); }
  Vector act(const HiddenVelocityState& state);

 private:
  HiddenVelocityConfig config_;
  Vector prev_;
};

// ---------------------------------------------------------------------------
// Type-erased episode interface shared by data collection and evaluation.

enum class EnvKind { brake_town, hidden_velocity };
const char* env_kind_name(EnvKind k);

struct EnvConfig {
  EnvKind kind = EnvKind::brake_town;
  BrakeTownConfig brake_town;
  HiddenVelocityConfig hidden_velocity;

  int obs_dim() const;
  int action_dim() const;
  int time_limit() const;
  void validate() const;
};

class Episode {
 public:
  virtual ~Episode() = default;
  virtual Vector observation() const = 0;
  /// Privileged velocity; only analysis code may read it.
  virtual Vector hidden_velocity() const = 0;
  /// Expert label at the current state (advances the expert's memory).
  virtual Vector expert_action() = 0;
  virtual StepResult step(const Vector& action) = 0;
  virtual Status status() const = 0;
  virtual int t() const = 0;
};

std::unique_ptr<Episode> make_episode(const EnvConfig& config, std::uint64_t episode_seed);

// JSON config round-trip; every field optional on input, defaults applied.
nlohmann::json to_json(const EnvConfig& config);
EnvConfig env_config_from_json(const nlohmann::json& j);
/// Stable hash of every behaviour-affecting field.
std::uint64_t config_hash(const EnvConfig& config);

}  // namespace copycat::envs
