#include "copycat/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace copycat::envs {

namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

}  // namespace

const char* status_name(Status s) {
  switch (s) {
    case Status::running: return "running";
    case Status::success: return "success";
    case Status::collision: return "collision";
    case Status::timeout: return "timeout";
  }
  return "unknown";
}

const char* env_kind_name(EnvKind k) {
  return k == EnvKind::brake_town ? "brake_town" : "hidden_velocity";
}

// ---------------------------------------------------------------------------
// BrakeTown

int BrakeTownConfig::lookahead_steps() const {
  // Time to cover the braking zone plus the crossing itself at cruise speed.
  return static_cast<int>(std::ceil((brake_distance + crossing_width) / (v_cruise * dt)));
}

int BrakeTownConfig::obs_dim() const {
  return obs_mode == ObsMode::vector ? 1 + 2 * visible_pedestrians : strip_cells;
}

void BrakeTownConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("brake_town: " + what); };
  if (!(dt > 0.0)) fail("dt must be positive");
  if (!(v_cruise > 0.0 && v_cruise <= v_max)) fail("need 0 < v_cruise <= v_max");
  if (!(brake_distance < view_range && view_range < road_length)) {
    fail("need brake_distance < view_range < road_length");
  }
  if (!(time_limit > road_length / (v_cruise * dt))) fail("time_limit too short to finish");
  if (crossing_min_steps < 1 || crossing_max_steps < crossing_min_steps) {
    fail("bad crossing duration interval");
  }
  if (pedestrian_rate < 0.0) fail("pedestrian_rate must be non-negative");
  if (visible_pedestrians < 1) fail("visible_pedestrians must be >= 1");
  if (strip_cells < 2) fail("strip_cells must be >= 2");
  if (!(slew_limit > 0.0 && slew_limit <= 2.0)) fail("slew_limit must be in (0, 2]");
  if (!(accel_scale > 0.0)) fail("accel_scale must be positive");
  if (!(crossing_width > 0.0)) fail("crossing_width must be positive");
}

BrakeTownState reset(const BrakeTownConfig& config, std::uint64_t episode_seed) {
  config.validate();
  std::mt19937_64 rng(episode_seed);
  BrakeTownState s;
  const double rate = config.effective_rate();
  const double min_gap = 4.0 * config.crossing_width;
  double pos = config.first_crossing_min;
  if (rate > 0.0) {
    std::exponential_distribution<double> gap(rate);
    pos += gap(rng);
    while (pos < config.road_length - config.crossing_width) {
      // Windows are centred on the time an uninterrupted cruise would arrive.
      const double arrival = pos / (config.v_cruise * config.dt);
      Pedestrian p;
      p.position = pos;
      p.start = std::max(0, static_cast<int>(std::lround(arrival + uniform(rng, -45.0, 15.0))));
      const int span = config.crossing_max_steps - config.crossing_min_steps + 1;
      p.end = p.start + config.crossing_min_steps + static_cast<int>(rng() % span);
      s.pedestrians.push_back(p);
      pos += std::max(min_gap, gap(rng));
    }
  }
  return s;
}

bool pedestrian_flagged(const BrakeTownConfig& config, const Pedestrian& p, int t) {
  return t >= p.start - config.lookahead_steps() && t < p.end;
}

Vector observe(const BrakeTownConfig& config, const BrakeTownState& s) {
  const double half = 0.5 * config.crossing_width;
  if (config.obs_mode == ObsMode::pixel_strip) {
    Vector strip = Vector::Zero(config.strip_cells);
    const double cell = config.road_length / config.strip_cells;
    for (const auto& p : s.pedestrians) {
      if (!pedestrian_flagged(config, p, s.t)) continue;
      const int lo = std::clamp(static_cast<int>((p.position - half) / cell), 0, config.strip_cells - 1);
      const int hi = std::clamp(static_cast<int>((p.position + half) / cell), 0, config.strip_cells - 1);
      for (int c = lo; c <= hi; ++c) strip(c) = 1.0;
    }
    const int agent = std::clamp(static_cast<int>(s.x / cell), 0, config.strip_cells - 1);
    strip(agent) = std::max(strip(agent), 0.5);
    return strip;
  }

  Vector o(config.obs_dim());
  o(0) = std::min(s.x / config.road_length, 1.0);
  int k = 0;
  for (const auto& p : s.pedestrians) {
    if (k == config.visible_pedestrians) break;
    const double near_edge = p.position - half - s.x;
    if (p.position + half < s.x || near_edge > config.view_range) continue;
    o(1 + 2 * k) = near_edge / config.view_range;
    o(2 + 2 * k) = pedestrian_flagged(config, p, s.t) ? 1.0 : 0.0;
    ++k;
  }
  for (; k < config.visible_pedestrians; ++k) {
    o(1 + 2 * k) = 1.0;
    o(2 + 2 * k) = 0.0;
  }
  return o;
}

double env_reward(const BrakeTownConfig& config, const BrakeTownState& before,
                  const BrakeTownState& after) {
  double r = (after.x - before.x) / config.road_length;
  if (after.status == Status::collision) r -= config.collision_penalty;
  return r;
}

StepResult step(const BrakeTownConfig& config, BrakeTownState& s, double action) {
  if (s.status != Status::running) {
    throw TerminalStepError(std::string("brake_town: step after terminal status ") +
                            status_name(s.status));
  }
  const BrakeTownState before = s;
  const double a = std::clamp(action, -1.0, 1.0);
  s.v = std::clamp(s.v + a * config.accel_scale * config.dt, 0.0, config.v_max);
  s.x += s.v * config.dt;
  s.t += 1;

  const double half = 0.5 * config.crossing_width;
  bool collided = false;
  if (s.v > config.v_stop_eps) {
    for (const auto& p : s.pedestrians) {
      if (p.active(s.t) && std::abs(s.x - p.position) <= half) collided = true;
    }
  }
  if (collided) {
    s.status = Status::collision;
  } else if (s.x >= config.road_length) {
    s.status = Status::success;
  } else if (s.t >= config.time_limit) {
    s.status = Status::timeout;
  }
  return StepResult{observe(config, s), env_reward(config, before, s), s.status};
}

namespace {

// Distance covered while braking at the slew limit from (v, a_prev) to rest.
double stopping_distance(const BrakeTownConfig& c, double v, double a_prev) {
  double dist = 0.0;
  double a = a_prev;
  for (int i = 0; i < 10000 && v > c.v_stop_eps; ++i) {
    a = std::max(-1.0, a - c.slew_limit);
    v = std::clamp(v + a * c.accel_scale * c.dt, 0.0, c.v_max);
    dist += v * c.dt;
  }
  return dist;
}

}  // namespace

double BrakeTownExpert::target(const BrakeTownState& s) const {
  const auto& c = config_;
  const double half = 0.5 * c.crossing_width;
  const double cruise = std::clamp(c.cruise_gain * (c.v_cruise - s.v), -1.0, 1.0);
  for (const auto& p : s.pedestrians) {
    const double near_edge = p.position - half - s.x;
    if (near_edge <= 0.0 || near_edge > c.brake_distance) continue;
    if (!pedestrian_flagged(c, p, s.t)) continue;
    if (s.v <= c.v_stop_eps) return 0.0;  // at rest: hold, brake released
    // Too close to stop and not yet crossing: commit and clear it.
    if (!p.active(s.t) && stopping_distance(c, s.v, prev_) >= near_edge) continue;
    return -1.0;
  }
  return cruise;
}

double BrakeTownExpert::act(const BrakeTownState& s) {
  const double goal = target(s);
  const double a = prev_ + std::clamp(goal - prev_, -config_.slew_limit, config_.slew_limit);
  prev_ = std::clamp(a, -1.0, 1.0);
  return prev_;
}

// ---------------------------------------------------------------------------
// HiddenVelocity

double HiddenVelocityConfig::spectral_radius() const {
  Eigen::Matrix2d m;
  m << 1.0 - dt * dt * stiffness, dt * (1.0 - dt * damping), -dt * stiffness, 1.0 - dt * damping;
  return m.eigenvalues().cwiseAbs().maxCoeff();
}

void HiddenVelocityConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("hidden_velocity: " + what); };
  if (dim < 1) fail("dim must be >= 1");
  if (!(dt > 0.0)) fail("dt must be positive");
  if (horizon < 2) fail("horizon must be >= 2");
  if (reference_terms < 1) fail("reference_terms must be >= 1");
  if (!(spectral_radius() < 1.0)) fail("zero-action dynamics are not stable");
  if (!(slew_limit > 0.0)) fail("slew_limit must be positive");
}

Vector HiddenVelocityState::reference(double time) const {
  return (amplitude.array() * (frequency.array() * time + phase.array()).sin()).rowwise().sum();
}

Vector HiddenVelocityState::reference_rate(double time) const {
  return (amplitude.array() * frequency.array() * (frequency.array() * time + phase.array()).cos())
      .rowwise()
      .sum();
}

HiddenVelocityState reset(const HiddenVelocityConfig& config, std::uint64_t episode_seed) {
  config.validate();
  std::mt19937_64 rng(episode_seed ^ (config.reference_seed * 0x9e3779b97f4a7c15ULL));
  HiddenVelocityState s;
  const int d = config.dim;
  const int n = config.reference_terms;
  s.amplitude.resize(d, n);
  s.frequency.resize(d, n);
  s.phase.resize(d, n);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < n; ++j) {
      s.amplitude(i, j) = config.reference_amplitude / n * uniform(rng, 0.5, 1.0);
      s.frequency(i, j) = uniform(rng, 0.3, 1.5);
      s.phase(i, j) = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    }
  }
  s.q = Vector::Zero(d);
  s.qd = Vector::Zero(d);
  return s;
}

Vector observe(const HiddenVelocityConfig& config, const HiddenVelocityState& s) {
  Vector o(config.obs_dim());
  o << s.q, s.reference(s.t * config.dt);
  return o;
}

double env_reward(const HiddenVelocityConfig& config, const HiddenVelocityState& s) {
  return -(s.q - s.reference(s.t * config.dt)).squaredNorm();
}

StepResult step(const HiddenVelocityConfig& config, HiddenVelocityState& s, const Vector& action) {
  if (s.status != Status::running) {
    throw TerminalStepError(std::string("hidden_velocity: step after terminal status ") +
                            status_name(s.status));
  }
  if (action.size() != config.dim) {
    throw std::invalid_argument("hidden_velocity: action size " + std::to_string(action.size()) +
                                " vs dim " + std::to_string(config.dim));
  }
  const Vector a = action.cwiseMax(-1.0).cwiseMin(1.0);
  s.qd += config.dt * (-config.stiffness * s.q - config.damping * s.qd + config.gain * a);
  s.q += config.dt * s.qd;
  s.t += 1;
  if (s.t >= config.horizon) s.status = Status::success;
  return StepResult{observe(config, s), env_reward(config, s), s.status};
}

Vector HiddenVelocityExpert::act(const HiddenVelocityState& s) {
  const auto& c = config_;
  const double time = s.t * c.dt;
  // Track the reference one step ahead with PD feedback and model feedforward.
  const Vector ref_next = s.reference(time + c.dt);
  const Vector rate_next = s.reference_rate(time + c.dt);
  const Vector accel = c.kp * (ref_next - s.q) + c.kd * (rate_next - s.qd);
  Vector goal = (accel + c.stiffness * s.q + c.damping * s.qd) / c.gain;
  goal = goal.cwiseMax(-1.0).cwiseMin(1.0);
  if (prev_.size() != goal.size()) prev_ = Vector::Zero(goal.size());
  const Vector delta = (goal - prev_).cwiseMax(-c.slew_limit).cwiseMin(c.slew_limit);
  prev_ = (prev_ + delta).cwiseMax(-1.0).cwiseMin(1.0);
  return prev_;
}

// ---------------------------------------------------------------------------

int EnvConfig::obs_dim() const {
  return kind == EnvKind::brake_town ? brake_town.obs_dim() : hidden_velocity.obs_dim();
}

int EnvConfig::action_dim() const {
  return kind == EnvKind::brake_town ? 1 : hidden_velocity.dim;
}

int EnvConfig::time_limit() const {
  return kind == EnvKind::brake_town ? brake_town.time_limit : hidden_velocity.horizon;
}

void EnvConfig::validate() const {
  if (kind == EnvKind::brake_town) {
    brake_town.validate();
  } else {
    hidden_velocity.validate();
  }
}

namespace {

class BrakeTownEpisode final : public Episode {
 public:
  BrakeTownEpisode(const BrakeTownConfig& c, std::uint64_t seed)
      : config_(c), state_(reset(c, seed)), expert_(c) {}

  Vector observation() const override { return observe(config_, state_); }
  Vector hidden_velocity() const override { return Vector::Constant(1, state_.v); }
  Vector expert_action() override { return Vector::Constant(1, expert_.act(state_)); }
  StepResult step(const Vector& action) override {
    return envs::step(config_, state_, action(0));
  }
  Status status() const override { return state_.status; }
  int t() const override { return state_.t; }

 private:
  BrakeTownConfig config_;
  BrakeTownState state_;
  BrakeTownExpert expert_;
};

class HiddenVelocityEpisode final : public Episode {
 public:
  HiddenVelocityEpisode(const HiddenVelocityConfig& c, std::uint64_t seed)
      : config_(c), state_(reset(c, seed)), expert_(c) {}

  Vector observation() const override { return observe(config_, state_); }
  Vector hidden_velocity() const override { return state_.qd; }
  Vector expert_action() override { return expert_.act(state_); }
  StepResult step(const Vector& action) override {
    return envs::step(config_, state_, action);
  }
  Status status() const override { return state_.status; }
  int t() const override { return state_.t; }

 private:
  HiddenVelocityConfig config_;
  HiddenVelocityState state_;
  HiddenVelocityExpert expert_;
};

}  // namespace

std::unique_ptr<Episode> make_episode(const EnvConfig& config, std::uint64_t episode_seed) {
  if (config.kind == EnvKind::brake_town) {
    return std::make_unique<BrakeTownEpisode>(config.brake_town, episode_seed);
  }
  return std::make_unique<HiddenVelocityEpisode>(config.hidden_velocity, episode_seed);
}

// ---------------------------------------------------------------------------
// JSON

using json = nlohmann::json;

namespace {

template <typename T>
void read(const json& j, const char* key, T& field) {
  if (j.contains(key)) {
    try {
      field = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
  }
}

}  // namespace

json to_json(const EnvConfig& c) {
  const auto& b = c.brake_town;
  const auto& h = c.hidden_velocity;
  return json{
      {"kind", env_kind_name(c.kind)},
      {"brake_town",
       {{"road_length", b.road_length},
        {"dt", b.dt},
        {"v_max", b.v_max},
        {"v_cruise", b.v_cruise},
        {"accel_scale", b.accel_scale},
        {"view_range", b.view_range},
        {"brake_distance", b.brake_distance},
        {"crossing_width", b.crossing_width},
        {"pedestrian_rate", b.pedestrian_rate},
        {"crossing_min_steps", b.crossing_min_steps},
        {"crossing_max_steps", b.crossing_max_steps},
        {"traffic", b.traffic == Traffic::dense ? "dense" : "regular"},
        {"time_limit", b.time_limit},
        {"obs_mode", b.obs_mode == ObsMode::vector ? "vector" : "pixel_strip"},
        {"strip_cells", b.strip_cells},
        {"visible_pedestrians", b.visible_pedestrians},
        {"slew_limit", b.slew_limit},
        {"cruise_gain", b.cruise_gain},
        {"v_stop_eps", b.v_stop_eps},
        {"collision_penalty", b.collision_penalty},
        {"first_crossing_min", b.first_crossing_min}}},
      {"hidden_velocity",
       {{"dim", h.dim},
        {"stiffness", h.stiffness},
        {"damping", h.damping},
        {"gain", h.gain},
        {"dt", h.dt},
        {"horizon", h.horizon},
        {"reference_terms", h.reference_terms},
        {"reference_amplitude", h.reference_amplitude},
        {"reference_seed", h.reference_seed},
        {"kp", h.kp},
        {"kd", h.kd},
        {"slew_limit", h.slew_limit}}},
  };
}

EnvConfig env_config_from_json(const json& j) {
  EnvConfig c;
  if (!j.is_object()) throw ConfigError("env config: expected a JSON object");
  std::string kind = env_kind_name(c.kind);
  read(j, "kind", kind);
  if (kind == "brake_town") {
    c.kind = EnvKind::brake_town;
  } else if (kind == "hidden_velocity") {
    c.kind = EnvKind::hidden_velocity;
  } else {
    throw ConfigError("env config field 'kind': unknown environment '" + kind + "'");
  }
  if (j.contains("brake_town")) {
    const auto& s = j.at("brake_town");
    auto& b = c.brake_town;
    read(s, "road_length", b.road_length);
    read(s, "dt", b.dt);
    read(s, "v_max", b.v_max);
    read(s, "v_cruise", b.v_cruise);
    read(s, "accel_scale", b.accel_scale);
    read(s, "view_range", b.view_range);
    read(s, "brake_distance", b.brake_distance);
    read(s, "crossing_width", b.crossing_width);
    read(s, "pedestrian_rate", b.pedestrian_rate);
    read(s, "crossing_min_steps", b.crossing_min_steps);
    read(s, "crossing_max_steps", b.crossing_max_steps);
    std::string traffic = b.traffic == Traffic::dense ? "dense" : "regular";
    read(s, "traffic", traffic);
    if (traffic != "dense" && traffic != "regular") {
      throw ConfigError("config field 'brake_town.traffic': expected dense|regular");
    }
    b.traffic = traffic == "dense" ? Traffic::dense : Traffic::regular;
    read(s, "time_limit", b.time_limit);
    std::string mode = b.obs_mode == ObsMode::vector ? "vector" : "pixel_strip";
    read(s, "obs_mode", mode);
    if (mode != "vector" && mode != "pixel_strip") {
      throw ConfigError("config field 'brake_town.obs_mode': expected vector|pixel_strip");
    }
    b.obs_mode = mode == "vector" ? ObsMode::vector : ObsMode::pixel_strip;
    read(s, "strip_cells", b.strip_cells);
    read(s, "visible_pedestrians", b.visible_pedestrians);
    read(s, "slew_limit", b.slew_limit);
    read(s, "cruise_gain", b.cruise_gain);
    read(s, "v_stop_eps", b.v_stop_eps);
    read(s, "collision_penalty", b.collision_penalty);
    read(s, "first_crossing_min", b.first_crossing_min);
  }
  if (j.contains("hidden_velocity")) {
    const auto& s = j.at("hidden_velocity");
    auto& h = c.hidden_velocity;
    read(s, "dim", h.dim);
    read(s, "stiffness", h.stiffness);
    read(s, "damping", h.damping);
    read(s, "gain", h.gain);
    read(s, "dt", h.dt);
    read(s, "horizon", h.horizon);
    read(s, "reference_terms", h.reference_terms);
    read(s, "reference_amplitude", h.reference_amplitude);
    read(s, "reference_seed", h.reference_seed);
    read(s, "kp", h.kp);
    read(s, "kd", h.kd);
    read(s, "slew_limit", h.slew_limit);
  }
  c.validate();
  return c;
}

std::uint64_t config_hash(const EnvConfig& config) {
  const std::string text = to_json(config).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace copycat::envs
