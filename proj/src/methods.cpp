#include "copycat/methods.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace copycat::methods {

namespace {

using ad::Tape;
using ad::Var;
using nn::Mlp;
using nn::MlpSpec;

constexpr std::pair<MethodKind, const char*> kNames[] = {
    {MethodKind::bcso, "bcso"},
    {MethodKind::bcoh, "bcoh"},
    {MethodKind::ours, "ours"},
    {MethodKind::hd, "hd"},
    {MethodKind::fca, "fca"},
    {MethodKind::keyframe, "keyframe"},
    {MethodKind::dagger, "dagger"},
    {MethodKind::memory_only_residual, "memory_only_residual"},
    {MethodKind::memory_only_learned, "memory_only_learned"},
    {MethodKind::memory_obj_at, "memory_obj_at"},
    {MethodKind::memory_obj_aprev, "memory_obj_aprev"},
    {MethodKind::ours_no_stopgrad, "ours_no_stopgrad"},
    {MethodKind::ours_multibranch, "ours_multibranch"},
    {MethodKind::two_stream_bcoh, "two_stream_bcoh"},
    {MethodKind::two_stream_keyframe, "two_stream_keyframe"},
};

}  // namespace

const char* method_name(MethodKind kind) {
  for (const auto& [k, n] : kNames) {
    if (k == kind) return n;
  }
  return "?";
}

MethodKind parse_method(const std::string& name) {
  for (const auto& [k, n] : kNames) {
    if (name == n) return k;
  }
  throw MethodError("unknown method '" + name + "'");
}

const std::vector<MethodKind>& all_methods() {
  static const std::vector<MethodKind> all = [] {
    std::vector<MethodKind> v;
    for (const auto& [k, n] : kNames) v.push_back(k);
    return v;
  }();
  return all;
}

bool is_two_stream(MethodKind kind) {
  switch (kind) {
    case MethodKind::ours:
    case MethodKind::memory_only_residual:
    case MethodKind::memory_only_learned:
    case MethodKind::memory_obj_at:
    case MethodKind::memory_obj_aprev:
    case MethodKind::ours_no_stopgrad:
    case MethodKind::ours_multibranch:
    case MethodKind::two_stream_bcoh:
    case MethodKind::two_stream_keyframe:
      return true;
    default:
      return false;
  }
}

// ---------------------------------------------------------------------------
// Config

void MethodConfig::validate() const {
  auto fail = [](const std::string& m) { throw MethodError("MethodConfig: " + m); };
  if (history < 0) fail("history must be >= 0");
  if (kind == MethodKind::bcso && history != 0) fail("bcso requires history 0");
  if (kind != MethodKind::bcso && history < 1) {
    fail(std::string(method_name(kind)) + " requires history >= 1");
  }
  if (hidden < 1 || memory_dim < 1) fail("network widths must be >= 1");
  if (!(alpha > 0.0 && alpha <= 1.0)) fail("alpha must lie in (0, 1]");
  if (iterations < 0) fail("iterations must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (eval_every < 1) fail("eval_every must be >= 1");
  if (!(adam.learning_rate > 0.0)) fail("learning rate must be > 0");
  if (lr_decay_threshold < 1) fail("lr_decay_threshold must be >= 1");
  if (!(hd_dropout >= 0.0 && hd_dropout <= 1.0)) fail("hd_dropout must lie in [0, 1]");
  if (fca_lambda < 0.0) fail("fca_lambda must be >= 0");
  if (keyframe_kappa < 0.0) fail("keyframe_kappa must be >= 0");
  if (dagger_rounds < 0 || dagger_episodes < 0 || dagger_budget < 0 || dagger_round_iterations < 0) {
    fail("dagger knobs must be >= 0");
  }
  if (branches < 1) fail("branches must be >= 1");
  if (!(whiten_eps > 0.0)) fail("whiten_eps must be > 0");
  if (branches != 1 && kind != MethodKind::ours_multibranch) {
    fail("branches > 1 only applies to ours_multibranch");
  }
}

MethodConfig MethodConfig::defaults_for(const envs::EnvConfig& env, MethodKind kind) {
  MethodConfig c;
  c.kind = kind;
  if (env.kind == envs::EnvKind::hidden_velocity) {
    c.loss = LossKind::l2;
    c.aux_velocity = false;
    c.history = 1;
  }
  if (kind == MethodKind::bcso) c.history = 0;
  return c;
}

nlohmann::json to_json(const MethodConfig& c) {
  return {
      {"method", method_name(c.kind)},
      {"history", c.history},
      {"hidden", c.hidden},
      {"memory_dim", c.memory_dim},
      {"loss", c.loss == LossKind::l1 ? "l1" : "l2"},
      {"alpha", c.alpha},
      {"aux_velocity", c.aux_velocity},
      {"lr", c.adam.learning_rate},
      {"beta1", c.adam.beta1},
      {"beta2", c.adam.beta2},
      {"adam_eps", c.adam.eps},
      {"weight_decay", c.adam.weight_decay},
      {"lr_decay_threshold", c.lr_decay_threshold},
      {"lr_decay_rate", c.lr_decay_rate},
      {"lr_lower_bound", c.lr_lower_bound},
      {"iterations", c.iterations},
      {"batch_size", c.batch_size},
      {"seed", c.seed},
      {"eval_every", c.eval_every},
      {"hd_dropout", c.hd_dropout},
      {"fca_lambda", c.fca_lambda},
      {"keyframe_kappa", c.keyframe_kappa},
      {"dagger_rounds", c.dagger_rounds},
      {"dagger_episodes", c.dagger_episodes},
      {"dagger_budget", c.dagger_budget},
      {"dagger_round_iterations", c.dagger_round_iterations},
      {"branches", c.branches},
      {"whiten", c.whiten},
      {"whiten_eps", c.whiten_eps},
  };
}

namespace {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw MethodError(std::string("method config field '") + key + "': " + e.what());
  }
}

}  // namespace

MethodConfig method_config_from_json(const nlohmann::json& j, MethodConfig c) {
  if (!j.is_object()) throw MethodError("method config must be a JSON object");
  static const char* known[] = {
      "method", "history", "hidden", "memory_dim", "loss", "alpha", "aux_velocity", "lr",
      "beta1", "beta2", "adam_eps", "weight_decay", "lr_decay_threshold", "lr_decay_rate",
      "lr_lower_bound", "iterations", "batch_size", "seed", "eval_every", "hd_dropout",
      "fca_lambda", "keyframe_kappa", "dagger_rounds", "dagger_episodes", "dagger_budget",
      "dagger_round_iterations", "branches", "whiten", "whiten_eps"};
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(std::begin(known), std::end(known),
                     [&](const char* k) { return key == k; }) == std::end(known)) {
      throw MethodError("method config: unknown field '" + key + "'");
    }
  }
  if (j.contains("method")) {
    std::string name;
    read_field(j, "method", name);
    c.kind = parse_method(name);
  }
  if (j.contains("loss")) {
    std::string name;
    read_field(j, "loss", name);
    if (name == "l1") c.loss = LossKind::l1;
    else if (name == "l2") c.loss = LossKind::l2;
    else throw MethodError("method config field 'loss': expected l1 or l2, got '" + name + "'");
  }
  read_field(j, "history", c.history);
  read_field(j, "hidden", c.hidden);
  read_field(j, "memory_dim", c.memory_dim);
  read_field(j, "alpha", c.alpha);
  read_field(j, "aux_velocity", c.aux_velocity);
  read_field(j, "lr", c.adam.learning_rate);
  read_field(j, "beta1", c.adam.beta1);
  read_field(j, "beta2", c.adam.beta2);
  read_field(j, "adam_eps", c.adam.eps);
  read_field(j, "weight_decay", c.adam.weight_decay);
  read_field(j, "lr_decay_threshold", c.lr_decay_threshold);
  read_field(j, "lr_decay_rate", c.lr_decay_rate);
  read_field(j, "lr_lower_bound", c.lr_lower_bound);
  read_field(j, "iterations", c.iterations);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "seed", c.seed);
  read_field(j, "eval_every", c.eval_every);
  read_field(j, "hd_dropout", c.hd_dropout);
  read_field(j, "fca_lambda", c.fca_lambda);
  read_field(j, "keyframe_kappa", c.keyframe_kappa);
  read_field(j, "dagger_rounds", c.dagger_rounds);
  read_field(j, "dagger_episodes", c.dagger_episodes);
  read_field(j, "dagger_budget", c.dagger_budget);
  read_field(j, "dagger_round_iterations", c.dagger_round_iterations);
  read_field(j, "branches", c.branches);
  read_field(j, "whiten", c.whiten);
  read_field(j, "whiten_eps", c.whiten_eps);
  return c;
}

std::uint64_t config_hash(const MethodConfig& config) {
  return nn::derive_seed(0, to_json(config).dump());
}

// ---------------------------------------------------------------------------
// Report

double TrainReport::final_val_loss() const {
  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    if (it->val_loss >= 0.0) return it->val_loss;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

void TrainReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "iteration,train_loss,aux_loss,lr,val_loss\n";
  out << std::setprecision(17);
  for (const auto& r : records) {
    out << r.iteration << ',' << r.train_loss << ',' << r.aux_loss << ',' << r.learning_rate << ',';
    if (r.val_loss >= 0.0) out << r.val_loss;
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Policy inference

namespace {

Matrix apply(const std::map<std::string, Mlp>& nets, const std::string& name, const Matrix& x) {
  auto it = nets.find(name);
  if (it == nets.end()) throw MethodError("policy has no network '" + name + "'");
  return nn::mlp_apply(it->second, x);
}

void check_windows(const TrainedPolicy& p, const Matrix& windows) {
  if (windows.cols() != (p.history + 1) * p.obs_dim) {
    throw ad::ShapeError("act: window width " + std::to_string(windows.cols()) + ", policy expects " +
                         std::to_string((p.history + 1) * p.obs_dim));
  }
}

bool policy_sees_history(MethodKind kind) {
  return kind == MethodKind::two_stream_bcoh || kind == MethodKind::two_stream_keyframe;
}

/// Applies a fixed input transform when the policy carries one.
Matrix normalized(const std::map<std::string, Mlp>& nets, const char* name, const Matrix& x) {
  auto it = nets.find(name);
  return it == nets.end() ? x : nn::mlp_apply(it->second, x);
}

Matrix norm_window(const TrainedPolicy& p, const Matrix& windows) { return normalized(p.nets, "input_norm", windows); }

Matrix fuse_and_act(const TrainedPolicy& p, const Matrix& windows, const Matrix& memory) {
  const Matrix policy_in = policy_sees_history(p.kind)
                               ? norm_window(p, windows)
                               : normalized(p.nets, "obs_norm", windows.leftCols(p.obs_dim));
  const Matrix trunk = apply(p.nets, "policy_trunk", policy_in);
  Matrix fused(windows.rows(), trunk.cols() + memory.cols());
  fused << trunk, memory;
  return apply(p.nets, "policy_head", fused);
}

}  // namespace

Matrix TrainedPolicy::act(const Matrix& windows, const Matrix* prev_actions) const {
  check_windows(*this, windows);
  Matrix a;
  if (!two_stream()) {
    a = apply(nets, "action_head", apply(nets, "encoder", norm_window(*this, windows)));
  } else if (kind == MethodKind::memory_only_residual) {
    if (prev_actions == nullptr) throw MethodError("act: residual controller needs the previous action");
    if (prev_actions->rows() != windows.rows() || prev_actions->cols() != action_dim) {
      throw ad::ShapeError("act: previous action shape mismatch");
    }
    const Matrix r = apply(nets, "residual_head", apply(nets, "memory", norm_window(*this, windows)));
    a = *prev_actions + r.leftCols(action_dim);
  } else if (kind == MethodKind::memory_only_learned) {
    a = apply(nets, "controller", apply(nets, "memory", norm_window(*this, windows)));
  } else {
    a = fuse_and_act(*this, windows, apply(nets, "memory", norm_window(*this, windows)));
  }
  return a.cwiseMax(-1.0).cwiseMin(1.0);
}

Matrix TrainedPolicy::act_without_memory(const Matrix& windows) const {
  check_windows(*this, windows);
  if (!two_stream() || kind == MethodKind::memory_only_residual || kind == MethodKind::memory_only_learned) {
    throw MethodError("act_without_memory: needs a fused two-stream policy");
  }
  const int width = nets.at("memory").spec.output_width();
  return fuse_and_act(*this, windows, Matrix::Zero(windows.rows(), width)).cwiseMax(-1.0).cwiseMin(1.0);
}

Matrix TrainedPolicy::features(const Matrix& windows) const {
  check_windows(*this, windows);
  return apply(nets, two_stream() ? "memory" : "encoder", norm_window(*this, windows));
}

Matrix TrainedPolicy::encoder_features(const Matrix& windows, int layer) const {
  check_windows(*this, windows);
  const auto& net = nets.at(two_stream() ? "memory" : "encoder");
  std::vector<Matrix> hidden;
  Matrix out = nn::mlp_apply(net, norm_window(*this, windows), &hidden);
  hidden.push_back(out);
  const int n = static_cast<int>(hidden.size());
  const int idx = layer < 0 ? n + layer : layer;
  if (idx < 0 || idx >= n) throw MethodError("encoder_features: layer out of range");
  return hidden[idx];
}

void TrainedPolicy::save(const std::filesystem::path& path, std::uint64_t seed) const {
  nn::ParamFile f;
  f.seed = seed;
  f.nets = nets;
  f.metadata = metadata;
  f.metadata["method"] = method_name(kind);
  f.metadata["history"] = std::to_string(history);
  f.metadata["obs_dim"] = std::to_string(obs_dim);
  f.metadata["action_dim"] = std::to_string(action_dim);
  nn::save_params(path, f);
}

TrainedPolicy TrainedPolicy::load(const std::filesystem::path& path) {
  nn::ParamFile f = nn::load_params(path);
  auto need = [&](const char* key) -> const std::string& {
    auto it = f.metadata.find(key);
    if (it == f.metadata.end()) throw nn::FormatError(path.string() + ": metadata lacks '" + key + "'");
    return it->second;
  };
  TrainedPolicy p;
  p.kind = parse_method(need("method"));
  p.history = std::stoi(need("history"));
  p.obs_dim = std::stoi(need("obs_dim"));
  p.action_dim = std::stoi(need("action_dim"));
  p.nets = std::move(f.nets);
  p.metadata = std::move(f.metadata);
  return p;
}

// ---------------------------------------------------------------------------
// Training machinery

namespace {

Var loss_of(Tape& tape, LossKind kind, Var pred, Var target, const ad::Vector* w = nullptr) {
  return kind == LossKind::l1 ? ad::l1_loss(tape, pred, target, w) : ad::l2_loss(tape, pred, target, w);
}

Matrix rows_of(const Eigen::VectorXd& v, std::span<const std::size_t> idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), 1);
  for (std::size_t i = 0; i < idx.size(); ++i) out(i, 0) = v(idx[i]);
  return out;
}

double loss_value(LossKind kind, const Matrix& pred, const Matrix& target) {
  const Matrix d = pred - target;
  const double s = kind == LossKind::l1 ? d.cwiseAbs().sum() : d.squaredNorm();
  return s / static_cast<double>(d.size());
}

/// Owns the networks and optimizer state of one training run. Nets are
/// registered in a fixed order so the optimizer parameter list is stable.
class Trainer {
 public:
  Trainer(const MethodConfig& config, const demos::DemoDataset& dataset)
      : config_(config),
        schedule_({config.adam.learning_rate,
                   std::max<std::int64_t>(1, config.lr_decay_threshold / config.eval_every),
                   config.lr_decay_rate, config.lr_lower_bound}),
        batch_rng_(nn::derive_seed(config.seed, "batch")),
        mask_rng_(nn::derive_seed(config.seed, "mask")),
        obs_dim_(dataset.obs_dim()),
        action_dim_(dataset.action_dim()),
        velocity_dim_(dataset.velocity_dim()) {}

  /// A non-trainable transform (never bound on the tape).
  void set_fixed(const std::string& name, Mlp m) { nets_[name] = std::move(m); }
  Matrix norm(const char* name, const Matrix& x) const { return normalized(nets_, name, x); }

  void add_net(const std::string& name, MlpSpec spec) {
    nets_[name] = nn::init_mlp(spec, nn::derive_seed(config_.seed, "init." + name));
    order_.push_back(name);
  }

  /// Freezes the current parameter list into an optimizer.
  void start_optimizer(const std::vector<std::string>& trainable) {
    trainable_ = trainable;
    params_.clear();
    names_.clear();
    for (const auto& n : trainable_) {
      auto ps = nets_.at(n).parameters();
      for (std::size_t i = 0; i < ps.size(); ++i) {
        params_.push_back(ps[i]);
        names_.push_back(n + (i % 2 == 0 ? ".W" : ".b") + std::to_string(i / 2));
      }
    }
    nn::AdamConfig ac = config_.adam;
    ac.learning_rate = schedule_.current();
    adam_ = nn::make_adam(ac, params_);
  }

  std::map<std::string, nn::MlpVars> bind(Tape& tape) const {
    std::map<std::string, nn::MlpVars> vars;
    for (const auto& n : order_) vars[n] = nn::bind(tape, nets_.at(n));
    return vars;
  }

  Var forward(Tape& tape, const std::map<std::string, nn::MlpVars>& vars, const std::string& name,
              Var x) const {
    return nn::mlp_forward(tape, nets_.at(name), vars.at(name), x).output;
  }

  void step(Tape& tape, const std::map<std::string, nn::MlpVars>& vars, Var loss, int iteration) {
    const double value = tape.value(loss)(0, 0);
    if (!std::isfinite(value)) {
      throw DivergenceError("training diverged at iteration " + std::to_string(iteration) +
                            ": loss is " + std::to_string(value));
    }
    tape.backward(loss);
    std::vector<Matrix> grads;
    grads.reserve(params_.size());
    for (const auto& n : trainable_) {
      for (auto& g : nn::gradients(tape, vars.at(n))) grads.push_back(std::move(g));
    }
    adam_.config.learning_rate = schedule_.current();
    try {
      nn::adam_step(adam_, params_, grads, names_);
    } catch (const nn::NonFiniteGradient& e) {
      throw DivergenceError("training diverged at iteration " + std::to_string(iteration) + ": " +
                            e.what());
    }
  }

  std::vector<std::size_t> sample_batch(std::span<const std::size_t> pool) {
    if (pool.empty()) throw MethodError("training split is empty");
    std::vector<std::size_t> idx(config_.batch_size);
    for (auto& i : idx) {
      const auto k = static_cast<std::size_t>(nn::uniform01(batch_rng_) * static_cast<double>(pool.size()));
      i = pool[std::min(k, pool.size() - 1)];
    }
    return idx;
  }

  /// Feeds the schedule a validation loss; returns the rate now in force.
  double observe_val(double v) { return schedule_.observe(v); }
  double lr() const { return schedule_.current(); }

  std::mt19937_64& mask_rng() { return mask_rng_; }
  std::map<std::string, Mlp>& nets() { return nets_; }
  const MethodConfig& config() const { return config_; }
  int obs_dim() const { return obs_dim_; }
  int action_dim() const { return action_dim_; }
  int velocity_dim() const { return velocity_dim_; }

 private:
  MethodConfig config_;
  std::map<std::string, Mlp> nets_;
  std::vector<std::string> order_;
  std::vector<std::string> trainable_;
  std::vector<Matrix*> params_;
  std::vector<std::string> names_;
  nn::AdamState adam_;
  nn::LrSchedule schedule_;
  std::mt19937_64 batch_rng_;
  std::mt19937_64 mask_rng_;
  int obs_dim_;
  int action_dim_;
  int velocity_dim_;
};

MlpSpec body(int in, int hidden, int out) {
  return {{in, hidden, out}, nn::Activation::relu, nn::OutputActivation::relu};
}
MlpSpec linear(int in, int out) { return {{in, out}, nn::Activation::relu, nn::OutputActivation::identity}; }

bool uses_aux(const MethodConfig& c) { return c.aux_velocity && c.alpha < 1.0; }

/// alpha * action + (1 - alpha) * velocity, or the action loss alone.
Var mix(Tape& tape, const MethodConfig& c, Var action_loss, std::optional<Var> velocity_loss) {
  if (!velocity_loss) return action_loss;
  return ad::add(tape, ad::scale(tape, action_loss, c.alpha), ad::scale(tape, *velocity_loss, 1.0 - c.alpha));
}

TrainedPolicy snapshot(const Trainer& tr, const demos::DemoDataset& ds, const MethodConfig& c,
                       std::map<std::string, Mlp> nets) {
  TrainedPolicy p;
  p.kind = c.kind;
  p.history = ds.history();
  p.obs_dim = ds.obs_dim();
  p.action_dim = ds.action_dim();
  p.nets = std::move(nets);
  std::ostringstream h;
  h << std::hex << config_hash(c);
  p.metadata["config_hash"] = h.str();
  p.metadata["seed"] = std::to_string(c.seed);
  (void)tr;
  return p;
}

void check_dataset(const demos::DemoDataset& ds, const MethodConfig& c) {
  c.validate();
  if (ds.history() != c.history) {
    throw MethodError("dataset history " + std::to_string(ds.history()) + " does not match config history " +
                      std::to_string(c.history));
  }
}

void finish_record(TrainReport& report, const Observer& observer, TrainRecord rec) {
  if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.aux_loss)) {
    throw DivergenceError("non-finite loss at iteration " + std::to_string(rec.iteration));
  }
  report.records.push_back(rec);
  if (observer) observer(rec);
}

// ----- single stream (bcso, bcoh, hd, fca, keyframe, dagger) -----

struct SingleStreamKnobs {
  bool dropout = false;
  bool adversary = false;
  const Eigen::VectorXd* weights = nullptr;  // per-sample, by sample id
};

void setup_single_stream(Trainer& tr, const demos::DemoDataset& ds, const SingleStreamKnobs& knobs) {
  const auto& c = tr.config();
  const int window_dim = ds.window_dim();
  tr.set_fixed("input_norm", fit_whitener(ds.windows(ds.train_indices()), c.whiten_eps, c.whiten));
  tr.add_net("encoder", body(window_dim, c.hidden, c.hidden));
  tr.add_net("action_head", linear(c.hidden, tr.action_dim()));
  std::vector<std::string> trainable{"encoder", "action_head"};
  if (uses_aux(c)) {
    tr.add_net("velocity_head", linear(c.hidden, tr.velocity_dim()));
    trainable.push_back("velocity_head");
  }
  if (knobs.adversary) {
    tr.add_net("adversary", {{c.hidden, 32, tr.action_dim()}, nn::Activation::relu, nn::OutputActivation::identity});
    trainable.push_back("adversary");
  }
  tr.start_optimizer(trainable);
}

double single_stream_val(Trainer& tr, const demos::DemoDataset& ds) {
  const auto val = ds.val_indices();
  if (val.empty()) return 0.0;
  const Matrix z = nn::mlp_apply(tr.nets().at("encoder"), tr.norm("input_norm", ds.windows(val)));
  return loss_value(tr.config().loss, nn::mlp_apply(tr.nets().at("action_head"), z), ds.actions(val));
}

void run_single_stream(Trainer& tr, const demos::DemoDataset& ds, const SingleStreamKnobs& knobs,
                       int iterations, int offset, TrainReport& report, const Observer& observer) {
  const auto& c = tr.config();
  const bool aux = uses_aux(c);
  const int d = ds.obs_dim();
  const int frames = ds.history() + 1;
  for (int it = 0; it < iterations; ++it) {
    const int iteration = offset + it;
    const auto idx = tr.sample_batch(ds.train_indices());
    Tape tape;
    const auto vars = tr.bind(tape);
    Matrix raw = ds.windows(idx);
    if (knobs.dropout) {
      // Past frames only; o_t always survives. No rescaling.
      Matrix mask = Matrix::Ones(c.batch_size, frames * d);
      for (int r = 0; r < c.batch_size; ++r) {
        for (int k = 1; k < frames; ++k) {
          if (nn::uniform01(tr.mask_rng()) < c.hd_dropout) mask.block(r, k * d, 1, d).setZero();
        }
      }
      raw = raw.cwiseProduct(mask);
    }
    const Var x = tape.leaf(tr.norm("input_norm", raw));
    const Var z = tr.forward(tape, vars, "encoder", x);
    const Var a_pred = tr.forward(tape, vars, "action_head", z);
    std::optional<ad::Vector> w;
    if (knobs.weights) w = rows_of(*knobs.weights, idx).col(0);
    const Var la = loss_of(tape, c.loss, a_pred, tape.leaf(ds.actions(idx)), w ? &*w : nullptr);
    std::optional<Var> lv;
    if (aux) {
      const Var v_pred = tr.forward(tape, vars, "velocity_head", z);
      lv = loss_of(tape, c.loss, v_pred, tape.leaf(ds.velocity_targets(idx)), w ? &*w : nullptr);
    }
    const Var bc = mix(tape, c, la, lv);
    Var total = bc;
    double aux_value = 0.0;
    if (knobs.adversary) {
      const Var zr = ad::grad_reverse(tape, z, c.fca_lambda);
      const Var prev_pred = tr.forward(tape, vars, "adversary", zr);
      const Var ladv = loss_of(tape, c.loss, prev_pred, tape.leaf(ds.lagged_actions(idx, 1)));
      aux_value = tape.value(ladv)(0, 0);
      total = ad::add(tape, bc, ladv);
    }
    TrainRecord rec;
    rec.iteration = iteration;
    rec.train_loss = tape.value(bc)(0, 0);
    rec.aux_loss = aux_value;
    rec.learning_rate = tr.lr();
    tr.step(tape, vars, total, iteration);
    if ((it + 1) % c.eval_every == 0 || it + 1 == iterations) {
      rec.val_loss = single_stream_val(tr, ds);
      tr.observe_val(rec.val_loss);
    }
    finish_record(report, observer, rec);
  }
}

TrainResult single_stream(const demos::DemoDataset& ds, const MethodConfig& c, const SingleStreamKnobs& knobs,
                          const Observer& observer) {
  check_dataset(ds, c);
  const auto t0 = std::chrono::steady_clock::now();
  Trainer tr(c, ds);
  setup_single_stream(tr, ds, knobs);
  TrainResult res;
  run_single_stream(tr, ds, knobs, c.iterations, 0, res.report, observer);
  res.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.policy = snapshot(tr, ds, c, tr.nets());
  return res;
}

// ----- two stream -----

bool trains_policy_stream(MethodKind k) {
  return k != MethodKind::memory_only_residual && k != MethodKind::memory_only_learned;
}

Matrix memory_target(const demos::DemoDataset& ds, const MethodConfig& c, std::span<const std::size_t> idx) {
  switch (c.kind) {
    case MethodKind::memory_obj_at:
    case MethodKind::two_stream_bcoh:
    case MethodKind::two_stream_keyframe:
      return ds.actions(idx);
    case MethodKind::memory_obj_aprev:
      return ds.lagged_actions(idx, 1);
    default:
      break;
  }
  // Branch i predicts a_t - a_{t-i}; branch 1 is the stored residual.
  Matrix out(static_cast<Eigen::Index>(idx.size()), c.branches * ds.action_dim());
  out.leftCols(ds.action_dim()) = ds.residuals(idx);
  if (c.branches > 1) {
    const Matrix a = ds.actions(idx);
    for (int b = 2; b <= c.branches; ++b) {
      out.middleCols((b - 1) * ds.action_dim(), ds.action_dim()) = a - ds.lagged_actions(idx, b);
    }
  }
  return out;
}

double two_stream_val(Trainer& tr, const demos::DemoDataset& ds) {
  const auto val = ds.val_indices();
  if (val.empty()) return 0.0;
  const auto& c = tr.config();
  const auto& nets = tr.nets();
  const Matrix win = tr.norm("input_norm", ds.windows(val));
  const Matrix m = nn::mlp_apply(nets.at("memory"), win);
  if (!trains_policy_stream(c.kind)) {
    return loss_value(c.loss, nn::mlp_apply(nets.at("residual_head"), m), memory_target(ds, c, val));
  }
  const Matrix trunk = nn::mlp_apply(nets.at("policy_trunk"), policy_sees_history(c.kind) ? win : tr.norm("obs_norm", ds.current_observations(val)));
  Matrix fused(win.rows(), trunk.cols() + m.cols());
  fused << trunk, m;
  return loss_value(c.loss, nn::mlp_apply(nets.at("policy_head"), fused), ds.actions(val));
}

TrainResult two_stream(const demos::DemoDataset& ds, const MethodConfig& c, const Observer& observer) {
  check_dataset(ds, c);
  if (!is_two_stream(c.kind)) throw MethodError(std::string(method_name(c.kind)) + " is not a two-stream method");
  const auto t0 = std::chrono::steady_clock::now();
  Trainer tr(c, ds);
  const bool aux = uses_aux(c);
  const bool policy = trains_policy_stream(c.kind);
  const bool history_policy = policy_sees_history(c.kind);
  const int branches = c.kind == MethodKind::ours_multibranch ? c.branches : 1;
  const int head_out = (c.kind == MethodKind::memory_obj_at || c.kind == MethodKind::memory_obj_aprev ||
                        history_policy)
                           ? ds.action_dim()
                           : branches * ds.action_dim();

  tr.set_fixed("input_norm", fit_whitener(ds.windows(ds.train_indices()), c.whiten_eps, c.whiten));
  if (policy && !history_policy) {
    tr.set_fixed("obs_norm", fit_whitener(ds.current_observations(ds.train_indices()), c.whiten_eps, c.whiten));
  }
  tr.add_net("memory", body(ds.window_dim(), c.hidden, c.memory_dim));
  tr.add_net("residual_head", linear(c.memory_dim, head_out));
  std::vector<std::string> trainable{"memory", "residual_head"};
  if (aux) {
    tr.add_net("memory_velocity_head", linear(c.memory_dim, tr.velocity_dim()));
    trainable.push_back("memory_velocity_head");
  }
  if (policy) {
    tr.add_net("policy_trunk", body(history_policy ? ds.window_dim() : ds.obs_dim(), c.hidden, c.hidden));
    tr.add_net("policy_head", {{c.hidden + c.memory_dim, c.hidden, ds.action_dim()},
                               nn::Activation::relu,
                               nn::OutputActivation::identity});
    trainable.push_back("policy_trunk");
    trainable.push_back("policy_head");
    if (aux) {
      tr.add_net("policy_velocity_head", linear(c.hidden, tr.velocity_dim()));
      trainable.push_back("policy_velocity_head");
    }
  }
  tr.start_optimizer(trainable);

  std::optional<Eigen::VectorXd> weights;
  if (c.kind == MethodKind::two_stream_keyframe) weights = keyframe_weights(ds, c.keyframe_kappa);

  TrainResult res;
  for (int it = 0; it < c.iterations; ++it) {
    const auto idx = tr.sample_batch(ds.train_indices());
    Tape tape;
    const auto vars = tr.bind(tape);
    std::optional<ad::Vector> w;
    if (weights) w = rows_of(*weights, idx).col(0);
    const ad::Vector* wp = w ? &*w : nullptr;

    const Var x = tape.leaf(tr.norm("input_norm", ds.windows(idx)));
    const Var m = tr.forward(tape, vars, "memory", x);
    const Var r_pred = tr.forward(tape, vars, "residual_head", m);
    const Var lr_mem = loss_of(tape, c.loss, r_pred, tape.leaf(memory_target(ds, c, idx)), wp);
    std::optional<Var> lv_target;
    Var v_target{};
    if (aux) v_target = tape.leaf(ds.velocity_targets(idx));
    std::optional<Var> lv_mem;
    if (aux) lv_mem = loss_of(tape, c.loss, tr.forward(tape, vars, "memory_velocity_head", m), v_target, wp);
    const Var mem_loss = mix(tape, c, lr_mem, lv_mem);

    TrainRecord rec;
    rec.iteration = it;
    Var total = mem_loss;
    if (policy) {
      const Var o = history_policy ? x : tape.leaf(tr.norm("obs_norm", ds.current_observations(idx)));
      const Var h = tr.forward(tape, vars, "policy_trunk", o);
      const Var m_in = c.kind == MethodKind::ours_no_stopgrad ? m : ad::stop_gradient(tape, m);
      const Var a_pred = tr.forward(tape, vars, "policy_head", ad::concat_lastdim(tape, h, m_in));
      const Var la = loss_of(tape, c.loss, a_pred, tape.leaf(ds.actions(idx)), wp);
      std::optional<Var> lv;
      if (aux) lv = loss_of(tape, c.loss, tr.forward(tape, vars, "policy_velocity_head", h), v_target, wp);
      const Var pol_loss = mix(tape, c, la, lv);
      total = ad::add(tape, mem_loss, pol_loss);
      rec.train_loss = tape.value(pol_loss)(0, 0);
      rec.aux_loss = tape.value(mem_loss)(0, 0);
    } else {
      rec.train_loss = tape.value(mem_loss)(0, 0);
    }
    rec.learning_rate = tr.lr();
    tr.step(tape, vars, total, it);
    if ((it + 1) % c.eval_every == 0 || it + 1 == c.iterations) {
      rec.val_loss = two_stream_val(tr, ds);
      tr.observe_val(rec.val_loss);
    }
    finish_record(res.report, observer, rec);
  }

  if (c.kind == MethodKind::memory_only_learned) {
    // Fresh optimizer over a new controller; M_phi stays frozen.
    const Mlp frozen = tr.nets().at("memory");
    MethodConfig cc = c;
    Trainer ctl(cc, ds);
    ctl.add_net("controller", {{c.memory_dim, c.hidden, c.hidden, ds.action_dim()},
                               nn::Activation::relu,
                               nn::OutputActivation::identity});
    ctl.start_optimizer({"controller"});
    const Matrix m_val = ds.val_indices().empty() ? Matrix() : nn::mlp_apply(frozen, tr.norm("input_norm", ds.windows(ds.val_indices())));
    for (int it = 0; it < c.iterations; ++it) {
      const auto idx = ctl.sample_batch(ds.train_indices());
      Tape tape;
      const auto vars = ctl.bind(tape);
      const Var m = tape.leaf(nn::mlp_apply(frozen, tr.norm("input_norm", ds.windows(idx))));
      const Var a_pred = ctl.forward(tape, vars, "controller", m);
      const Var la = loss_of(tape, c.loss, a_pred, tape.leaf(ds.actions(idx)));
      TrainRecord rec;
      rec.iteration = c.iterations + it;
      rec.train_loss = tape.value(la)(0, 0);
      rec.learning_rate = ctl.lr();
      ctl.step(tape, vars, la, rec.iteration);
      if (((it + 1) % c.eval_every == 0 || it + 1 == c.iterations) && m_val.size() > 0) {
        rec.val_loss = loss_value(c.loss, nn::mlp_apply(ctl.nets().at("controller"), m_val),
                                  ds.actions(ds.val_indices()));
        ctl.observe_val(rec.val_loss);
      }
      finish_record(res.report, observer, rec);
    }
    if (!(tr.nets().at("memory") == frozen)) throw std::logic_error("memory stream changed while frozen");
    tr.nets()["controller"] = ctl.nets().at("controller");
  }

  res.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.policy = snapshot(tr, ds, c, tr.nets());
  if (c.kind == MethodKind::memory_only_learned) res.policy.metadata["memory_frozen"] = "verified";
  return res;
}

MethodConfig with_kind(MethodConfig c, MethodKind k) {
  c.kind = k;
  return c;
}

}  // namespace

nn::Mlp fit_whitener(const Matrix& x, double eps, bool enabled) {
  const int d = static_cast<int>(x.cols());
  Mlp m;
  m.spec = {{d, d}, nn::Activation::relu, nn::OutputActivation::identity};
  m.layers.resize(1);
  m.layers[0].weight = Matrix::Identity(d, d);
  m.layers[0].bias = Matrix::Zero(1, d);
  if (!enabled || x.rows() < 2) return m;
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Matrix centered = x.rowwise() - mu;
  const Matrix cov = centered.transpose() * centered / static_cast<double>(x.rows());
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  const Eigen::VectorXd scale = (es.eigenvalues().array().max(0.0) + eps).rsqrt();
  m.layers[0].weight = es.eigenvectors() * scale.asDiagonal() * es.eigenvectors().transpose();
  m.layers[0].bias = -mu * m.layers[0].weight;
  return m;
}

Eigen::VectorXd keyframe_weights(const demos::DemoDataset& ds, double kappa) {
  const std::size_t n = ds.samples().size();
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const Matrix r = ds.residuals(all);
  Eigen::VectorXd w = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n)) + kappa * r.cwiseAbs().rowwise().sum();
  double mean = 0.0;
  for (std::size_t i : ds.train_indices()) mean += w(i);
  if (!ds.train_indices().empty()) mean /= static_cast<double>(ds.train_indices().size());
  // Unit weights stay exactly 1 (kappa = 0 or constant actions).
  if (mean != 1.0 && mean > 0.0) w /= mean;
  return w;
}

TrainResult train_bc(const demos::DemoDataset& ds, const MethodConfig& c, const Observer& observer) {
  if (c.kind != MethodKind::bcso && c.kind != MethodKind::bcoh) throw MethodError("train_bc: expects bcso or bcoh");
  return single_stream(ds, c, {}, observer);
}

TrainResult train_ours(const demos::DemoDataset& ds, const MethodConfig& c, const Observer& observer) {
  if (c.kind != MethodKind::ours && c.kind != MethodKind::ours_multibranch) {
    throw MethodError("train_ours: expects ours or ours_multibranch");
  }
  return two_stream(ds, c, observer);
}

TrainResult train_hd(const demos::DemoDataset& ds, const MethodConfig& c, const Observer& observer) {
  SingleStreamKnobs k;
  k.dropout = true;
  return single_stream(ds, with_kind(c, MethodKind::hd), k, observer);
}

TrainResult train_fca(const demos::DemoDataset& ds, const MethodConfig& c, const Observer& observer) {
  SingleStreamKnobs k;
  k.adversary = true;
  return single_stream(ds, with_kind(c, MethodKind::fca), k, observer);
}

TrainResult train_keyframe(const demos::DemoDataset& ds, const MethodConfig& c, const Observer& observer) {
  const MethodConfig kc = with_kind(c, MethodKind::keyframe);
  check_dataset(ds, kc);
  const Eigen::VectorXd w = keyframe_weights(ds, kc.keyframe_kappa);
  SingleStreamKnobs k;
  k.weights = &w;
  return single_stream(ds, kc, k, observer);
}

TrainResult train_dagger(const demos::DemoDataset& ds, const MethodConfig& config, const Observer& observer) {
  const MethodConfig c = with_kind(config, MethodKind::dagger);
  check_dataset(ds, c);
  const auto t0 = std::chrono::steady_clock::now();
  Trainer tr(c, ds);
  setup_single_stream(tr, ds, {});
  TrainResult res;
  run_single_stream(tr, ds, {}, c.iterations, 0, res.report, observer);

  demos::DemoDataset agg = ds;
  int offset = c.iterations;
  std::int64_t queries = 0;
  for (int round = 0; round < c.dagger_rounds && queries < c.dagger_budget; ++round) {
    const TrainedPolicy current = snapshot(tr, ds, c, tr.nets());
    std::vector<demos::Trajectory> fresh;
    for (int e = 0; e < c.dagger_episodes && queries < c.dagger_budget; ++e) {
      demos::Trajectory traj;
      traj.episode_seed =
          nn::derive_seed(c.seed, "dagger." + std::to_string(round) + "." + std::to_string(e));
      auto episode = envs::make_episode(ds.env_config(), traj.episode_seed);
      PolicyRunner runner(current, ds.boundary());
      while (episode->status() == envs::Status::running && queries < c.dagger_budget) {
        demos::Record r;
        r.t = episode->t();
        r.observation = episode->observation();
        r.hidden_velocity = episode->hidden_velocity();
        r.action = episode->expert_action();
        ++queries;
        r.executed_action = runner.act(r.observation);
        episode->step(r.executed_action);
        traj.records.push_back(std::move(r));
      }
      if (traj.records.size() >= 2) fresh.push_back(std::move(traj));
    }
    agg = agg.with_trajectories(std::move(fresh));
    res.report.dataset_sizes.push_back(agg.samples().size());
    run_single_stream(tr, agg, {}, c.dagger_round_iterations, offset, res.report, observer);
    offset += c.dagger_round_iterations;
  }
  res.report.expert_queries = queries;
  res.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.policy = snapshot(tr, ds, c, tr.nets());
  res.policy.metadata["expert_queries"] = std::to_string(queries);
  return res;
}

TrainResult train_ablation(const demos::DemoDataset& ds, const MethodConfig& c, const Observer& observer) {
  switch (c.kind) {
    case MethodKind::memory_only_residual:
    case MethodKind::memory_only_learned:
    case MethodKind::memory_obj_at:
    case MethodKind::memory_obj_aprev:
    case MethodKind::ours_no_stopgrad:
    case MethodKind::ours_multibranch:
    case MethodKind::two_stream_bcoh:
    case MethodKind::two_stream_keyframe:
      return two_stream(ds, c, observer);
    default:
      throw MethodError(std::string("train_ablation: ") + method_name(c.kind) + " is not an ablation");
  }
}

TrainResult train(const demos::DemoDataset& ds, const MethodConfig& c, const Observer& observer) {
  switch (c.kind) {
    case MethodKind::bcso:
    case MethodKind::bcoh:
      return train_bc(ds, c, observer);
    case MethodKind::ours:
      return train_ours(ds, c, observer);
    case MethodKind::hd:
      return train_hd(ds, c, observer);
    case MethodKind::fca:
      return train_fca(ds, c, observer);
    case MethodKind::keyframe:
      return train_keyframe(ds, c, observer);
    case MethodKind::dagger:
      return train_dagger(ds, c, observer);
    default:
      return train_ablation(ds, c, observer);
  }
}

// ---------------------------------------------------------------------------

PolicyRunner::PolicyRunner(const TrainedPolicy& policy, demos::Boundary boundary)
    : policy_(policy), boundary_(boundary) {
  reset();
}

void PolicyRunner::reset() {
  frames_.clear();
  window_ = Eigen::VectorXd::Zero((policy_.history + 1) * policy_.obs_dim);
  prev_action_ = Eigen::VectorXd::Zero(policy_.action_dim);
}

Eigen::VectorXd PolicyRunner::act(const Eigen::VectorXd& observation) {
  if (observation.size() != policy_.obs_dim) throw ad::ShapeError("PolicyRunner: observation width mismatch");
  frames_.insert(frames_.begin(), observation);
  if (static_cast<int>(frames_.size()) > policy_.history + 1) frames_.pop_back();
  const int d = policy_.obs_dim;
  for (int k = 0; k <= policy_.history; ++k) {
    if (k < static_cast<int>(frames_.size())) {
      window_.segment(k * d, d) = frames_[k];
    } else if (boundary_ == demos::Boundary::repeat_first) {
      window_.segment(k * d, d) = frames_.back();
    } else {
      window_.segment(k * d, d).setZero();
    }
  }
  const Matrix w = window_.transpose();
  const Matrix prev = prev_action_.transpose();
  const Matrix a = policy_.act(w, policy_.needs_prev_action() ? &prev : nullptr);
  prev_action_ = a.row(0).transpose();
  return prev_action_;
}

}  // namespace copycat::methods
