#pragma once

#include "copycat/autodiff.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace copycat::nn {

using ad::Matrix;
using ad::Tape;
using ad::Var;
using ad::Vector;

/// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Derives an independent stream seed from a master seed and a label.
std::uint64_t derive_seed(std::uint64_t master, std::string_view label);

enum class Activation { relu, tanh };
enum class OutputActivation { identity, tanh, relu };

struct MlpSpec {
  std::vector<int> layer_widths;
  Activation activation = Activation::relu;
  OutputActivation output_activation = OutputActivation::identity;

  void validate() const;
  int input_width() const { return layer_widths.front(); }
  int output_width() const { return layer_widths.back(); }
  bool operator==(const MlpSpec&) const = default;
};

struct Layer {
  Matrix weight;  // fan_in x fan_out
  Matrix bias;    // 1 x fan_out
};

struct Mlp {
  MlpSpec spec;
  std::vector<Layer> layers;

  /// Weight/bias matrices in a stable order (W0, b0, W1, b1, ...).
  std::vector<Matrix*> parameters();
  std::vector<const Matrix*> parameters() const;
  std::size_t parameter_count() const;
  bool operator==(const Mlp&) const;
};

/// Weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)); biases zero.
Mlp init_mlp(const MlpSpec& spec, std::uint64_t rng_seed);

/// Tape handles for an Mlp's parameters; gradients are read back through them.
struct MlpVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
};

MlpVars bind(Tape& tape, const Mlp& mlp);

/// Post-activation outputs of each hidden layer, plus the final output.
struct MlpTrace {
  Var output;
  std::vector<Var> hidden;
};

MlpTrace mlp_forward(Tape& tape, const Mlp& mlp, const MlpVars& vars, Var input);
/// Tape-free evaluation; matches mlp_forward value-for-value.
Matrix mlp_apply(const Mlp& mlp, const Matrix& input, std::vector<Matrix>* hidden = nullptr);

/// Gradients in the same (W0, b0, ...) order as Mlp::parameters().
std::vector<Matrix> gradients(const Tape& tape, const MlpVars& vars);

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  AdamConfig config;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::int64_t t = 0;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

AdamState make_adam(const AdamConfig& config, std::span<Matrix* const> params);

/// Bias-corrected Adam with L2-style weight decay (added to the gradient).
/// Validates every gradient before touching any parameter.
void adam_step(AdamState& state, std::span<Matrix* const> params, std::span<const Matrix> grads,
               std::span<const std::string> names = {});

// ---------------------------------------------------------------------------
// Plateau learning-rate schedule

struct LrScheduleConfig {
  double initial_lr = 2e-4;
  std::int64_t decay_threshold = 5000;
  double decay_rate = 0.1;
  double lower_bound = 1e-7;
};

/// Multiplies the rate by decay_rate whenever the best loss has not improved
/// for decay_threshold consecutive observations; never drops below
/// lower_bound.
class LrSchedule {
 public:
  explicit LrSchedule(LrScheduleConfig config);

  /// Feeds one loss observation and returns the rate to use next.
  double observe(double loss);
  double current() const { return lr_; }
  double best() const { return best_; }

 private:
  LrScheduleConfig config_;
  double lr_;
  double best_;
  std::int64_t since_best_ = 0;
};

/// Replays a whole loss history; returns the rate after each observation.
std::vector<double> lr_schedule(std::span<const double> losses, const LrScheduleConfig& config);

// ---------------------------------------------------------------------------
// Persistence

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kParamFormatVersion = 1;

struct ParamFile {
  std::uint64_t seed = 0;
  std::map<std::string, Mlp> nets;
  std::map<std::string, std::string> metadata;
};

void save_params(const std::filesystem::path& path, const ParamFile& file);
ParamFile load_params(const std::filesystem::path& path);
/// Loads and checks each named net against the expected spec.
ParamFile load_params(const std::filesystem::path& path,
                      const std::map<std::string, MlpSpec>& expected);

}  // namespace copycat::nn
