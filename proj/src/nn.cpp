#include "copycat/nn.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace copycat::nn {

using json = nlohmann::json;

std::uint64_t derive_seed(std::uint64_t master, std::string_view label) {
  // FNV-1a over the label, mixed with the master seed (splitmix64 finalizer).
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (h | 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void MlpSpec::validate() const {
  if (layer_widths.size() < 2) throw std::invalid_argument("MlpSpec: need at least 2 widths");
  for (int w : layer_widths) {
    if (w <= 0) throw std::invalid_argument("MlpSpec: widths must be positive");
  }
}

std::vector<Matrix*> Mlp::parameters() {
  std::vector<Matrix*> out;
  for (auto& l : layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

std::vector<const Matrix*> Mlp::parameters() const {
  std::vector<const Matrix*> out;
  for (const auto& l : layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

bool Mlp::operator==(const Mlp& other) const {
  if (!(spec == other.spec) || layers.size() != other.layers.size()) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& a = layers[i];
    const auto& b = other.layers[i];
    if (a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols()) return false;
    if (a.weight != b.weight || a.bias != b.bias) return false;
  }
  return true;
}

Mlp init_mlp(const MlpSpec& spec, std::uint64_t rng_seed) {
  spec.validate();
  std::mt19937_64 rng(rng_seed);
  Mlp mlp{spec, {}};
  for (std::size_t i = 0; i + 1 < spec.layer_widths.size(); ++i) {
    const int fan_in = spec.layer_widths[i];
    const int fan_out = spec.layer_widths[i + 1];
    const double bound = std::sqrt(1.0 / fan_in);
    Layer layer{Matrix(fan_in, fan_out), Matrix::Zero(1, fan_out)};
    for (Eigen::Index k = 0; k < layer.weight.size(); ++k) {
      layer.weight.data()[k] = bound * (2.0 * uniform01(rng) - 1.0);
    }
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

MlpVars bind(Tape& tape, const Mlp& mlp) {
  MlpVars vars;
  for (const auto& l : mlp.layers) {
    vars.weights.push_back(tape.leaf(l.weight));
    vars.biases.push_back(tape.leaf(l.bias));
  }
  return vars;
}

MlpTrace mlp_forward(Tape& tape, const Mlp& mlp, const MlpVars& vars, Var input) {
  if (tape.value(input).cols() != mlp.spec.input_width()) {
    throw ad::ShapeError("mlp_forward: input width " + std::to_string(tape.value(input).cols()) +
                         " vs expected " + std::to_string(mlp.spec.input_width()));
  }
  MlpTrace trace;
  Var x = input;
  const std::size_t n = mlp.layers.size();
  for (std::size_t i = 0; i < n; ++i) {
    x = ad::add(tape, ad::matmul(tape, x, vars.weights[i]), vars.biases[i]);
    if (i + 1 < n) {
      x = mlp.spec.activation == Activation::relu ? ad::relu(tape, x) : ad::tanh(tape, x);
      trace.hidden.push_back(x);
    } else if (mlp.spec.output_activation == OutputActivation::tanh) {
      x = ad::tanh(tape, x);
    } else if (mlp.spec.output_activation == OutputActivation::relu) {
      x = ad::relu(tape, x);
    }
  }
  trace.output = x;
  return trace;
}

Matrix mlp_apply(const Mlp& mlp, const Matrix& input, std::vector<Matrix>* hidden) {
  if (input.cols() != mlp.spec.input_width()) {
    throw ad::ShapeError("mlp_apply: input width " + std::to_string(input.cols()) +
                         " vs expected " + std::to_string(mlp.spec.input_width()));
  }
  if (hidden) hidden->clear();
  Matrix x = input;
  const std::size_t n = mlp.layers.size();
  for (std::size_t i = 0; i < n; ++i) {
    Matrix y = x * mlp.layers[i].weight;
    y.rowwise() += mlp.layers[i].bias.row(0);
    if (i + 1 < n) {
      if (mlp.spec.activation == Activation::relu) {
        y = y.cwiseMax(0.0);
      } else {
        y = y.array().tanh().matrix();
      }
      if (hidden) hidden->push_back(y);
    } else if (mlp.spec.output_activation == OutputActivation::tanh) {
      y = y.array().tanh().matrix();
    } else if (mlp.spec.output_activation == OutputActivation::relu) {
      y = y.cwiseMax(0.0);
    }
    x = std::move(y);
  }
  return x;
}

std::vector<Matrix> gradients(const Tape& tape, const MlpVars& vars) {
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < vars.weights.size(); ++i) {
    out.push_back(tape.grad(vars.weights[i]));
    out.push_back(tape.grad(vars.biases[i]));
  }
  return out;
}

// ---------------------------------------------------------------------------

AdamState make_adam(const AdamConfig& config, std::span<Matrix* const> params) {
  AdamState s{config, {}, {}, 0};
  for (const Matrix* p : params) {
    s.m.push_back(Matrix::Zero(p->rows(), p->cols()));
    s.v.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
  return s;
}

void adam_step(AdamState& state, std::span<Matrix* const> params, std::span<const Matrix> grads,
               std::span<const std::string> names) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw ad::ShapeError("adam_step: parameter/gradient/state count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = grads[i];
    if (g.rows() != params[i]->rows() || g.cols() != params[i]->cols()) {
      throw ad::ShapeError("adam_step: gradient shape mismatch for parameter " +
                           (i < names.size() ? names[i] : std::to_string(i)));
    }
    if (!g.allFinite()) {
      throw NonFiniteGradient("adam_step: non-finite gradient for parameter " +
                              (i < names.size() ? names[i] : std::to_string(i)));
    }
  }
  const AdamConfig& c = state.config;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    Matrix g = grads[i];
    if (c.weight_decay != 0.0) g += c.weight_decay * p;
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g.cwiseProduct(g);
    p.array() -= c.learning_rate * (state.m[i].array() / bc1) /
                 ((state.v[i].array() / bc2).sqrt() + c.eps);
  }
}

// ---------------------------------------------------------------------------

LrSchedule::LrSchedule(LrScheduleConfig config)
    : config_(config), lr_(config.initial_lr), best_(std::numeric_limits<double>::infinity()) {}

double LrSchedule::observe(double loss) {
  if (loss < best_) {
    best_ = loss;
    since_best_ = 0;
  } else if (++since_best_ >= config_.decay_threshold) {
    lr_ = std::max(lr_ * config_.decay_rate, config_.lower_bound);
    since_best_ = 0;
  }
  return lr_;
}

std::vector<double> lr_schedule(std::span<const double> losses, const LrScheduleConfig& config) {
  LrSchedule s(config);
  std::vector<double> out;
  out.reserve(losses.size());
  for (double l : losses) out.push_back(s.observe(l));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

const char* activation_name(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }
const char* output_name(OutputActivation a) {
  switch (a) {
    case OutputActivation::identity: return "identity";
    case OutputActivation::tanh: return "tanh";
    case OutputActivation::relu: return "relu";
  }
  return "identity";
}

json matrix_to_json(const Matrix& m) {
  std::vector<double> data(m.data(), m.data() + m.size());
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

Matrix matrix_from_json(const json& j, const std::string& where) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) != data.size()) {
    throw FormatError("load_params: " + where + " has inconsistent size");
  }
  Matrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

json spec_to_json(const MlpSpec& s) {
  return json{{"layer_widths", s.layer_widths},
              {"activation", activation_name(s.activation)},
              {"output_activation", output_name(s.output_activation)}};
}

MlpSpec spec_from_json(const json& j) {
  MlpSpec s;
  s.layer_widths = j.at("layer_widths").get<std::vector<int>>();
  const auto act = j.at("activation").get<std::string>();
  const auto out = j.at("output_activation").get<std::string>();
  if (act != "relu" && act != "tanh") throw FormatError("load_params: bad activation " + act);
  s.activation = act == "relu" ? Activation::relu : Activation::tanh;
  if (out == "identity") {
    s.output_activation = OutputActivation::identity;
  } else if (out == "tanh") {
    s.output_activation = OutputActivation::tanh;
  } else if (out == "relu") {
    s.output_activation = OutputActivation::relu;
  } else {
    throw FormatError("load_params: bad output activation " + out);
  }
  s.validate();
  return s;
}

}  // namespace

void save_params(const std::filesystem::path& path, const ParamFile& file) {
  json nets = json::object();
  for (const auto& [name, mlp] : file.nets) {
    json layers = json::array();
    for (const auto& l : mlp.layers) {
      layers.push_back({{"weight", matrix_to_json(l.weight)}, {"bias", matrix_to_json(l.bias)}});
    }
    nets[name] = {{"spec", spec_to_json(mlp.spec)}, {"layers", layers}};
  }
  json doc{{"format", "copycat.params"},
           {"format_version", kParamFormatVersion},
           {"seed", file.seed},
           {"metadata", file.metadata},
           {"nets", nets}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_params: cannot open " + path.string());
  out << doc.dump(1) << '\n';
  if (!out) throw std::runtime_error("save_params: write failed for " + path.string());
}

ParamFile load_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_params: cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("load_params: parse error in " + path.string() + " at byte " +
                      std::to_string(e.byte) + ": " + e.what());
  }
  try {
    if (doc.at("format").get<std::string>() != "copycat.params") {
      throw FormatError("load_params: not a parameter file");
    }
    const int version = doc.at("format_version").get<int>();
    if (version != kParamFormatVersion) {
      throw FormatError("load_params: unsupported format_version " + std::to_string(version));
    }
    ParamFile file;
    file.seed = doc.at("seed").get<std::uint64_t>();
    file.metadata = doc.value("metadata", std::map<std::string, std::string>{});
    for (const auto& [name, j] : doc.at("nets").items()) {
      Mlp mlp;
      mlp.spec = spec_from_json(j.at("spec"));
      const auto& layers = j.at("layers");
      if (layers.size() + 1 != mlp.spec.layer_widths.size()) {
        throw FormatError("load_params: net '" + name + "' layer count disagrees with spec");
      }
      for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string where = name + ".layer" + std::to_string(i);
        Layer l{matrix_from_json(layers[i].at("weight"), where + ".weight"),
                matrix_from_json(layers[i].at("bias"), where + ".bias")};
        if (l.weight.rows() != mlp.spec.layer_widths[i] ||
            l.weight.cols() != mlp.spec.layer_widths[i + 1] || l.bias.rows() != 1 ||
            l.bias.cols() != mlp.spec.layer_widths[i + 1]) {
          throw FormatError("load_params: " + where + " shape disagrees with spec");
        }
        mlp.layers.push_back(std::move(l));
      }
      file.nets.emplace(name, std::move(mlp));
    }
    return file;
  } catch (const json::exception& e) {
    throw FormatError(std::string("load_params: malformed document: ") + e.what());
  }
}

ParamFile load_params(const std::filesystem::path& path,
                      const std::map<std::string, MlpSpec>& expected) {
  ParamFile file = load_params(path);
  for (const auto& [name, spec] : expected) {
    auto it = file.nets.find(name);
    if (it == file.nets.end()) throw FormatError("load_params: missing net '" + name + "'");
    const auto& got = it->second.spec.layer_widths;
    for (std::size_t i = 0; i < std::max(got.size(), spec.layer_widths.size()); ++i) {
      const int g = i < got.size() ? got[i] : -1;
      const int e = i < spec.layer_widths.size() ? spec.layer_widths[i] : -1;
      if (g != e) {
        const std::string which = i == 0 ? "layer 0 input" : "layer " + std::to_string(i - 1) + " output";
        throw FormatError("load_params: net '" + name + "' " + which + " width " + std::to_string(g) +
                          " vs expected " + std::to_string(e));
      }
    }
    if (!(it->second.spec == spec)) {
      throw FormatError("load_params: net '" + name + "' activation disagrees with expected spec");
    }
  }
  return file;
}

}  // namespace copycat::nn
