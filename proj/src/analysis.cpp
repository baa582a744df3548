#include "copycat/analysis.hpp"

#include "copycat/nn.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <atomic>
#include <mutex>
#include <thread>

namespace copycat::analysis {

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd m;
  m.n = static_cast<int>(xs.size());
  if (xs.empty()) {
    m.mean = m.std = std::numeric_limits<double>::quiet_NaN();
    return m;
  }
  m.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() < 2) {
    m.std = std::numeric_limits<double>::quiet_NaN();
    return m;
  }
  double ss = 0.0;
  for (double x : xs) ss += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  return m;
}

std::string format_mean_std(const MeanStd& m, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << m.mean << "±";
  if (m.n < 2) os << "n/a";
  else os << m.std;
  return os.str();
}

namespace {

MeanStd column(const std::vector<SeedCounts>& rows, double (*get)(const SeedCounts&)) {
  std::vector<double> xs;
  for (const auto& r : rows) xs.push_back(get(r));
  return mean_std(xs);
}

}  // namespace

MeanStd EvalSummary::success() const {
  return column(per_seed, [](const SeedCounts& c) { return double(c.success); });
}
MeanStd EvalSummary::collision() const {
  return column(per_seed, [](const SeedCounts& c) { return double(c.collision); });
}
MeanStd EvalSummary::timeout() const {
  return column(per_seed, [](const SeedCounts& c) { return double(c.timeout); });
}
MeanStd EvalSummary::mean_return() const {
  return column(per_seed, [](const SeedCounts& c) { return c.mean_return; });
}

EvalSummary merge(const std::vector<EvalSummary>& parts) {
  EvalSummary out;
  for (const auto& p : parts) {
    if (out.method.empty()) {
      out.method = p.method;
      out.condition = p.condition;
      out.episodes_per_seed = p.episodes_per_seed;
    }
    out.per_seed.insert(out.per_seed.end(), p.per_seed.begin(), p.per_seed.end());
    out.episodes.insert(out.episodes.end(), p.episodes.begin(), p.episodes.end());
  }
  return out;
}

std::uint64_t eval_episode_seed(std::uint64_t eval_seed, int index) {
  return nn::derive_seed(eval_seed, "eval.episode." + std::to_string(index));
}

EvalSummary evaluate(const ControllerFactory& factory, const envs::EnvConfig& env, const EvalOptions& options) {
  env.validate();
  if (options.episodes < 0) throw AnalysisError("evaluate: episodes must be >= 0");
  struct Job {
    std::uint64_t eval_seed;
    int index;
  };
  std::vector<Job> jobs;
  for (auto s : options.seeds) {
    for (int i = 0; i < options.episodes; ++i) jobs.push_back({s, i});
  }
  std::vector<EpisodeLog> logs(jobs.size());
  auto run = [&](std::size_t j) {
    EpisodeLog log;
    log.eval_seed = jobs[j].eval_seed;
    log.index = jobs[j].index;
    log.episode_seed = eval_episode_seed(log.eval_seed, log.index);
    auto episode = envs::make_episode(env, log.episode_seed);
    Controller ctl = factory();
    double ret = 0.0;
    while (episode->status() == envs::Status::running) {
      const Vector a = ctl(*episode);
      ret += episode->step(a).reward;
    }
    log.outcome = {episode->status(), episode->t(), ret};
    logs[j] = log;
  };

  const int workers = std::max(1, std::min<int>(options.workers, static_cast<int>(jobs.size())));
  if (workers <= 1) {
    for (std::size_t j = 0; j < jobs.size(); ++j) run(j);
  } else {
    // Each job writes its own slot, so the result does not depend on scheduling.
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
          try {
            run(j);
          } catch (...) {
            std::lock_guard lock(error_mu);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
  }

  EvalSummary out;
  out.episodes_per_seed = options.episodes;
  out.condition = env.kind == envs::EnvKind::brake_town
                      ? (env.brake_town.traffic == envs::Traffic::dense ? "dense" : "regular")
                      : "hidden_velocity";
  for (auto s : options.seeds) {
    SeedCounts c;
    c.seed = s;
    double ret = 0.0;
    for (const auto& l : logs) {
      if (l.eval_seed != s) continue;
      switch (l.outcome.status) {
        case envs::Status::success: ++c.success; break;
        case envs::Status::collision: ++c.collision; break;
        default: ++c.timeout; break;
      }
      ret += l.outcome.episode_return;
    }
    c.mean_return = options.episodes > 0 ? ret / options.episodes : 0.0;
    out.per_seed.push_back(c);
  }
  out.episodes = std::move(logs);
  return out;
}

EvalSummary evaluate(const methods::TrainedPolicy& policy, const envs::EnvConfig& env, const EvalOptions& options) {
  if (policy.obs_dim != env.obs_dim() || policy.action_dim != env.action_dim()) {
    throw AnalysisError("evaluate: policy expects obs " + std::to_string(policy.obs_dim) + " / action " +
                        std::to_string(policy.action_dim) + ", env provides " + std::to_string(env.obs_dim()) +
                        " / " + std::to_string(env.action_dim()));
  }
  auto factory = [&]() -> Controller {
    auto runner = std::make_shared<methods::PolicyRunner>(policy, options.boundary);
    return [runner](envs::Episode& e) { return runner->act(e.observation()); };
  };
  EvalSummary s = evaluate(factory, env, options);
  s.method = methods::method_name(policy.kind);
  return s;
}

EvalSummary evaluate_expert(const envs::EnvConfig& env, const EvalOptions& options) {
  auto factory = []() -> Controller { return [](envs::Episode& e) { return e.expert_action(); }; };
  EvalSummary s = evaluate(factory, env, options);
  s.method = "expert";
  return s;
}

// ---------------------------------------------------------------------------

InterventionReport intervention_from_counts(std::size_t eligible, std::size_t stopped) {
  if (stopped > eligible) throw AnalysisError("intervention: stopped exceeds eligible");
  return {eligible, stopped};
}

Matrix repeat_current(const Matrix& windows, int obs_dim) {
  if (obs_dim <= 0 || windows.cols() % obs_dim != 0) throw AnalysisError("repeat_current: bad window width");
  Matrix out(windows.rows(), windows.cols());
  for (Eigen::Index k = 0; k < windows.cols() / obs_dim; ++k) {
    out.middleCols(k * obs_dim, obs_dim) = windows.leftCols(obs_dim);
  }
  return out;
}

InterventionReport intervene_history(const methods::TrainedPolicy& policy, const demos::DemoDataset& ds,
                                     const InterventionOptions& options) {
  if (policy.history < 1) throw AnalysisError("intervene_history: policy does not consume history");
  if (ds.history() != policy.history) throw AnalysisError("intervene_history: dataset history mismatch");
  const auto val = ds.val_indices();
  std::vector<std::size_t> moving;
  for (std::size_t i : val) {
    if (ds.hidden_velocity(i)(0) > options.v_eps) moving.push_back(i);
  }
  InterventionReport rep;
  if (moving.empty()) return rep;
  const Matrix win = ds.windows(moving);
  const Matrix prev = ds.lagged_actions(moving, 1);
  const Matrix* prev_ptr = policy.needs_prev_action() ? &prev : nullptr;
  const Matrix a = policy.act(win, prev_ptr);
  const Matrix a_do = policy.act(repeat_current(win, ds.obs_dim()), prev_ptr);
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    if (a(r, 0) > options.a_eps) {
      ++rep.eligible;
      if (a_do(r, 0) <= options.a_eps) ++rep.stopped;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------

double ProbeReport::mean_val_mse() const {
  return val_mse.empty() ? 0.0 : std::accumulate(val_mse.begin(), val_mse.end(), 0.0) / val_mse.size();
}
double ProbeReport::mean_train_mse() const {
  return train_mse.empty() ? 0.0 : std::accumulate(train_mse.begin(), train_mse.end(), 0.0) / train_mse.size();
}

ProbeReport mi_probe(const Extractor& extract, const demos::DemoDataset& ds, const ProbeConfig& config) {
  std::vector<std::size_t> all(ds.samples().size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return mi_probe(extract(ds.windows(all)), ds, config);
}

ProbeReport mi_probe(const Matrix& raw, const demos::DemoDataset& ds, const ProbeConfig& config) {
  const auto train = ds.train_indices();
  const auto val = ds.val_indices();
  if (raw.rows() != static_cast<Eigen::Index>(ds.samples().size())) {
    throw AnalysisError("mi_probe: one feature row per sample expected");
  }
  if (train.empty() || val.empty()) throw AnalysisError("mi_probe: needs non-empty train and val splits");

  // Standardize with train statistics; constant columns become zero.
  Matrix feat = raw;
  for (Eigen::Index c = 0; c < feat.cols(); ++c) {
    double mu = 0.0;
    for (auto i : train) mu += raw(i, c);
    mu /= static_cast<double>(train.size());
    double var = 0.0;
    for (auto i : train) var += (raw(i, c) - mu) * (raw(i, c) - mu);
    var /= static_cast<double>(train.size());
    const double sd = std::sqrt(var);
    feat.col(c) = (raw.col(c).array() - mu) / (sd > 1e-12 ? sd : 1.0);
    if (sd <= 1e-12) feat.col(c).setZero();
  }
  std::vector<std::size_t> train_v(train.begin(), train.end());
  std::vector<std::size_t> val_v(val.begin(), val.end());
  auto gather = [&](const std::vector<std::size_t>& idx) {
    Matrix m(static_cast<Eigen::Index>(idx.size()), feat.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) m.row(i) = feat.row(idx[i]);
    return m;
  };
  const Matrix x_train = gather(train_v);
  const Matrix x_val = gather(val_v);
  const Matrix y_train = ds.lagged_actions(train_v, 1);
  const Matrix y_val = ds.lagged_actions(val_v, 1);
  auto mse = [](const Matrix& p, const Matrix& y) { return (p - y).squaredNorm() / static_cast<double>(y.size()); };

  ProbeReport rep;
  for (auto seed : config.seeds) {
    const nn::MlpSpec spec{{static_cast<int>(feat.cols()), config.hidden, ds.action_dim()},
                           nn::Activation::relu,
                           nn::OutputActivation::identity};
    nn::Mlp probe = nn::init_mlp(spec, nn::derive_seed(seed, "probe.init"));
    auto params = probe.parameters();
    nn::AdamConfig ac;
    ac.learning_rate = config.learning_rate;
    nn::AdamState adam = nn::make_adam(ac, params);
    std::mt19937_64 rng(nn::derive_seed(seed, "probe.batch"));
    const int n = static_cast<int>(train_v.size());
    const int bs = std::min(config.batch_size, n);
    for (int it = 0; it < config.iterations; ++it) {
      // Cosine decay keeps the final fit stable.
      adam.config.learning_rate =
          config.learning_rate * 0.5 * (1.0 + std::cos(M_PI * it / std::max(1, config.iterations)));
      Matrix xb(bs, x_train.cols());
      Matrix yb(bs, y_train.cols());
      for (int b = 0; b < bs; ++b) {
        const int k = std::min(n - 1, static_cast<int>(nn::uniform01(rng) * n));
        xb.row(b) = x_train.row(k);
        yb.row(b) = y_train.row(k);
      }
      ad::Tape tape;
      const auto vars = nn::bind(tape, probe);
      const auto out = nn::mlp_forward(tape, probe, vars, tape.leaf(xb)).output;
      const auto loss = ad::l2_loss(tape, out, tape.leaf(yb));
      tape.backward(loss);
      nn::adam_step(adam, params, nn::gradients(tape, vars));
    }
    rep.train_mse.push_back(mse(nn::mlp_apply(probe, x_train), y_train));
    rep.val_mse.push_back(mse(nn::mlp_apply(probe, x_val), y_val));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// CSV and SVG

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AnalysisError("cannot write " + path.string());
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out << ',';
      out << csv_field(cells[i]);
    }
    out << "\r\n";
  };
  line(header);
  for (const auto& r : rows) {
    if (r.size() != header.size()) throw AnalysisError("write_csv: row width differs from header");
    line(r);
  }
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double x, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << x;
  return os.str();
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

constexpr double kW = 640, kH = 400, kLeft = 70, kRight = 160, kTop = 40, kBottom = 50;

void svg_frame(std::ostream& out, const std::string& title) {
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
      << "</text>\n";
  out << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << kW - kLeft - kRight << "\" height=\""
      << kH - kTop - kBottom << "\" fill=\"none\" stroke=\"black\"/>\n";
}

}  // namespace

void write_line_svg(const std::filesystem::path& path, const std::string& title, const std::vector<Series>& series,
                    bool log_y) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AnalysisError("cannot write " + path.string());
  svg_frame(out, title);
  auto ty = [&](double y) { return log_y ? std::log10(y) : y; };
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.y[i]) || (log_y && s.y[i] <= 0.0)) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, ty(s.y[i]));
      y1 = std::max(y1, ty(s.y[i]));
    }
  }
  if (std::isfinite(x0)) {
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
    auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
    auto py = [&](double y) { return kTop + ph - (ty(y) - y0) / (y1 - y0) * ph; };
    for (int k = 0; k <= 4; ++k) {
      const double yv = y0 + (y1 - y0) * k / 4.0;
      const double yp = kTop + ph - ph * k / 4.0;
      out << "<text x=\"" << kLeft - 6 << "\" y=\"" << yp + 4 << "\" text-anchor=\"end\">"
          << num(log_y ? std::pow(10.0, yv) : yv, 3) << "</text>\n";
      const double xv = x0 + (x1 - x0) * k / 4.0;
      out << "<text x=\"" << px(xv) << "\" y=\"" << kH - kBottom + 18 << "\" text-anchor=\"middle\">" << num(xv, 4)
          << "</text>\n";
    }
    for (std::size_t k = 0; k < series.size(); ++k) {
      const auto& s = series[k];
      const char* color = kPalette[k % std::size(kPalette)];
      out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
        if (!std::isfinite(s.y[i]) || (log_y && s.y[i] <= 0.0)) continue;
        out << num(px(s.x[i])) << ',' << num(py(s.y[i])) << ' ';
      }
      out << "\"/>\n";
      const double ly = kTop + 14 + 16 * static_cast<double>(k);
      out << "<line x1=\"" << kW - kRight + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << kW - kRight + 30
          << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
      out << "<text x=\"" << kW - kRight + 34 << "\" y=\"" << ly << "\">" << xml_escape(s.label) << "</text>\n";
    }
  }
  out << "</svg>\n";
}

void write_bar_svg(const std::filesystem::path& path, const std::string& title, const std::vector<std::string>& labels,
                   const std::vector<double>& values) {
  if (labels.size() != values.size()) throw AnalysisError("write_bar_svg: labels and values differ in length");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AnalysisError("cannot write " + path.string());
  svg_frame(out, title);
  double vmax = 0.0;
  for (double v : values) {
    if (std::isfinite(v)) vmax = std::max(vmax, v);
  }
  if (vmax <= 0.0) vmax = 1.0;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  const double slot = values.empty() ? pw : pw / static_cast<double>(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = std::isfinite(values[i]) ? std::max(0.0, values[i]) : 0.0;
    const double h = v / vmax * ph;
    const double x = kLeft + slot * static_cast<double>(i) + slot * 0.15;
    out << "<rect x=\"" << num(x) << "\" y=\"" << num(kTop + ph - h) << "\" width=\"" << num(slot * 0.7)
        << "\" height=\"" << num(h) << "\" fill=\"" << kPalette[0] << "\"/>\n";
    out << "<text x=\"" << num(x + slot * 0.35) << "\" y=\"" << num(kTop + ph - h - 4)
        << "\" text-anchor=\"middle\">" << num(values[i], 3) << "</text>\n";
    out << "<text x=\"" << num(x + slot * 0.35) << "\" y=\"" << kH - kBottom + 18 << "\" text-anchor=\"middle\">"
        << xml_escape(labels[i]) << "</text>\n";
  }
  out << "</svg>\n";
}

// ---------------------------------------------------------------------------
// Result files

nlohmann::json to_json(const EvalSummary& s, std::uint64_t train_seed) {
  nlohmann::json per_seed = nlohmann::json::array();
  for (const auto& c : s.per_seed) {
    per_seed.push_back({{"seed", c.seed},
                        {"success", c.success},
                        {"collision", c.collision},
                        {"timeout", c.timeout},
                        {"mean_return", c.mean_return}});
  }
  return {{"method", s.method},
          {"condition", s.condition},
          {"train_seed", train_seed},
          {"episodes_per_seed", s.episodes_per_seed},
          {"per_seed", per_seed}};
}

void write_eval_outputs(const std::filesystem::path& dir, const EvalSummary& s, std::uint64_t train_seed) {
  std::filesystem::create_directories(dir);
  std::vector<std::vector<std::string>> rows;
  for (const auto& e : s.episodes) {
    rows.push_back({std::to_string(e.eval_seed), std::to_string(e.index), std::to_string(e.episode_seed),
                    envs::status_name(e.outcome.status), std::to_string(e.outcome.steps),
                    num(e.outcome.episode_return, 17)});
  }
  write_csv(dir / "episodes.csv", {"eval_seed", "episode", "episode_seed", "status", "steps", "return"}, rows);
  rows.clear();
  for (const auto& c : s.per_seed) {
    rows.push_back({s.method, s.condition, std::to_string(train_seed), std::to_string(c.seed),
                    std::to_string(c.success), std::to_string(c.collision), std::to_string(c.timeout),
                    num(c.mean_return, 17)});
  }
  write_csv(dir / "summary.csv",
            {"method", "condition", "train_seed", "eval_seed", "success", "collision", "timeout", "mean_return"}, rows);
  std::ofstream(dir / "eval_summary.json", std::ios::binary) << to_json(s, train_seed).dump(2) << '\n';
}

void write_analysis_outputs(const std::filesystem::path& dir, const AnalysisRecord& r) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = {{"method", r.method}, {"train_seed", r.train_seed}};
  if (r.intervention) {
    const auto& iv = *r.intervention;
    write_csv(dir / "intervention.csv", {"method", "train_seed", "eligible", "stopped", "change_rate"},
              {{r.method, std::to_string(r.train_seed), std::to_string(iv.eligible), std::to_string(iv.stopped),
                num(iv.rate(), 17)}});
    j["intervention"] = {{"eligible", iv.eligible}, {"stopped", iv.stopped}, {"rate", iv.rate()}};
  }
  if (r.probe) {
    std::vector<std::vector<std::string>> rows;
    for (std::size_t k = 0; k < r.probe->val_mse.size(); ++k) {
      rows.push_back({r.method, std::to_string(r.train_seed), std::to_string(k), num(r.probe->train_mse[k], 17),
                      num(r.probe->val_mse[k], 17)});
    }
    write_csv(dir / "probe.csv", {"method", "train_seed", "probe_seed", "train_mse", "val_mse"}, rows);
    j["probe"] = {{"train_mse", r.probe->train_mse}, {"val_mse", r.probe->val_mse}};
  }
  std::ofstream(dir / "analysis.json", std::ios::binary) << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Report

namespace {

nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw AnalysisError("cannot read " + p.string());
  return nlohmann::json::parse(in);
}

// Table order: expert, then the method enumeration order, then anything else.
int method_rank(const std::string& m) {
  if (m == "expert") return -1;
  const auto& all = methods::all_methods();
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (m == methods::method_name(all[i])) return static_cast<int>(i);
  }
  return static_cast<int>(all.size());
}

bool is_ablation(const std::string& m) {
  static const std::set<std::string> names{"memory_only_residual", "memory_only_learned", "memory_obj_at",
                                           "memory_obj_aprev",     "ours_no_stopgrad",    "ours_multibranch",
                                           "two_stream_bcoh",      "two_stream_keyframe"};
  return names.count(m) > 0;
}

struct RunKey {
  std::string method;
  std::string condition;
  bool operator<(const RunKey& o) const {
    const int a = method_rank(method), b = method_rank(o.method);
    if (a != b) return a < b;
    if (method != o.method) return method < o.method;
    return condition < o.condition;
  }
};

// One value per training seed: the mean over that run's eval seeds.
struct EvalCells {
  std::vector<double> success, collision, timeout, ret;
  std::set<std::uint64_t> seeds;
};

struct AnalysisCells {
  std::vector<double> change, probe;
  std::set<std::uint64_t> seeds;
};

std::string fmt_sci(const MeanStd& m) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << m.mean << "±";
  if (m.n < 2) os << "n/a";
  else os << m.std;
  return os.str();
}

std::vector<double> read_val_curve(const std::filesystem::path& csv, std::vector<double>& iterations) {
  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);  // header
  std::vector<double> vals;
  iterations.clear();
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (cells.size() < 5 || cells[4].empty()) continue;
    iterations.push_back(std::stod(cells[0]));
    vals.push_back(std::stod(cells[4]));
  }
  return vals;
}

}  // namespace

ReportSummary report(const std::filesystem::path& runs_dir, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  ReportSummary rep;
  fs::create_directories(out_dir);

  std::vector<fs::path> files;
  if (fs::exists(runs_dir)) {
    for (const auto& e : fs::recursive_directory_iterator(runs_dir)) {
      if (!e.is_regular_file()) continue;
      // Never read back our own output.
      const auto rel = fs::relative(e.path(), out_dir);
      if (!rel.empty() && *rel.begin() != "..") continue;
      files.push_back(e.path());
    }
  } else {
    rep.warnings.push_back("runs directory " + runs_dir.string() + " does not exist");
  }
  std::sort(files.begin(), files.end());

  std::map<RunKey, EvalCells> evals;
  std::map<std::string, AnalysisCells, bool (*)(const std::string&, const std::string&)> analyses(
      [](const std::string& a, const std::string& b) {
        return method_rank(a) != method_rank(b) ? method_rank(a) < method_rank(b) : a < b;
      });
  std::map<std::string, std::map<double, std::pair<double, int>>> curves;
  std::set<std::pair<std::string, std::uint64_t>> trained, evaluated;
  std::vector<std::pair<std::string, std::array<double, 4>>> histograms;

  for (const auto& f : files) {
    const auto name = f.filename().string();
    try {
      if (name == "eval_summary.json") {
        const auto j = read_json(f);
        EvalCells& c = evals[{j.at("method").get<std::string>(), j.at("condition").get<std::string>()}];
        const auto seed = j.at("train_seed").get<std::uint64_t>();
        if (!c.seeds.insert(seed).second) {
          rep.warnings.push_back(f.string() + ": duplicate result for seed " + std::to_string(seed) + ", skipped");
          continue;
        }
        std::vector<double> s, col, to, r;
        for (const auto& row : j.at("per_seed")) {
          s.push_back(row.at("success").get<double>());
          col.push_back(row.at("collision").get<double>());
          to.push_back(row.at("timeout").get<double>());
          r.push_back(row.at("mean_return").get<double>());
        }
        if (s.empty()) {
          rep.warnings.push_back(f.string() + ": no eval seeds");
          continue;
        }
        c.success.push_back(mean_std(s).mean);
        c.collision.push_back(mean_std(col).mean);
        c.timeout.push_back(mean_std(to).mean);
        c.ret.push_back(mean_std(r).mean);
        evaluated.insert({j.at("method").get<std::string>(), seed});
        ++rep.runs;
      } else if (name == "analysis.json") {
        const auto j = read_json(f);
        AnalysisCells& c = analyses[j.at("method").get<std::string>()];
        const auto seed = j.at("train_seed").get<std::uint64_t>();
        if (!c.seeds.insert(seed).second) {
          rep.warnings.push_back(f.string() + ": duplicate analysis for seed " + std::to_string(seed) + ", skipped");
          continue;
        }
        if (j.contains("intervention")) c.change.push_back(j["intervention"].at("rate").get<double>());
        if (j.contains("probe")) {
          const auto v = j["probe"].at("val_mse").get<std::vector<double>>();
          if (!v.empty()) c.probe.push_back(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()));
        }
      } else if (name == "residual_stats.json") {
        const auto j = read_json(f);
        const auto fr = j.at("fractions").get<std::vector<double>>();
        if (fr.size() != 4) throw AnalysisError("expected 4 buckets");
        histograms.push_back({fs::relative(f.parent_path(), runs_dir).string(), {fr[0], fr[1], fr[2], fr[3]}});
      } else if (name == "train_log.csv") {
        const auto manifest = f.parent_path() / "manifest.json";
        if (!fs::exists(manifest)) {
          rep.warnings.push_back(f.string() + ": no manifest next to train log, skipped");
          continue;
        }
        const auto m = read_json(manifest);
        const auto method = m.at("method").get<std::string>();
        trained.insert({method, m.at("seed").get<std::uint64_t>()});
        std::vector<double> its;
        const auto vals = read_val_curve(f, its);
        for (std::size_t i = 0; i < vals.size(); ++i) {
          auto& cell = curves[method][its[i]];
          cell.first += vals[i];
          cell.second += 1;
        }
      }
    } catch (const std::exception& e) {
      rep.warnings.push_back(f.string() + ": unreadable (" + e.what() + ")");
    }
  }
  for (const auto& t : trained) {
    if (!evaluated.count(t)) {
      rep.warnings.push_back(t.first + " seed " + std::to_string(t.second) + ": trained but never evaluated");
    }
  }

  auto cell = [](const std::vector<double>& xs, int precision) {
    return xs.empty() ? std::string() : format_mean_std(mean_std(xs), precision);
  };
  std::vector<std::vector<std::string>> success_rows, failure_rows, ablation_rows, analysis_rows;
  for (const auto& [key, c] : evals) {
    const std::string n = std::to_string(c.success.size());
    const bool hv = key.condition == "hidden_velocity";
    success_rows.push_back({key.method, key.condition, n, cell(c.success, 1), hv ? cell(c.ret, 3) : ""});
    failure_rows.push_back({key.method, key.condition, n, cell(c.success, 1), cell(c.collision, 1), cell(c.timeout, 1)});
    if (is_ablation(key.method) || key.method == "ours" || key.method == "bcso") {
      ablation_rows.push_back({key.method, key.condition, n, cell(c.success, 1), cell(c.collision, 1),
                               cell(c.timeout, 1)});
    }
  }
  for (const auto& [method, c] : analyses) {
    analysis_rows.push_back({method, std::to_string(c.seeds.size()),
                             c.change.empty() ? "" : format_mean_std(mean_std([&] {
                                                          std::vector<double> pct;
                                                          for (double x : c.change) pct.push_back(100.0 * x);
                                                          return pct;
                                                        }()), 2),
                             c.probe.empty() ? "" : fmt_sci(mean_std(c.probe))});
  }

  auto emit = [&](const std::string& file, const std::vector<std::string>& header,
                  const std::vector<std::vector<std::string>>& rows) {
    write_csv(out_dir / file, header, rows);
    rep.outputs.push_back(out_dir / file);
  };
  emit("success.csv", {"method", "condition", "runs", "success", "return"}, success_rows);
  emit("failure_modes.csv", {"method", "condition", "runs", "success", "collision", "timeout"}, failure_rows);
  emit("ablation.csv", {"method", "condition", "runs", "success", "collision", "timeout"}, ablation_rows);
  emit("analysis.csv", {"method", "runs", "change_pct", "probe_val_mse"}, analysis_rows);

  std::vector<Series> series;
  std::vector<std::string> curve_methods;
  for (const auto& [m, pts] : curves) curve_methods.push_back(m);
  std::sort(curve_methods.begin(), curve_methods.end(), [](const std::string& a, const std::string& b) {
    return method_rank(a) != method_rank(b) ? method_rank(a) < method_rank(b) : a < b;
  });
  for (const auto& m : curve_methods) {
    Series s;
    s.label = m;
    for (const auto& [it, acc] : curves[m]) {
      s.x.push_back(it);
      s.y.push_back(acc.first / acc.second);
    }
    series.push_back(std::move(s));
  }
  write_line_svg(out_dir / "learning_curves.svg", "validation action loss", series, true);
  rep.outputs.push_back(out_dir / "learning_curves.svg");

  std::array<double, 4> hist{};
  if (histograms.empty()) {
    rep.warnings.push_back("no residual_stats.json found; residual histogram left empty");
  } else {
    hist = histograms.front().second;
    if (histograms.size() > 1) rep.warnings.push_back("several datasets found; histogram uses " + histograms.front().first);
  }
  std::vector<std::string> labels;
  std::vector<double> values;
  if (!histograms.empty()) {
    labels = {"<1e-3", "1e-3..1e-2", "1e-2..1e-1", ">=1e-1"};
    values.assign(hist.begin(), hist.end());
  }
  write_bar_svg(out_dir / "residual_histogram.svg", "squared action residual", labels, values);
  rep.outputs.push_back(out_dir / "residual_histogram.svg");
  return rep;
}

}  // namespace copycat::analysis

