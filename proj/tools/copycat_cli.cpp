// copycat: command-line front end.
//
//   copycat collect  --seed S [--env-config f] [--episodes N] --out DIR
//   copycat train    --seed S --data DIR --method M [--config f] --out DIR
//   copycat eval     --policy DIR [--episodes N] [--eval-seeds a,b] --out DIR
//   copycat analyze  --policy DIR --data DIR --intervention --mi-probe --out DIR
//   copycat verify-bound --trials N --M 4 --A 3 --seed S --out DIR
//   copycat report   --runs DIR --out DIR
//   copycat repro    --quick|--full --seed S --out DIR
//
// Every output directory gets one manifest.json, written before any other
// file. Without --out, outputs go under $COPYCAT_RUNS (default ./runs).

#include "copycat/analysis.hpp"
#include "copycat/demos.hpp"
#include "copycat/envs.hpp"
#include "copycat/methods.hpp"
#include "copycat/mi_bound.hpp"
#include "copycat/nn.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#ifndef COPYCAT_VERSION
#define COPYCAT_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace copycat;

namespace {

constexpr int kMaxWorkers = 64;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string now_utc() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

fs::path runs_root() {
  const char* env = std::getenv("COPYCAT_RUNS");
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path resolve_out(const std::string& flag, const std::string& fallback) {
  return flag.empty() ? runs_root() / fallback : fs::path(flag);
}

json read_json_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw UsageError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError(p.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& p, const json& j) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw UsageError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

/// The one manifest of an output directory. Written on construction, then
/// rewritten with the outputs and finish time once the command succeeds.
class Manifest {
 public:
  Manifest(fs::path dir, std::string command) : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    j_["command"] = std::move(command);
    j_["version"] = COPYCAT_VERSION;
    j_["started"] = now_utc();
    j_["outputs"] = json::array();
  }
  json& operator[](const char* key) { return j_[key]; }
  /// Hash over the resolved config; must be set before write().
  void set_config(const json& resolved, std::uint64_t hash) {
    j_["config"] = resolved;
    j_["config_hash"] = hex(hash);
  }
  void write() const { write_json_file(dir_ / "manifest.json", j_); }
  void output(const fs::path& p) { j_["outputs"].push_back(fs::relative(p, dir_).generic_string()); }
  void finish() {
    j_["finished"] = now_utc();
    write();
  }
  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  json j_;
};

/// Config-file value overridden by an explicit flag: the flag wins and both
/// values are recorded.
void apply_override(json& config, json& overrides, const std::string& field, const json& flag_value) {
  json entry = {{"flag", flag_value}, {"config", config.contains(field) ? config[field] : json(nullptr)}};
  config[field] = flag_value;
  overrides[field] = entry;
}

int check_workers(int w) {
  if (w < 1 || w > kMaxWorkers) throw UsageError("--workers must be in [1, " + std::to_string(kMaxWorkers) + "]");
  return w;
}

/// Runs jobs on at most `workers` threads; the first exception is rethrown.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

envs::EnvConfig load_env(const std::string& file, const std::string& kind, const std::string& traffic) {
  json j = file.empty() ? json::object() : read_json_file(file);
  if (!kind.empty()) j["kind"] = kind;
  if (!traffic.empty()) j["brake_town"]["traffic"] = traffic;
  return envs::env_config_from_json(j);
}

fs::path dataset_file(const fs::path& p) { return fs::is_directory(p) ? p / "dataset.bin" : p; }
fs::path policy_file(const fs::path& p) { return fs::is_directory(p) ? p / "policy.params" : p; }

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (tok.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw UsageError("bad seed list '" + s + "'");
    }
  }
  if (out.empty()) throw UsageError("empty seed list");
  return out;
}

json seeds_json(const std::vector<std::uint64_t>& s) { return json(s); }

// ---------------------------------------------------------------------------
// Stages shared by the single commands and repro.

struct CollectArgs {
  envs::EnvConfig env;
  int episodes = 0;
  double noise_prob = 0.0;
  std::uint64_t seed = 0;
  int history = 0;
};

demos::DemoDataset run_collect(const CollectArgs& a, const fs::path& out, const json& extra = {}) {
  Manifest m(out, "collect");
  json resolved = {{"env", envs::to_json(a.env)},
                   {"episodes", a.episodes},
                   {"noise_prob", a.noise_prob},
                   {"history", a.history}};
  m["seed"] = a.seed;
  m["seeds"] = seeds_json({a.seed});
  m["inputs"] = json::object();
  if (!extra.is_null()) m["overrides"] = extra;
  m.set_config(resolved, nn::derive_seed(a.seed, resolved.dump()));
  m.write();

  demos::CollectOptions co;
  co.episodes = a.episodes;
  co.noise_prob = a.noise_prob;
  co.seed = a.seed;
  demos::DemoDataset ds(a.env, demos::collect(a.env, co), a.history);
  demos::save_dataset(out / "dataset.bin", ds, a.seed);
  m.output(out / "dataset.bin");

  const auto h = demos::residual_stats(ds);
  std::vector<std::vector<std::string>> rows;
  const char* names[] = {"<1e-3", "1e-3..1e-2", "1e-2..1e-1", ">=1e-1"};
  for (int b = 0; b < 4; ++b) {
    std::ostringstream v;
    v << std::setprecision(17) << h.fractions[b];
    rows.push_back({names[b], v.str()});
  }
  analysis::write_csv(out / "residual_stats.csv", {"bucket", "fraction"}, rows);
  write_json_file(out / "residual_stats.json",
                  {{"fractions", std::vector<double>(h.fractions.begin(), h.fractions.end())}, {"count", h.count}});
  m.output(out / "residual_stats.csv");
  m.output(out / "residual_stats.json");
  m.finish();
  std::cerr << "collect: " << ds.trajectories().size() << " episodes, " << ds.samples().size() << " samples -> "
            << out.string() << '\n';
  return ds;
}

/// Rebuilds the dataset windows for the history a method needs.
demos::DemoDataset with_history(const demos::DemoDataset& ds, int history) {
  if (ds.history() == history) return ds;
  return demos::DemoDataset(ds.env_config(), ds.trajectories(), history, ds.boundary(), ds.split_seed(),
                            ds.train_fraction());
}

methods::TrainResult run_train(const demos::DemoDataset& data, const methods::MethodConfig& cfg,
                               const fs::path& data_path, const fs::path& out, const json& config_file,
                               const json& overrides) {
  Manifest m(out, "train");
  m["method"] = methods::method_name(cfg.kind);
  m["seed"] = cfg.seed;
  m["seeds"] = seeds_json({cfg.seed});
  m["inputs"] = {{"data", data_path.generic_string()}};
  m["env"] = envs::to_json(data.env_config());
  m["config_file"] = config_file;
  m["overrides"] = overrides;
  m.set_config(methods::to_json(cfg), methods::config_hash(cfg) ^ envs::config_hash(data.env_config()));
  m.write();

  const auto ds = with_history(data, cfg.history);
  auto result = methods::train(ds, cfg);
  result.policy.save(out / "policy.params", cfg.seed);
  result.report.write_csv(out / "train_log.csv");
  m.output(out / "policy.params");
  m.output(out / "train_log.csv");
  m["expert_queries"] = result.report.expert_queries;
  m["final_val_loss"] = result.report.final_val_loss();
  m.finish();
  std::cerr << "train: " << methods::method_name(cfg.kind) << " seed " << cfg.seed << " val "
            << result.report.final_val_loss() << " (" << result.report.wall_seconds << " s) -> " << out.string()
            << '\n';
  return result;
}

struct PolicyRun {
  methods::TrainedPolicy policy;
  json manifest;  // the training manifest, when present
  std::uint64_t seed = 0;
};

PolicyRun load_policy_run(const fs::path& p) {
  PolicyRun r;
  r.policy = methods::TrainedPolicy::load(policy_file(p));
  const fs::path mf = (fs::is_directory(p) ? p : p.parent_path()) / "manifest.json";
  if (fs::exists(mf)) {
    r.manifest = read_json_file(mf);
    if (r.manifest.contains("seed")) r.seed = r.manifest["seed"].get<std::uint64_t>();
  }
  return r;
}

analysis::EvalSummary run_eval(const PolicyRun* run, const envs::EnvConfig& env, const analysis::EvalOptions& opts,
                               const fs::path& policy_path, const fs::path& out) {
  Manifest m(out, "eval");
  const std::string method = run ? methods::method_name(run->policy.kind) : "expert";
  const std::uint64_t train_seed = run ? run->seed : 0;
  m["method"] = method;
  m["seed"] = train_seed;
  m["seeds"] = seeds_json(opts.seeds);
  m["inputs"] = {{"policy", run ? policy_path.generic_string() : "expert"}};
  json resolved = {{"env", envs::to_json(env)},
                   {"episodes", opts.episodes},
                   {"eval_seeds", opts.seeds},
                   {"boundary", demos::boundary_name(opts.boundary)}};
  m.set_config(resolved, envs::config_hash(env) ^ nn::derive_seed(train_seed, resolved.dump()));
  m["workers"] = opts.workers;
  m.write();

  auto s = run ? analysis::evaluate(run->policy, env, opts) : analysis::evaluate_expert(env, opts);
  analysis::write_eval_outputs(out, s, train_seed);
  m.output(out / "episodes.csv");
  m.output(out / "summary.csv");
  m.output(out / "eval_summary.json");
  m.finish();
  std::cerr << "eval: " << method << " [" << s.condition << "] success " << analysis::format_mean_std(s.success())
            << " collision " << analysis::format_mean_std(s.collision()) << " timeout "
            << analysis::format_mean_std(s.timeout()) << " return " << analysis::format_mean_std(s.mean_return(), 3)
            << '\n';
  return s;
}

struct AnalyzeArgs {
  bool intervention = false;
  bool probe = false;
  analysis::InterventionOptions iv;
  analysis::ProbeConfig probe_cfg;
};

analysis::AnalysisRecord run_analyze(const PolicyRun& run, const demos::DemoDataset& data, const AnalyzeArgs& a,
                                     const fs::path& policy_path, const fs::path& data_path, const fs::path& out) {
  Manifest m(out, "analyze");
  m["method"] = methods::method_name(run.policy.kind);
  m["seed"] = run.seed;
  m["seeds"] = seeds_json(a.probe_cfg.seeds);
  m["inputs"] = {{"policy", policy_path.generic_string()}, {"data", data_path.generic_string()}};
  json resolved = {{"intervention", a.intervention},
                   {"mi_probe", a.probe},
                   {"a_eps", a.iv.a_eps},
                   {"v_eps", a.iv.v_eps},
                   {"probe_hidden", a.probe_cfg.hidden},
                   {"probe_iterations", a.probe_cfg.iterations},
                   {"probe_batch", a.probe_cfg.batch_size},
                   {"probe_lr", a.probe_cfg.learning_rate},
                   {"probe_seeds", a.probe_cfg.seeds}};
  m.set_config(resolved, nn::derive_seed(run.seed, resolved.dump()));
  m.write();

  const auto ds = with_history(data, run.policy.history);
  analysis::AnalysisRecord rec;
  rec.method = methods::method_name(run.policy.kind);
  rec.train_seed = run.seed;
  if (a.intervention) rec.intervention = analysis::intervene_history(run.policy, ds, a.iv);
  if (a.probe) {
    rec.probe = analysis::mi_probe([&](const Eigen::MatrixXd& w) { return run.policy.features(w); }, ds, a.probe_cfg);
  }
  analysis::write_analysis_outputs(out, rec);
  if (rec.intervention) m.output(out / "intervention.csv");
  if (rec.probe) m.output(out / "probe.csv");
  m.output(out / "analysis.json");
  m.finish();
  std::cerr << "analyze: " << rec.method;
  if (rec.intervention) std::cerr << " change " << rec.intervention->rate();
  if (rec.probe) std::cerr << " probe val mse " << rec.probe->mean_val_mse();
  std::cerr << '\n';
  return rec;
}

void run_report(const fs::path& runs, const fs::path& out) {
  Manifest m(out, "report");
  m["inputs"] = {{"runs", runs.generic_string()}};
  m["seeds"] = json::array();
  m.set_config({{"runs", runs.generic_string()}}, nn::derive_seed(0, runs.generic_string()));
  m.write();
  const auto rep = analysis::report(runs, out);
  for (const auto& p : rep.outputs) m.output(p);
  m["warnings"] = rep.warnings;
  m.finish();
  for (const auto& w : rep.warnings) std::cerr << "report: warning: " << w << '\n';
  std::cerr << "report: " << rep.runs << " evaluated runs -> " << out.string() << '\n';
}

void run_verify_bound(int trials, int m_size, int a_size, double concentration, std::uint64_t seed,
                      const fs::path& out) {
  if (trials < 1) throw UsageError("--trials must be >= 1");
  if (m_size < 2 || a_size < 2) throw UsageError("--M and --A must be >= 2");
  Manifest m(out, "verify-bound");
  json resolved = {{"trials", trials}, {"M", m_size}, {"A", a_size}, {"concentration", concentration}};
  m["seed"] = seed;
  m["seeds"] = seeds_json({seed});
  m.set_config(resolved, nn::derive_seed(seed, resolved.dump()));
  m.write();

  std::vector<std::vector<std::string>> rows;
  int held = 0;
  double min_slack = std::numeric_limits<double>::infinity(), max_eq = 0.0;
  auto f = [](double x) {
    std::ostringstream os;
    os << std::setprecision(17) << x;
    return os.str();
  };
  for (int i = 0; i < trials; ++i) {
    const auto trial_seed = nn::derive_seed(seed, "bound.trial." + std::to_string(i));
    const auto check = mi::verify_theorem1(mi::random_joint(m_size, a_size, concentration, trial_seed));
    held += check.holds ? 1 : 0;
    min_slack = std::min(min_slack, check.slack);
    max_eq = std::max({max_eq, std::abs(check.bijection_residual), std::abs(check.chain_rule_residual),
                       std::abs(check.elimination_residual)});
    rows.push_back({std::to_string(i), std::to_string(trial_seed), f(check.lhs), f(check.rhs), f(check.slack),
                    f(check.bijection_residual), f(check.chain_rule_residual), f(check.elimination_residual),
                    f(check.conditioning_gap), check.holds ? "true" : "false"});
  }
  analysis::write_csv(out / "trials.csv",
                      {"trial", "joint_seed", "lhs", "rhs", "slack", "bijection_residual", "chain_rule_residual",
                       "elimination_residual", "conditioning_gap", "holds"},
                      rows);
  analysis::write_csv(out / "summary.csv", {"trials", "held", "min_slack", "max_equality_residual"},
                      {{std::to_string(trials), std::to_string(held), f(min_slack), f(max_eq)}});
  m.output(out / "trials.csv");
  m.output(out / "summary.csv");
  m.finish();
  std::cout << "verify-bound: " << held << "/" << trials << " hold, min slack " << min_slack
            << ", max equality residual " << max_eq << '\n';
  if (held != trials) throw std::runtime_error("bound violated in " + std::to_string(trials - held) + " trials");
}

// ---------------------------------------------------------------------------
// repro

struct ReproPlan {
  std::string profile;
  int brake_episodes;
  int hv_episodes;
  int iterations;
  int eval_episodes;
  int probe_iterations;
  std::vector<std::uint64_t> train_seeds;
  std::vector<std::uint64_t> hv_seeds;
  std::vector<methods::MethodKind> methods;
  bool hidden_velocity;
  bool regular_condition;
};

ReproPlan plan_for(bool full) {
  using K = methods::MethodKind;
  if (!full) return {"quick", 100, 0, 1000, 20, 500, {0, 1, 2}, {}, {K::bcso, K::bcoh, K::ours}, false, false};
  return {"full", 200, 100, 3000, 50, 1500, {0, 1, 2}, {0, 1, 2, 3, 4}, methods::all_methods(), true, true};
}

struct ReproJob {
  std::string env_tag;
  const demos::DemoDataset* data;
  fs::path data_dir;
  methods::MethodKind kind;
  std::uint64_t seed;
};

void run_repro(bool full, std::uint64_t master, int workers, const fs::path& out) {
  const ReproPlan plan = plan_for(full);
  Manifest m(out, "repro");
  json resolved = {{"profile", plan.profile},
                   {"brake_town_episodes", plan.brake_episodes},
                   {"hidden_velocity_episodes", plan.hv_episodes},
                   {"iterations", plan.iterations},
                   {"eval_episodes", plan.eval_episodes},
                   {"probe_iterations", plan.probe_iterations},
                   {"train_seeds", plan.train_seeds},
                   {"hidden_velocity_seeds", plan.hv_seeds}};
  json names = json::array();
  for (auto k : plan.methods) names.push_back(methods::method_name(k));
  resolved["methods"] = names;
  m["seed"] = master;
  m["seeds"] = plan.train_seeds;
  m["workers"] = workers;
  m.set_config(resolved, nn::derive_seed(master, resolved.dump()));
  m.write();

  const fs::path runs = out / "runs";
  struct EnvData {
    std::string tag;
    envs::EnvConfig env;
    demos::DemoDataset data;
    fs::path dir;
  };
  std::vector<EnvData> envs_used;
  {
    envs::EnvConfig bt;
    CollectArgs ca{bt, plan.brake_episodes, 0.0, nn::derive_seed(master, "collect.brake_town"), 6};
    const fs::path dir = runs / "data-brake_town";
    envs_used.push_back({"brake_town", bt, run_collect(ca, dir), dir});
  }
  if (plan.hidden_velocity) {
    envs::EnvConfig hv;
    hv.kind = envs::EnvKind::hidden_velocity;
    CollectArgs ca{hv, plan.hv_episodes, 0.0, nn::derive_seed(master, "collect.hidden_velocity"), 1};
    const fs::path dir = runs / "data-hidden_velocity";
    envs_used.push_back({"hidden_velocity", hv, run_collect(ca, dir), dir});
  }

  std::vector<ReproJob> jobs;
  for (const auto& e : envs_used) {
    const bool hv = e.tag == "hidden_velocity";
    const auto& kinds = hv ? std::vector<methods::MethodKind>{methods::MethodKind::bcso, methods::MethodKind::bcoh,
                                                              methods::MethodKind::ours}
                           : plan.methods;
    for (auto k : kinds) {
      for (auto s : hv ? plan.hv_seeds : plan.train_seeds) jobs.push_back({e.tag, &e.data, e.dir, k, s});
    }
  }

  parallel_for(jobs.size(), workers, [&](std::size_t i) {
    const auto& job = jobs[i];
    const auto& env = job.data->env_config();
    auto cfg = methods::MethodConfig::defaults_for(env, job.kind);
    cfg.iterations = plan.iterations;
    cfg.seed = job.seed;
    const fs::path dir =
        runs / (job.env_tag + "-" + methods::method_name(job.kind) + "-s" + std::to_string(job.seed));
    auto result = run_train(*job.data, cfg, job.data_dir, dir, nullptr, json::object());
    PolicyRun run{std::move(result.policy), json::object(), job.seed};

    analysis::EvalOptions eo;
    eo.episodes = plan.eval_episodes;
    eo.seeds = {nn::derive_seed(master, "eval." + std::to_string(job.seed))};
    run_eval(&run, env, eo, dir, dir / ("eval-" + std::string(env.kind == envs::EnvKind::brake_town ? "dense"
                                                                                                    : "hidden_velocity")));
    if (plan.regular_condition && env.kind == envs::EnvKind::brake_town) {
      auto regular = env;
      regular.brake_town.traffic = envs::Traffic::regular;
      run_eval(&run, regular, eo, dir, dir / "eval-regular");
    }
    if (run.policy.history > 0) {
      AnalyzeArgs aa;
      aa.intervention = true;
      aa.probe = true;
      aa.probe_cfg.iterations = plan.probe_iterations;
      run_analyze(run, *job.data, aa, dir, job.data_dir, dir / "analysis");
    }
  });

  // The expert on the same evaluation seeds, as the reference row.
  for (const auto& e : envs_used) {
    analysis::EvalOptions eo;
    eo.episodes = plan.eval_episodes;
    eo.seeds.clear();
    for (auto s : e.tag == "hidden_velocity" ? plan.hv_seeds : plan.train_seeds) {
      eo.seeds.push_back(nn::derive_seed(master, "eval." + std::to_string(s)));
    }
    eo.workers = workers;
    run_eval(nullptr, e.env, eo, {}, runs / ("expert-" + e.tag));
  }

  run_report(runs, out / "report");
  m.output(out / "runs");
  m.output(out / "report");
  m.finish();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Copycat-shortcut experiments: demos, imitation methods, diagnostics and reports."};
  app.require_subcommand(1);
  app.set_version_flag("--version", COPYCAT_VERSION);

  // collect
  auto* collect = app.add_subcommand("collect", "Roll out the scripted expert and save a demo dataset.");
  std::string c_env, c_kind, c_traffic, c_out;
  std::uint64_t c_seed = 0;
  int c_episodes = -1, c_history = -1;
  double c_noise = 0.0;
  collect->add_option("--seed", c_seed, "Master seed for episode sampling")->required();
  collect->add_option("--env-config", c_env, "Environment JSON")->check(CLI::ExistingFile);
  collect->add_option("--env", c_kind, "brake_town | hidden_velocity (overrides the file)");
  collect->add_option("--traffic", c_traffic, "dense | regular (BrakeTown)");
  collect->add_option("--episodes", c_episodes, "Episodes (default 200 BrakeTown, 100 HiddenVelocity)");
  collect->add_option("--history", c_history, "Stored window length H (default 6 BrakeTown, 1 HiddenVelocity)");
  collect->add_option("--noise-prob", c_noise, "Probability of perturbing an executed action")->check(CLI::Range(0.0, 1.0));
  collect->add_option("--out", c_out, "Output directory");

  // train
  auto* train = app.add_subcommand("train", "Train one method on a dataset.");
  std::string t_data, t_method, t_config, t_out;
  std::uint64_t t_seed = 0;
  std::optional<int> t_iterations, t_history, t_batch;
  std::optional<double> t_lr;
  train->add_option("--seed", t_seed, "Training seed")->required();
  train->add_option("--data", t_data, "Dataset directory or file")->required();
  train->add_option("--method", t_method, "Method name (overrides the config file)");
  train->add_option("--config", t_config, "Method config JSON")->check(CLI::ExistingFile);
  train->add_option("--iterations", t_iterations, "Training iterations");
  train->add_option("--history", t_history, "History length H");
  train->add_option("--batch-size", t_batch, "Batch size");
  train->add_option("--lr", t_lr, "Initial learning rate");
  train->add_option("--out", t_out, "Output directory");

  // eval
  auto* eval = app.add_subcommand("eval", "Closed-loop evaluation of a trained policy (or the expert).");
  std::string e_policy, e_env, e_traffic, e_seeds = "0,1,2", e_out;
  int e_episodes = 50, e_workers = 1;
  bool e_expert = false;
  eval->add_option("--policy", e_policy, "Training run directory or policy file");
  eval->add_flag("--expert", e_expert, "Evaluate the scripted expert instead");
  eval->add_option("--env-config", e_env, "Environment JSON (default: the one the policy was trained on)")
      ->check(CLI::ExistingFile);
  eval->add_option("--traffic", e_traffic, "dense | regular (BrakeTown)");
  eval->add_option("--episodes", e_episodes, "Episodes per evaluation seed")->check(CLI::NonNegativeNumber);
  eval->add_option("--eval-seeds", e_seeds, "Comma-separated evaluation seeds");
  eval->add_option("--workers", e_workers, "Parallel episodes");
  eval->add_option("--out", e_out, "Output directory");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "History intervention and previous-action probe.");
  std::string a_policy, a_data, a_out, a_probe_seeds = "0,1,2";
  bool a_intervention = false, a_probe = false;
  double a_eps = 0.05;
  int a_probe_iters = 1500;
  analyze->add_option("--policy", a_policy, "Training run directory or policy file")->required();
  analyze->add_option("--data", a_data, "Dataset directory or file")->required();
  analyze->add_flag("--intervention", a_intervention, "Counterfactual-history change rate");
  analyze->add_flag("--mi-probe", a_probe, "Regress a_{t-1} from the policy's representation");
  analyze->add_option("--a-eps", a_eps, "Moving-decision threshold");
  analyze->add_option("--probe-iterations", a_probe_iters, "Probe training iterations");
  analyze->add_option("--probe-seeds", a_probe_seeds, "Comma-separated probe seeds");
  analyze->add_option("--out", a_out, "Output directory");

  // verify-bound
  auto* bound = app.add_subcommand("verify-bound", "Check the residual lower bound on random discrete joints.");
  int b_trials = 1000, b_m = 4, b_a = 3;
  double b_conc = 1.0;
  std::uint64_t b_seed = 0;
  std::string b_out;
  bound->add_option("--trials", b_trials, "Random joints to check");
  bound->add_option("--M", b_m, "Memory alphabet size");
  bound->add_option("--A", b_a, "Action alphabet size");
  bound->add_option("--concentration", b_conc, "Dirichlet concentration")->check(CLI::PositiveNumber);
  bound->add_option("--seed", b_seed, "Fuzz seed");
  bound->add_option("--out", b_out, "Output directory");

  // report
  auto* rep = app.add_subcommand("report", "Tables and plots from a directory of runs.");
  std::string r_runs, r_out;
  rep->add_option("--runs", r_runs, "Runs directory (default $COPYCAT_RUNS or ./runs)");
  rep->add_option("--out", r_out, "Output directory")->required();

  // repro
  auto* repro = app.add_subcommand("repro", "Whole pipeline: collect, train, eval, analyze, report.");
  bool p_quick = false, p_full = false;
  std::uint64_t p_seed = 0;
  int p_workers = 1;
  std::string p_out;
  auto* q = repro->add_flag("--quick", p_quick, "bcso/bcoh/ours x 3 seeds at reduced scale");
  repro->add_flag("--full", p_full, "Every method and ablation, both environments")->excludes(q);
  repro->add_option("--seed", p_seed, "Master seed");
  repro->add_option("--workers", p_workers, "Parallel (method, seed) runs");
  repro->add_option("--out", p_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*collect) {
      CollectArgs a;
      a.env = load_env(c_env, c_kind, c_traffic);
      const bool bt = a.env.kind == envs::EnvKind::brake_town;
      a.episodes = c_episodes >= 0 ? c_episodes : (bt ? 200 : 100);
      a.history = c_history >= 0 ? c_history : (bt ? 6 : 1);
      if (a.episodes < 1) throw UsageError("--episodes must be >= 1");
      a.noise_prob = c_noise;
      a.seed = c_seed;
      run_collect(a, resolve_out(c_out, std::string("data-") + envs::env_kind_name(a.env.kind) + "-s" +
                                            std::to_string(c_seed)));
    } else if (*train) {
      const fs::path data_path = t_data;
      const auto data = demos::load_dataset(dataset_file(data_path));
      json file = t_config.empty() ? json::object() : read_json_file(t_config);
      if (!file.is_object()) throw UsageError(t_config + ": expected a JSON object");
      json cfg_json = file;
      json overrides = json::object();
      if (!t_method.empty()) apply_override(cfg_json, overrides, "method", t_method);
      apply_override(cfg_json, overrides, "seed", t_seed);
      if (t_iterations) apply_override(cfg_json, overrides, "iterations", *t_iterations);
      if (t_history) apply_override(cfg_json, overrides, "history", *t_history);
      if (t_batch) apply_override(cfg_json, overrides, "batch_size", *t_batch);
      if (t_lr) apply_override(cfg_json, overrides, "lr", *t_lr);
      if (!cfg_json.contains("method")) throw UsageError("train: give --method or a config with \"method\"");
      const auto kind = methods::parse_method(cfg_json["method"].get<std::string>());
      auto cfg = methods::method_config_from_json(cfg_json, methods::MethodConfig::defaults_for(data.env_config(), kind));
      cfg.validate();
      run_train(data, cfg, data_path, resolve_out(t_out, std::string(methods::method_name(kind)) + "-s" +
                                                             std::to_string(t_seed)),
                t_config.empty() ? json(nullptr) : file, overrides);
    } else if (*eval) {
      analysis::EvalOptions eo;
      eo.episodes = e_episodes;
      eo.seeds = parse_seeds(e_seeds);
      eo.workers = check_workers(e_workers);
      if (e_expert == !e_policy.empty()) throw UsageError("eval: give exactly one of --policy and --expert");
      std::optional<PolicyRun> run;
      envs::EnvConfig env;
      if (!e_policy.empty()) {
        run = load_policy_run(e_policy);
        if (e_env.empty() && run->manifest.contains("env")) {
          json j = run->manifest["env"];
          if (!e_traffic.empty()) j["brake_town"]["traffic"] = e_traffic;
          env = envs::env_config_from_json(j);
        } else {
          env = load_env(e_env, "", e_traffic);
        }
      } else {
        env = load_env(e_env, "", e_traffic);
      }
      const std::string name = run ? methods::method_name(run->policy.kind) : "expert";
      run_eval(run ? &*run : nullptr, env, eo, e_policy, resolve_out(e_out, "eval-" + name));
    } else if (*analyze) {
      if (!a_intervention && !a_probe) throw UsageError("analyze: pass --intervention and/or --mi-probe");
      const auto run = load_policy_run(a_policy);
      const auto data = demos::load_dataset(dataset_file(a_data));
      AnalyzeArgs aa;
      aa.intervention = a_intervention;
      aa.probe = a_probe;
      aa.iv.a_eps = a_eps;
      aa.probe_cfg.iterations = a_probe_iters;
      aa.probe_cfg.seeds = parse_seeds(a_probe_seeds);
      run_analyze(run, data, aa, a_policy, a_data,
                  resolve_out(a_out, std::string("analysis-") + methods::method_name(run.policy.kind)));
    } else if (*bound) {
      run_verify_bound(b_trials, b_m, b_a, b_conc, b_seed, resolve_out(b_out, "verify-bound-s" + std::to_string(b_seed)));
    } else if (*rep) {
      run_report(r_runs.empty() ? runs_root() : fs::path(r_runs), r_out);
    } else if (*repro) {
      if (!p_quick && !p_full) throw UsageError("repro: pass --quick or --full");
      run_repro(p_full, p_seed, check_workers(p_workers),
                resolve_out(p_out, std::string("repro-") + (p_full ? "full" : "quick") + "-s" + std::to_string(p_seed)));
    }
  } catch (const std::exception& e) {
    std::cerr << "copycat: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
