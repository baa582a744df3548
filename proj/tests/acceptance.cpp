// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria. Optional arguments restrict the run to the
// listed criterion numbers (e.g. `acceptance 1 2 9`).

#include "copycat/analysis.hpp"
#include "copycat/autodiff.hpp"
#include "copycat/mi_bound.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace copycat;
namespace fs = std::filesystem;
using ad::Matrix;
using ad::Tape;
using ad::Var;
using methods::MethodKind;

namespace {

// ---------------------------------------------------------------------------
// Pinned tolerances and protocol constants.

constexpr int kBoundTrials = 1000;
constexpr int kBoundM = 4;
constexpr int kBoundA = 3;
constexpr double kSlackTol = 1e-9;
constexpr double kEqualityTol = 1e-12;
constexpr double kBoundSeconds = 10.0;

constexpr int kFdPoints = 100;
constexpr double kFdStep = 1e-6;
constexpr double kFdTol = 1e-5;
constexpr double kFdSeconds = 30.0;

constexpr int kBrakeTownHistory = 6;
constexpr int kBrakeTownEpisodes = 200;
constexpr std::uint64_t kCollectSeed = 1;
constexpr int kIterations = 3000;
constexpr int kTrainSeeds = 3;
constexpr int kEvalEpisodes = 50;
constexpr std::uint64_t kEvalSeedBase = 100;  // eval seed = base + training seed
constexpr double kChangeRatio = 2.0;
constexpr int kProbeSeedsNeeded = 2;
constexpr double kBrakeTownCpuSeconds = 15.0 * 60.0;

constexpr int kHvHistory = 1;
constexpr int kHvEpisodes = 100;
constexpr int kHvSeeds = 5;

constexpr double kBucket0Min = 0.5;
constexpr int kExpertSeeds = 100;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

bool same_bits(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

bool same_trace(const methods::TrainResult& a, const methods::TrainResult& b, const std::vector<std::string>& nets) {
  if (a.report.records.size() != b.report.records.size()) return false;
  for (std::size_t i = 0; i < a.report.records.size(); ++i) {
    const auto& x = a.report.records[i];
    const auto& y = b.report.records[i];
    if (!same_bits(x.train_loss, y.train_loss) || !same_bits(x.learning_rate, y.learning_rate) ||
        !same_bits(x.val_loss, y.val_loss)) {
      return false;
    }
  }
  for (const auto& n : nets) {
    const auto& p = a.policy.nets.at(n);
    const auto& q = b.policy.nets.at(n);
    if (p.layers.size() != q.layers.size()) return false;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      if (!same_bits(p.layers[l].weight, q.layers[l].weight) || !same_bits(p.layers[l].bias, q.layers[l].bias)) {
        return false;
      }
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// C1

Verdict bound_fuzz() {
  Stopwatch sw;
  int ok = 0;
  double min_slack = 1e300, max_eq = 0.0;
  for (int s = 0; s < kBoundTrials; ++s) {
    const auto c = mi::verify_theorem1(mi::random_joint(kBoundM, kBoundA, 1.0, static_cast<std::uint64_t>(s)));
    const double eq = std::max({std::abs(c.bijection_residual), std::abs(c.chain_rule_residual),
                                std::abs(c.elimination_residual)});
    min_slack = std::min(min_slack, c.slack);
    max_eq = std::max(max_eq, eq);
    ok += c.slack >= -kSlackTol && eq <= kEqualityTol && c.conditioning_gap >= -kSlackTol;
  }
  const double t = sw.seconds();
  return {ok == kBoundTrials && t < kBoundSeconds,
          fmt("%d/%d joints hold, min slack %.3g, max equality residual %.3g, %.2f s", ok, kBoundTrials,
              min_slack, max_eq, t)};
}

// ---------------------------------------------------------------------------
// C2

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = lo + (hi - lo) * nn::uniform01(rng);
  return m;
}

Matrix away_from_zero(Matrix m, double margin) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double& v = m.data()[i];
    if (std::abs(v) < margin) v = v < 0 ? -margin : margin;
  }
  return m;
}

Var reduce(Tape& t, Var y, const Matrix& r) { return ad::mean(t, ad::mul_elementwise(t, y, t.leaf(r))); }

Verdict autodiff_fd() {
  Stopwatch sw;
  std::mt19937_64 rng(7);
  const double margin = 10 * kFdStep;
  std::map<std::string, double> worst;
  for (int trial = 0; trial < kFdPoints; ++trial) {
    const Matrix a = random_matrix(rng, 3, 4);
    const Matrix b = random_matrix(rng, 3, 4);
    const Matrix bias = random_matrix(rng, 1, 4);
    const Matrix w = random_matrix(rng, 4, 2);
    const Matrix r34 = random_matrix(rng, 3, 4);
    const Matrix r32 = random_matrix(rng, 3, 2);
    const Matrix r38 = random_matrix(rng, 3, 8);
    Matrix mask(3, 4);
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = nn::uniform01(rng) < 0.5 ? 0.0 : 1.0;
    const Eigen::VectorXd row_w = random_matrix(rng, 3, 1, 0.5, 2.0).col(0);

    auto check = [&](const std::string& name, const ad::ScalarFn& f, const Matrix& at) {
      worst[name] = std::max(worst[name], ad::finite_diff_check(f, at, kFdStep));
    };
    check("add", [&](Tape& t, Var x) { return reduce(t, ad::add(t, x, t.leaf(b)), r34); }, a);
    check("add_bias", [&](Tape& t, Var x) { return reduce(t, ad::add(t, t.leaf(a), x), r34); }, bias);
    check("sub", [&](Tape& t, Var x) { return reduce(t, ad::sub(t, t.leaf(a), x), r34); }, b);
    check("mul", [&](Tape& t, Var x) { return reduce(t, ad::mul_elementwise(t, x, t.leaf(b)), r34); }, a);
    check("matmul", [&](Tape& t, Var x) { return reduce(t, ad::matmul(t, x, t.leaf(w)), r32); }, a);
    check("matmul_rhs", [&](Tape& t, Var x) { return reduce(t, ad::matmul(t, t.leaf(a), x), r32); }, w);
    check("relu", [&](Tape& t, Var x) { return reduce(t, ad::relu(t, x), r34); }, away_from_zero(a, margin));
    check("tanh", [&](Tape& t, Var x) { return reduce(t, ad::tanh(t, x), r34); }, a);
    check("concat", [&](Tape& t, Var x) { return reduce(t, ad::concat_lastdim(t, x, t.leaf(b)), r38); }, a);
    check("slice", [&](Tape& t, Var x) { return reduce(t, ad::slice_lastdim(t, x, 1, 2), r32); }, a);
    check("scale", [&](Tape& t, Var x) { return reduce(t, ad::scale(t, x, -1.7), r34); }, a);
    check("mean", [&](Tape& t, Var x) { return ad::mean(t, x); }, a);
    check("l1", [&](Tape& t, Var x) { return ad::l1_loss(t, x, t.leaf(b), &row_w); },
          b + away_from_zero(a - b, margin));
    check("l2", [&](Tape& t, Var x) { return ad::l2_loss(t, x, t.leaf(b), &row_w); }, a);
    check("dropout", [&](Tape& t, Var x) { return reduce(t, ad::dropout_apply(t, x, mask), r34); }, a);

    const double lambda = 0.1 + nn::uniform01(rng);
    auto gr = [&](Tape& t, Var x) { return ad::grad_reverse(t, reduce(t, ad::tanh(t, x), r34), lambda); };
    Tape t;
    const Var x = t.leaf(a);
    t.backward(gr(t, x));
    const Matrix numeric = ad::numeric_gradient(gr, a, kFdStep);
    const double rel = ((t.grad(x) + lambda * numeric).array() / numeric.array().abs().max(1.0)).abs().maxCoeff();
    worst["grad_reverse"] = std::max(worst["grad_reverse"], rel);
  }

  // Zero flow through stop_gradient: a parameter reachable only through it.
  bool zero_flow = true;
  for (int i = 0; i < kFdPoints; ++i) {
    Tape t;
    const Var x = t.leaf(random_matrix(rng, 4, 3));
    const Var w_mem = t.leaf(random_matrix(rng, 3, 2));
    const Var w_pol = t.leaf(random_matrix(rng, 3, 2));
    const Var m = ad::stop_gradient(t, ad::relu(t, ad::matmul(t, x, w_mem)));
    const Var z = ad::concat_lastdim(t, ad::tanh(t, ad::matmul(t, x, w_pol)), m);
    t.backward(ad::l2_loss(t, z, t.leaf(Matrix::Zero(4, 4))));
    zero_flow = zero_flow && (t.grad(w_mem).array() == 0.0).all() && t.grad(w_pol).cwiseAbs().sum() > 0.0;
  }

  std::string worst_op;
  double worst_err = 0.0;
  for (const auto& [op, e] : worst) {
    if (e >= worst_err) worst_op = op, worst_err = e;
  }
  const double secs = sw.seconds();
  return {worst_err < kFdTol && zero_flow && secs < kFdSeconds,
          fmt("%zu ops x %d points, worst rel error %.2e (%s), stop-gradient zero flow %s, %.2f s", worst.size(),
              kFdPoints, worst_err, worst_op.c_str(), zero_flow ? "exact" : "VIOLATED", secs)};
}

// ---------------------------------------------------------------------------
// Shared training runs.

struct Run {
  methods::TrainResult result;
  analysis::SeedCounts eval;
  double change = 0.0;
  double probe_mse = 0.0;
};

struct Protocol {
  envs::EnvConfig env;
  int history = 0;
  std::optional<demos::DemoDataset> with_history;
  std::optional<demos::DemoDataset> single;
  std::map<MethodKind, std::vector<Run>> runs;

  Protocol(envs::EnvConfig e, int h, int episodes) : env(e), history(h) {
    auto trajs = demos::collect(env, {episodes, 0.0, 0.5, kCollectSeed});
    with_history.emplace(env, trajs, history, demos::Boundary::repeat_first, 0);
    single.emplace(env, std::move(trajs), 0, demos::Boundary::repeat_first, 0);
  }

  const demos::DemoDataset& data_for(MethodKind k) const { return k == MethodKind::bcso ? *single : *with_history; }

  methods::MethodConfig config(MethodKind k, std::uint64_t seed) const {
    auto c = methods::MethodConfig::defaults_for(env, k);
    c.kind = k;
    c.history = k == MethodKind::bcso ? 0 : history;
    c.iterations = kIterations;
    c.seed = seed;
    return c;
  }

  const std::vector<Run>& train(MethodKind k, int seeds, bool analyze) {
    auto& out = runs[k];
    while (static_cast<int>(out.size()) < seeds) {
      const auto s = static_cast<std::uint64_t>(out.size());
      Run r;
      r.result = methods::train(data_for(k), config(k, s));
      r.eval = analysis::evaluate(r.result.policy, env, {kEvalEpisodes, {kEvalSeedBase + s}, 1}).per_seed.at(0);
      if (analyze && k != MethodKind::bcso) {
        r.change = analysis::intervene_history(r.result.policy, data_for(k)).rate();
        const auto& pol = r.result.policy;
        r.probe_mse =
            analysis::mi_probe([&](const Matrix& w) { return pol.features(w); }, data_for(k), analysis::ProbeConfig{})
                .mean_val_mse();
      }
      out.push_back(std::move(r));
    }
    return out;
  }

  template <typename F>
  double mean(MethodKind k, F get) const {
    double s = 0.0;
    for (const auto& r : runs.at(k)) s += get(r);
    return s / static_cast<double>(runs.at(k).size());
  }
};

Protocol& brake_town() {
  static Protocol p(envs::EnvConfig{}, kBrakeTownHistory, kBrakeTownEpisodes);
  return p;
}

double brake_town_cpu = 0.0;

void train_brake_town_core() {
  static bool done = false;
  if (done) return;
  const double t0 = cpu_seconds();
  auto& p = brake_town();
  for (auto k : {MethodKind::bcso, MethodKind::bcoh, MethodKind::ours}) p.train(k, kTrainSeeds, true);
  brake_town_cpu = cpu_seconds() - t0;
  done = true;
}

double success(const Run& r) { return r.eval.success; }
double timeout(const Run& r) { return r.eval.timeout; }

// C3
Verdict copycat_change_rate() {
  train_brake_town_core();
  const auto& p = brake_town();
  const double bcoh = p.mean(MethodKind::bcoh, [](const Run& r) { return r.change; });
  const double ours = p.mean(MethodKind::ours, [](const Run& r) { return r.change; });
  return {bcoh >= kChangeRatio * ours && brake_town_cpu <= kBrakeTownCpuSeconds,
          fmt("change rate BCOH %.2f%% vs OURS %.2f%% (need ratio >= %.1f, got %.2f); protocol CPU %.0f s", 100 * bcoh,
              100 * ours, kChangeRatio, ours > 0 ? bcoh / ours : INFINITY, brake_town_cpu)};
}

// C4
Verdict probe_ordering() {
  train_brake_town_core();
  const auto& p = brake_town();
  int wins = 0;
  std::string per_seed;
  for (int s = 0; s < kTrainSeeds; ++s) {
    const double o = p.runs.at(MethodKind::ours)[s].probe_mse;
    const double b = p.runs.at(MethodKind::bcoh)[s].probe_mse;
    wins += o > b;
    per_seed += fmt(" s%d %.2e>%.2e%s", s, o, b, o > b ? "" : "(no)");
  }
  return {wins >= kProbeSeedsNeeded, fmt("OURS probe MSE above BCOH in %d/%d seeds:%s", wins, kTrainSeeds,
                                         per_seed.c_str())};
}

// C5
Verdict performance_ordering() {
  train_brake_town_core();
  const auto& p = brake_town();
  const double so = p.mean(MethodKind::bcso, success);
  const double oh = p.mean(MethodKind::bcoh, success);
  const double ou = p.mean(MethodKind::ours, success);
  const double t_oh = p.mean(MethodKind::bcoh, timeout);
  const double t_ou = p.mean(MethodKind::ours, timeout);
  return {ou > oh && oh > so && t_ou < t_oh,
          fmt("#SUCCESS OURS %.2f > BCOH %.2f > BCSO %.2f; #TIMEOUT OURS %.2f < BCOH %.2f", ou, oh, so, t_ou, t_oh)};
}

// C6
Verdict ablations() {
  train_brake_town_core();
  auto& p = brake_town();
  for (auto k : {MethodKind::memory_only_residual, MethodKind::memory_only_learned, MethodKind::ours_no_stopgrad}) {
    p.train(k, kTrainSeeds, false);
  }
  const double so = p.mean(MethodKind::bcso, success);
  const double ou = p.mean(MethodKind::ours, success);
  const double res = p.mean(MethodKind::memory_only_residual, success);
  const double learned = p.mean(MethodKind::memory_only_learned, success);
  const double open = p.mean(MethodKind::ours_no_stopgrad, success);

  auto mb_cfg = p.config(MethodKind::ours_multibranch, 0);
  mb_cfg.branches = 1;
  const auto mb = methods::train(p.data_for(MethodKind::ours_multibranch), mb_cfg);
  const auto& ours0 = p.runs.at(MethodKind::ours)[0].result;
  std::vector<std::string> nets;
  for (const auto& [name, net] : ours0.policy.nets) nets.push_back(name);
  const bool bit_exact = same_trace(ours0, mb, nets);

  return {res < so && learned < so && open <= ou && bit_exact,
          fmt("memory-only residual %.2f, learned %.2f < BCSO %.2f; no-stopgrad %.2f <= OURS %.2f; "
              "multibranch m=1 %s",
              res, learned, so, open, ou, bit_exact ? "bit-exact" : "DIFFERS")};
}

// C7
Verdict hidden_velocity_ordering() {
  envs::EnvConfig env;
  env.kind = envs::EnvKind::hidden_velocity;
  Protocol p(env, kHvHistory, kHvEpisodes);
  for (auto k : {MethodKind::bcso, MethodKind::bcoh, MethodKind::ours}) p.train(k, kHvSeeds, false);
  auto ret = [](const Run& r) { return r.eval.mean_return; };
  const double so = p.mean(MethodKind::bcso, ret);
  const double oh = p.mean(MethodKind::bcoh, ret);
  const double ou = p.mean(MethodKind::ours, ret);
  return {ou > oh && oh > so,
          fmt("mean return OURS %.3f %s BCOH %.3f %s BCSO %.3f over %d seeds", ou, ou > oh ? ">" : "<=", oh,
              oh > so ? ">" : "<=", so, kHvSeeds)};
}

// C8
Verdict dataset_integrity() {
  const auto& ds = *brake_town().with_history;
  std::size_t bad = 0;
  for (std::size_t i = 0; i < ds.samples().size(); ++i) {
    const auto s = ds.samples()[i];
    const auto& recs = ds.trajectories()[s.trajectory].records;
    const Eigen::VectorXd expected = recs[s.t].action - recs[s.t - 1].action;
    bad += !same_bits(Matrix(ds.residuals({&i, 1}).transpose()), Matrix(expected));
  }
  const double bucket0 = demos::residual_stats(ds).fractions[0];
  std::vector<std::uint64_t> seeds(kExpertSeeds);
  for (int i = 0; i < kExpertSeeds; ++i) seeds[i] = static_cast<std::uint64_t>(i);
  const auto ex = analysis::evaluate_expert(brake_town().env, {1, seeds, 1});
  int expert = 0;
  for (const auto& s : ex.per_seed) expert += s.success;
  return {bad == 0 && bucket0 >= kBucket0Min && expert == kExpertSeeds,
          fmt("residual identity mismatches %zu/%zu; first bucket %.1f%% (need >= %.0f%%); expert %d/%d", bad,
              ds.samples().size(), 100 * bucket0, 100 * kBucket0Min, expert, kExpertSeeds)};
}

// C9
std::map<std::string, std::string> csv_files(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().extension() != ".csv") continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    out[fs::relative(e.path(), root).string()] = ss.str();
  }
  return out;
}

Verdict repro_determinism() {
  const auto root = fs::temp_directory_path() / "copycat_acceptance_repro";
  fs::remove_all(root);
  std::vector<double> secs;
  for (const char* run : {"a", "b"}) {
    Stopwatch sw;
    const std::string cmd = std::string(COPYCAT_CLI_PATH) + " repro --quick --seed 0 --workers 1 --out " +
                            (root / run).string() + " > /dev/null 2>&1";
    if (std::system(cmd.c_str()) != 0) return {false, "repro --quick exited nonzero"};
    secs.push_back(sw.seconds());
  }
  const auto a = csv_files(root / "a");
  const auto b = csv_files(root / "b");
  std::size_t differ = 0;
  for (const auto& [name, bytes] : a) differ += !b.count(name) || b.at(name) != bytes;
  differ += b.size() > a.size() ? b.size() - a.size() : 0;
  return {!a.empty() && differ == 0, fmt("%zu CSV files, %zu differ; runs took %.1f s and %.1f s", a.size(), differ,
                                         secs[0], secs[1])};
}

// C10
Verdict baseline_collapse() {
  train_brake_town_core();
  auto& p = brake_town();
  const auto& ref = p.runs.at(MethodKind::bcoh)[0].result;
  const std::vector<std::string> nets{"encoder", "action_head"};
  std::string detail;
  bool all = true;
  auto run = [&](MethodKind k, auto tweak, const char* label) {
    auto c = p.config(k, 0);
    tweak(c);
    const bool same = same_trace(ref, methods::train(p.data_for(k), c), nets);
    all = all && same;
    detail += fmt("%s%s %s", detail.empty() ? "" : "; ", label, same ? "identical" : "DIFFERS");
  };
  run(MethodKind::keyframe, [](methods::MethodConfig& c) { c.keyframe_kappa = 0.0; }, "keyframe(kappa=0)");
  run(MethodKind::fca, [](methods::MethodConfig& c) { c.fca_lambda = 0.0; }, "fca(lambda=0)");
  run(MethodKind::hd, [](methods::MethodConfig& c) { c.hd_dropout = 0.0; }, "hd(p=0)");
  return {all, detail + fmt(" vs BCOH over %d iterations", kIterations)};
}

struct Criterion {
  int id;
  const char* name;
  Verdict (*run)();
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "bound fuzz", bound_fuzz},
      {2, "autodiff finite differences", autodiff_fd},
      {3, "copycat change rate", copycat_change_rate},
      {4, "previous-action probe", probe_ordering},
      {5, "BrakeTown performance ordering", performance_ordering},
      {6, "ablation orderings", ablations},
      {7, "HiddenVelocity return ordering", hidden_velocity_ordering},
      {8, "dataset integrity", dataset_integrity},
      {9, "repro determinism", repro_determinism},
      {10, "baseline collapse equivalences", baseline_collapse},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  C" << c.id << " " << c.name << ": " << v.detail << std::endl;
  }
  return failed;
}
