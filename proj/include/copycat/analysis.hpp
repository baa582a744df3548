#pragma once

// Closed-loop evaluation, the counterfactual-history intervention, the
// previous-action probe, and CSV/SVG reporting over a run directory.

#include "copycat/demos.hpp"
#include "copycat/envs.hpp"
#include "copycat/methods.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace copycat::analysis {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class AnalysisError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Evaluation

struct EpisodeLog {
  std::uint64_t eval_seed = 0;
  int index = 0;
  std::uint64_t episode_seed = 0;
  envs::EpisodeOutcome outcome;
};

struct SeedCounts {
  std::uint64_t seed = 0;
  int success = 0;
  int collision = 0;
  int timeout = 0;
  double mean_return = 0.0;
  int total() const { return success + collision + timeout; }
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample std; NaN with a single seed
  int n = 0;
};

MeanStd mean_std(const std::vector<double>& xs);
/// "12.3±4.5", or "12.3±n/a" for a single value.
std::string format_mean_std(const MeanStd& m, int precision = 1);

struct EvalSummary {
  std::string method;
  std::string condition;
  int episodes_per_seed = 0;
  std::vector<SeedCounts> per_seed;
  std::vector<EpisodeLog> episodes;

  MeanStd success() const;
  MeanStd collision() const;
  MeanStd timeout() const;
  MeanStd mean_return() const;
};

/// Concatenates per-seed rows (e.g. one summary per training seed).
EvalSummary merge(const std::vector<EvalSummary>& parts);

struct EvalOptions {
  int episodes = 50;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int workers = 1;
  demos::Boundary boundary = demos::Boundary::repeat_first;
};

/// Per-episode controller: called with the live episode, returns the action.
using Controller = std::function<Vector(envs::Episode&)>;
using ControllerFactory = std::function<Controller()>;

EvalSummary evaluate(const ControllerFactory& factory, const envs::EnvConfig& env,
                     const EvalOptions& options);
EvalSummary evaluate(const methods::TrainedPolicy& policy, const envs::EnvConfig& env,
                     const EvalOptions& options);
EvalSummary evaluate_expert(const envs::EnvConfig& env, const EvalOptions& options);

/// Episode seed for (eval seed, episode index); shared by every method.
std::uint64_t eval_episode_seed(std::uint64_t eval_seed, int index);

// ---------------------------------------------------------------------------
// Counterfactual history intervention

struct InterventionOptions {
  double a_eps = 0.05;
  double v_eps = 1e-3;
};

struct InterventionReport {
  std::size_t eligible = 0;
  std::size_t stopped = 0;
  double rate() const { return eligible == 0 ? 0.0 : static_cast<double>(stopped) / static_cast<double>(eligible); }
};

InterventionReport intervention_from_counts(std::size_t eligible, std::size_t stopped);

/// Replaces every past frame by o_t (rows of newest-first windows).
Matrix repeat_current(const Matrix& windows, int obs_dim);

/// Over val samples with v > v_eps and pi(o~_t) > a_eps, the fraction with
/// pi(do(o~_t)) <= a_eps.
InterventionReport intervene_history(const methods::TrainedPolicy& policy, const demos::DemoDataset& dataset,
                                     const InterventionOptions& options = {});

// ---------------------------------------------------------------------------
// Previous-action probe

struct ProbeConfig {
  int hidden = 32;
  int iterations = 1500;
  int batch_size = 128;
  double learning_rate = 3e-3;
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

struct ProbeReport {
  std::vector<double> train_mse;  // per probe seed
  std::vector<double> val_mse;
  double mean_val_mse() const;
  double mean_train_mse() const;
};

using Extractor = std::function<Matrix(const Matrix& windows)>;

/// Fits a 2-layer MLP from the (train-standardized) representation to
/// a_{t-1} on the train split and reports MSE on both splits.
ProbeReport mi_probe(const Extractor& extract, const demos::DemoDataset& dataset, const ProbeConfig& config = {});
/// Probe on an explicit feature matrix (rows = dataset samples).
ProbeReport mi_probe(const Matrix& features, const demos::DemoDataset& dataset, const ProbeConfig& config = {});

// ---------------------------------------------------------------------------
// Reporting

/// RFC-4180 field quoting.
std::string csv_field(const std::string& s);
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

void write_line_svg(const std::filesystem::path& path, const std::string& title, const std::vector<Series>& series,
                    bool log_y = false);
void write_bar_svg(const std::filesystem::path& path, const std::string& title,
                   const std::vector<std::string>& labels, const std::vector<double>& values);

// Result files. Every directory written by eval/analyze carries a JSON
// sidecar next to its CSVs; report() reads only the sidecars and train logs.
//
//   <run>/manifest.json            {"command": "train", "method", "seed", ...}
//   <run>/train_log.csv
//   <any>/eval_summary.json        per-seed counts, method, train seed
//   <any>/analysis.json            intervention counts and probe MSEs
//   <any>/residual_stats.json      bucket fractions of the demos

nlohmann::json to_json(const EvalSummary& summary, std::uint64_t train_seed);
/// Writes episodes.csv, summary.csv and eval_summary.json into `dir`.
void write_eval_outputs(const std::filesystem::path& dir, const EvalSummary& summary, std::uint64_t train_seed);

struct AnalysisRecord {
  std::string method;
  std::uint64_t train_seed = 0;
  std::optional<InterventionReport> intervention;
  std::optional<ProbeReport> probe;
};

/// Writes intervention.csv / probe.csv (when present) and analysis.json.
void write_analysis_outputs(const std::filesystem::path& dir, const AnalysisRecord& record);

struct ReportSummary {
  std::size_t runs = 0;
  std::vector<std::string> warnings;
  std::vector<std::filesystem::path> outputs;
};

/// Scans `runs_dir` (the layout written by the CLI) and writes tables and
/// plots into `out_dir`. Missing pieces become warnings, never cells.
ReportSummary report(const std::filesystem::path& runs_dir, const std::filesystem::path& out_dir);

}  // namespace copycat::analysis
