#include "copycat/demos.hpp"

#include "copycat/nn.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>

namespace copycat::demos {

const char* boundary_name(Boundary b) {
  return b == Boundary::repeat_first ? "repeat_first" : "zero_pad";
}

std::vector<Trajectory> collect(const envs::EnvConfig& config, const CollectOptions& options) {
  config.validate();
  std::mt19937_64 noise_rng(nn::derive_seed(options.seed, "collect.noise"));
  std::vector<Trajectory> out;
  out.reserve(options.episodes);
  for (int e = 0; e < options.episodes; ++e) {
    Trajectory traj;
    traj.episode_seed = nn::derive_seed(options.seed, "episode." + std::to_string(e));
    auto episode = envs::make_episode(config, traj.episode_seed);
    while (episode->status() == envs::Status::running) {
      Record r;
      r.t = episode->t();
      r.observation = episode->observation();
      r.hidden_velocity = episode->hidden_velocity();
      r.action = episode->expert_action();
      r.executed_action = r.action;
      // Both draws happen every step so the stream does not depend on p.
      const double coin = nn::uniform01(noise_rng);
      Vector noise(r.action.size());
      for (Eigen::Index i = 0; i < noise.size(); ++i) {
        noise(i) = options.noise_scale * (2.0 * nn::uniform01(noise_rng) - 1.0);
      }
      if (coin < options.noise_prob) {
        r.executed_action = (r.action + noise).cwiseMax(-1.0).cwiseMin(1.0);
      }
      episode->step(r.executed_action);
      traj.records.push_back(std::move(r));
    }
    out.push_back(std::move(traj));
  }
  return out;
}

Vector stack_history(const Trajectory& traj, std::size_t t, int history, Boundary boundary) {
  const auto& recs = traj.records;
  const Eigen::Index d = recs.at(t).observation.size();
  Vector w(d * (history + 1));
  for (int k = 0; k <= history; ++k) {
    const long src = static_cast<long>(t) - k;
    if (src >= 0) {
      w.segment(k * d, d) = recs[src].observation;
    } else if (boundary == Boundary::repeat_first) {
      w.segment(k * d, d) = recs.front().observation;
    } else {
      w.segment(k * d, d).setZero();
    }
  }
  return w;
}

Matrix stack_history(const Trajectory& traj, int history, Boundary boundary) {
  if (traj.records.empty()) return {};
  const Eigen::Index d = traj.records.front().observation.size();
  Matrix m(traj.records.size(), d * (history + 1));
  for (std::size_t t = 0; t < traj.records.size(); ++t) {
    m.row(t) = stack_history(traj, t, history, boundary).transpose();
  }
  return m;
}

// ---------------------------------------------------------------------------

DemoDataset::DemoDataset(envs::EnvConfig config, std::vector<Trajectory> trajectories, int history,
                         Boundary boundary, std::uint64_t split_seed, double train_fraction)
    : config_(std::move(config)),
      trajectories_(std::move(trajectories)),
      history_(history),
      boundary_(boundary),
      split_seed_(split_seed),
      train_fraction_(train_fraction) {
  if (history_ < 0) throw DatasetError("DemoDataset: history must be >= 0");
  build();
}

void DemoDataset::build() {
  obs_dim_ = config_.obs_dim();
  action_dim_ = config_.action_dim();
  velocity_scale_ = config_.kind == envs::EnvKind::brake_town ? config_.brake_town.v_max : 1.0;

  for (const auto& tr : trajectories_) {
    for (std::size_t t = 0; t < tr.records.size(); ++t) {
      const auto& r = tr.records[t];
      if (r.observation.size() != obs_dim_ || r.action.size() != action_dim_) {
        throw DatasetError("DemoDataset: record shape disagrees with env config");
      }
      if (t > 0 && r.t <= tr.records[t - 1].t) {
        throw DatasetError("DemoDataset: record times must be strictly increasing");
      }
    }
  }

  // Episode-level split. Trajectories appended by with_trajectories keep the
  // earlier assignment and go to train.
  if (train_episode_.empty()) {
    std::vector<std::uint32_t> order(trajectories_.size());
    std::iota(order.begin(), order.end(), 0u);
    std::mt19937_64 rng(nn::derive_seed(split_seed_, "split"));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    const auto n_train = static_cast<std::size_t>(
        std::lround(train_fraction_ * static_cast<double>(trajectories_.size())));
    train_episode_.assign(trajectories_.size(), false);
    for (std::size_t i = 0; i < std::min(n_train, order.size()); ++i) train_episode_[order[i]] = true;
  }
  train_episode_.resize(trajectories_.size(), true);

  samples_.clear();
  train_.clear();
  val_.clear();
  for (std::uint32_t e = 0; e < trajectories_.size(); ++e) {
    for (std::uint32_t t = 1; t < trajectories_[e].records.size(); ++t) {
      (train_episode_[e] ? train_ : val_).push_back(samples_.size());
      samples_.push_back({e, t});
    }
  }

  windows_.resize(static_cast<Eigen::Index>(samples_.size()), window_dim());
  residuals_.resize(static_cast<Eigen::Index>(samples_.size()), action_dim_);
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    const auto& tr = trajectories_[samples_[i].trajectory];
    const std::size_t t = samples_[i].t;
    windows_.row(i) = stack_history(tr, t, history_, boundary_).transpose();
    residuals_.row(i) = (tr.records[t].action - tr.records[t - 1].action).transpose();
  }
}

std::vector<std::uint32_t> DemoDataset::train_episodes() const {
  std::vector<std::uint32_t> out;
  for (std::uint32_t e = 0; e < train_episode_.size(); ++e) {
    if (train_episode_[e]) out.push_back(e);
  }
  return out;
}

std::vector<std::uint32_t> DemoDataset::val_episodes() const {
  std::vector<std::uint32_t> out;
  for (std::uint32_t e = 0; e < train_episode_.size(); ++e) {
    if (!train_episode_[e]) out.push_back(e);
  }
  return out;
}

Matrix DemoDataset::windows(std::span<const std::size_t> idx) const {
  Matrix m(idx.size(), window_dim());
  for (std::size_t i = 0; i < idx.size(); ++i) m.row(i) = windows_.row(idx[i]);
  return m;
}

Matrix DemoDataset::current_observations(std::span<const std::size_t> idx) const {
  Matrix m(idx.size(), obs_dim_);
  for (std::size_t i = 0; i < idx.size(); ++i) m.row(i) = windows_.row(idx[i]).head(obs_dim_);
  return m;
}

Matrix DemoDataset::actions(std::span<const std::size_t> idx) const {
  Matrix m(idx.size(), action_dim_);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& s = samples_[idx[i]];
    m.row(i) = trajectories_[s.trajectory].records[s.t].action.transpose();
  }
  return m;
}

Matrix DemoDataset::lagged_actions(std::span<const std::size_t> idx, int lag) const {
  Matrix m(idx.size(), action_dim_);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& s = samples_[idx[i]];
    const long src = std::max(0L, static_cast<long>(s.t) - lag);
    m.row(i) = trajectories_[s.trajectory].records[src].action.transpose();
  }
  return m;
}

Matrix DemoDataset::residuals(std::span<const std::size_t> idx) const {
  Matrix m(idx.size(), action_dim_);
  for (std::size_t i = 0; i < idx.size(); ++i) m.row(i) = residuals_.row(idx[i]);
  return m;
}

Matrix DemoDataset::velocity_targets(std::span<const std::size_t> idx) const {
  Matrix m(idx.size(), velocity_dim());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& s = samples_[idx[i]];
    m.row(i) = trajectories_[s.trajectory].records[s.t].hidden_velocity.transpose() / velocity_scale_;
  }
  return m;
}

int DemoDataset::velocity_dim() const {
  return config_.kind == envs::EnvKind::brake_town ? 1 : config_.hidden_velocity.dim;
}

Vector DemoDataset::hidden_velocity(std::size_t sample) const {
  hidden_reads_.bump();
  const auto& s = samples_.at(sample);
  return trajectories_[s.trajectory].records[s.t].hidden_velocity;
}

DemoDataset DemoDataset::with_trajectories(std::vector<Trajectory> extra) const {
  DemoDataset out(*this);
  for (auto& t : extra) out.trajectories_.push_back(std::move(t));
  out.build();
  return out;
}

// ---------------------------------------------------------------------------

namespace {

ResidualHistogram bucketize(const std::vector<double>& sq) {
  ResidualHistogram h;
  h.count = sq.size();
  if (sq.empty()) throw DatasetError("residual_stats: empty dataset");
  for (double v : sq) {
    std::size_t b = 0;
    while (b < ResidualHistogram::kEdges.size() && v >= ResidualHistogram::kEdges[b]) ++b;
    h.fractions[b] += 1.0;
  }
  for (double& f : h.fractions) f /= static_cast<double>(sq.size());
  return h;
}

}  // namespace

ResidualHistogram residual_stats(const DemoDataset& dataset) {
  std::vector<double> sq;
  sq.reserve(dataset.samples().size());
  std::vector<std::size_t> all(dataset.samples().size());
  std::iota(all.begin(), all.end(), 0);
  const Matrix r = dataset.residuals(all);
  for (Eigen::Index i = 0; i < r.rows(); ++i) sq.push_back(r.row(i).squaredNorm());
  return bucketize(sq);
}

ResidualHistogram residual_stats(std::span<const Trajectory> trajectories) {
  std::vector<double> sq;
  for (const auto& tr : trajectories) {
    for (std::size_t t = 1; t < tr.records.size(); ++t) {
      sq.push_back((tr.records[t].action - tr.records[t - 1].action).squaredNorm());
    }
  }
  return bucketize(sq);
}

// ---------------------------------------------------------------------------
// Binary persistence

namespace {

constexpr char kMagic[8] = {'C', 'C', 'D', 'E', 'M', 'O', '\0', '\1'};

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <typename T>
  void pod(const T& v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void vec(const Vector& v) {
    os_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  void bytes(const std::string& s) { os_.write(s.data(), static_cast<std::streamsize>(s.size())); }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}
  template <typename T>
  T pod(const char* what) {
    T v{};
    read(reinterpret_cast<char*>(&v), sizeof(T), what);
    return v;
  }
  Vector vec(Eigen::Index n, const char* what) {
    Vector v(n);
    read(reinterpret_cast<char*>(v.data()), n * sizeof(double), what);
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    std::string s(n, '\0');
    read(s.data(), n, what);
    return s;
  }
  std::uint64_t offset() const { return offset_; }

 private:
  void read(char* dst, std::size_t n, const char* what) {
    is_.read(dst, static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(is_.gcount());
    if (got != n) {
      throw DatasetError("load_dataset: truncated file while reading " + std::string(what) +
                         " at byte offset " + std::to_string(offset_ + got));
    }
    offset_ += n;
  }

  std::istream& is_;
  std::uint64_t offset_ = 0;
};

}  // namespace

void save_dataset(const std::filesystem::path& path, const DemoDataset& ds,
                  std::uint64_t collect_seed) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("save_dataset: cannot open " + path.string());
  const nlohmann::json header{{"env", envs::to_json(ds.env_config())},
                              {"env_hash", envs::config_hash(ds.env_config())},
                              {"history", ds.history()},
                              {"boundary", boundary_name(ds.boundary())},
                              {"seed", collect_seed},
                              {"split_seed", ds.split_seed()},
                              {"train_fraction", ds.train_fraction()},
                              {"obs_dim", ds.obs_dim()},
                              {"action_dim", ds.action_dim()},
                              {"trajectories", ds.trajectories().size()}};
  const std::string text = header.dump();
  Writer w(out);
  w.bytes(std::string(kMagic, sizeof(kMagic)));
  w.pod(kDatasetFormatVersion);
  w.pod(static_cast<std::uint64_t>(text.size()));
  w.bytes(text);
  const int vdim = static_cast<int>(ds.trajectories().empty() || ds.trajectories()[0].records.empty()
                                        ? 0
                                        : ds.trajectories()[0].records[0].hidden_velocity.size());
  w.pod(static_cast<std::int32_t>(vdim));
  for (const auto& tr : ds.trajectories()) {
    w.pod(tr.episode_seed);
    w.pod(static_cast<std::uint64_t>(tr.records.size()));
    for (const auto& r : tr.records) {
      w.pod(static_cast<std::int32_t>(r.t));
      w.vec(r.observation);
      w.vec(r.action);
      w.vec(r.executed_action);
      w.vec(r.hidden_velocity);
    }
  }
  if (!out) throw DatasetError("save_dataset: write failed for " + path.string());
}

DemoDataset load_dataset(const std::filesystem::path& path, int expected_history,
                         DatasetFileInfo* info) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("load_dataset: cannot open " + path.string());
  Reader r(in);
  if (r.bytes(sizeof(kMagic), "magic") != std::string(kMagic, sizeof(kMagic))) {
    throw DatasetError("load_dataset: " + path.string() + " is not a dataset file");
  }
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kDatasetFormatVersion) {
    throw DatasetError("load_dataset: unsupported format version " + std::to_string(version));
  }
  const auto header_len = r.pod<std::uint64_t>("header length");
  if (header_len > (1u << 24)) throw DatasetError("load_dataset: implausible header length");
  const std::uint64_t header_offset = r.offset();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(header_len, "header"));
  } catch (const nlohmann::json::parse_error& e) {
    throw DatasetError("load_dataset: header parse error at byte offset " +
                       std::to_string(header_offset + e.byte) + ": " + e.what());
  }

  envs::EnvConfig env;
  int history = 0;
  Boundary boundary = Boundary::repeat_first;
  std::uint64_t n_traj = 0, split_seed = 0, seed = 0, stored_hash = 0;
  double train_fraction = 0.9;
  try {
    env = envs::env_config_from_json(header.at("env"));
    history = header.at("history").get<int>();
    boundary = header.at("boundary").get<std::string>() == "zero_pad" ? Boundary::zero_pad
                                                                      : Boundary::repeat_first;
    n_traj = header.at("trajectories").get<std::uint64_t>();
    split_seed = header.at("split_seed").get<std::uint64_t>();
    train_fraction = header.at("train_fraction").get<double>();
    seed = header.at("seed").get<std::uint64_t>();
    stored_hash = header.at("env_hash").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(std::string("load_dataset: malformed header: ") + e.what());
  }
  if (expected_history >= 0 && history != expected_history) {
    throw DatasetError("load_dataset: file has history H=" + std::to_string(history) +
                       " but H=" + std::to_string(expected_history) + " was requested");
  }
  if (stored_hash != envs::config_hash(env)) {
    std::cerr << "warning: load_dataset: env config hash mismatch in " << path.string()
              << " (file written by a different config serializer)\n";
  }
  if (info) *info = DatasetFileInfo{version, stored_hash, history, seed};

  const int obs_dim = env.obs_dim();
  const int act_dim = env.action_dim();
  const auto vdim = r.pod<std::int32_t>("velocity width");
  std::vector<Trajectory> trajectories;
  trajectories.reserve(n_traj);
  for (std::uint64_t e = 0; e < n_traj; ++e) {
    Trajectory tr;
    tr.episode_seed = r.pod<std::uint64_t>("episode seed");
    const auto n = r.pod<std::uint64_t>("trajectory length");
    if (n > 10'000'000) throw DatasetError("load_dataset: implausible trajectory length");
    tr.records.reserve(n);
    for (std::uint64_t k = 0; k < n; ++k) {
      Record rec;
      rec.t = r.pod<std::int32_t>("record time");
      rec.observation = r.vec(obs_dim, "observation");
      rec.action = r.vec(act_dim, "action");
      rec.executed_action = r.vec(act_dim, "executed action");
      rec.hidden_velocity = r.vec(vdim, "hidden velocity");
      tr.records.push_back(std::move(rec));
    }
    trajectories.push_back(std::move(tr));
  }
  return DemoDataset(env, std::move(trajectories), history, boundary, split_seed, train_fraction);
}

}  // namespace copycat::demos
