#include "copycat/methods.hpp"

#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <random>

using namespace copycat;
using methods::MethodConfig;
using methods::MethodKind;

namespace {

const demos::DemoDataset& dataset() {
  static const demos::DemoDataset d = [] {
    envs::EnvConfig env;
    return demos::DemoDataset(env, demos::collect(env, {30, 0.0, 0.5, 1}), 3);
  }();
  return d;
}

MethodConfig quick(MethodKind kind, int iterations = 120) {
  auto c = MethodConfig::defaults_for(dataset().env_config(), kind);
  c.kind = kind;
  c.history = 3;
  c.hidden = 16;
  c.memory_dim = 8;
  c.iterations = iterations;
  c.batch_size = 32;
  c.eval_every = 40;
  c.seed = 5;
  return c;
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

bool same_bits(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

bool same_net(const nn::Mlp& a, const nn::Mlp& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (!same_bits(a.layers[i].weight, b.layers[i].weight) || !same_bits(a.layers[i].bias, b.layers[i].bias)) {
      return false;
    }
  }
  return true;
}

// Loss, learning rate and validation trace, plus every net the reference has.
void check_same_trace(const methods::TrainResult& ref, const methods::TrainResult& other,
                      const std::vector<std::string>& nets) {
  REQUIRE(ref.report.records.size() == other.report.records.size());
  for (std::size_t i = 0; i < ref.report.records.size(); ++i) {
    const auto& a = ref.report.records[i];
    const auto& b = other.report.records[i];
    INFO("iteration " << i);
    CHECK(same_bits(a.train_loss, b.train_loss));
    CHECK(same_bits(a.learning_rate, b.learning_rate));
    CHECK(same_bits(a.val_loss, b.val_loss));
  }
  for (const auto& n : nets) {
    INFO("net " << n);
    CHECK(same_net(ref.policy.nets.at(n), other.policy.nets.at(n)));
  }
}

}  // namespace

TEST_CASE("method names round-trip") {
  for (auto k : methods::all_methods()) CHECK(methods::parse_method(methods::method_name(k)) == k);
  CHECK_THROWS_AS(methods::parse_method("nope"), methods::MethodError);
  CHECK(methods::is_two_stream(MethodKind::ours));
  CHECK_FALSE(methods::is_two_stream(MethodKind::bcoh));
}

TEST_CASE("config validation and JSON round-trip") {
  auto c = quick(MethodKind::ours);
  const auto back = methods::method_config_from_json(methods::to_json(c));
  CHECK(methods::to_json(back) == methods::to_json(c));
  CHECK(methods::config_hash(back) == methods::config_hash(c));
  c.branches = 2;
  CHECK_THROWS_AS(c.validate(), methods::MethodError);
  c = quick(MethodKind::hd);
  c.hd_dropout = 1.5;
  CHECK_THROWS_AS(c.validate(), methods::MethodError);
  c = quick(MethodKind::bcoh);
  c.history = 2;
  CHECK_THROWS_AS(methods::train(dataset(), c), methods::MethodError);
}

TEST_CASE("training is reproducible under a shared seed") {
  const auto a = methods::train(dataset(), quick(MethodKind::bcoh));
  const auto b = methods::train(dataset(), quick(MethodKind::bcoh));
  check_same_trace(a, b, {"encoder", "action_head"});
  auto other = quick(MethodKind::bcoh);
  other.seed = 6;
  const auto c = methods::train(dataset(), other);
  CHECK_FALSE(same_net(a.policy.nets.at("encoder"), c.policy.nets.at("encoder")));
}

TEST_CASE("baselines collapse to BCOH at their neutral setting") {
  const auto ref = methods::train(dataset(), quick(MethodKind::bcoh));
  const std::vector<std::string> nets{"encoder", "action_head"};

  SUBCASE("keyframe with kappa = 0") {
    auto c = quick(MethodKind::keyframe);
    c.keyframe_kappa = 0.0;
    check_same_trace(ref, methods::train(dataset(), c), nets);
  }
  SUBCASE("fca with lambda = 0") {
    auto c = quick(MethodKind::fca);
    c.fca_lambda = 0.0;
    check_same_trace(ref, methods::train(dataset(), c), nets);
  }
  SUBCASE("hd with p = 0") {
    auto c = quick(MethodKind::hd);
    c.hd_dropout = 0.0;
    check_same_trace(ref, methods::train(dataset(), c), nets);
  }
}

TEST_CASE("multibranch with one branch reproduces ours bit-exactly") {
  const auto ours = methods::train(dataset(), quick(MethodKind::ours));
  auto c = quick(MethodKind::ours_multibranch);
  c.branches = 1;
  const auto mb = methods::train(dataset(), c);
  std::vector<std::string> nets;
  for (const auto& [name, net] : ours.policy.nets) nets.push_back(name);
  check_same_trace(ours, mb, nets);
}

TEST_CASE("stop-gradient keeps the memory stream out of the policy loss") {
  // The residual-only variant trains the same memory stream alone; with the
  // learning rate fixed, the memory nets of ours must match it bit for bit.
  auto c_ours = quick(MethodKind::ours);
  auto c_mem = quick(MethodKind::memory_only_residual);
  for (auto* c : {&c_ours, &c_mem}) c->lr_decay_threshold = 1'000'000;
  const auto ours = methods::train(dataset(), c_ours);
  const auto mem = methods::train(dataset(), c_mem);
  CHECK(same_net(ours.policy.nets.at("memory"), mem.policy.nets.at("memory")));
  CHECK(same_net(ours.policy.nets.at("residual_head"), mem.policy.nets.at("residual_head")));

  auto c_open = quick(MethodKind::ours_no_stopgrad);
  c_open.lr_decay_threshold = 1'000'000;
  const auto open = methods::train(dataset(), c_open);
  CHECK_FALSE(same_net(ours.policy.nets.at("memory"), open.policy.nets.at("memory")));
}

TEST_CASE("every method trains and acts inside the action bounds") {
  for (auto k : methods::all_methods()) {
    INFO(methods::method_name(k));
    auto c = quick(k, 40);
    if (k == MethodKind::bcso) c.history = 0;
    if (k == MethodKind::dagger) {
      c.dagger_rounds = 1;
      c.dagger_episodes = 2;
      c.dagger_round_iterations = 20;
    }
    const demos::DemoDataset d0(dataset().env_config(), dataset().trajectories(), 0);
    const auto& ds = k == MethodKind::bcso ? d0 : dataset();
    const auto r = methods::train(ds, c);
    CHECK(std::isfinite(r.report.final_val_loss()));
    std::vector<std::size_t> idx(ds.val_indices().begin(), ds.val_indices().begin() + 10);
    const Eigen::MatrixXd w = ds.windows(idx);
    const Eigen::MatrixXd prev = ds.lagged_actions(idx, 1);
    const Eigen::MatrixXd a = r.policy.act(w, &prev);
    CHECK(a.rows() == 10);
    CHECK(a.cwiseAbs().maxCoeff() <= 1.0);
  }
}

TEST_CASE("policy save/load round-trip") {
  const auto r = methods::train(dataset(), quick(MethodKind::ours, 40));
  const auto path = std::filesystem::temp_directory_path() / "copycat_test_policy.params";
  r.policy.save(path, 5);
  const auto back = methods::TrainedPolicy::load(path);
  CHECK(back.kind == MethodKind::ours);
  CHECK(back.history == 3);
  const auto& ds = dataset();
  std::vector<std::size_t> idx(ds.val_indices().begin(), ds.val_indices().begin() + 20);
  const auto w = ds.windows(idx);
  CHECK(same_bits(back.act(w), r.policy.act(w)));
  CHECK(same_bits(back.features(w), r.policy.features(w)));
}

TEST_CASE("whitener: identity when disabled, decorrelates when enabled") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd x(500, 3);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double a = normal(rng), b = normal(rng), c = normal(rng);
    x.row(i) << 2.0 * a + 1.0, a + 0.5 * b - 3.0, 0.1 * c;
  }
  const auto id = methods::fit_whitener(x, 1e-9, false);
  CHECK(same_bits(nn::mlp_apply(id, x), x));
  const auto w = methods::fit_whitener(x, 1e-9, true);
  const Eigen::MatrixXd y = nn::mlp_apply(w, x);
  const Eigen::RowVectorXd mean = y.colwise().mean();
  const Eigen::MatrixXd centered = y.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / double(y.rows());
  CHECK(mean.cwiseAbs().maxCoeff() < 1e-9);
  CHECK((cov - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-6);
  // ZCA is the symmetric choice: the transform matrix equals its transpose.
  const auto& W = w.layers[0].weight;
  CHECK((W - W.transpose()).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("keyframe weights have mean 1 over the train split") {
  const auto& ds = dataset();
  const auto w = methods::keyframe_weights(ds, 10.0);
  double sum = 0.0;
  for (std::size_t i : ds.train_indices()) sum += w(static_cast<Eigen::Index>(i));
  CHECK(sum / ds.train_indices().size() == doctest::Approx(1.0).epsilon(1e-12));
  const auto flat = methods::keyframe_weights(ds, 0.0);
  for (std::size_t i : ds.train_indices()) CHECK(flat(static_cast<Eigen::Index>(i)) == 1.0);
}

TEST_CASE("policy runner keeps its own newest-first history") {
  const auto r = methods::train(dataset(), quick(MethodKind::bcoh, 20));
  methods::PolicyRunner runner(r.policy);
  const auto& tr = dataset().trajectories()[0];
  for (std::size_t t = 0; t < 6; ++t) {
    runner.act(tr.records[t].observation);
    const Eigen::VectorXd expected = demos::stack_history(tr, t, 3, demos::Boundary::repeat_first);
    CHECK(same_bits(runner.window(), expected));
  }
}
