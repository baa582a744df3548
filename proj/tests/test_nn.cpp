#include "copycat/nn.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace copycat;
using nn::Matrix;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "copycat_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("init_mlp shapes and determinism") {
  const nn::MlpSpec spec{{4, 8, 2}};
  const nn::Mlp a = nn::init_mlp(spec, 17);
  const nn::Mlp b = nn::init_mlp(spec, 17);
  CHECK(a == b);
  REQUIRE(a.layers.size() == 2);
  CHECK(a.layers[0].weight.rows() == 4);
  CHECK(a.layers[0].weight.cols() == 8);
  CHECK(a.layers[1].weight.rows() == 8);
  CHECK(a.layers[1].weight.cols() == 2);
  CHECK(a.layers[0].bias.size() == 8);
  CHECK(a.layers[1].bias.size() == 2);
  CHECK(a.layers[0].bias.isZero(0.0));
  CHECK_FALSE(a == nn::init_mlp(spec, 18));
  CHECK(a.parameter_count() == 4 * 8 + 8 + 8 * 2 + 2);
}

TEST_CASE("init_mlp weights are uniform within the fan-in bound") {
  // 10^4 weights from one 100x100 layer.
  const nn::Mlp m = nn::init_mlp({{100, 100}}, 5);
  const Matrix& w = m.layers[0].weight;
  const double bound = std::sqrt(1.0 / 100.0);
  const double sigma = bound / std::sqrt(3.0);
  CHECK(w.cwiseAbs().maxCoeff() <= bound);
  CHECK(std::abs(w.mean()) < 3.0 * sigma / 100.0);
  // Variance of U(-B, B) is B^2/3.
  const double var = (w.array() - w.mean()).square().mean();
  CHECK(var == doctest::Approx(sigma * sigma).epsilon(0.05));
}

TEST_CASE("MlpSpec validation") {
  CHECK_THROWS(nn::init_mlp({{4}}, 0));
  CHECK_THROWS(nn::init_mlp({{4, 0, 2}}, 0));
}

TEST_CASE("mlp_forward examples") {
  SUBCASE("zero single layer gives zero output") {
    nn::Mlp m = nn::init_mlp({{3, 2}}, 1);
    m.layers[0].weight.setZero();
    CHECK(nn::mlp_apply(m, Matrix::Zero(4, 3)).isZero(0.0));
  }
  SUBCASE("identity layer passes the input through") {
    nn::Mlp m = nn::init_mlp({{3, 3}}, 1);
    m.layers[0].weight.setIdentity();
    Matrix x(2, 3);
    x << 1, -2, 3, 0.5, 0.25, -4;
    CHECK(nn::mlp_apply(m, x) == x);
  }
  SUBCASE("hand-computed two-layer net") {
    nn::Mlp m = nn::init_mlp({{2, 2, 1}, nn::Activation::relu, nn::OutputActivation::identity}, 1);
    m.layers[0].weight << 1, -1, 2, 1;  // columns are hidden units
    m.layers[0].bias << 0, 0.5;
    m.layers[1].weight << 3, -2;
    m.layers[1].bias << 1;
    Matrix x(1, 2);
    x << 1, 2;
    // hidden = relu([1*1 + 2*2, -1*1 + 1*2 + 0.5]) = [5, 1.5]; out = 15 - 3 + 1
    CHECK(nn::mlp_apply(m, x)(0, 0) == 13.0);
    ad::Tape t;
    auto vars = nn::bind(t, m);
    auto trace = nn::mlp_forward(t, m, vars, t.leaf(x));
    CHECK(t.value(trace.output)(0, 0) == 13.0);
    REQUIRE(trace.hidden.size() == 1);
    CHECK(t.value(trace.hidden[0])(0, 0) == 5.0);
  }
  SUBCASE("input width mismatch") {
    const nn::Mlp m = nn::init_mlp({{3, 2}}, 1);
    CHECK_THROWS_AS(nn::mlp_apply(m, Matrix::Zero(1, 4)), ad::ShapeError);
  }
  SUBCASE("tape and tape-free forward agree") {
    const nn::Mlp m = nn::init_mlp({{5, 16, 16, 3}, nn::Activation::tanh, nn::OutputActivation::tanh}, 4);
    std::mt19937_64 rng(1);
    Matrix x(7, 5);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = nn::uniform01(rng) - 0.5;
    ad::Tape t;
    auto vars = nn::bind(t, m);
    CHECK(t.value(nn::mlp_forward(t, m, vars, t.leaf(x)).output) == nn::mlp_apply(m, x));
  }
}

TEST_CASE("adam first step moves each coordinate by about -lr") {
  nn::Mlp m = nn::init_mlp({{3, 2}}, 2);
  const nn::Mlp before = m;
  auto params = m.parameters();
  nn::AdamConfig cfg;
  cfg.learning_rate = 0.01;
  auto state = nn::make_adam(cfg, params);
  std::vector<Matrix> grads;
  for (auto* p : params) grads.push_back(Matrix::Ones(p->rows(), p->cols()));
  nn::adam_step(state, params, grads);
  CHECK(state.t == 1);
  const double expected = -0.01 * 1.0 / (1.0 + 1e-8);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Matrix delta = *params[k] - *before.parameters()[k];
    CHECK(delta.maxCoeff() == doctest::Approx(expected).epsilon(1e-12));
    CHECK(delta.minCoeff() == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("adam defaults and zero gradients") {
  const nn::AdamConfig cfg;
  CHECK(cfg.beta1 == 0.9);
  CHECK(cfg.beta2 == 0.999);
  CHECK(cfg.eps == 1e-8);
  CHECK(cfg.weight_decay == 0.0);

  nn::Mlp m = nn::init_mlp({{3, 4, 2}}, 7);
  const nn::Mlp before = m;
  auto params = m.parameters();
  auto state = nn::make_adam(cfg, params);
  std::vector<Matrix> zeros;
  for (auto* p : params) zeros.push_back(Matrix::Zero(p->rows(), p->cols()));
  for (int i = 0; i < 50; ++i) nn::adam_step(state, params, zeros);
  CHECK(m == before);
}

TEST_CASE("adam rejects non-finite gradients without touching parameters") {
  nn::Mlp m = nn::init_mlp({{2, 2}}, 1);
  const nn::Mlp before = m;
  auto params = m.parameters();
  auto state = nn::make_adam({}, params);
  std::vector<Matrix> grads{Matrix::Ones(2, 2), Matrix::Ones(1, 2)};
  grads[1](0, 1) = std::nan("");
  const std::vector<std::string> names{"enc.W0", "enc.b0"};
  try {
    nn::adam_step(state, params, grads, names);
    FAIL("expected NonFiniteGradient");
  } catch (const nn::NonFiniteGradient& e) {
    CHECK(std::string(e.what()).find("enc.b0") != std::string::npos);
  }
  CHECK(m == before);
  CHECK(state.t == 0);
}

TEST_CASE("adam replays identically") {
  auto run = [] {
    nn::Mlp m = nn::init_mlp({{3, 4, 1}}, 3);
    auto params = m.parameters();
    auto state = nn::make_adam({1e-3, 0.9, 0.999, 1e-8, 0.01}, params);
    std::mt19937_64 rng(8);
    for (int i = 0; i < 20; ++i) {
      std::vector<Matrix> g;
      for (auto* p : params) {
        Matrix r(p->rows(), p->cols());
        for (Eigen::Index k = 0; k < r.size(); ++k) r.data()[k] = nn::uniform01(rng) - 0.5;
        g.push_back(r);
      }
      nn::adam_step(state, params, g);
    }
    return m;
  };
  CHECK(run() == run());
}

TEST_CASE("lr schedule examples") {
  nn::LrScheduleConfig cfg{2e-4, 3, 0.1, 1e-7};
  SUBCASE("no stall keeps the initial rate") {
    std::vector<double> losses{1.0, 0.9, 0.8, 0.7, 0.6, 0.5};
    for (double lr : nn::lr_schedule(losses, cfg)) CHECK(lr == 2e-4);
  }
  SUBCASE("one stall decays by the rate") {
    std::vector<double> losses{1.0, 1.0, 1.0, 1.0};
    const auto lrs = nn::lr_schedule(losses, cfg);
    CHECK(lrs[2] == 2e-4);
    CHECK(lrs[3] == doctest::Approx(2e-5).epsilon(1e-12));
  }
  SUBCASE("repeated stalls clamp at the floor") {
    std::vector<double> losses(200, 1.0);
    const auto lrs = nn::lr_schedule(losses, cfg);
    CHECK(lrs.back() == 1e-7);
  }
}

TEST_CASE("lr sequence is non-increasing and floored for random loss histories") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    nn::LrScheduleConfig cfg{1e-3, 1 + static_cast<std::int64_t>(rng() % 5), 0.1 + 0.8 * nn::uniform01(rng), 1e-6};
    std::vector<double> losses(100);
    for (auto& l : losses) l = nn::uniform01(rng);
    const auto lrs = nn::lr_schedule(losses, cfg);
    double prev = cfg.initial_lr;
    for (double lr : lrs) {
      CHECK(lr <= prev);
      CHECK(lr >= cfg.lower_bound);
      prev = lr;
    }
  }
}

TEST_CASE("parameter files round-trip bit-exactly") {
  nn::ParamFile f;
  f.seed = 99;
  f.nets["encoder"] = nn::init_mlp({{6, 5, 4}, nn::Activation::tanh, nn::OutputActivation::relu}, 1);
  f.nets["head"] = nn::init_mlp({{4, 1}}, 2);
  f.nets["head"].layers[0].weight(0, 0) = 1.0 / 3.0;
  f.metadata["method"] = "ours";
  const auto path = temp_path("roundtrip.params");
  nn::save_params(path, f);
  const auto g = nn::load_params(path);
  CHECK(g.seed == 99);
  CHECK(g.metadata == f.metadata);
  REQUIRE(g.nets.size() == 2);
  CHECK(g.nets.at("encoder") == f.nets.at("encoder"));
  CHECK(g.nets.at("head") == f.nets.at("head"));
  CHECK(g.nets.at("encoder").spec == f.nets.at("encoder").spec);
}

TEST_CASE("corrupted or mismatched parameter files are rejected") {
  nn::ParamFile f;
  f.nets["net"] = nn::init_mlp({{3, 4, 2}}, 1);
  const auto path = temp_path("corrupt.params");
  nn::save_params(path, f);

  SUBCASE("truncated") {
    std::string text;
    {
      std::ifstream in(path, std::ios::binary);
      text.assign(std::istreambuf_iterator<char>(in), {});
    }
    std::ofstream(path, std::ios::binary) << text.substr(0, text.size() / 2);
    CHECK_THROWS_AS(nn::load_params(path), nn::FormatError);
  }
  SUBCASE("spec mismatch names the layer") {
    try {
      nn::load_params(path, {{"net", nn::MlpSpec{{3, 5, 2}}}});
      FAIL("expected FormatError");
    } catch (const nn::FormatError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("net") != std::string::npos);
      CHECK(msg.find("layer 0") != std::string::npos);
    }
  }
  SUBCASE("missing net") { CHECK_THROWS_AS(nn::load_params(path, {{"other", nn::MlpSpec{{3, 2}}}}), nn::FormatError); }
}

TEST_CASE("2-layer MLP fits y = 2x + 1") {
  std::mt19937_64 rng(3);
  Matrix x(100, 1), y(100, 1);
  for (int i = 0; i < 100; ++i) {
    x(i, 0) = 2.0 * nn::uniform01(rng) - 1.0;
    y(i, 0) = 2.0 * x(i, 0) + 1.0;
  }
  nn::Mlp m = nn::init_mlp({{1, 16, 1}, nn::Activation::tanh}, 4);
  auto params = m.parameters();
  auto state = nn::make_adam({1e-2, 0.9, 0.999, 1e-8, 0.0}, params);
  for (int it = 0; it < 2000; ++it) {
    ad::Tape t;
    auto vars = nn::bind(t, m);
    auto loss = ad::l2_loss(t, nn::mlp_forward(t, m, vars, t.leaf(x)).output, t.leaf(y));
    t.backward(loss);
    nn::adam_step(state, params, nn::gradients(t, vars));
  }
  const double mse = (nn::mlp_apply(m, x) - y).squaredNorm() / 100.0;
  CHECK(mse < 1e-3);
}

TEST_CASE("derive_seed separates labels and masters") {
  CHECK(nn::derive_seed(1, "a") == nn::derive_seed(1, "a"));
  CHECK(nn::derive_seed(1, "a") != nn::derive_seed(1, "b"));
  CHECK(nn::derive_seed(1, "a") != nn::derive_seed(2, "a"));
}
