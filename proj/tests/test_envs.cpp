#include "copycat/envs.hpp"

#include <doctest.h>

#include <complex>

using namespace copycat;
using envs::EnvConfig;
using envs::EnvKind;
using envs::Status;

namespace {

EnvConfig brake_town(envs::Traffic traffic = envs::Traffic::dense) {
  EnvConfig c;
  c.kind = EnvKind::brake_town;
  c.brake_town.traffic = traffic;
  return c;
}

EnvConfig hidden_velocity() {
  EnvConfig c;
  c.kind = EnvKind::hidden_velocity;
  return c;
}

envs::EpisodeOutcome run_expert(const EnvConfig& c, std::uint64_t seed) {
  auto ep = envs::make_episode(c, seed);
  envs::EpisodeOutcome out;
  while (ep->status() == Status::running) {
    out.episode_return += ep->step(ep->expert_action()).reward;
  }
  out.status = ep->status();
  out.steps = ep->t();
  return out;
}

}  // namespace

TEST_CASE("BrakeTown expert succeeds on 100 seeds in both traffic conditions") {
  for (auto traffic : {envs::Traffic::dense, envs::Traffic::regular}) {
    int success = 0;
    for (std::uint64_t s = 0; s < 100; ++s) success += run_expert(brake_town(traffic), s).status == Status::success;
    CHECK(success == 100);
  }
}

TEST_CASE("BrakeTown: zero action from rest times out at the limit") {
  const auto c = brake_town();
  auto ep = envs::make_episode(c, 3);
  Eigen::VectorXd zero = Eigen::VectorXd::Zero(1);
  while (ep->status() == Status::running) ep->step(zero);
  CHECK(ep->status() == Status::timeout);
  CHECK(ep->t() == c.brake_town.time_limit);
}

TEST_CASE("BrakeTown: stepping a finished episode throws") {
  const auto c = brake_town();
  auto s = envs::reset(c.brake_town, 0);
  while (s.status == Status::running) envs::step(c.brake_town, s, 1.0);
  CHECK_THROWS_AS(envs::step(c.brake_town, s, 0.0), envs::TerminalStepError);
}

TEST_CASE("BrakeTown: reset is deterministic and observation hides velocity") {
  const auto c = brake_town().brake_town;
  const auto a = envs::reset(c, 11);
  const auto b = envs::reset(c, 11);
  REQUIRE(a.pedestrians.size() == b.pedestrians.size());
  for (std::size_t i = 0; i < a.pedestrians.size(); ++i) {
    CHECK(a.pedestrians[i].position == b.pedestrians[i].position);
    CHECK(a.pedestrians[i].start == b.pedestrians[i].start);
    CHECK(a.pedestrians[i].end == b.pedestrians[i].end);
  }
  auto fast = a;
  fast.v = 7.5;
  CHECK(envs::observe(c, a) == envs::observe(c, fast));
  CHECK(envs::observe(c, a).size() == c.obs_dim());
  for (const auto& p : a.pedestrians) CHECK(p.position >= c.first_crossing_min);
}

TEST_CASE("BrakeTown: action is clamped and kinematics follow the integrator") {
  const auto c = brake_town().brake_town;
  auto s = envs::reset(c, 0);
  envs::step(c, s, 5.0);
  CHECK(s.v == doctest::Approx(c.accel_scale * c.dt));
  CHECK(s.x == doctest::Approx(c.accel_scale * c.dt * c.dt));
  envs::step(c, s, -5.0);
  CHECK(s.v == 0.0);
}

TEST_CASE("BrakeTown: dense doubles the crossing rate") {
  auto c = brake_town().brake_town;
  const double regular = c.pedestrian_rate;
  CHECK(c.effective_rate() == doctest::Approx(2.0 * regular));
  double n_dense = 0, n_regular = 0;
  for (std::uint64_t s = 0; s < 400; ++s) n_dense += envs::reset(c, s).pedestrians.size();
  c.traffic = envs::Traffic::regular;
  for (std::uint64_t s = 0; s < 400; ++s) n_regular += envs::reset(c, s).pedestrians.size();
  CHECK(n_dense > 1.3 * n_regular);
}

TEST_CASE("BrakeTown validation") {
  auto c = brake_town().brake_town;
  c.brake_distance = c.view_range + 1.0;
  CHECK_THROWS_AS(c.validate(), envs::ConfigError);
  c = brake_town().brake_town;
  c.time_limit = 10;
  CHECK_THROWS_AS(c.validate(), envs::ConfigError);
  c = brake_town().brake_town;
  c.crossing_max_steps = c.crossing_min_steps - 1;
  CHECK_THROWS_AS(c.validate(), envs::ConfigError);
}

TEST_CASE("HiddenVelocity: spectral radius matches the integrator") {
  const auto c = hidden_velocity().hidden_velocity;
  // Oracle: roots of the characteristic polynomial of one zero-action step,
  // with the step matrix measured column by column from the simulator.
  envs::HiddenVelocityConfig one = c;
  one.dim = 1;
  Eigen::Matrix2d m;
  for (int col = 0; col < 2; ++col) {
    auto s = envs::reset(one, 0);
    s.q(0) = col == 0 ? 1.0 : 0.0;
    s.qd(0) = col == 1 ? 1.0 : 0.0;
    envs::step(one, s, Eigen::VectorXd::Zero(1));
    m(0, col) = s.q(0);
    m(1, col) = s.qd(0);
  }
  const double tr = m.trace(), det = m.determinant();
  const std::complex<double> disc = std::sqrt(std::complex<double>(tr * tr - 4.0 * det));
  const double rho = std::max(std::abs((tr + disc) / 2.0), std::abs((tr - disc) / 2.0));
  CHECK(c.spectral_radius() == doctest::Approx(rho).epsilon(1e-12));
  CHECK(c.spectral_radius() < 1.0);

  auto unstable = c;
  unstable.damping = -5.0;
  CHECK_THROWS_AS(unstable.validate(), envs::ConfigError);
}

TEST_CASE("HiddenVelocity: observation excludes velocity, episodes run to the horizon") {
  const auto c = hidden_velocity();
  auto s = envs::reset(c.hidden_velocity, 4);
  auto moved = s;
  moved.qd.setConstant(3.0);
  CHECK(envs::observe(c.hidden_velocity, s) == envs::observe(c.hidden_velocity, moved));
  CHECK(c.obs_dim() == 2 * c.hidden_velocity.dim);

  const auto out = run_expert(c, 4);
  CHECK(out.status == Status::success);
  CHECK(out.steps == c.hidden_velocity.horizon);
  CHECK(out.episode_return < 0.0);
  CHECK_THROWS(envs::step(c.hidden_velocity, s, Eigen::VectorXd::Zero(3)));
}

TEST_CASE("HiddenVelocity: expert tracks far better than zero action") {
  const auto c = hidden_velocity();
  double expert = 0.0, idle = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    expert += run_expert(c, seed).episode_return;
    auto ep = envs::make_episode(c, seed);
    while (ep->status() == Status::running) idle += ep->step(Eigen::VectorXd::Zero(c.action_dim())).reward;
  }
  CHECK(expert < 0.0);
  CHECK(expert > 0.2 * idle);
}

TEST_CASE("env config JSON round-trip and hash") {
  for (const auto& c : {brake_town(), hidden_velocity()}) {
    const auto back = envs::env_config_from_json(envs::to_json(c));
    CHECK(envs::to_json(back) == envs::to_json(c));
    CHECK(envs::config_hash(back) == envs::config_hash(c));
  }
  CHECK(envs::config_hash(brake_town()) != envs::config_hash(brake_town(envs::Traffic::regular)));
  CHECK(envs::config_hash(brake_town()) != envs::config_hash(hidden_velocity()));
}
