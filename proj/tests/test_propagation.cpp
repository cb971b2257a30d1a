#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "support/oracles.hpp"
#include "vbsim/propagation.hpp"

using namespace vbsim;

TEST_CASE("propagate_constant: identity at t = 0") {
  const auto g = build_preset_7level(reference_seven_level_rates());
  const Eigen::MatrixXd m = build_rate_matrix(g, 13.6);
  const Eigen::VectorXd p0 = thermal_state(g);
  CHECK((propagate_constant(m, p0, 0.0) - p0).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("propagate_constant: dark singlet decay hits 1/e at tau_s") {
  const auto g = build_preset_7level(reference_seven_level_rates());
  const int s = g.require_index(labels::singlet);
  Eigen::VectorXd p0 = Eigen::VectorXd::Zero(7);
  p0[s] = 1.0;
  const double tau = analytic_singlet_lifetime(37.0, 3.4);  // 22.83 ns
  const Eigen::VectorXd p = propagate_constant(build_rate_matrix(g, 0.0), p0, tau);
  CHECK(std::abs(p[s] - std::exp(-1.0)) <= 1e-6);
}

TEST_CASE("propagate_constant agrees with the 1 ps RK4 oracle") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> pw(0.0, 20.0);
  std::uniform_real_distribution<double> tt(0.05, 2.0);
  for (int trial = 0; trial < 10; ++trial) {
    const auto g = oracles::random_graph(rng);
    const Eigen::MatrixXd m = build_rate_matrix(g, pw(rng));
    const Eigen::VectorXd p0 = oracles::random_population(rng, g.size());
    const double t = tt(rng);
    const Eigen::VectorXd a = propagate_constant(m, p0, t);
    const Eigen::VectorXd b = oracles::rk4_propagate(m, p0, t);
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("propagate_constant: semigroup property") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> tt(0.01, 30.0);
  for (int trial = 0; trial < 10; ++trial) {
    const auto g = oracles::random_graph(rng);
    const Eigen::MatrixXd m = build_rate_matrix(g, 5.0);
    const Eigen::VectorXd p0 = oracles::random_population(rng, g.size());
    const double t1 = tt(rng), t2 = tt(rng);
    const Eigen::VectorXd once = propagate_constant(m, p0, t1 + t2);
    const Eigen::VectorXd twice =
        propagate_constant(m, propagate_constant(m, p0, t1), t2);
    CHECK((once - twice).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("propagate_profile: zero rise time chains constant-power steps") {
  const auto g = build_preset_7level(reference_seven_level_rates());
  PowerProfile prof;
  prof.rise_time_ns = 0.0;
  prof.segments = {{120.0, 13.6}, {40.0, 0.0}, {80.0, 5.0}};
  const Eigen::VectorXd p0 = thermal_state(g);
  const auto traj = propagate_profile(g, prof, p0, 10.0);

  Eigen::VectorXd p = p0;
  double t = 0.0;
  size_t k = 0;
  for (const auto& seg : prof.segments) {
    const Eigen::MatrixXd m = build_rate_matrix(g, seg.target_power_mw);
    // walk sample times inside this segment
    while (k < traj.times_ns.size() && traj.times_ns[k] <= t + seg.duration_ns + 1e-12) {
      const Eigen::VectorXd ref = propagate_constant(m, p, traj.times_ns[k] - t);
      CHECK((traj.populations[k] - ref).cwiseAbs().maxCoeff() <= 1e-9);
      ++k;
    }
    p = propagate_constant(m, p, seg.duration_ns);
    t += seg.duration_ns;
  }
  CHECK(k == traj.times_ns.size());
}

TEST_CASE("propagate_profile: power approaches the target exponentially") {
  const auto g = build_preset_7level(reference_seven_level_rates());
  PowerProfile prof;
  prof.rise_time_ns = 2.0;
  prof.segments = {{50.0, 13.6}};
  const auto traj = propagate_profile(g, prof, thermal_state(g), 1.0);
  // at t = 5 tau the instantaneous power is within 1% of the target
  for (int i = 0; i < traj.n_samples(); ++i)
    if (traj.times_ns[i] >= 5.0 * prof.rise_time_ns)
      CHECK(std::abs(traj.power_mw[i] - 13.6) <= 0.01 * 13.6);
  CHECK(traj.power_mw[0] <= 13.6 * 0.5);  // starts near zero
}

TEST_CASE("propagate_profile: conservation and nonnegativity") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> dur(5.0, 120.0);
  std::uniform_real_distribution<double> pw(0.0, 20.0);
  for (int trial = 0; trial < 10; ++trial) {
    const auto g = oracles::random_graph(rng);
    PowerProfile prof;
    prof.rise_time_ns = trial % 2 ? 2.5 : 0.0;
    for (int s = 0; s < 3; ++s) prof.segments.push_back({dur(rng), pw(rng)});
    const auto traj =
        propagate_profile(g, prof, oracles::random_population(rng, g.size()), 2.0);
    CHECK(traj.max_sum_deviation <= 1e-9);
    CHECK(traj.max_negative <= 1e-12);
    for (const auto& p : traj.populations) CHECK(p.minCoeff() >= 0.0);
  }
}

TEST_CASE("propagate_profile rejects an empty profile") {
  const auto g = build_preset_7level(reference_seven_level_rates());
  PowerProfile prof;
  CHECK_THROWS_AS(propagate_profile(g, prof, thermal_state(g), 1.0),
                  ValidationError);
}

TEST_CASE("peak PL is monotone in rise time and converges to the step peak") {
  const auto g = build_preset_7level(reference_seven_level_rates());
  auto peak_for = [&](double rise) {
    PowerProfile prof;
    prof.rise_time_ns = rise;
    prof.segments = {{1000.0, 13.6}};
    const auto traj = propagate_profile(g, prof, thermal_state(g), 0.1);
    const Eigen::VectorXd em = g.emission_vector();
    double peak = 0.0;
    for (const auto& p : traj.populations) peak = std::max(peak, em.dot(p));
    return peak;
  };
  const double p25 = peak_for(2.5), p10 = peak_for(1.0), p01 = peak_for(0.1),
               p00 = peak_for(0.0);
  CHECK(p25 < p10);
  CHECK(p10 < p01);
  CHECK(p01 <= p00);
  CHECK(std::abs(p01 - p00) / p00 < 0.02);  // tau -> 0 approaches the step peak
}

TEST_CASE("propagate_events: samples land on the grid and resets rethermalize") {
  const auto g = build_preset_7level(reference_seven_level_rates());
  PowerProfile prof;
  prof.rise_time_ns = 0.0;
  prof.segments = {{200.0, 13.6}, {100.0, 0.0}, {200.0, 13.6}};
  const double reset_at = 300.0;
  Propagator prop(g);

  std::vector<double> times;
  std::vector<Eigen::VectorXd> pops;
  propagate_events(prop, g, prof, std::vector<double>{reset_at},
                   thermal_state(g), 20.0, [&](const StepSample& s) {
                     times.push_back(s.t_ns);
                     pops.push_back(s.population);
                   });
  REQUIRE(times.size() == 26);  // t = 0, 20, ..., 500
  for (size_t i = 0; i < times.size(); ++i)
    CHECK(times[i] == doctest::Approx(20.0 * static_cast<double>(i)).epsilon(1e-12));

  // the sample right at the reset time reflects the fresh thermal state
  const Eigen::VectorXd th = thermal_state(g);
  CHECK((pops[15] - th).cwiseAbs().maxCoeff() <= 1e-12);
  // and the trace re-runs the initial transient afterwards
  CHECK((pops[16] - pops[1]).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("propagate_events matches propagate_profile samples") {
  const auto g = build_preset_9level(reference_nine_level_rates());
  PowerProfile prof;
  prof.rise_time_ns = 2.5;
  prof.segments = {{150.0, 13.6}, {50.0, 0.0}, {150.0, 6.0}};
  const Eigen::VectorXd p0 = thermal_state(g);

  const auto traj = propagate_profile(g, prof, p0, 5.0);
  Propagator prop(g);
  std::vector<Eigen::VectorXd> pops;
  propagate_events(prop, g, prof, {}, p0, 5.0,
                   [&](const StepSample& s) { pops.push_back(s.population); });
  REQUIRE(static_cast<int>(pops.size()) == traj.n_samples());
  for (size_t i = 0; i < pops.size(); ++i) {
    Eigen::VectorXd clamped = pops[i].cwiseMax(0.0);
    CHECK((clamped - traj.populations[i]).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("propagator sensitivities match finite differences (single rate)") {
  // d p / d kappa0 via the block-matrix exponential vs central differences
  auto build = [](double kappa0) {
    SevenLevelRates r = reference_seven_level_rates();
    r.kappa0 = kappa0;
    return build_preset_7level(r);
  };
  SevenLevelRates basis;  // all zero except the differentiated rate
  basis.kappa0 = 1.0;
  const auto dg = build_preset_7level(basis);
  const LevelGraph* dptr[] = {&dg};

  const auto g = build(37.0);
  Propagator prop(g, dptr);
  prop.reset(thermal_state(g));
  prop.advance(13.6, 50.0);
  prop.advance(0.0, 10.0);
  const Eigen::VectorXd sens = prop.sensitivities()[0];

  const double h = 1e-4;
  auto run = [&](double k0) {
    const auto gg = build(k0);
    Propagator pp(gg);
    pp.reset(thermal_state(gg));
    pp.advance(13.6, 50.0);
    pp.advance(0.0, 10.0);
    return pp.population();
  };
  const Eigen::VectorXd fd = (run(37.0 + h) - run(37.0 - h)) / (2.0 * h);
  CHECK((sens - fd).cwiseAbs().maxCoeff() <=
        1e-6 * std::max(1.0, fd.cwiseAbs().maxCoeff()));
}
