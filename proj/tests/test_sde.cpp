#include <catch2/catch.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "test_helpers.hpp"

using namespace winddispatch;
using wdtest::constant_dynamics_model;

namespace {

std::string temp_file(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("sde/euler_step", "[sde]") {
  SdeModel still = constant_dynamics_model(0.0, 0.0);
  REQUIRE(euler_step(still, 1.0, 0.1, 0.3) == 1.0);

  SdeModel drift = constant_dynamics_model(2.0, 0.0);
  REQUIRE(euler_step(drift, 1.0, 0.5, -0.7) == 2.0);

  SdeModel noisy = constant_dynamics_model(0.0, 1.0);
  REQUIRE(euler_step(noisy, 0.1, 1.0, -1.0) == Approx(0.9).epsilon(1e-12));  // reflection

  REQUIRE_THROWS_AS(euler_step(still, 1.0, 0.0, 0.3), std::invalid_argument);
  REQUIRE_THROWS_AS(euler_step(still, std::numeric_limits<double>::infinity(), 0.1, 0.3),
                    std::invalid_argument);
}

TEST_CASE("sde/simulate_path_basics", "[sde]") {
  SdeModel still = constant_dynamics_model(0.0, 0.0);
  SimulationGrid grid{0.0, 1.0, 0.1};
  TimeSeries path = simulate_path(still, 5.0, grid, 3);
  REQUIRE(path.size() == 11);
  for (double v : path.values) REQUIRE(v == 5.0);

  SdeModel noisy = constant_dynamics_model(0.1, 0.4);
  TimeSeries a = simulate_path(noisy, 2.0, grid, 99);
  TimeSeries b = simulate_path(noisy, 2.0, grid, 99);
  REQUIRE(a.values == b.values);
  TimeSeries c = simulate_path(noisy, 2.0, grid, 100);
  REQUIRE(a.values != c.values);

  REQUIRE_THROWS_AS(simulate_path(noisy, -1.0, grid, 1), std::invalid_argument);
}

TEST_CASE("sde/paths_stay_nonnegative", "[sde]") {
  std::mt19937_64 rng(17);
  SdeModel m = wdtest::random_model(rng);
  SimulationGrid grid{0.0, 5.0, 0.01};
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    TimeSeries path = simulate_path(m, 0.05, grid, seed);
    for (double v : path.values) REQUIRE(v >= 0.0);
  }
}

TEST_CASE("sde/ou_ensemble_mean", "[sde][slow]") {
  // OU toward 5: the ensemble mean at a long horizon sits on the stationary
  // mean within Monte Carlo error.
  SdeModel ou = make_ou_model(1.0, 5.0, 0.5);
  SimulationGrid grid{0.0, 100.0, 0.01};
  const long n_paths = 10000;
  std::vector<double> finals(n_paths);
  parallel_for(n_paths, [&](std::size_t p) {
    finals[p] = simulate_path(ou, 5.0, grid, 1000 + p).values.back();
  });
  double mean = 0.0;
  for (double v : finals) mean += v;
  mean /= n_paths;
  double var = 0.0;
  for (double v : finals) var += (v - mean) * (v - mean);
  double se = std::sqrt(var / (n_paths - 1) / n_paths);
  REQUIRE(std::abs(mean - 5.0) <= 3.0 * se);
}

TEST_CASE("sde/linear_sde_weak_convergence", "[sde][slow]") {
  // dX = a X dt + c dB has E[X_T] = x0 exp(aT); Euler bias shrinks with dt.
  const double a = 0.3, c = 0.1, x0 = 1.0, horizon = 1.0;
  SdeModel m;
  m.drift = affine_approximator(a, 0.0);
  m.diffusion = constant_positive_approximator(c);
  m.state_kind = StateKind::WindSpeed;
  const double exact = x0 * std::exp(a * horizon);
  const long n_paths = 10000;

  auto mean_and_se = [&](double dt, std::uint64_t seed0) {
    SimulationGrid grid{0.0, horizon, dt};
    std::vector<double> finals(n_paths);
    parallel_for(n_paths, [&](std::size_t p) {
      finals[p] = simulate_path(m, x0, grid, seed0 + p).values.back();
    });
    double mean = 0.0;
    for (double v : finals) mean += v;
    mean /= n_paths;
    double var = 0.0;
    for (double v : finals) var += (v - mean) * (v - mean);
    return std::pair<double, double>(mean, std::sqrt(var / (n_paths - 1) / n_paths));
  };

  auto [mean_coarse, se_coarse] = mean_and_se(0.1, 50000);
  auto [mean_fine, se_fine] = mean_and_se(0.01, 90000);
  REQUIRE(std::abs(mean_fine - exact) <= 3.0 * se_fine);
  REQUIRE(std::abs(mean_fine - exact) < std::abs(mean_coarse - exact));
}

TEST_CASE("sde/transition_log_density_values", "[sde]") {
  SdeModel m = constant_dynamics_model(0.0, 1.0);
  REQUIRE(transition_log_density(m, 2.0, 2.0, 1.0) == Approx(-0.91893853320467274).epsilon(1e-9));
  REQUIRE(transition_log_density(m, 2.0, 3.0, 1.0) == Approx(-1.41893853320467274).epsilon(1e-9));
  REQUIRE_THROWS_AS(transition_log_density(m, 2.0, 2.0, 0.0), std::invalid_argument);
  REQUIRE_THROWS_AS(transition_log_density(m, std::nan(""), 2.0, 1.0), std::invalid_argument);
}

TEST_CASE("sde/transition_density_normalizes", "[sde]") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 3; ++trial) {
    SdeModel m = wdtest::random_model(rng);
    double x_from = 1.0 + trial;
    double dt = 0.05;
    double mean = x_from + forward(m.drift, x_from) * dt;
    double sd = forward(m.diffusion, x_from) * std::sqrt(dt);
    double lo = mean - 10.0 * sd, hi = mean + 10.0 * sd;
    const int n = 4000;
    double h = (hi - lo) / n;
    double integral = 0.0;
    for (int i = 0; i <= n; ++i) {
      double x = lo + i * h;
      double w = (i == 0 || i == n) ? 0.5 : 1.0;
      integral += w * std::exp(transition_log_density(m, x_from, x, dt));
    }
    integral *= h;
    REQUIRE(integral == Approx(1.0).margin(1e-4));
  }
}

TEST_CASE("sde/transition_density_peaks_at_drift_mean", "[sde]") {
  std::mt19937_64 rng(29);
  SdeModel m = wdtest::random_model(rng);
  double x_from = 2.0, dt = 0.1;
  double mode = x_from + forward(m.drift, x_from) * dt;
  double sd = forward(m.diffusion, x_from) * std::sqrt(dt);
  double best_x = 0.0, best = -std::numeric_limits<double>::infinity();
  for (int i = -400; i <= 400; ++i) {
    double x = mode + i * sd / 100.0;
    double l = transition_log_density(m, x_from, x, dt);
    if (l > best) {
      best = l;
      best_x = x;
    }
  }
  REQUIRE(std::abs(best_x - mode) <= sd / 100.0 + 1e-12);
}

TEST_CASE("sde/csv_round_trip", "[sde]") {
  TimeSeries s;
  s.t0 = 1.5;
  s.dt = 0.25;
  s.values = {0.1, 0.30000000000000004, 12345.6789, 3e-7};
  std::string path = temp_file("wd_series_rt.csv");
  write_timeseries_csv(path, s);
  TimeSeries r = read_timeseries_csv(path);
  REQUIRE(r.t0 == s.t0);
  REQUIRE(r.dt == Approx(s.dt).epsilon(1e-12));
  REQUIRE(r.values == s.values);
  std::remove(path.c_str());
}

TEST_CASE("sde/csv_rejects_malformed_input", "[sde]") {
  std::string path = temp_file("wd_series_bad.csv");
  auto write_file = [&](const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
  };

  write_file("time,value\n0,1\n1,2\n");
  REQUIRE_THROWS_MATCHES(read_timeseries_csv(path), csv_error,
                         Catch::Matchers::Message("expected header \"t,value\" (line 1)"));

  write_file("t,value\n0,1\n1,2\n2.5,3\n");
  try {
    read_timeseries_csv(path);
    FAIL("expected csv_error");
  } catch (const csv_error& e) {
    REQUIRE(e.line == 4);  // the row that breaks uniform spacing
  }

  write_file("t,value\n0,1\n1,abc\n");
  REQUIRE_THROWS_AS(read_timeseries_csv(path), csv_error);

  write_file("t,value\n0,1\n");
  REQUIRE_THROWS_AS(read_timeseries_csv(path), csv_error);
  std::remove(path.c_str());
}

TEST_CASE("sde/model_json_round_trip", "[sde]") {
  std::mt19937_64 rng(41);
  SdeModel m = wdtest::random_model(rng, StateKind::DemandRate);
  nlohmann::json j = m;
  SdeModel r = j.get<SdeModel>();
  REQUIRE(r.state_kind == m.state_kind);
  REQUIRE(r.drift.weights == m.drift.weights);
  REQUIRE(r.diffusion.biases == m.diffusion.biases);

  // diffusion without the softplus tag violates the model invariant
  nlohmann::json bad = j;
  bad["diffusion"]["activation"] = "linear-output";
  REQUIRE_THROWS_AS(bad.get<SdeModel>(), std::invalid_argument);
}

TEST_CASE("sde/grid_validation", "[sde]") {
  SimulationGrid ok{0.0, 1.0, 0.1};
  REQUIRE(ok.step_count() == 10);
  SimulationGrid ragged{0.0, 1.0, 0.3};
  REQUIRE_THROWS_AS(ragged.validate(), std::invalid_argument);
  SimulationGrid backwards{1.0, 0.0, 0.1};
  REQUIRE_THROWS_AS(backwards.validate(), std::invalid_argument);
}
