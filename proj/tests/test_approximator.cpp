#include <catch2/catch.hpp>

#include <random>

#include "test_helpers.hpp"

using namespace winddispatch;
using wdtest::fd_param_gradient;
using wdtest::rel_close;

TEST_CASE("approximator/init_shapes", "[approximator]") {
  ApproximatorParams p = init_params({1, 8, 1}, 7);
  REQUIRE(p.weights.size() == 2);
  REQUIRE(p.weights[0].size() == 8);   // 8x1
  REQUIRE(p.weights[1].size() == 8);   // 1x8
  REQUIRE(p.biases[0].size() == 8);
  REQUIRE(p.biases[1].size() == 1);
  for (double b : p.biases[0]) REQUIRE(b == 0.0);

  // pure function of (layer_sizes, seed)
  ApproximatorParams q = init_params({1, 8, 1}, 7);
  REQUIRE(p.weights == q.weights);
  REQUIRE(p.biases == q.biases);

  ApproximatorParams r = init_params({1, 8, 1}, 8);
  REQUIRE(p.weights != r.weights);
}

TEST_CASE("approximator/init_rejects_bad_layers", "[approximator]") {
  REQUIRE_THROWS_AS(init_params({}, 7), std::invalid_argument);
  REQUIRE_THROWS_AS(init_params({1, 0, 1}, 7), std::invalid_argument);
  REQUIRE_THROWS_AS(init_params({2, 4, 1}, 7), std::invalid_argument);
  REQUIRE_THROWS_AS(init_params({1, 4, 3}, 7), std::invalid_argument);
}

TEST_CASE("approximator/forward_basics", "[approximator]") {
  ApproximatorParams zero = wdtest::zero_approximator({1, 8, 1});
  REQUIRE(forward(zero, 3.7) == 0.0);

  ApproximatorParams affine = affine_approximator(2.0, 1.0);
  REQUIRE(forward(affine, 2.0) == 5.0);

  std::mt19937_64 rng(42);
  ApproximatorParams pos = wdtest::random_approximator(rng, {1, 8, 1}, Activation::SoftplusOutput);
  REQUIRE(forward(pos, -10.0) > 0.0);

  REQUIRE_THROWS_AS(forward(affine, std::numeric_limits<double>::quiet_NaN()),
                    std::invalid_argument);
}

TEST_CASE("approximator/softplus_strictly_positive", "[approximator]") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    ApproximatorParams p =
        wdtest::random_approximator(rng, {1, 4, 4, 1}, Activation::SoftplusOutput);
    for (double x : {-1e6, -100.0, -1.0, 0.0, 3.5, 1e6}) REQUIRE(forward(p, x) > 0.0);
  }
  // single-layer head driven deep into the underflow regime
  ApproximatorParams deep = affine_approximator(1.0, 0.0);
  deep.activation = Activation::SoftplusOutput;
  REQUIRE(forward(deep, -1e6) > 0.0);
}

TEST_CASE("approximator/input_derivative", "[approximator]") {
  ApproximatorParams affine = affine_approximator(2.0, 1.0);
  REQUIRE(input_derivative(affine, -3.0) == 2.0);
  REQUIRE(input_derivative(affine, 17.5) == 2.0);

  ApproximatorParams zero = wdtest::zero_approximator({1, 8, 1});
  REQUIRE(input_derivative(zero, 0.3) == 0.0);

  std::mt19937_64 rng(11);
  ApproximatorParams p = wdtest::random_approximator(rng, {1, 8, 1}, Activation::LinearOutput);
  double analytic = input_derivative(p, 0.5);
  double fd = wdtest::central_diff([&](double x) { return forward(p, x); }, 0.5, 1e-5);
  REQUIRE(rel_close(analytic, fd, 1e-6));
}

TEST_CASE("approximator/input_derivative_matches_fd_property", "[approximator]") {
  std::mt19937_64 rng(2024);
  std::vector<std::vector<int>> shapes = {{1, 4, 1}, {1, 8, 1}, {1, 4, 4, 1}};
  std::vector<Activation> acts = {Activation::LinearOutput, Activation::SoftplusOutput,
                                  Activation::Tanh};
  for (int trial = 0; trial < 30; ++trial) {
    auto p = wdtest::random_approximator(rng, shapes[trial % shapes.size()],
                                         acts[trial % acts.size()]);
    double x = -2.0 + 0.17 * trial;
    double analytic = input_derivative(p, x);
    for (double h : {1e-4, 1e-5}) {
      double fd = wdtest::central_diff([&](double y) { return forward(p, y); }, x, h);
      REQUIRE(rel_close(analytic, fd, 1e-4, 1e-7));
    }
  }
}

TEST_CASE("approximator/param_gradient_basics", "[approximator]") {
  ApproximatorParams zero = wdtest::zero_approximator({1, 8, 1});
  ApproximatorGrad g = param_gradient(zero, 1.0, 1.0);
  REQUIRE(g.biases[1][0] == 1.0);  // output bias path
  for (double v : g.weights[1]) REQUIRE(v == 0.0);

  std::mt19937_64 rng(5);
  ApproximatorParams p = wdtest::random_approximator(rng, {1, 4, 1}, Activation::LinearOutput);
  ApproximatorGrad zg = param_gradient(p, 0.7, 0.0);
  for (const auto& w : zg.weights)
    for (double v : w) REQUIRE(v == 0.0);
  for (const auto& b : zg.biases)
    for (double v : b) REQUIRE(v == 0.0);
}

TEST_CASE("approximator/param_gradient_matches_fd", "[approximator]") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    Activation act = trial % 2 == 0 ? Activation::LinearOutput : Activation::SoftplusOutput;
    ApproximatorParams p = wdtest::random_approximator(rng, {1, 4, 4, 1}, act);
    ApproximatorGrad analytic = param_gradient(p, 0.3, 1.0);
    ApproximatorGrad fd = fd_param_gradient(p, 0.3, 1.0);
    for (std::size_t l = 0; l < analytic.weights.size(); ++l) {
      for (std::size_t i = 0; i < analytic.weights[l].size(); ++i)
        REQUIRE(rel_close(analytic.weights[l][i], fd.weights[l][i], 1e-5, 1e-8));
      for (std::size_t i = 0; i < analytic.biases[l].size(); ++i)
        REQUIRE(rel_close(analytic.biases[l][i], fd.biases[l][i], 1e-5, 1e-8));
    }
  }
}

TEST_CASE("approximator/param_gradient_linear_in_upstream", "[approximator]") {
  std::mt19937_64 rng(9);
  ApproximatorParams p = wdtest::random_approximator(rng, {1, 8, 1}, Activation::SoftplusOutput);
  ApproximatorGrad g1 = param_gradient(p, 1.1, 0.37);
  // power-of-two scaling commutes with every float op, so equality is exact
  for (double a : {2.0, 0.5, -4.0}) {
    ApproximatorGrad ga = param_gradient(p, 1.1, a * 0.37);
    for (std::size_t l = 0; l < g1.weights.size(); ++l) {
      for (std::size_t i = 0; i < g1.weights[l].size(); ++i)
        REQUIRE(ga.weights[l][i] == a * g1.weights[l][i]);
      for (std::size_t i = 0; i < g1.biases[l].size(); ++i)
        REQUIRE(ga.biases[l][i] == a * g1.biases[l][i]);
    }
  }
}

TEST_CASE("approximator/json_round_trip", "[approximator]") {
  std::mt19937_64 rng(31);
  ApproximatorParams p = wdtest::random_approximator(rng, {1, 4, 4, 1}, Activation::SoftplusOutput);
  nlohmann::json j = p;
  auto q = j.get<ApproximatorParams>();
  REQUIRE(q.layer_sizes == p.layer_sizes);
  REQUIRE(q.weights == p.weights);
  REQUIRE(q.biases == p.biases);
  REQUIRE(q.activation == p.activation);

  nlohmann::json bad = j;
  bad["weights"][0] = std::vector<double>{1.0};  // wrong shape
  REQUIRE_THROWS_AS(bad.get<ApproximatorParams>(), std::invalid_argument);
}
