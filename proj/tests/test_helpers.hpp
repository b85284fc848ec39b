// Shared test utilities: tolerance helpers, finite-difference oracles, and
// seeded random model generators. The oracles only call forward()/loss
// evaluations so they stay independent of the analytic derivative paths they
// check.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "winddispatch/winddispatch.hpp"

namespace wdtest {

using namespace winddispatch;

inline bool rel_close(double a, double b, double rel_tol, double abs_floor = 1e-8) {
  double diff = std::abs(a - b);
  return diff <= rel_tol * std::max(std::abs(a), std::abs(b)) || diff <= abs_floor;
}

// Central finite difference of a scalar function.
inline double central_diff(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

// Per-parameter central finite difference of upstream * forward(x).
inline ApproximatorGrad fd_param_gradient(const ApproximatorParams& p, double x, double upstream,
                                          double h = 1e-4) {
  ApproximatorGrad g = ApproximatorGrad::zeros_like(p);
  ApproximatorParams work = p;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    for (std::size_t i = 0; i < p.weights[l].size(); ++i) {
      double orig = work.weights[l][i];
      work.weights[l][i] = orig + h;
      double up = forward(work, x);
      work.weights[l][i] = orig - h;
      double dn = forward(work, x);
      work.weights[l][i] = orig;
      g.weights[l][i] = upstream * (up - dn) / (2.0 * h);
    }
    for (std::size_t i = 0; i < p.biases[l].size(); ++i) {
      double orig = work.biases[l][i];
      work.biases[l][i] = orig + h;
      double up = forward(work, x);
      work.biases[l][i] = orig - h;
      double dn = forward(work, x);
      work.biases[l][i] = orig;
      g.biases[l][i] = upstream * (up - dn) / (2.0 * h);
    }
  }
  return g;
}

// Random small approximator with nonzero biases so derivatives are generic.
inline ApproximatorParams random_approximator(std::mt19937_64& rng,
                                              const std::vector<int>& layers,
                                              Activation act) {
  ApproximatorParams p = init_params(layers, rng(), act);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& b : p.biases)
    for (double& v : b) v = u(rng);
  return p;
}

inline SdeModel random_model(std::mt19937_64& rng, StateKind kind = StateKind::WindSpeed,
                             const std::vector<int>& layers = {1, 4, 1}) {
  SdeModel m;
  m.drift = random_approximator(rng, layers, Activation::LinearOutput);
  m.diffusion = random_approximator(rng, layers, Activation::SoftplusOutput);
  m.state_kind = kind;
  return m;
}

// Zero-everything network (tanh hidden, linear output by default).
inline ApproximatorParams zero_approximator(const std::vector<int>& layers,
                                            Activation act = Activation::LinearOutput) {
  ApproximatorParams p;
  p.layer_sizes = layers;
  p.activation = act;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
    p.weights.emplace_back(static_cast<std::size_t>(layers[l]) * layers[l + 1], 0.0);
    p.biases.emplace_back(layers[l + 1], 0.0);
  }
  return p;
}

inline SdeModel constant_dynamics_model(double f_const, double g_const,
                                        StateKind kind = StateKind::WindSpeed) {
  SdeModel m;
  m.drift = affine_approximator(0.0, f_const);
  m.diffusion = g_const > 0.0 ? constant_positive_approximator(g_const)
                              : near_zero_positive_approximator();
  m.state_kind = kind;
  return m;
}

}  // namespace wdtest
