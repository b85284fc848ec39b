// Synthetic benchmark series: Euler dynamics with the same reflecting boundary
// the simulator uses, so calibration targets match the generator exactly.
#pragma once

#include <cmath>
#include <cstdint>

#include "winddispatch/random.hpp"
#include "winddispatch/sde.hpp"
#include "winddispatch/util.hpp"

namespace winddispatch {

// dX = theta (mu - X) dt + sigma dB, n samples including x0.
inline TimeSeries make_ou_series(double theta, double mu, double sigma, double x0, double dt,
                                 long n, std::uint64_t seed, double t0 = 0.0) {
  require(dt > 0.0 && std::isfinite(dt), "dt must be positive");
  require(n >= 1, "need at least one sample");
  require(sigma >= 0.0, "sigma must be >= 0");
  TimeSeries s;
  s.t0 = t0;
  s.dt = dt;
  s.values.reserve(static_cast<std::size_t>(n));
  NormalStream stream(seed);
  double x = x0;
  double sq = std::sqrt(dt);
  s.values.push_back(x);
  for (long i = 1; i < n; ++i) {
    x = std::fabs(x + theta * (mu - x) * dt + sigma * sq * stream.next());
    s.values.push_back(x);
  }
  return s;
}

// dX = a X dt + b X dB, n samples including x0.
inline TimeSeries make_gbm_series(double a, double b, double x0, double dt, long n,
                                  std::uint64_t seed, double t0 = 0.0) {
  require(dt > 0.0 && std::isfinite(dt), "dt must be positive");
  require(n >= 1, "need at least one sample");
  TimeSeries s;
  s.t0 = t0;
  s.dt = dt;
  s.values.reserve(static_cast<std::size_t>(n));
  NormalStream stream(seed);
  double x = x0;
  double sq = std::sqrt(dt);
  s.values.push_back(x);
  for (long i = 1; i < n; ++i) {
    x = std::fabs(x + a * x * dt + b * x * sq * stream.next());
    s.values.push_back(x);
  }
  return s;
}

// Exactly representable OU-drift model: f(x) = theta (mu - x) as an affine
// head, g(x) = sigma as a constant softplus head.
inline SdeModel make_ou_model(double theta, double mu, double sigma,
                              StateKind kind = StateKind::WindSpeed) {
  SdeModel m;
  m.drift = affine_approximator(-theta, theta * mu);
  m.diffusion = constant_positive_approximator(sigma);
  m.state_kind = kind;
  return m;
}

}  // namespace winddispatch
