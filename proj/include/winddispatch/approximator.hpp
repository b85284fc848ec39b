// Minimal scalar feed-forward approximator with exact analytic derivatives
// with respect to both the input and every parameter. Hidden layers are tanh;
// the activation tag selects the output-layer activation. Drift heads use a
// linear output, diffusion heads a softplus output so they stay positive.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "winddispatch/random.hpp"
#include "winddispatch/util.hpp"

namespace winddispatch {

enum class Activation { Tanh, SoftplusOutput, LinearOutput };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::SoftplusOutput: return "softplus-output";
    case Activation::LinearOutput: return "linear-output";
  }
  throw std::invalid_argument("unknown activation tag");
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "softplus-output") return Activation::SoftplusOutput;
  if (s == "linear-output") return Activation::LinearOutput;
  throw std::invalid_argument("unknown activation tag: " + s);
}

inline double softplus(double z) {
  double v = z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
  // log1p underflows to 0 for very negative z; keep the output strictly positive.
  return std::max(v, std::numeric_limits<double>::min());
}

inline double sigmoid(double z) {
  if (z >= 0.0) {
    double e = std::exp(-z);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(z);
  return e / (1.0 + e);
}

struct ApproximatorParams {
  std::vector<int> layer_sizes;               // e.g. {1, 16, 16, 1}
  std::vector<std::vector<double>> weights;   // [layer][out*in], row-major per output unit
  std::vector<std::vector<double>> biases;    // [layer][out]
  Activation activation = Activation::LinearOutput;

  int layer_count() const { return static_cast<int>(layer_sizes.size()) - 1; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
    return n;
  }

  void validate() const {
    require(!layer_sizes.empty(), "layer_sizes must be nonempty");
    require(layer_sizes.size() >= 2, "approximator needs at least one weight layer");
    require(layer_sizes.front() == 1 && layer_sizes.back() == 1,
            "approximator input and output width must be 1");
    for (int w : layer_sizes) require(w >= 1, "zero-width layer rejected");
    require(weights.size() == static_cast<std::size_t>(layer_count()) &&
                biases.size() == weights.size(),
            "weights/biases layer count must match layer_sizes");
    for (int l = 0; l < layer_count(); ++l) {
      std::size_t in = static_cast<std::size_t>(layer_sizes[l]);
      std::size_t out = static_cast<std::size_t>(layer_sizes[l + 1]);
      require(weights[l].size() == in * out, "weight matrix shape mismatch at layer " + std::to_string(l));
      require(biases[l].size() == out, "bias vector shape mismatch at layer " + std::to_string(l));
      for (double v : weights[l]) require_finite(v, "weight");
      for (double v : biases[l]) require_finite(v, "bias");
    }
  }
};

// Gradient with the same weight/bias shape as its ApproximatorParams.
struct ApproximatorGrad {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;

  static ApproximatorGrad zeros_like(const ApproximatorParams& p) {
    ApproximatorGrad g;
    g.weights.resize(p.weights.size());
    g.biases.resize(p.biases.size());
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
      g.weights[l].assign(p.weights[l].size(), 0.0);
      g.biases[l].assign(p.biases[l].size(), 0.0);
    }
    return g;
  }

  void set_zero() {
    for (auto& w : weights) std::fill(w.begin(), w.end(), 0.0);
    for (auto& b : biases) std::fill(b.begin(), b.end(), 0.0);
  }

  void axpy(double a, const ApproximatorGrad& other) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      for (std::size_t i = 0; i < weights[l].size(); ++i) weights[l][i] += a * other.weights[l][i];
      for (std::size_t i = 0; i < biases[l].size(); ++i) biases[l][i] += a * other.biases[l][i];
    }
  }

  void scale(double a) {
    for (auto& w : weights)
      for (double& v : w) v *= a;
    for (auto& b : biases)
      for (double& v : b) v *= a;
  }

  bool all_finite() const {
    for (const auto& w : weights)
      for (double v : w)
        if (!std::isfinite(v)) return false;
    for (const auto& b : biases)
      for (double v : b)
        if (!std::isfinite(v)) return false;
    return true;
  }
};

// Reusable forward-pass scratch. Shapes adapt to whatever params are passed.
struct ApproximatorTape {
  std::vector<std::vector<double>> pre;    // z per weight layer
  std::vector<std::vector<double>> act;    // activations; act[0] is the input
  std::vector<std::vector<double>> delta;  // backprop scratch
};

namespace detail {

inline double apply_output(Activation a, double z) {
  switch (a) {
    case Activation::Tanh: return std::tanh(z);
    case Activation::SoftplusOutput: return softplus(z);
    case Activation::LinearOutput: return z;
  }
  return z;
}

inline double output_derivative(Activation a, double z, double value) {
  switch (a) {
    case Activation::Tanh: return 1.0 - value * value;
    case Activation::SoftplusOutput: return sigmoid(z);
    case Activation::LinearOutput: return 1.0;
  }
  return 1.0;
}

inline ApproximatorTape& thread_tape() {
  thread_local ApproximatorTape tape;
  return tape;
}

}  // namespace detail

// Forward pass recording pre-activations and activations into `tape`.
inline double forward(const ApproximatorParams& p, double x, ApproximatorTape& tape) {
  require_finite(x, "approximator input");
  int layers = p.layer_count();
  tape.pre.resize(layers);
  tape.act.resize(layers + 1);
  tape.act[0].assign(1, x);
  for (int l = 0; l < layers; ++l) {
    int in = p.layer_sizes[l];
    int out = p.layer_sizes[l + 1];
    const auto& w = p.weights[l];
    const auto& b = p.biases[l];
    const auto& prev = tape.act[l];
    auto& z = tape.pre[l];
    auto& a = tape.act[l + 1];
    z.resize(out);
    a.resize(out);
    for (int o = 0; o < out; ++o) {
      double s = b[o];
      const double* row = w.data() + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < in; ++i) s += row[i] * prev[i];
      z[o] = s;
      a[o] = (l + 1 < layers) ? std::tanh(s) : detail::apply_output(p.activation, s);
    }
  }
  return tape.act[layers][0];
}

inline double forward(const ApproximatorParams& p, double x) {
  return forward(p, x, detail::thread_tape());
}

// Exact d forward / d x by chain rule through the layers.
inline double input_derivative(const ApproximatorParams& p, double x) {
  require_finite(x, "approximator input");
  int layers = p.layer_count();
  std::vector<double> val(1, x), dval(1, 1.0), nval, ndval;
  for (int l = 0; l < layers; ++l) {
    int in = p.layer_sizes[l];
    int out = p.layer_sizes[l + 1];
    const auto& w = p.weights[l];
    const auto& b = p.biases[l];
    nval.resize(out);
    ndval.resize(out);
    for (int o = 0; o < out; ++o) {
      double z = b[o], dz = 0.0;
      const double* row = w.data() + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < in; ++i) {
        z += row[i] * val[i];
        dz += row[i] * dval[i];
      }
      if (l + 1 < layers) {
        double t = std::tanh(z);
        nval[o] = t;
        ndval[o] = (1.0 - t * t) * dz;
      } else {
        nval[o] = detail::apply_output(p.activation, z);
        ndval[o] = detail::output_derivative(p.activation, z, nval[o]) * dz;
      }
    }
    val.swap(nval);
    dval.swap(ndval);
  }
  return dval[0];
}

// Backprop of upstream * forward(x) into `out`, accumulating. `tape` must hold
// the forward pass for the same (p, x).
inline void param_gradient_accum(const ApproximatorParams& p, const ApproximatorTape& tape,
                                 double upstream, ApproximatorGrad& out,
                                 std::vector<std::vector<double>>& delta) {
  int layers = p.layer_count();
  delta.resize(layers);
  {
    double z = tape.pre[layers - 1][0];
    double v = tape.act[layers][0];
    delta[layers - 1].assign(1, upstream * detail::output_derivative(p.activation, z, v));
  }
  for (int l = layers - 1; l >= 0; --l) {
    int in = p.layer_sizes[l];
    int out_w = p.layer_sizes[l + 1];
    const auto& prev = tape.act[l];
    const auto& d = delta[l];
    auto& gw = out.weights[l];
    auto& gb = out.biases[l];
    for (int o = 0; o < out_w; ++o) {
      double dv = d[o];
      gb[o] += dv;
      double* grow = gw.data() + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < in; ++i) grow[i] += dv * prev[i];
    }
    if (l > 0) {
      auto& dprev = delta[l - 1];
      dprev.assign(in, 0.0);
      const auto& w = p.weights[l];
      for (int o = 0; o < out_w; ++o) {
        double dv = d[o];
        const double* row = w.data() + static_cast<std::size_t>(o) * in;
        for (int i = 0; i < in; ++i) dprev[i] += row[i] * dv;
      }
      const auto& aprev = tape.act[l];
      for (int i = 0; i < in; ++i) dprev[i] *= (1.0 - aprev[i] * aprev[i]);
    }
  }
}

// Exact gradient of upstream * forward(x) with respect to every parameter.
inline ApproximatorGrad param_gradient(const ApproximatorParams& p, double x, double upstream) {
  require_finite(x, "approximator input");
  require_finite(upstream, "upstream");
  ApproximatorGrad g = ApproximatorGrad::zeros_like(p);
  ApproximatorTape tape;
  forward(p, x, tape);
  param_gradient_accum(p, tape, upstream, g, tape.delta);
  return g;
}

// Deterministic init: weights uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)),
// biases zero.
inline ApproximatorParams init_params(const std::vector<int>& layer_sizes, std::uint64_t seed,
                                      Activation activation = Activation::LinearOutput) {
  require(!layer_sizes.empty(), "layer_sizes must be nonempty");
  require(layer_sizes.front() == 1 && layer_sizes.back() == 1,
          "first and last layer widths must be 1");
  for (int w : layer_sizes) require(w >= 1, "zero-width layer rejected");

  ApproximatorParams p;
  p.layer_sizes = layer_sizes;
  p.activation = activation;
  std::mt19937_64 engine(seed);
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    std::size_t in = static_cast<std::size_t>(layer_sizes[l]);
    std::size_t out = static_cast<std::size_t>(layer_sizes[l + 1]);
    double scale = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(in * out);
    for (double& v : w) v = (2.0 * canonical53(engine()) - 1.0) * scale;
    p.weights.push_back(std::move(w));
    p.biases.emplace_back(out, 0.0);
  }
  p.validate();
  return p;
}

// Single affine layer w*x + b; handy for exactly representable test models.
inline ApproximatorParams affine_approximator(double w, double b) {
  ApproximatorParams p;
  p.layer_sizes = {1, 1};
  p.weights = {{w}};
  p.biases = {{b}};
  p.activation = Activation::LinearOutput;
  return p;
}

// Softplus head whose output is the constant c (> 0) for every input.
inline ApproximatorParams constant_positive_approximator(double c) {
  require(c > 0.0 && std::isfinite(c), "constant must be positive");
  ApproximatorParams p;
  p.layer_sizes = {1, 1};
  // softplus(b) == c  =>  b = log(exp(c) - 1)
  p.weights = {{0.0}};
  p.biases = {{std::log(std::expm1(c))}};
  p.activation = Activation::SoftplusOutput;
  return p;
}

// Softplus head pinned to a numerically negligible positive value.
inline ApproximatorParams near_zero_positive_approximator() {
  ApproximatorParams p;
  p.layer_sizes = {1, 1};
  p.weights = {{0.0}};
  p.biases = {{-60.0}};  // softplus(-60) ~ 8.8e-27
  p.activation = Activation::SoftplusOutput;
  return p;
}

inline void to_json(nlohmann::json& j, const ApproximatorParams& p) {
  j = nlohmann::json{{"layer_sizes", p.layer_sizes},
                     {"weights", p.weights},
                     {"biases", p.biases},
                     {"activation", to_string(p.activation)}};
}

inline void from_json(const nlohmann::json& j, ApproximatorParams& p) {
  p.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
  p.weights = j.at("weights").get<std::vector<std::vector<double>>>();
  p.biases = j.at("biases").get<std::vector<std::vector<double>>>();
  p.activation = activation_from_string(j.at("activation").get<std::string>());
  p.validate();
}

}  // namespace winddispatch
