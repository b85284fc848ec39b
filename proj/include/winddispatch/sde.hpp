// Scalar SDE machinery: neural drift/diffusion model, Euler-Maruyama stepping
// with a reflecting boundary at zero, the one-step Gaussian transition
// log-density, and the t,value CSV time-series format.
#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "winddispatch/approximator.hpp"
#include "winddispatch/random.hpp"
#include "winddispatch/util.hpp"

namespace winddispatch {

enum class StateKind { WindSpeed, DemandRate };

inline std::string to_string(StateKind k) {
  return k == StateKind::WindSpeed ? "wind_speed" : "demand_rate";
}

inline StateKind state_kind_from_string(const std::string& s) {
  if (s == "wind_speed") return StateKind::WindSpeed;
  if (s == "demand_rate") return StateKind::DemandRate;
  throw std::invalid_argument("unknown state_kind: " + s);
}

struct SdeModel {
  ApproximatorParams drift;      // state units per second
  ApproximatorParams diffusion;  // state units per sqrt(second), positive output
  StateKind state_kind = StateKind::WindSpeed;

  void validate() const {
    drift.validate();
    diffusion.validate();
    require(diffusion.activation == Activation::SoftplusOutput,
            "diffusion approximator must carry the softplus-output tag");
  }
};

struct TimeSeries {
  double t0 = 0.0;
  double dt = 0.0;  // seconds, > 0
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double time_at(std::size_t i) const { return t0 + static_cast<double>(i) * dt; }

  void validate() const {
    require(dt > 0.0 && std::isfinite(dt), "time series dt must be positive");
    require(!values.empty(), "time series must be nonempty");
    for (double v : values) require_finite(v, "time series value");
  }
};

struct SimulationGrid {
  double t0 = 0.0;
  double horizon = 0.0;  // T, seconds
  double dt = 0.0;

  long step_count() const {
    double n = (horizon - t0) / dt;
    long r = std::lround(n);
    require(r >= 1 && std::abs(n - static_cast<double>(r)) <= 1e-9 * std::max(1.0, n),
            "(T - t0)/dt must be a positive integer");
    return r;
  }

  void validate() const {
    require_finite(t0, "t0");
    require_finite(horizon, "horizon");
    require(dt > 0.0 && std::isfinite(dt), "grid dt must be positive");
    require(horizon > t0, "horizon must exceed t0");
    step_count();
  }
};

// One Euler-Maruyama step, reflected at zero. A non-finite result is returned
// as-is; callers treat it as path divergence.
inline double euler_step(const SdeModel& model, double x, double dt, double noise) {
  require(dt > 0.0 && std::isfinite(dt), "euler_step dt must be positive");
  require_finite(x, "euler_step state");
  require_finite(noise, "euler_step noise");
  double y = x + forward(model.drift, x) * dt + forward(model.diffusion, x) * std::sqrt(dt) * noise;
  return std::fabs(y);
}

// Simulates one path on the grid. Step i consumes the i-th draw of the
// seed's normal stream; the returned series has 1 + (T-t0)/dt samples.
inline TimeSeries simulate_path(const SdeModel& model, double x0, const SimulationGrid& grid,
                                std::uint64_t seed) {
  model.validate();
  grid.validate();
  require_finite(x0, "x0");
  if (model.state_kind == StateKind::WindSpeed) require(x0 >= 0.0, "wind speed x0 must be >= 0");

  long n = grid.step_count();
  TimeSeries out;
  out.t0 = grid.t0;
  out.dt = grid.dt;
  out.values.reserve(static_cast<std::size_t>(n) + 1);
  out.values.push_back(x0);
  NormalStream stream(seed);
  double x = x0;
  for (long i = 0; i < n; ++i) {
    x = euler_step(model, x, grid.dt, stream.next());
    if (!std::isfinite(x)) throw divergence_error("simulated path diverged", i);
    out.values.push_back(x);
  }
  return out;
}

// Log of the Euler-Maruyama transition density
//   Normal(mean = x + f(x) dt, variance = g(x)^2 dt) at x_to.
inline double transition_log_density(const SdeModel& model, double x_from, double x_to, double dt) {
  require(dt > 0.0 && std::isfinite(dt), "dt must be positive");
  require_finite(x_from, "x_from");
  require_finite(x_to, "x_to");
  double mean = x_from + forward(model.drift, x_from) * dt;
  double g = forward(model.diffusion, x_from);
  double var = g * g * dt;
  if (!(var > 0.0) || !std::isfinite(var))
    throw std::domain_error("transition variance must be positive and finite");
  double r = x_to - mean;
  return -0.5 * std::log(2.0 * 3.141592653589793238462643383279502884 * var) - r * r / (2.0 * var);
}

// ---- CSV format: header "t,value", decimal floats, LF line endings ----

namespace detail {

inline double parse_double_field(std::string_view field, long line_no) {
  double v = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw csv_error("malformed number", line_no);
  return v;
}

inline void strip_cr(std::string& s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
}

}  // namespace detail

inline TimeSeries read_timeseries_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw csv_error("cannot open " + path, 0);
  std::string line;
  if (!std::getline(in, line)) throw csv_error("empty file", 1);
  detail::strip_cr(line);
  if (line != "t,value") throw csv_error("expected header \"t,value\"", 1);

  std::vector<double> times, values;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty()) {
      // allow a single trailing blank line only
      if (in.peek() != std::ifstream::traits_type::eof())
        throw csv_error("blank line inside data", line_no);
      break;
    }
    auto comma = line.find(',');
    if (comma == std::string::npos) throw csv_error("expected two comma-separated fields", line_no);
    double t = detail::parse_double_field(std::string_view(line).substr(0, comma), line_no);
    double v = detail::parse_double_field(std::string_view(line).substr(comma + 1), line_no);
    if (!std::isfinite(t) || !std::isfinite(v)) throw csv_error("non-finite sample", line_no);
    times.push_back(t);
    values.push_back(v);
  }
  if (times.size() < 2) throw csv_error("need at least 2 samples to infer dt", line_no);

  double dt0 = times[1] - times[0];
  if (!(dt0 > 0.0)) throw csv_error("time column must be strictly increasing", 3);
  for (std::size_t i = 1; i + 1 < times.size(); ++i) {
    double step = times[i + 1] - times[i];
    if (std::abs(step - dt0) > 1e-6 * dt0)
      throw csv_error("non-uniform sample spacing", static_cast<long>(i) + 3);
  }

  TimeSeries out;
  out.t0 = times.front();
  out.dt = (times.back() - times.front()) / static_cast<double>(times.size() - 1);
  out.values = std::move(values);
  out.validate();
  return out;
}

inline void write_timeseries_csv(const std::string& path, const TimeSeries& series) {
  series.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "t,value\n";
  for (std::size_t i = 0; i < series.values.size(); ++i)
    out << format_g17(series.time_at(i)) << ',' << format_g17(series.values[i]) << '\n';
}

inline void to_json(nlohmann::json& j, const SdeModel& m) {
  j = nlohmann::json{{"state_kind", to_string(m.state_kind)},
                     {"drift", m.drift},
                     {"diffusion", m.diffusion}};
}

inline void from_json(const nlohmann::json& j, SdeModel& m) {
  m.state_kind = state_kind_from_string(j.at("state_kind").get<std::string>());
  m.drift = j.at("drift").get<ApproximatorParams>();
  m.diffusion = j.at("diffusion").get<ApproximatorParams>();
  m.validate();
}

inline SdeModel load_model_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open model file " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  return j.get<SdeModel>();
}

inline void save_model_json(const std::string& path, const SdeModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  nlohmann::json j = model;
  out << j.dump(2) << '\n';
}

}  // namespace winddispatch
