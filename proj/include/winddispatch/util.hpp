// Shared small pieces: error types, float formatting, fixed-slot parallel map.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace winddispatch {

// A simulated or optimized quantity stopped being finite. `step` is the
// 0-based step (or training-step) index at which it happened.
class divergence_error : public std::runtime_error {
 public:
  divergence_error(const std::string& what, long step_index)
      : std::runtime_error(what + " (step " + std::to_string(step_index) + ")"),
        step(step_index) {}
  long step;
};

// A rollout broke the per-step energy balance or SoC bounds.
class balance_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed CSV input. `line` is 1-based and counts the header row.
class csv_error : public std::runtime_error {
 public:
  csv_error(const std::string& what, long line_no)
      : std::runtime_error(what + " (line " + std::to_string(line_no) + ")"),
        line(line_no) {}
  long line;
};

// Scenario-tree size guard tripped in the brute-force oracle.
class size_guard_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// %.17g — enough digits to round-trip any double through text.
inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void require_finite(double v, const std::string& name) {
  if (!std::isfinite(v)) throw std::invalid_argument(name + " must be finite");
}

// Runs fn(i) for i in [0, n) across a fixed number of contiguous chunks.
// Deterministic as long as fn(i) writes only to slot i of its output; the
// chunk layout does not depend on the machine's core count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  if (n == 0) return;
  unsigned hw = std::thread::hardware_concurrency();
  std::size_t n_chunks = std::min<std::size_t>(n, hw == 0 ? 1 : hw);
  if (n_chunks <= 1 || n < 16) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }

  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto run_range = [&](std::size_t lo, std::size_t hi) {
    try {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  };

  std::vector<std::thread> workers;
  workers.reserve(n_chunks - 1);
  std::size_t chunk = (n + n_chunks - 1) / n_chunks;
  for (std::size_t c = 1; c < n_chunks; ++c) {
    std::size_t lo = c * chunk;
    if (lo >= n) break;
    workers.emplace_back(run_range, lo, std::min(n, lo + chunk));
  }
  run_range(0, std::min(n, chunk));
  for (auto& w : workers) w.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace winddispatch
