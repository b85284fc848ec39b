// Seeded standard-normal stream with a fully specified draw sequence
// (mt19937_64 bits + Box-Muller; no implementation-defined distributions).
#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace winddispatch {

// Uniform in [0,1) from the top 53 bits of one engine draw.
inline double canonical53(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed) : engine_(seed) {}

  // i-th call returns the i-th draw of the stream.
  double next() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // u1 shifted into (0,1] so log() never sees zero.
    double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = canonical53(engine_());
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace winddispatch
