#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace avatar {

// mt19937_64 gives a portable bit stream; the uniform/normal mappings are
// done by hand because std:: distributions are implementation-defined and
// several regression values in the tests are frozen from specific streams.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n), unbiased via rejection
  int uniform_int(int n) {
    const uint64_t bound = ~uint64_t{0} - ~uint64_t{0} % static_cast<uint64_t>(n);
    uint64_t x;
    do {
      x = eng_();
    } while (x >= bound);
    return static_cast<int>(x % static_cast<uint64_t>(n));
  }

  // Box-Muller
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Derive an independent stream id from a base seed and a context tag.
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace avatar
