#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "streamconv/tensor.hpp"

namespace streamconv {

// Deterministic RNG with explicitly-coded distributions. std::*_distribution
// is implementation-defined, so this sticks to the fully specified mt19937_64
// bit stream plus hand-rolled transforms: same seed, same values, everywhere.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_bits() { return gen_(); }

  // [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive bounds, rejection sampling for exact uniformity.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return lo + static_cast<int64_t>(v % span);
  }

  // Box-Muller; produces values in pairs.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  void fill_normal(Tensor& t, double stddev) {
    for (int64_t i = 0; i < t.numel(); ++i) t.set_at(i, normal() * stddev);
  }

  void fill_uniform(Tensor& t, double lo, double hi) {
    for (int64_t i = 0; i < t.numel(); ++i) t.set_at(i, uniform(lo, hi));
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace streamconv
