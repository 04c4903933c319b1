#pragma once

#include <cmath>
#include <cstdint>

namespace dformer {

// splitmix64 stream with hand-rolled sampling. The standard library's
// distributions are implementation-defined, so everything that must be
// reproducible bit-for-bit (init, datasets, batch order) goes through this.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Box-Muller; the sine half is discarded to keep the stream position simple.
  double next_normal() {
    double u1 = 1.0 - next_unit();  // (0, 1]
    double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  // Normal(0, std_dev) resampled until within +/- 2 std_dev.
  double next_trunc_normal(double std_dev) {
    double z = next_normal();
    while (std::fabs(z) > 2.0) z = next_normal();
    return z * std_dev;
  }

  // Uniform integer in [0, n). Modulo bias is irrelevant at the n used here.
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  double next_range(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

 private:
  std::uint64_t state_;
};

// Derives an independent stream for item `index` of a seeded family.
inline std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index) {
  return seed ^ (0x9E3779B97F4A7C15ull * (index + 1));
}

}  // namespace dformer
