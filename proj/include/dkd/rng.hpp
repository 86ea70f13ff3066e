#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace dkd {

/// Deterministic random source.
///
/// std::mt19937 supplies the bit stream (its output is pinned by the
/// standard), but all transforms on top of it are hand-rolled: the standard
/// library's uniform_real/normal distributions are implementation-defined
/// and would break run-to-run reproducibility across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(static_cast<std::uint32_t>(seed ^ (seed >> 32))) {}

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    const std::uint64_t hi = gen_();
    const std::uint64_t lo = gen_();
    return static_cast<double>(((hi << 32) | lo) >> 11) * 0x1.0p-53;
  }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (no cached spare: keeps the draw count
  /// per call fixed, which keeps interleaved consumers reproducible).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// Uniform integer in [0, n). Rejection-sampled, so it is exactly uniform.
  std::uint64_t uniform_int(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
      v = (static_cast<std::uint64_t>(gen_()) << 32) | gen_();
    } while (v >= limit);
    return v % n;
  }

  /// In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_int(i)]);
    }
  }

 private:
  std::mt19937 gen_;
};

}  // namespace dkd
