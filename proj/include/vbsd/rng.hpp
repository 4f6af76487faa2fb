#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

#include "vbsd/error.hpp"

namespace vbsd {

namespace detail {
// SplitMix64 finalizer. Used in counter mode: one application per draw.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace detail

// Counter-based stream: draws are mix64(key + n) for n = 0,1,2,... and child
// streams are derived by hashing (key, child index). Splitting never shares
// state with the parent, so per-particle / per-env streams are independent of
// evaluation order — the basis of every bit-reproducibility contract here.
class RngStream {
 public:
  RngStream() : RngStream(0) {}
  explicit RngStream(std::uint64_t seed) : key_(detail::mix64(seed ^ 0x5851f42d4c957f2dULL)) {}

  RngStream split(std::uint64_t child) const {
    RngStream s;
    s.key_ = detail::mix64(key_ ^ detail::mix64(child + 0x9e3779b97f4a7c15ULL));
    s.ctr_ = 0;
    return s;
  }

  std::uint64_t next_u64() { return detail::mix64(key_ + 0x632be59bd9b4e019ULL * ++ctr_); }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    require(n > 0, "uniform_int: n must be positive");
    // Rejection-free modulo bias is < 2^-53 territory for desk-scale n; use
    // the double path so results are reproducible across platforms.
    auto k = static_cast<std::uint64_t>(next_double() * static_cast<double>(n));
    return k >= n ? n - 1 : k;
  }

  // Box-Muller; consumes two uniforms per call (no cached spare, so the draw
  // count per sample is fixed and streams stay alignment-free).
  double next_gaussian() {
    double u1 = 1.0 - next_double();  // (0, 1]
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Inverse-CDF draw from an unnormalized nonnegative weight vector.
  std::size_t next_categorical(std::span<const double> w) {
    require(!w.empty(), "next_categorical: empty weights");
    double total = 0;
    for (double x : w) {
      require(x >= 0 && std::isfinite(x), "next_categorical: weights must be finite and >= 0");
      total += x;
    }
    require(total > 0, "next_categorical: weights sum to zero");
    double u = next_double() * total;
    double acc = 0;
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
      acc += w[i];
      if (u < acc) return i;
    }
    return w.size() - 1;
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t ctr_ = 0;
};

}  // namespace vbsd
