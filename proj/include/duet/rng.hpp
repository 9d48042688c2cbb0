#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "duet/tensor.hpp"

namespace duet {

// Deterministic RNG used everywhere. splitmix64 core; uniform and normal
// draws are generated with fixed algorithms so results are identical on
// every platform (std::*_distribution is implementation-defined).
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform on [0,1).
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer on [lo, hi], inclusive. Rejection sampling, no modulo bias.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
    uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    for (;;) {
      uint64_t r = next_u64();
      if (r < limit) return lo + static_cast<int64_t>(r % range);
    }
  }

  // Standard normal via Box-Muller; consumes exactly two uniforms per call.
  double normal() {
    double u1 = 1.0 - uniform01();  // (0,1]
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  Tensor normal_tensor(Shape shape) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = normal();
    return t;
  }

  Tensor uniform_tensor(Shape shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = uniform(lo, hi);
    return t;
  }

 private:
  uint64_t state_;
};

namespace detail {
inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}
inline uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}
}  // namespace detail

// Named-stream seed splitting: every stage/draw derives its own seed from the
// root seed, so pipeline stages stay independent and reproducible.
inline uint64_t derive_seed(uint64_t root, std::string_view stream) {
  return detail::mix64(root ^ detail::fnv1a64(stream));
}
inline uint64_t derive_seed(uint64_t root, uint64_t counter) {
  return detail::mix64(root + 0x9E3779B97F4A7C15ULL * (counter + 1));
}
inline uint64_t derive_seed(uint64_t root, std::string_view stream, uint64_t counter) {
  return derive_seed(derive_seed(root, stream), counter);
}

}  // namespace duet
