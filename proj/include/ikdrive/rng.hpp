#pragma once
// Counter-based splittable PRNG. Streams are keyed hashes of (seed, split path),
// so any draw is a pure function of the key and a counter; no hidden state
// beyond the counter, and split() yields statistically independent streams.

#include <cmath>
#include <cstdint>

#include "ikdrive/tensor.hpp"

namespace ikdrive {

namespace detail {
inline uint64_t mix64(uint64_t z) {
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ULL;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return z;
}
}  // namespace detail

class Rng {
 public:
  explicit Rng(uint64_t seed) : key_(detail::mix64(seed ^ 0x2545f4914f6cdd1dULL)), counter_(0) {}

  Rng split(uint64_t stream) const {
    Rng r(*this);
    r.key_ = detail::mix64(key_ ^ detail::mix64(stream + 0xd1b54a32d192ed03ULL));
    r.counter_ = 0;
    return r;
  }

  uint64_t next_u64() {
    ++counter_;
    return detail::mix64(key_ + 0x9e3779b97f4a7c15ULL * counter_);
  }

  // Uniform on the open interval (0,1).
  double next_uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  double next_range(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

  // Box-Muller without caching, so each draw consumes exactly two uniforms.
  double next_gaussian() {
    double u1 = next_uniform();
    double u2 = next_uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  int64_t next_below(int64_t n) {
    if (n <= 0) throw ArgumentError("Rng::next_below: n must be positive");
    return static_cast<int64_t>((static_cast<__uint128_t>(next_u64()) * static_cast<__uint128_t>(n)) >> 64);
  }

  Tensor gaussian_tensor(Shape shape, double sigma = 1.0) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = sigma * next_gaussian();
    return t;
  }

  uint64_t key() const { return key_; }

 private:
  uint64_t key_;
  uint64_t counter_;
};

}  // namespace ikdrive
