#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "fcdm/tensor.hpp"

namespace fcdm {

/// Counter-based generator (SplitMix64 over a 64-bit seed and a draw counter).
/// The full state is (seed, counter), so it serializes exactly and any stream
/// can be re-derived without replaying earlier draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

  /// Independent stream keyed by (seed, id).
  static Rng stream(std::uint64_t seed, std::uint64_t id) {
    return Rng(mix(seed ^ mix(id + 0x632be59bd9b4e019ULL)));
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(seed_ + counter_ * 0x9e3779b97f4a7c15ULL);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

  /// Standard normal via Box-Muller; consumes two uniforms.
  double normal() {
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t counter_;
};

template <class T = float>
Tensor<T> randn(Rng& rng, const Shape& shape) {
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(rng.normal());
  return t;
}

template <class T = float>
Tensor<T> rand_uniform(Rng& rng, const Shape& shape, double lo = 0.0, double hi = 1.0) {
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
  return t;
}

template <class T = float>
Tensor<T> rand_bernoulli(Rng& rng, const Shape& shape, double p) {
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = rng.uniform() < p ? T(1) : T(0);
  return t;
}

/// Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> permutation(Rng& rng, std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

}  // namespace fcdm
