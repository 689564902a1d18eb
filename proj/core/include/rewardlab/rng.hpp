#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

#include "rewardlab/errors.hpp"

namespace rewardlab {

// Seed derivation for named substreams. Every random decision in the project
// draws from a stream derived as (base seed, stage tag, counter), so adding a
// stage or toggling one never perturbs the randomness of another.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::uint64_t counter = 0) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a over the tag bytes
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return splitmix64(splitmix64(base ^ h) + counter);
}

// Deterministic random stream. Raw mt19937_64 output is standardized, and the
// distributions below are implemented here rather than via <random> adapters,
// so identical seeds give bit-identical draws on every platform.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  bool bernoulli(double p) { return uniform01() < p; }

  // Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw InputError("uniform_index: n must be positive");
    // Rejection sampling on the top bits keeps the draw exactly uniform.
    const std::uint64_t limit = ~0ull - (~0ull % n);
    std::uint64_t v = gen_();
    while (v >= limit) v = gen_();
    return static_cast<std::size_t>(v % n);
  }

  // Index draw from unnormalized nonnegative weights via CDF inversion.
  std::size_t categorical(std::span<const double> weights) {
    if (weights.empty()) throw InputError("categorical: empty weight vector");
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw NumericError("categorical: nonpositive weight total");
    const double r = uniform01() * total;
    double cum = 0.0;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
      cum += weights[i];
      if (r < cum) return i;
    }
    return weights.size() - 1;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      const std::size_t j = uniform_index(i + 1);
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace rewardlab
