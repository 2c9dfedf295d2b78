#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <random>

namespace tif {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a tuple of
/// indices, e.g. derive_seed(seed, {image, t, draw}).
constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = mix64(base);
  for (const auto k : keys) {
    h = mix64(h ^ mix64(k + 0x632BE59BD9B4E019ULL));
  }
  return h;
}

template <class Vec>
void fill_standard_normal(Vec& v, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    v[i] = static_cast<typename Vec::Scalar>(normal(rng));
  }
}

}  // namespace tif
