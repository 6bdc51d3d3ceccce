#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "cocktail/tensor.hpp"

namespace cocktail {

using Rng = std::mt19937_64;

/// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a list of tags.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = mix64(seed);
  for (std::uint64_t t : tags) h = mix64(h ^ mix64(t + 0x632be59bd9b4e019ULL));
  return h;
}

template <typename Scalar = double>
MatrixX<Scalar> randn(Eigen::Index rows, Eigen::Index cols, Scalar stddev, Rng& rng) {
  std::normal_distribution<Scalar> dist(Scalar(0), stddev);
  MatrixX<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

/// Uniform integer in [0, n).
inline std::size_t uniform_index(std::size_t n, Rng& rng) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace cocktail
