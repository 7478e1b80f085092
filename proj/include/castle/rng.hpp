#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "castle/matrix.hpp"

namespace castle {

// Deterministic seeded generator (splitmix64 core). Both the uniform mapping
// and the Box-Muller normal transform are spelled out here rather than taken
// from <random> so that identical seeds give identical streams on every
// platform and standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() noexcept {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1): top 53 bits of the stream.
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; consumes two uniforms per call.
  double normal() noexcept {
    const double u1 = 1.0 - uniform();  // (0, 1]: keeps the log finite
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T = double>
  Matrix<T> normal_matrix(std::size_t rows, std::size_t cols, T scale = T{1}) {
    Matrix<T> m(rows, cols);
    for (T& v : m.data()) v = scale * static_cast<T>(normal());
    return m;
  }

 private:
  std::uint64_t state_;
};

}  // namespace castle
