#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "stoep/tensor.hpp"

namespace stoep {

// Every stochastic component draws from this engine; results are
// reproducible for a given seed on a given standard library.
using Rng = std::mt19937_64;

inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

// Glorot-uniform weights for a [fan_in, fan_out] map.
inline Tensor xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_tensor({fan_in, fan_out}, bound, rng);
}

}  // namespace stoep
