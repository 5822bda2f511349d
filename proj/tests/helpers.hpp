#pragma once

#include <random>

#include "dsd/tensor.hpp"

namespace testing {

inline dsd::Tensor random_tensor(const dsd::Shape& shape, std::mt19937_64& rng,
                                 double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  dsd::Tensor t(shape);
  for (double& x : t.data()) x = u(rng);
  return t;
}

// Strictly positive entries keep attention maps away from the eps guard.
inline dsd::Tensor positive_tensor(const dsd::Shape& shape, std::mt19937_64& rng) {
  return random_tensor(shape, rng, 0.2, 1.5);
}

}  // namespace testing
