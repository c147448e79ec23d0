#pragma once

#include <cmath>
#include <cstddef>
#include <random>

#include "edje/autograd.hpp"

namespace edje {

/// Gaussian matrix with std 1/sqrt(fan_in).
inline Parameter init_weight(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  return Parameter{Tensor::randn({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng),
                   true};
}

inline Parameter init_constant(std::size_t n, double value) {
  return Parameter{Tensor({n}, value), false};
}

}  // namespace edje
