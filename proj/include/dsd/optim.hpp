#pragma once

#include <cstdint>
#include <vector>

#include "dsd/tensor.hpp"

namespace dsd {

// base * (1 - iter / max_iter)^power
double poly_lr(std::uint64_t iter, std::uint64_t max_iter, double base,
               double power);

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

// v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
// `velocity` is resized to zeros on first use.
void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
              std::vector<Tensor>& velocity, const SgdOptions& options);

}  // namespace dsd
