#include "dsd/optim.hpp"

#include <cmath>
#include <string>

namespace dsd {

double poly_lr(std::uint64_t iter, std::uint64_t max_iter, double base,
               double power) {
  if (max_iter == 0) throw InvalidArgument("poly_lr: max_iter must be >= 1");
  if (iter > max_iter) {
    throw InvalidArgument("poly_lr: iteration " + std::to_string(iter) +
                          " exceeds max_iter " + std::to_string(max_iter));
  }
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(max_iter);
  return base * std::pow(frac, power);
}

void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
              std::vector<Tensor>& velocity, const SgdOptions& options) {
  if (grads.size() != params.size()) {
    throw InvalidArgument("sgd_step: parameter and gradient counts differ");
  }
  if (velocity.empty()) {
    for (const Tensor& p : params) velocity.emplace_back(p.shape());
  }
  if (velocity.size() != params.size()) {
    throw InvalidArgument("sgd_step: velocity count differs from parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    Tensor& v = velocity[i];
    const Tensor& g = grads[i];
    require_same_shape(p, g, "sgd_step");
    require_same_shape(p, v, "sgd_step");
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = options.momentum * v[j] + g[j] + options.weight_decay * p[j];
      p[j] -= options.lr * v[j];
    }
  }
}

}  // namespace dsd
