#include "dsd/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace dsd {

double finite_diff_check(const LossFn& f, const TensorMap& inputs, double h) {
  if (!(h >= 1e-5 && h <= 1e-2)) {
    throw InvalidArgument("finite_diff_check: step must lie in [1e-5, 1e-2]");
  }
  const GradPair analytic = f(inputs);
  TensorMap probe = inputs;
  double worst = 0.0;
  for (const auto& [slot, grad] : analytic.grads) {
    auto it = probe.find(slot);
    if (it == probe.end()) {
      throw InvalidArgument("finite_diff_check: gradient for unknown slot " +
                            slot);
    }
    require_same_shape(it->second, grad, "finite_diff_check");
    Tensor& x = it->second;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + h;
      const double up = f(probe).value;
      x[i] = saved - h;
      const double down = f(probe).value;
      x[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err =
          std::abs(grad[i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace dsd
