#pragma once

#include <functional>
#include <map>
#include <string>

#include "dsd/tensor.hpp"

namespace dsd {

using TensorMap = std::map<std::string, Tensor>;
using LossFn = std::function<GradPair(const TensorMap&)>;

// Compares the analytic gradients returned by `f` against central
// differences (f(x+h) - f(x-h)) / 2h for every coordinate of every slot that
// `f` reports a gradient for. Returns the maximum of
// |analytic - numeric| / max(1, |numeric|).
double finite_diff_check(const LossFn& f, const TensorMap& inputs,
                         double h = 1e-3);

}  // namespace dsd
