#pragma once

#include <functional>

#include "tail/tensor.hpp"

namespace tail {

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Norm-wise relative error |a - n| / (|a| + |n| + 1e-12) between the analytic
// gradient and central differences with step eps.
double grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-6);

}  // namespace tail
