#pragma once

#include <functional>

#include "focc/tensor.hpp"

namespace focc {

// Compares the analytic gradient of scalar-valued f at x against central finite
// differences; returns the max relative error with denominator
// max(|a|, |n|, denom_floor). Evaluations run in 64-bit; x is perturbed in
// place and restored. Deep compositions accumulate roundoff of roughly
// eps/h per evaluation, so checks through many layers should raise the floor
// above that noise level instead of tightening h.
double finite_diff_check(const std::function<Tensor(const Tensor &)> &f, Tensor x,
                         double h = 1e-5, double denom_floor = 1e-8);

}  // namespace focc
