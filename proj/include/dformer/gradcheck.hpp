#pragma once

#include <functional>

#include "dformer/tensor.hpp"

namespace dformer {

// Central-difference gradient of a scalar-valued function. Independent of the
// tape machinery: it only re-evaluates f at perturbed copies of x.
Tensor finite_diff_oracle(const std::function<double(const Tensor&)>& f, const Tensor& x,
                          double h = 1e-5);

// max |a - b| / max(1, |a|, |b|) over all coordinates.
double max_rel_error(const Tensor& a, const Tensor& b);

}  // namespace dformer
