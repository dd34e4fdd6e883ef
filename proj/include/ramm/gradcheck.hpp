#pragma once

#include <functional>

#include "ramm/tensor.hpp"

namespace ramm {

using ScalarFn = std::function<double(const TensorD&)>;

// Central differences, one coordinate at a time. Throws EvaluationError when
// f is non-finite at any probe point.
TensorD finite_difference_gradient(const ScalarFn& f, const TensorD& x, double h = 1e-5);

// max_i |a_i - b_i| / max(|a|_inf, |b|_inf, floor). The floor keeps
// all-near-zero gradients from blowing up the ratio.
double relative_error(const TensorD& analytic, const TensorD& numeric, double floor = 1e-8);

}  // namespace ramm
