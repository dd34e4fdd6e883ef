#include "ramm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ramm {

TensorD finite_difference_gradient(const ScalarFn& f, const TensorD& x, double h) {
  if (!(h > 0)) throw std::invalid_argument("finite_difference_gradient: h must be positive");
  TensorD probe = x;
  TensorD grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw EvaluationError("finite_difference_gradient: non-finite value at coordinate " + std::to_string(i));
    }
    grad[i] = (fp - fm) / (2 * h);
  }
  return grad;
}

double relative_error(const TensorD& analytic, const TensorD& numeric, double floor) {
  if (analytic.size() != numeric.size()) throw DimensionError("relative_error: size mismatch");
  double diff = 0, scale = floor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / scale;
}

}  // namespace ramm
