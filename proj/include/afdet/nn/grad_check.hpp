#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "afdet/common.hpp"
#include "afdet/tensor.hpp"

namespace afdet::nn {

// Central-difference check of an analytic gradient for a scalar-valued pure
// map f. Returns max over coordinates of
// |analytic - cd| / max(|analytic|, |cd|, 1e-8).
inline double grad_check(const std::function<double(const DTensor&)>& f,
                         const DTensor& x, const DTensor& analytic,
                         double eps = 1e-5) {
  require(x.same_shape(analytic), "grad_check: gradient shape mismatch");
  require(eps > 0.0, "grad_check: eps must be positive");
  DTensor probe = x;
  double worst = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = f(probe);
    probe[i] = orig - eps;
    const double fm = f(probe);
    probe[i] = orig;
    const double cd = (fp - fm) / (2.0 * eps);
    const double denom =
        std::max({std::abs(analytic[i]), std::abs(cd), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - cd) / denom);
  }
  return worst;
}

}  // namespace afdet::nn
