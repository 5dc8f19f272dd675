#pragma once

#include "strata/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace strata {

struct GradcheckReport {
  double max_rel_err = 0.0;
  std::string worst;  // location of the worst element
  bool finite = true;

  bool pass(double tol) const { return finite && max_rel_err <= tol; }
};

// Relative error with an absolute floor of 1 so that near-zero gradients are
// compared absolutely.
inline double gradcheck_rel_err(double a, double n) {
  const double denom = std::max({1.0, std::abs(a), std::abs(n)});
  return std::abs(a - n) / denom;
}

// Central finite-difference check of analytic gradients.
//
// `loss_fn` re-evaluates the scalar objective from the current contents of
// `inputs`; `analytic[k]` is dLoss/dInputs[k], computed once by the caller via
// the op's backward pass. Each input element is perturbed by +/- h.
inline GradcheckReport gradcheck(const std::function<double()>& loss_fn,
                                 const std::vector<Mat<double>*>& inputs,
                                 const std::vector<Mat<double>>& analytic, double h = 1e-5) {
  GradcheckReport rep;
  if (analytic.size() != inputs.size()) {
    throw std::invalid_argument("gradcheck: analytic gradient count does not match inputs");
  }
  for (size_t k = 0; k < inputs.size(); ++k) {
    Mat<double>& x = *inputs[k];
    const Mat<double>& ga = analytic[k];
    require_same_shape(x, ga, "gradcheck");
    for (Index i = 0; i < x.rows(); ++i) {
      for (Index j = 0; j < x.cols(); ++j) {
        const double saved = x(i, j);
        x(i, j) = saved + h;
        const double lp = loss_fn();
        x(i, j) = saved - h;
        const double lm = loss_fn();
        x(i, j) = saved;
        const double numeric = (lp - lm) / (2.0 * h);
        const double a = ga(i, j);
        const std::string loc = "input " + std::to_string(k) + " elem (" + std::to_string(i) +
                                "," + std::to_string(j) + ")";
        if (!std::isfinite(numeric) || !std::isfinite(a)) {
          rep.finite = false;
          rep.worst = loc + " non-finite";
          rep.max_rel_err = std::numeric_limits<double>::infinity();
          return rep;
        }
        const double e = gradcheck_rel_err(a, numeric);
        if (e > rep.max_rel_err) {
          rep.max_rel_err = e;
          rep.worst = loc;
        }
      }
    }
  }
  return rep;
}

}  // namespace strata
