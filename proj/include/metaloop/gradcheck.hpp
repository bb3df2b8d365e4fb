#pragma once

#include <functional>

#include "metaloop/ops.hpp"

namespace metaloop {

/// A scalar-valued function of one tensor, built on the given tape.
using TensorFn = std::function<Tensor(const Tensor& x, const TapePtr& tape)>;

struct GradCheckReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;   // |a-b| / max(1, |a|, |b|)
  std::size_t entries = 0;    // derivative entries compared
  bool finite = true;         // everything evaluated to finite values
  /// The analytic gradient is zero because the function routes x through a
  /// stop_gradient; a mismatch against finite differences is then expected
  /// and intentional, not a defect.
  bool intentional_detach = false;
  bool ok(double tol) const {
    return finite && (intentional_detach || max_rel_err < tol);
  }
};

/// Compare tape gradients of f against central finite differences at x.
/// order 1 checks the gradient itself; order 2 checks the full Hessian by
/// differencing the analytic gradient, which exercises gradients of
/// gradients. `eps` is the probe step.
GradCheckReport grad_check(const TensorFn& f, const Tensor& x, int order = 1,
                           double eps = 1e-6);

}  // namespace metaloop
