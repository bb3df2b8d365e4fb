#include "metaloop/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace metaloop {

namespace {

Tensor perturbed(const Tensor& x, std::size_t i, double delta) {
  std::vector<double> v(x.values().begin(), x.values().end());
  v[i] += delta;
  return Tensor(x.shape(), std::move(v));
}

double eval_value(const TensorFn& f, const Tensor& x) {
  const TapePtr tape = GradTape::make();
  const Tensor y = f(tape->leaf(x), tape);
  if (y.size() != 1) {
    throw std::invalid_argument("grad_check: function output must have one element");
  }
  return y.item();
}

// Analytic gradient of f at x as raw values, plus detach diagnostics.
struct GradEval {
  std::vector<double> grad;
  bool detached = false;
  bool finite = true;
};

GradEval eval_grad(const TensorFn& f, const Tensor& x) {
  const TapePtr tape = GradTape::make();
  const Tensor leaf = tape->leaf(x);
  const Tensor y = f(leaf, tape);
  const Tensor wrt[] = {leaf};
  const BackwardResult r = backward(y, wrt, {});
  GradEval out;
  out.grad.assign(r.grads[0].values().begin(), r.grads[0].values().end());
  out.detached = r.diag.detached[0];
  for (double v : out.grad) out.finite = out.finite && std::isfinite(v);
  return out;
}

void fold(GradCheckReport& rep, double analytic, double numeric) {
  if (!std::isfinite(analytic) || !std::isfinite(numeric)) {
    rep.finite = false;
    return;
  }
  const double abs_err = std::abs(analytic - numeric);
  const double scale = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
  rep.max_rel_err = std::max(rep.max_rel_err, abs_err / scale);
  rep.entries += 1;
}

}  // namespace

GradCheckReport grad_check(const TensorFn& f, const Tensor& x, int order,
                           double eps) {
  if (order != 1 && order != 2) {
    throw std::invalid_argument("grad_check: order must be 1 or 2");
  }
  GradCheckReport rep;
  const std::size_t n = x.size();

  if (order == 1) {
    const GradEval g = eval_grad(f, x);
    rep.finite = g.finite;
    rep.intentional_detach = g.detached;
    for (std::size_t i = 0; i < n; ++i) {
      const double up = eval_value(f, perturbed(x, i, eps));
      const double down = eval_value(f, perturbed(x, i, -eps));
      fold(rep, g.grad[i], (up - down) / (2.0 * eps));
    }
    return rep;
  }

  // Order 2: analytic Hessian rows come from differentiating the gradient a
  // second time; the reference is a central difference of the analytic
  // gradient, so a wrong first derivative also surfaces here.
  const TapePtr tape = GradTape::make();
  const Tensor leaf = tape->leaf(x);
  const Tensor y = f(leaf, tape);
  const Tensor wrt[] = {leaf};
  BackwardOptions keep;
  keep.create_graph = true;
  const BackwardResult first = backward(y, wrt, keep);
  const Tensor g_flat = reshape(first.grads[0], {n});
  rep.intentional_detach = first.diag.detached[0];

  std::vector<std::vector<double>> hess(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor gi = index_select(g_flat, 0, {i});
    const BackwardResult row = backward(sum(gi), wrt, {});
    hess[i].assign(row.grads[0].values().begin(), row.grads[0].values().end());
  }

  for (std::size_t j = 0; j < n; ++j) {
    const GradEval up = eval_grad(f, perturbed(x, j, eps));
    const GradEval down = eval_grad(f, perturbed(x, j, -eps));
    rep.finite = rep.finite && up.finite && down.finite;
    for (std::size_t i = 0; i < n; ++i) {
      fold(rep, hess[i][j], (up.grad[i] - down.grad[i]) / (2.0 * eps));
    }
  }
  return rep;
}

}  // namespace metaloop
