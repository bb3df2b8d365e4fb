#pragma once

#include <cstdint>
#include <functional>

#include "metaloop/nn.hpp"

namespace metaloop {

enum class OptimizerKind : std::uint8_t { Sgd = 0, Adagrad = 1, Adam = 2 };

const char* optimizer_name(OptimizerKind kind);
OptimizerKind optimizer_from_name(const std::string& name);

/// Hyperparameters for one parameter group. All of them are one-element
/// tensors so they can sit on a tape and receive gradients.
struct GroupHyper {
  Tensor learning_rate;
  Tensor beta1, beta2;  // adam only
  double eps = 1e-8;    // adam: added outside the square root
};

/// Optimizer hyperparameters, either one entry shared by every parameter
/// group or one entry per group.
struct OptHyper {
  OptimizerKind kind = OptimizerKind::Sgd;
  std::vector<GroupHyper> groups;
  /// Added inside the square root of adaptive denominators so the first
  /// step is differentiable even with a zero accumulator.
  double accum_eps = 1e-10;

  const GroupHyper& for_group(std::size_t i) const;
  std::vector<Tensor> tensors() const;  // learnable tensors in stable order
};

OptHyper sgd_hyper(double alpha);
OptHyper adagrad_hyper(double eta, double accum_eps = 1e-10);
OptHyper adam_hyper(double lr, double beta1 = 0.9, double beta2 = 0.999,
                    double eps = 1e-8, double accum_eps = 1e-10);

/// Slot tensors carried between steps: nothing for sgd, the squared-gradient
/// accumulator for adagrad, first and second moments for adam. Slots mirror
/// the parameter structure.
struct OptState {
  OptimizerKind kind = OptimizerKind::Sgd;
  std::int64_t step = 0;
  std::vector<ParameterSet> slots;

  std::vector<Tensor> tensors() const;  // all slot tensors, stable order
  OptState with_tensors(std::span<const Tensor> tensors) const;
};

OptState init_opt_state(OptimizerKind kind, const ParameterSet& params);

/// Structural copy with fresh detached buffers: stepping from the copy can
/// never disturb the original.
OptState deep_copy_state(const OptState& state);

struct OptStepResult {
  ParameterSet params;
  OptState state;
};

/// One optimizer update built entirely from differentiable primitives.
/// Inputs are untouched; the returned parameters and state are new tensors
/// on the same tape, so derivative paths through the update (including
/// through the state recurrences) stay available.
OptStepResult sgd_step(const ParameterSet& params, const ParameterSet& grads,
                       const OptHyper& hyper);
OptStepResult adagrad_step(const ParameterSet& params, const ParameterSet& grads,
                           const OptState& state, const OptHyper& hyper);
OptStepResult adam_step(const ParameterSet& params, const ParameterSet& grads,
                        const OptState& state, const OptHyper& hyper);

/// Dispatch on state.kind (state is ignored by sgd).
OptStepResult opt_step(const ParameterSet& params, const ParameterSet& grads,
                       const OptState& state, const OptHyper& hyper);

// ---------------------------------------------------------------------------
// Closed-form derivative oracles, evaluated with plain arithmetic and no
// tape. Tests compare tape-produced jacobians against these.

using Vec = std::vector<double>;
using LinearAction = std::function<Vec(const Vec&)>;

/// Derivatives of one sgd step theta' = theta - alpha * G.
struct SgdStepGrads {
  Vec G;
  double alpha = 0.0;
  Vec dtheta_dalpha() const;  // -G, per coordinate
  double dG_diag() const { return -alpha; }
  /// Chain rule with caller-supplied dependence of theta, alpha, G on one
  /// scalar phi: dtheta'/dphi = dtheta/dphi - G*dalpha/dphi - alpha*dG/dphi.
  Vec dphi(const Vec& dtheta_dphi, double dalpha_dphi, const Vec& dG_dphi) const;
  /// (d theta'/d theta) v for G = G(theta) with Hessian action H.
  Vec dtheta_action(const Vec& v, const LinearAction& hess) const;
};
SgdStepGrads analytic_sgd_grads(const Vec& theta, const Vec& G, double alpha);

/// Dependence ingredients of an adagrad trajectory on one scalar phi.
struct AdagradDeps {
  double deta_dphi = 0.0;
  Vec dtheta0_dphi;           // empty means zeros
  std::vector<Vec> dG_dphi;   // one entry per history step; empty means zeros
};

/// d theta_{t+1} / d phi after stepping through the whole gradient history
/// G_1..G_t with rate eta. Applies the per-step closed form
///   dtheta' = dtheta - eta*dG_t/S - G_t*deta/S + eta*G_t*sum_i(G_i*dG_i)/S^3
/// with S = sqrt(sum_i G_i^2 + accum_eps), coordinate-wise.
Vec analytic_adagrad_dphi(const std::vector<Vec>& G_history, double eta,
                          double accum_eps, const AdagradDeps& deps);

/// One-step (d theta_{t+1}/d theta_t) v for the last history step, with the
/// training-gradient Hessian action H:
///   v - eta*H(v)/S + eta*G_t^2*H(v)/S^3, coordinate-wise.
Vec analytic_adagrad_dtheta_action(const std::vector<Vec>& G_history, double eta,
                                   double accum_eps, const Vec& v,
                                   const LinearAction& hess);

}  // namespace metaloop
