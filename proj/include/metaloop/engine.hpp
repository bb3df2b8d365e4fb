#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metaloop/nn.hpp"
#include "metaloop/optim.hpp"
#include "metaloop/rng.hpp"

namespace metaloop {

/// How a stored (unconstrained) meta-parameter maps to the value the inner
/// loop actually uses. Storage stays unconstrained so the meta-optimizer can
/// move freely; the transform enforces the usable range. Detached routes the
/// value through a gradient stop — the meta-gradient for such an entry is
/// identically zero, which the requirements checker reports.
enum class HyperTransform { Identity, Softplus, Sigmoid, Detached };

Tensor apply_transform(HyperTransform t, const Tensor& raw);
double transform_value(HyperTransform t, double raw);
double inverse_transform_value(HyperTransform t, double value);

enum class HyperField { LearningRate, Beta1, Beta2 };
enum class MetaRole { Opt, Loss };

struct MetaEntry {
  MetaRole role = MetaRole::Loss;
  std::string name;
  Tensor raw;  // unconstrained storage, never on a tape
  HyperTransform transform = HyperTransform::Identity;
  // optimizer entries only: which hyperparameter slot this drives
  std::size_t group = 0;
  HyperField field = HyperField::LearningRate;
};

struct AttachedPhi;

/// The learnable quantities of the outer problem: a subset of the inner
/// optimizer's hyperparameters plus free tensors consumed by the loss (or
/// used as the initialization when that is what is being learned). The
/// object itself is plain storage; attach() instantiates everything on a
/// tape for one meta-iteration.
class MetaParameters {
 public:
  MetaParameters() = default;
  explicit MetaParameters(OptHyper inner_base) : base_(std::move(inner_base)) {}

  const OptHyper& inner_base() const { return base_; }

  /// Declare groups[group].<field> learnable. `initial` is the effective
  /// starting value; the stored raw value is the transform's preimage.
  std::size_t learn_hyper(std::size_t group, HyperField field, double initial,
                          HyperTransform t = HyperTransform::Identity,
                          std::string name = {});

  /// Declare a free loss/initialization tensor. `raw` is stored as given
  /// (for a non-identity transform the caller supplies the preimage).
  std::size_t add_loss(std::string name, Tensor raw,
                       HyperTransform t = HyperTransform::Identity);

  std::size_t size() const { return entries_.size(); }
  const std::vector<MetaEntry>& entries() const { return entries_; }
  const MetaEntry& entry(std::size_t i) const { return entries_.at(i); }

  std::vector<Tensor> raw_tensors() const;
  MetaParameters with_updated(std::span<const Tensor> new_raw) const;

  /// Partition raw tensors by role; join() reassembles them in declaration
  /// order. join(split()) is the identity.
  std::pair<std::vector<Tensor>, std::vector<Tensor>> split() const;
  std::vector<Tensor> join(std::span<const Tensor> opt,
                           std::span<const Tensor> loss) const;

  /// (name, effective value) for every single-element entry — the numbers a
  /// metrics row wants.
  std::vector<std::pair<std::string, double>> effective_scalars() const;

  AttachedPhi attach(const TapePtr& tape) const;

 private:
  OptHyper base_;
  std::vector<MetaEntry> entries_;
};

/// One meta-iteration's live view: every raw entry leafed onto the tape,
/// transforms applied, optimizer hyperparameters spliced into a usable
/// OptHyper, loss tensors collected in declaration order.
struct AttachedPhi {
  TapePtr tape;
  OptHyper hyper;               // effective hyperparameters, learnables taped
  std::vector<Tensor> loss;     // effective loss/init tensors
  std::vector<Tensor> raw_leaves;  // aligned with MetaParameters entries
  std::vector<Tensor> effective;   // aligned with entries
  std::vector<std::string> names;
  std::vector<MetaRole> roles;
};

/// Per-step training loss: (step index, current parameters, phi) -> taped
/// scalar. Step-specific data (batches, task draws) lives in the closure.
using StepLossFn = std::function<Tensor(std::size_t step, const ParameterSet&,
                                        const AttachedPhi&)>;
/// Validation objective at the final parameters.
using ValLossFn = std::function<Tensor(const ParameterSet&, const AttachedPhi&)>;

/// Everything one unrolled inner run leaves behind: the parameter
/// trajectory, the per-step training gradients, and the optimizer-state
/// trajectory, all on one tape so any derivative of any piece is available.
struct InnerTrace {
  TapePtr tape;
  AttachedPhi phi;
  std::vector<ParameterSet> thetas;      // steps+1 entries
  std::vector<ParameterSet> grads;       // steps entries
  std::vector<OptState> states;          // steps+1 entries
  std::vector<Tensor> train_losses;      // steps entries

  std::size_t steps() const { return grads.size(); }
};

/// Run `steps` differentiable optimizer updates from theta_t. The caller's
/// tensors are adopted as-is when already on this tape (that is how a
/// meta-learned initialization stays wired in) and registered as leaves
/// otherwise; theta_t and opt_state themselves are never modified. Training
/// gradients are produced with graph retention, so second-order paths
/// through them survive.
InnerTrace unroll_inner(const ParameterSet& theta_t, const OptState& opt_state,
                        const AttachedPhi& phi, std::size_t steps,
                        const StepLossFn& step_loss, const TapePtr& tape);

/// Validation objective at the trace's final parameters (taped scalar).
Tensor meta_loss(const InnerTrace& trace, const ValLossFn& val_loss);

/// Gradient of the validation objective with respect to every raw meta
/// entry, plus per-entry reachability diagnostics.
struct MetaGradient {
  std::vector<Tensor> grads;  // aligned with MetaParameters entries, detached
  std::vector<MetaRole> roles;
  std::vector<std::string> names;
  std::vector<bool> unreachable;  // no differentiable path to the objective
  std::vector<bool> detached;     // a path exists but only through stops
  std::string method;             // "autodiff" | "recursive"

  std::vector<Tensor> wrt_opt() const;
  std::vector<Tensor> wrt_loss() const;
  double global_norm() const;
};

/// Whole-graph reverse accumulation: one backward pass from the validation
/// objective through the entire unrolled trace.
MetaGradient meta_backward_autodiff(const InnerTrace& trace, const Tensor& lval);

struct RecursiveOptions {
  /// Isolate each step's partial derivatives with gradient stops while
  /// walking the recursion. Turning this off is only useful to demonstrate
  /// that the isolation is load-bearing: results then double-count paths.
  bool protect_partials = true;
  /// Drop the gradient-of-gradient terms (the curvature path through the
  /// training gradients). A probe knob; the result is a first-order
  /// approximation.
  bool ablate_second_order = false;
};

/// Step-by-step accumulator recursion over the trace: walks the unroll
/// backwards carrying the adjoint of the current parameters and of the
/// optimizer state, peeling per-step contributions with barriered backward
/// passes. Mathematically identical to meta_backward_autodiff; exists so the
/// two can check each other.
MetaGradient meta_backward_recursive(const InnerTrace& trace, const Tensor& lval,
                                     const RecursiveOptions& opts = {});
/// Convenience overload that evaluates the validation objective itself.
MetaGradient meta_backward_recursive(const InnerTrace& trace,
                                     const ValLossFn& val_loss,
                                     const RecursiveOptions& opts = {});

/// Mean of per-trace meta-gradients (a pure, ordered reduction).
MetaGradient average_meta_gradients(std::span<const MetaGradient> parts);

/// Plain (untaped) optimizer over the raw meta entries.
class MetaOptimizer {
 public:
  static MetaOptimizer sgd(double lr);
  static MetaOptimizer adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                            double eps = 1e-8);

  MetaParameters update(const MetaParameters& phi, const MetaGradient& grad);
  OptimizerKind kind() const { return kind_; }

 private:
  OptimizerKind kind_ = OptimizerKind::Sgd;
  double lr_ = 0.01, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::int64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct MetaUpdateOptions {
  bool clip = false;          // rescale to clip_norm when the global norm exceeds it
  double clip_norm = 10.0;
};

/// One outer step: optional global-norm clipping, then the meta-optimizer.
MetaParameters meta_update(const MetaParameters& phi, const MetaGradient& grad,
                           MetaOptimizer& opt, const MetaUpdateOptions& u = {});

enum class MetaEngine { Autodiff, Recursive };
const char* engine_name(MetaEngine e);
MetaEngine engine_from_name(const std::string& name);

/// One inner run within a meta-iteration: how to build its starting
/// parameters (null init = adopt the caller's theta_t) and its losses.
struct TraceSpec {
  std::function<ParameterSet(const AttachedPhi&, const TapePtr&)> init;
  StepLossFn step_loss;
  ValLossFn val_loss;
};
using BatchProvider = std::function<std::vector<TraceSpec>(std::size_t meta_iter)>;

struct MetaFitOptions {
  std::size_t meta_iterations = 1;
  std::size_t inner_steps = 1;
  MetaEngine engine = MetaEngine::Recursive;
  RecursiveOptions recursive;  // honored when engine == Recursive
  MetaUpdateOptions update;
};

struct MetaFitSnapshot {
  std::size_t iter = 0;
  double mean_val_loss = 0.0;
  const MetaGradient& grad;
  const MetaParameters& phi_after;
  const std::vector<InnerTrace>& traces;
};
using MetaFitSink = std::function<void(const MetaFitSnapshot&)>;

/// The full outer loop: per meta-iteration, build a fresh tape, attach phi,
/// unroll every provided inner run, average the per-run meta-gradients with
/// the selected engine, and step the meta-optimizer. Returns the final phi;
/// theta_t and opt_state are treated as read-only templates.
MetaParameters meta_fit(const ParameterSet& theta_t, const OptState& opt_state,
                        MetaParameters phi, const BatchProvider& batches,
                        MetaOptimizer& meta_opt, const MetaFitOptions& opts,
                        const MetaFitSink& sink = {});

/// A desk-scale configuration for the structural health checks.
struct RequirementSetup {
  ParameterSet theta0;
  MetaParameters phi;
  std::size_t steps = 1;
  StepLossFn step_loss;
  ValLossFn val_loss;
  std::function<ParameterSet(const AttachedPhi&, const TapePtr&)> init;  // optional
  std::uint64_t probe_seed = 1234;
};

struct RequirementReport {
  struct Item {
    std::string id;
    bool satisfied = false;
    std::string detail;
  };
  std::vector<Item> items;
  bool all_ok() const;
  const Item& find(const std::string& id) const;
  std::string text() const;
};

/// Probes the four structural conditions the nested optimization relies on:
/// the validation objective must be differentiable in the final parameters;
/// the optimizer step must be differentiable in the parameters and in the
/// gradient it consumes; every learnable hyperparameter must have a live
/// gradient path to the objective; and the training loss must carry
/// curvature (a nonzero mixed second derivative) wherever loss/init
/// meta-parameters are supposed to learn through it. Failures are report
/// content, never exceptions.
RequirementReport check_requirements(const RequirementSetup& setup);

}  // namespace metaloop
