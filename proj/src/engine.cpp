#include "metaloop/engine.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace metaloop {

// ---------------------------------------------------------------------------
// transforms

Tensor apply_transform(HyperTransform t, const Tensor& raw) {
  switch (t) {
    case HyperTransform::Identity: return raw;
    case HyperTransform::Softplus: return softplus(raw);
    case HyperTransform::Sigmoid: return sigmoid(raw);
    case HyperTransform::Detached: return stop_gradient(raw);
  }
  throw std::logic_error("unknown transform");
}

double transform_value(HyperTransform t, double raw) {
  switch (t) {
    case HyperTransform::Identity:
    case HyperTransform::Detached:
      return raw;
    case HyperTransform::Softplus:
      return raw > 0.0 ? raw + std::log1p(std::exp(-raw))
                       : std::log1p(std::exp(raw));
    case HyperTransform::Sigmoid:
      return raw >= 0.0 ? 1.0 / (1.0 + std::exp(-raw))
                        : std::exp(raw) / (1.0 + std::exp(raw));
  }
  throw std::logic_error("unknown transform");
}

double inverse_transform_value(HyperTransform t, double value) {
  switch (t) {
    case HyperTransform::Identity:
    case HyperTransform::Detached:
      return value;
    case HyperTransform::Softplus:
      if (!(value > 0.0)) {
        throw std::invalid_argument(
            "softplus-transformed values must be positive, got " +
            std::to_string(value));
      }
      return value > 30.0 ? value : std::log(std::expm1(value));
    case HyperTransform::Sigmoid:
      if (!(value > 0.0 && value < 1.0)) {
        throw std::invalid_argument(
            "sigmoid-transformed values must lie in (0, 1), got " +
            std::to_string(value));
      }
      return std::log(value / (1.0 - value));
  }
  throw std::logic_error("unknown transform");
}

// ---------------------------------------------------------------------------
// MetaParameters

namespace {

const char* field_name(HyperField f) {
  switch (f) {
    case HyperField::LearningRate: return "learning_rate";
    case HyperField::Beta1: return "beta1";
    case HyperField::Beta2: return "beta2";
  }
  return "?";
}

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

Tensor value_add(const Tensor& a, const Tensor& b) {
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return Tensor(a.shape(), std::move(out));
}

Tensor value_scale(const Tensor& a, double s) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& x : out) x *= s;
  return Tensor(a.shape(), std::move(out));
}

}  // namespace

std::size_t MetaParameters::learn_hyper(std::size_t group, HyperField field,
                                        double initial, HyperTransform t,
                                        std::string name) {
  if (group >= base_.groups.size()) {
    throw std::invalid_argument("learn_hyper: group index " +
                                std::to_string(group) + " out of range");
  }
  if (name.empty()) {
    name = field_name(field);
    if (base_.groups.size() > 1) name += "/g" + std::to_string(group);
  }
  MetaEntry e;
  e.role = MetaRole::Opt;
  e.name = std::move(name);
  e.raw = Tensor::scalar(inverse_transform_value(t, initial));
  e.transform = t;
  e.group = group;
  e.field = field;
  entries_.push_back(std::move(e));
  return entries_.size() - 1;
}

std::size_t MetaParameters::add_loss(std::string name, Tensor raw,
                                     HyperTransform t) {
  if (raw.on_tape()) {
    throw std::invalid_argument("add_loss: raw storage must not be taped");
  }
  MetaEntry e;
  e.role = MetaRole::Loss;
  e.name = std::move(name);
  e.raw = std::move(raw);
  e.transform = t;
  entries_.push_back(std::move(e));
  return entries_.size() - 1;
}

std::vector<Tensor> MetaParameters::raw_tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const MetaEntry& e : entries_) out.push_back(e.raw);
  return out;
}

MetaParameters MetaParameters::with_updated(
    std::span<const Tensor> new_raw) const {
  if (new_raw.size() != entries_.size()) {
    throw std::invalid_argument("with_updated: expected " +
                                std::to_string(entries_.size()) +
                                " tensors, got " +
                                std::to_string(new_raw.size()));
  }
  MetaParameters out = *this;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!same_shape(out.entries_[i].raw.shape(), new_raw[i].shape())) {
      throw std::invalid_argument("with_updated: shape mismatch for entry " +
                                  out.entries_[i].name);
    }
    out.entries_[i].raw = new_raw[i].detached();
  }
  return out;
}

std::pair<std::vector<Tensor>, std::vector<Tensor>> MetaParameters::split()
    const {
  std::vector<Tensor> opt, loss;
  for (const MetaEntry& e : entries_) {
    (e.role == MetaRole::Opt ? opt : loss).push_back(e.raw);
  }
  return {std::move(opt), std::move(loss)};
}

std::vector<Tensor> MetaParameters::join(std::span<const Tensor> opt,
                                         std::span<const Tensor> loss) const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  std::size_t oi = 0, li = 0;
  for (const MetaEntry& e : entries_) {
    if (e.role == MetaRole::Opt) {
      out.push_back(opt[oi++]);
    } else {
      out.push_back(loss[li++]);
    }
  }
  if (oi != opt.size() || li != loss.size()) {
    throw std::invalid_argument("join: tensor counts do not match the entries");
  }
  return out;
}

std::vector<std::pair<std::string, double>> MetaParameters::effective_scalars()
    const {
  std::vector<std::pair<std::string, double>> out;
  for (const MetaEntry& e : entries_) {
    if (e.raw.size() == 1) {
      out.emplace_back(e.name, transform_value(e.transform, e.raw.values()[0]));
    }
  }
  return out;
}

AttachedPhi MetaParameters::attach(const TapePtr& tape) const {
  AttachedPhi out;
  out.tape = tape;
  out.hyper = base_;
  for (const MetaEntry& e : entries_) {
    const Tensor leafed = tape->leaf(e.raw);
    const Tensor eff = apply_transform(e.transform, leafed);
    out.raw_leaves.push_back(leafed);
    out.effective.push_back(eff);
    out.names.push_back(e.name);
    out.roles.push_back(e.role);
    if (e.role == MetaRole::Opt) {
      GroupHyper& g = out.hyper.groups.at(e.group);
      switch (e.field) {
        case HyperField::LearningRate: g.learning_rate = eff; break;
        case HyperField::Beta1: g.beta1 = eff; break;
        case HyperField::Beta2: g.beta2 = eff; break;
      }
    } else {
      out.loss.push_back(eff);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// unrolling

namespace {

std::string param_name(const ParameterSet& params, std::size_t flat_index) {
  std::size_t i = 0;
  for (const ParamGroup& g : params.groups()) {
    for (const NamedTensor& t : g.tensors) {
      if (i == flat_index) return g.name + "/" + t.name;
      ++i;
    }
  }
  return "#" + std::to_string(flat_index);
}

}  // namespace

InnerTrace unroll_inner(const ParameterSet& theta_t, const OptState& opt_state,
                        const AttachedPhi& phi, std::size_t steps,
                        const StepLossFn& step_loss, const TapePtr& tape) {
  if (!tape) throw std::invalid_argument("unroll_inner: null tape");
  if (opt_state.kind != phi.hyper.kind) {
    throw std::invalid_argument(
        "unroll_inner: optimizer state kind does not match the hyperparameters");
  }

  std::vector<Tensor> adopted;
  for (const Tensor& t : theta_t.flat()) {
    if (t.on_tape()) {
      if (t.tape() != tape) {
        throw std::invalid_argument(
            "unroll_inner: initial parameters live on a different tape");
      }
      adopted.push_back(t);
    } else {
      adopted.push_back(tape->leaf(t));
    }
  }

  InnerTrace trace;
  trace.tape = tape;
  trace.phi = phi;
  trace.thetas.push_back(theta_t.with_flat(adopted));
  trace.states.push_back(deep_copy_state(opt_state));

  for (std::size_t j = 0; j < steps; ++j) {
    const std::string at = "inner step " + std::to_string(j) + ": ";
    const ParameterSet& cur = trace.thetas.back();
    Tensor loss = step_loss(j, cur, phi);
    if (loss.size() != 1) {
      throw std::runtime_error(at + "training loss must be a scalar");
    }
    if (!std::isfinite(loss.item())) {
      throw std::runtime_error(at + "training loss is not finite");
    }

    ParameterSet grads = cur;  // structure reused, values replaced below
    if (loss.on_tape()) {
      BackwardOptions keep;
      keep.create_graph = true;
      const std::vector<Tensor> wrt = cur.flat();
      BackwardResult r = backward(loss, wrt, keep);
      for (const Tensor& g : r.grads) {
        if (!all_finite(g.values())) {
          throw std::runtime_error(at + "training gradient is not finite");
        }
      }
      grads = cur.with_flat(r.grads);
    } else {
      // constant loss: zero gradients, and the step leaves theta in place
      std::vector<Tensor> zs;
      for (const Tensor& t : cur.flat()) zs.push_back(Tensor::zeros(t.shape()));
      grads = cur.with_flat(zs);
    }

    OptStepResult stepped =
        opt_step(cur, grads, trace.states.back(), phi.hyper);
    trace.train_losses.push_back(loss);
    trace.grads.push_back(std::move(grads));
    trace.thetas.push_back(std::move(stepped.params));
    trace.states.push_back(std::move(stepped.state));
  }
  return trace;
}

Tensor meta_loss(const InnerTrace& trace, const ValLossFn& val_loss) {
  Tensor v = val_loss(trace.thetas.back(), trace.phi);
  if (v.size() != 1) {
    throw std::runtime_error("validation objective must be a scalar");
  }
  if (!std::isfinite(v.item())) {
    throw std::runtime_error("validation objective is not finite");
  }
  return v;
}

// ---------------------------------------------------------------------------
// meta-gradients

std::vector<Tensor> MetaGradient::wrt_opt() const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (roles[i] == MetaRole::Opt) out.push_back(grads[i]);
  }
  return out;
}

std::vector<Tensor> MetaGradient::wrt_loss() const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (roles[i] == MetaRole::Loss) out.push_back(grads[i]);
  }
  return out;
}

double MetaGradient::global_norm() const {
  double acc = 0.0;
  for (const Tensor& g : grads) {
    for (double v : g.values()) acc += v * v;
  }
  return std::sqrt(acc);
}

MetaGradient meta_backward_autodiff(const InnerTrace& trace,
                                    const Tensor& lval) {
  if (!lval.on_tape() || lval.tape() != trace.tape) {
    throw std::invalid_argument(
        "meta_backward_autodiff: objective is not on the trace tape");
  }
  const AttachedPhi& phi = trace.phi;
  BackwardResult r = backward(lval, phi.raw_leaves);
  MetaGradient out;
  out.grads = std::move(r.grads);
  out.roles = phi.roles;
  out.names = phi.names;
  out.unreachable = std::move(r.diag.unreachable);
  out.detached = std::move(r.diag.detached);
  out.method = "autodiff";
  return out;
}

namespace {

// Scalar sum of <adjoint_k, value_k> over the pairs whose value tensor is on
// a tape; constants contribute no gradient and are skipped.
std::optional<Tensor> adjoint_dot(std::span<const Tensor> adj,
                                  std::span<const Tensor> vals) {
  std::optional<Tensor> acc;
  for (std::size_t k = 0; k < vals.size(); ++k) {
    if (!vals[k].on_tape()) continue;
    Tensor term = dot(adj[k], vals[k]);
    acc = acc ? add(*acc, term) : term;
  }
  return acc;
}

std::vector<Tensor> zeros_like(std::span<const Tensor> ts) {
  std::vector<Tensor> out;
  out.reserve(ts.size());
  for (const Tensor& t : ts) out.push_back(Tensor::zeros(t.shape()));
  return out;
}

// Bookkeeping for one barriered backward pass: which result slot belongs to
// which collection.
struct WrtPlan {
  std::vector<Tensor> wrt;
  std::vector<std::pair<int, std::size_t>> slots;

  void add(int collection, std::size_t idx, const Tensor& t) {
    if (!t.on_tape()) return;
    wrt.push_back(t);
    slots.emplace_back(collection, idx);
  }
};

}  // namespace

MetaGradient meta_backward_recursive(const InnerTrace& trace, const Tensor& lval,
                                     const RecursiveOptions& opts) {
  if (!lval.on_tape() || lval.tape() != trace.tape) {
    throw std::invalid_argument(
        "meta_backward_recursive: objective is not on the trace tape");
  }
  const AttachedPhi& phi = trace.phi;
  const std::size_t J = trace.steps();
  enum { kTheta = 0, kGrad = 1, kState = 2, kRaw = 3 };

  std::vector<Tensor> A = zeros_like(phi.raw_leaves);

  // Walks one barriered backward pass: grads at the barrier tensors are the
  // partial derivatives we are peeling off; the raw leaves pick up whatever
  // reaches them without crossing a barrier. Raw leaves that *are* barrier
  // nodes (a meta-learned initialization used directly as theta_0) are
  // excluded here — their flow arrives through the parameter adjoint instead.
  const auto run_pass = [&](const Tensor& out, std::span<const Tensor> thetas,
                            std::span<const Tensor> gs,
                            std::span<const Tensor> states, bool with_raw,
                            std::vector<Tensor>* theta_adj,
                            std::vector<Tensor>* g_adj,
                            std::vector<Tensor>* state_adj) {
    std::unordered_set<std::uint32_t> pivot_ids;
    std::vector<Tensor> barriers;
    const auto note = [&](std::span<const Tensor> ts) {
      for (const Tensor& t : ts) {
        if (t.on_tape()) {
          pivot_ids.insert(t.node());
          barriers.push_back(t);
        }
      }
    };
    note(thetas);
    note(gs);
    note(states);

    WrtPlan plan;
    for (std::size_t k = 0; k < thetas.size(); ++k)
      plan.add(kTheta, k, thetas[k]);
    for (std::size_t k = 0; k < gs.size(); ++k) plan.add(kGrad, k, gs[k]);
    for (std::size_t k = 0; k < states.size(); ++k)
      plan.add(kState, k, states[k]);
    if (with_raw) {
      for (std::size_t k = 0; k < phi.raw_leaves.size(); ++k) {
        if (pivot_ids.count(phi.raw_leaves[k].node())) continue;
        plan.add(kRaw, k, phi.raw_leaves[k]);
      }
    }

    BackwardOptions bo;
    if (opts.protect_partials) bo.barriers = barriers;
    BackwardResult r = backward(out, plan.wrt, bo);
    for (std::size_t k = 0; k < plan.slots.size(); ++k) {
      const auto [coll, idx] = plan.slots[k];
      switch (coll) {
        case kTheta: (*theta_adj)[idx] = value_add((*theta_adj)[idx], r.grads[k]); break;
        case kGrad: (*g_adj)[idx] = value_add((*g_adj)[idx], r.grads[k]); break;
        case kState: (*state_adj)[idx] = value_add((*state_adj)[idx], r.grads[k]); break;
        case kRaw: A[idx] = value_add(A[idx], r.grads[k]); break;
      }
    }
  };

  // seed: adjoint of the final parameters, plus any direct use of phi by the
  // validation objective
  std::vector<Tensor> thJ = trace.thetas[J].flat();
  std::vector<Tensor> B = zeros_like(thJ);
  std::vector<Tensor> none;
  run_pass(lval, thJ, {}, {}, true, &B, nullptr, nullptr);

  std::vector<Tensor> S = zeros_like(trace.states[J].tensors());

  for (std::size_t j = J; j-- > 0;) {
    const std::vector<Tensor> th_next = trace.thetas[j + 1].flat();
    const std::vector<Tensor> st_next = trace.states[j + 1].tensors();
    const std::vector<Tensor> th_j = trace.thetas[j].flat();
    const std::vector<Tensor> g_j = trace.grads[j].flat();
    const std::vector<Tensor> st_j = trace.states[j].tensors();

    std::vector<Tensor> B_next = zeros_like(th_j);
    std::vector<Tensor> u = zeros_like(g_j);
    std::vector<Tensor> S_next = zeros_like(st_j);

    // one step of the update map, contracted with the incoming adjoints
    std::optional<Tensor> P = adjoint_dot(B, th_next);
    if (auto ps = adjoint_dot(S, st_next)) P = P ? add(*P, *ps) : ps;
    if (P && P->on_tape()) {
      run_pass(*P, th_j, g_j, st_j, true, &B_next, &u, &S_next);
    }

    // curvature path: the training gradient is itself a function of the
    // parameters and of the loss meta-parameters
    if (!opts.ablate_second_order) {
      std::optional<Tensor> Q = adjoint_dot(u, g_j);
      if (Q && Q->on_tape()) {
        run_pass(*Q, th_j, {}, {}, true, &B_next, nullptr, nullptr);
      }
    }

    B = std::move(B_next);
    S = std::move(S_next);
  }

  // initial wiring: theta_0 (and in principle the initial state) may be
  // built from phi; this closes the chain into raw space
  std::optional<Tensor> R = adjoint_dot(B, trace.thetas[0].flat());
  if (auto rs = adjoint_dot(S, trace.states[0].tensors()))
    R = R ? add(*R, *rs) : rs;
  if (R && R->on_tape()) {
    BackwardResult r = backward(*R, phi.raw_leaves);
    for (std::size_t k = 0; k < A.size(); ++k)
      A[k] = value_add(A[k], r.grads[k]);
  }

  MetaGradient out;
  out.grads = std::move(A);
  out.roles = phi.roles;
  out.names = phi.names;
  out.method = "recursive";
  GradTape& tp = *trace.tape;
  for (const Tensor& leaf : phi.raw_leaves) {
    const bool diff = path_exists(tp, leaf.node(), lval.node(), false);
    const bool structural =
        diff || path_exists(tp, leaf.node(), lval.node(), true);
    out.unreachable.push_back(!diff);
    out.detached.push_back(!diff && structural);
  }
  return out;
}

MetaGradient meta_backward_recursive(const InnerTrace& trace,
                                     const ValLossFn& val_loss,
                                     const RecursiveOptions& opts) {
  return meta_backward_recursive(trace, meta_loss(trace, val_loss), opts);
}

MetaGradient average_meta_gradients(std::span<const MetaGradient> parts) {
  if (parts.empty()) {
    throw std::invalid_argument("average_meta_gradients: empty input");
  }
  MetaGradient out = parts[0];
  for (std::size_t p = 1; p < parts.size(); ++p) {
    const MetaGradient& g = parts[p];
    if (g.grads.size() != out.grads.size()) {
      throw std::invalid_argument(
          "average_meta_gradients: mismatched gradient structure");
    }
    for (std::size_t i = 0; i < out.grads.size(); ++i) {
      out.grads[i] = value_add(out.grads[i], g.grads[i]);
      out.unreachable[i] = out.unreachable[i] && g.unreachable[i];
      out.detached[i] = out.detached[i] || g.detached[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  for (Tensor& g : out.grads) g = value_scale(g, inv);
  return out;
}

// ---------------------------------------------------------------------------
// meta-optimization

MetaOptimizer MetaOptimizer::sgd(double lr) {
  MetaOptimizer o;
  o.kind_ = OptimizerKind::Sgd;
  o.lr_ = lr;
  return o;
}

MetaOptimizer MetaOptimizer::adam(double lr, double beta1, double beta2,
                                  double eps) {
  MetaOptimizer o;
  o.kind_ = OptimizerKind::Adam;
  o.lr_ = lr;
  o.beta1_ = beta1;
  o.beta2_ = beta2;
  o.eps_ = eps;
  return o;
}

MetaParameters MetaOptimizer::update(const MetaParameters& phi,
                                     const MetaGradient& grad) {
  if (grad.grads.size() != phi.size()) {
    throw std::invalid_argument(
        "meta update: gradient does not match the parameter count");
  }
  for (std::size_t i = 0; i < grad.grads.size(); ++i) {
    if (!all_finite(grad.grads[i].values())) {
      throw std::runtime_error("meta-gradient is not finite for " +
                               phi.entry(i).name);
    }
  }
  if (kind_ == OptimizerKind::Adam && m_.empty()) {
    for (const MetaEntry& e : phi.entries()) {
      m_.emplace_back(e.raw.size(), 0.0);
      v_.emplace_back(e.raw.size(), 0.0);
    }
  }
  ++step_;
  std::vector<Tensor> updated;
  for (std::size_t i = 0; i < phi.size(); ++i) {
    const auto rv = phi.entry(i).raw.values();
    const auto gv = grad.grads[i].values();
    std::vector<double> nv(rv.begin(), rv.end());
    if (kind_ == OptimizerKind::Sgd) {
      for (std::size_t k = 0; k < nv.size(); ++k) nv[k] -= lr_ * gv[k];
    } else {
      const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
      const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
      for (std::size_t k = 0; k < nv.size(); ++k) {
        m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * gv[k];
        v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * gv[k] * gv[k];
        const double mhat = m_[i][k] / c1;
        const double vhat = v_[i][k] / c2;
        nv[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
    updated.push_back(Tensor(phi.entry(i).raw.shape(), std::move(nv)));
  }
  return phi.with_updated(updated);
}

MetaParameters meta_update(const MetaParameters& phi, const MetaGradient& grad,
                           MetaOptimizer& opt, const MetaUpdateOptions& u) {
  if (u.clip) {
    const double norm = grad.global_norm();
    if (std::isfinite(norm) && norm > u.clip_norm && norm > 0.0) {
      MetaGradient clipped = grad;
      const double s = u.clip_norm / norm;
      for (Tensor& g : clipped.grads) g = value_scale(g, s);
      return opt.update(phi, clipped);
    }
  }
  return opt.update(phi, grad);
}

const char* engine_name(MetaEngine e) {
  return e == MetaEngine::Autodiff ? "autodiff" : "recursive";
}

MetaEngine engine_from_name(const std::string& name) {
  if (name == "autodiff") return MetaEngine::Autodiff;
  if (name == "recursive") return MetaEngine::Recursive;
  throw std::invalid_argument("unknown engine '" + name +
                              "' (expected autodiff or recursive)");
}

MetaParameters meta_fit(const ParameterSet& theta_t, const OptState& opt_state,
                        MetaParameters phi, const BatchProvider& batches,
                        MetaOptimizer& meta_opt, const MetaFitOptions& opts,
                        const MetaFitSink& sink) {
  if (!batches) throw std::invalid_argument("meta_fit: null batch provider");
  if (opts.meta_iterations < 1 || opts.inner_steps < 1) {
    throw std::invalid_argument(
        "meta_fit: meta_iterations and inner_steps must both be at least 1");
  }
  for (std::size_t iter = 0; iter < opts.meta_iterations; ++iter) {
    try {
      const TapePtr tape = GradTape::make();
      const AttachedPhi attached = phi.attach(tape);
      const std::vector<TraceSpec> specs = batches(iter);
      if (specs.empty()) throw std::runtime_error("empty meta-batch");

      std::vector<InnerTrace> traces;
      std::vector<MetaGradient> grads;
      double val_sum = 0.0;
      for (const TraceSpec& spec : specs) {
        const ParameterSet theta0 =
            spec.init ? spec.init(attached, tape) : theta_t;
        InnerTrace trace =
            unroll_inner(theta0, deep_copy_state(opt_state), attached,
                         opts.inner_steps, spec.step_loss, tape);
        const Tensor lval = meta_loss(trace, spec.val_loss);
        val_sum += lval.item();
        grads.push_back(opts.engine == MetaEngine::Autodiff
                            ? meta_backward_autodiff(trace, lval)
                            : meta_backward_recursive(trace, lval,
                                                      opts.recursive));
        traces.push_back(std::move(trace));
      }
      const MetaGradient avg = average_meta_gradients(grads);
      phi = meta_update(phi, avg, meta_opt, opts.update);
      if (sink) {
        MetaFitSnapshot snap{iter, val_sum / static_cast<double>(specs.size()),
                             avg, phi, traces};
        sink(snap);
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("meta-iteration " + std::to_string(iter) +
                               ": " + e.what());
    }
  }
  return phi;
}

// ---------------------------------------------------------------------------
// requirements checker

bool RequirementReport::all_ok() const {
  for (const Item& i : items)
    if (!i.satisfied) return false;
  return true;
}

const RequirementReport::Item& RequirementReport::find(
    const std::string& id) const {
  for (const Item& i : items)
    if (i.id == id) return i;
  throw std::out_of_range("no requirement item named " + id);
}

std::string RequirementReport::text() const {
  std::ostringstream os;
  for (const Item& i : items) {
    os << (i.satisfied ? "[PASS] " : "[FAIL] ") << i.id;
    if (!i.detail.empty()) os << " — " << i.detail;
    os << "\n";
  }
  return os.str();
}

namespace {

std::string join_names(const std::vector<std::string>& names) {
  std::string out;
  for (const std::string& n : names) {
    if (!out.empty()) out += ", ";
    out += n;
  }
  return out;
}

}  // namespace

RequirementReport check_requirements(const RequirementSetup& setup) {
  RequirementReport rep;
  const TapePtr tape = GradTape::make();
  const AttachedPhi attached = setup.phi.attach(tape);
  const ParameterSet theta0 =
      setup.init ? setup.init(attached, tape) : setup.theta0;
  const OptState s0 = init_opt_state(attached.hyper.kind, theta0);
  const InnerTrace trace = unroll_inner(theta0, s0, attached, setup.steps,
                                        setup.step_loss, tape);
  const Tensor lval = meta_loss(trace, setup.val_loss);
  GradTape& tp = *tape;

  {  // the objective must be differentiable in the final parameters
    RequirementReport::Item item;
    item.id = "validation-objective-differentiable";
    const ParameterSet& last = trace.thetas.back();
    const std::vector<Tensor> flat = last.flat();
    const BackwardResult r = backward(lval, flat);
    bool finite = true;
    std::size_t reachable = 0;
    std::vector<std::string> missing;
    for (std::size_t k = 0; k < flat.size(); ++k) {
      if (!all_finite(r.grads[k].values())) finite = false;
      if (r.diag.unreachable[k]) {
        missing.push_back(param_name(last, k));
      } else {
        ++reachable;
      }
    }
    item.satisfied = finite && reachable > 0;
    if (!finite) {
      item.detail = "gradient is not finite";
    } else if (reachable == 0) {
      item.detail = "no gradient path from the final parameters";
    } else if (!missing.empty()) {
      item.detail = "no path from: " + join_names(missing);
    }
    rep.items.push_back(std::move(item));
  }

  {  // the optimizer step must be differentiable in theta and in the gradient
    RequirementReport::Item item;
    item.id = "optimizer-step-differentiable";
    if (trace.steps() == 0) {
      item.satisfied = true;
      item.detail = "no inner steps taken";
    } else {
      const std::vector<Tensor> t0 = trace.thetas[0].flat();
      const std::vector<Tensor> t1 = trace.thetas[1].flat();
      const std::vector<Tensor> g0 = trace.grads[0].flat();
      std::vector<std::string> severed, constant;
      for (std::size_t k = 0; k < t1.size(); ++k) {
        if (!path_exists(tp, t0[k].node(), t1[k].node(), false)) {
          severed.push_back("parameter " + param_name(trace.thetas[0], k));
        }
        if (!g0[k].on_tape()) {
          constant.push_back("gradient " + param_name(trace.thetas[0], k));
        } else if (!path_exists(tp, g0[k].node(), t1[k].node(), false)) {
          severed.push_back("gradient " + param_name(trace.thetas[0], k));
        }
      }
      item.satisfied = severed.empty() && constant.empty();
      std::string detail;
      if (!severed.empty()) detail = "severed inside the step: " + join_names(severed);
      if (!constant.empty()) {
        if (!detail.empty()) detail += "; ";
        detail += "constant inputs: " + join_names(constant);
      }
      item.detail = std::move(detail);
    }
    rep.items.push_back(std::move(item));
  }

  {  // every learnable hyperparameter needs a live path to the objective
    RequirementReport::Item item;
    item.id = "hyperparameter-paths-live";
    std::vector<std::string> dead;
    std::size_t n_opt = 0;
    for (std::size_t i = 0; i < attached.raw_leaves.size(); ++i) {
      if (attached.roles[i] != MetaRole::Opt) continue;
      ++n_opt;
      if (!path_exists(tp, attached.raw_leaves[i].node(), lval.node(), false)) {
        dead.push_back(attached.names[i]);
      }
    }
    if (n_opt == 0) {
      item.satisfied = true;
      item.detail = "no optimizer meta-parameters";
    } else {
      item.satisfied = dead.empty();
      if (!dead.empty()) item.detail = "severed: " + join_names(dead);
    }
    rep.items.push_back(std::move(item));
  }

  {  // loss meta-parameters only learn through a nonzero mixed second
     // derivative of the training loss
    RequirementReport::Item item;
    item.id = "training-loss-curvature";
    std::vector<Tensor> loss_leaves;
    for (std::size_t i = 0; i < attached.raw_leaves.size(); ++i) {
      if (attached.roles[i] == MetaRole::Loss)
        loss_leaves.push_back(attached.raw_leaves[i]);
    }
    if (loss_leaves.empty()) {
      item.satisfied = true;
      item.detail = "no loss meta-parameters";
    } else if (trace.steps() == 0) {
      item.satisfied = true;
      item.detail = "no inner steps probed";
    } else {
      Rng rng(setup.probe_seed);
      const std::vector<Tensor> g0 = trace.grads[0].flat();
      bool any_taped = false;
      for (const Tensor& g : g0) any_taped = any_taped || g.on_tape();
      if (!any_taped) {
        item.satisfied = false;
        item.detail = "training gradients are constant";
      } else {
        double max_abs = 0.0;
        for (int probe = 0; probe < 3; ++probe) {
          std::optional<Tensor> q;
          for (const Tensor& g : g0) {
            if (!g.on_tape()) continue;
            std::vector<double> dir(g.size());
            for (double& d : dir) d = rng.normal();
            Tensor term = dot(Tensor(g.shape(), dir), g);
            q = q ? add(*q, term) : term;
          }
          const BackwardResult r = backward(*q, loss_leaves);
          for (const Tensor& g : r.grads) {
            for (double v : g.values()) max_abs = std::max(max_abs, std::abs(v));
          }
        }
        item.satisfied = max_abs > 1e-12;
        if (!item.satisfied) {
          item.detail =
              "mixed second derivative vanished along random probes";
        }
      }
    }
    rep.items.push_back(std::move(item));
  }

  return rep;
}

}  // namespace metaloop
