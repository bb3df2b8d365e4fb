#include "metaloop/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace metaloop {

const char* optimizer_name(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::Sgd: return "sgd";
    case OptimizerKind::Adagrad: return "adagrad";
    case OptimizerKind::Adam: return "adam";
  }
  return "?";
}

OptimizerKind optimizer_from_name(const std::string& name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adagrad") return OptimizerKind::Adagrad;
  if (name == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + name + "'");
}

const GroupHyper& OptHyper::for_group(std::size_t i) const {
  if (groups.empty()) throw std::logic_error("optimizer hyper has no groups");
  return groups.size() == 1 ? groups[0] : groups.at(i);
}

std::vector<Tensor> OptHyper::tensors() const {
  std::vector<Tensor> out;
  for (const GroupHyper& g : groups) {
    out.push_back(g.learning_rate);
    if (kind == OptimizerKind::Adam) {
      out.push_back(g.beta1);
      out.push_back(g.beta2);
    }
  }
  return out;
}

OptHyper sgd_hyper(double alpha) {
  OptHyper h;
  h.kind = OptimizerKind::Sgd;
  h.groups.push_back({Tensor::scalar(alpha), {}, {}, 0.0});
  return h;
}

OptHyper adagrad_hyper(double eta, double accum_eps) {
  OptHyper h;
  h.kind = OptimizerKind::Adagrad;
  h.groups.push_back({Tensor::scalar(eta), {}, {}, 0.0});
  h.accum_eps = accum_eps;
  return h;
}

OptHyper adam_hyper(double lr, double beta1, double beta2, double eps,
                    double accum_eps) {
  OptHyper h;
  h.kind = OptimizerKind::Adam;
  h.groups.push_back(
      {Tensor::scalar(lr), Tensor::scalar(beta1), Tensor::scalar(beta2), eps});
  h.accum_eps = accum_eps;
  return h;
}

std::vector<Tensor> OptState::tensors() const {
  std::vector<Tensor> out;
  for (const ParameterSet& s : slots) {
    auto f = s.flat();
    out.insert(out.end(), f.begin(), f.end());
  }
  return out;
}

OptState OptState::with_tensors(std::span<const Tensor> tensors) const {
  OptState out = *this;
  std::size_t offset = 0;
  for (ParameterSet& s : out.slots) {
    const std::size_t n = s.tensor_count();
    if (offset + n > tensors.size()) {
      throw std::invalid_argument("optimizer state: tensor list too short");
    }
    s = s.with_flat(tensors.subspan(offset, n));
    offset += n;
  }
  if (offset != tensors.size()) {
    throw std::invalid_argument("optimizer state: tensor list too long");
  }
  return out;
}

namespace {

ParameterSet zeros_like(const ParameterSet& params) {
  std::vector<Tensor> z;
  for (const Tensor& t : params.flat()) z.push_back(Tensor::zeros(t.shape()));
  return params.with_flat(z);
}

}  // namespace

OptState init_opt_state(OptimizerKind kind, const ParameterSet& params) {
  OptState s;
  s.kind = kind;
  s.step = 0;
  if (kind == OptimizerKind::Adagrad) {
    s.slots = {zeros_like(params)};
  } else if (kind == OptimizerKind::Adam) {
    s.slots = {zeros_like(params), zeros_like(params)};
  }
  return s;
}

OptState deep_copy_state(const OptState& state) {
  OptState out;
  out.kind = state.kind;
  out.step = state.step;
  for (const ParameterSet& s : state.slots) {
    std::vector<Tensor> copies;
    for (const Tensor& t : s.flat()) {
      copies.emplace_back(t.shape(),
                          std::vector<double>(t.values().begin(), t.values().end()));
    }
    out.slots.push_back(s.with_flat(copies));
  }
  return out;
}

namespace {

void check_step_inputs(const ParameterSet& params, const ParameterSet& grads,
                       const OptHyper& hyper) {
  if (!params.same_structure(grads)) {
    throw std::invalid_argument("optimizer step: gradient structure differs from parameters");
  }
  if (hyper.groups.size() != 1 && hyper.groups.size() != params.group_count()) {
    throw std::invalid_argument("optimizer step: hyper group count mismatch");
  }
  for (const GroupHyper& g : hyper.groups) {
    if (g.learning_rate.size() != 1) {
      throw std::invalid_argument("optimizer step: learning rate must be one element");
    }
  }
}

Tensor bcast(const Tensor& one_element, const Shape& shape) {
  return scalar_broadcast(one_element, shape);
}

}  // namespace

OptStepResult sgd_step(const ParameterSet& params, const ParameterSet& grads,
                       const OptHyper& hyper) {
  check_step_inputs(params, grads, hyper);
  std::vector<Tensor> next;
  for (std::size_t gi = 0; gi < params.group_count(); ++gi) {
    const GroupHyper& h = hyper.for_group(gi);
    for (std::size_t ti = 0; ti < params.group(gi).tensors.size(); ++ti) {
      const Tensor& theta = params.group(gi).tensors[ti].value;
      const Tensor& g = grads.group(gi).tensors[ti].value;
      next.push_back(sub(theta, mul(bcast(h.learning_rate, theta.shape()), g)));
    }
  }
  OptState state;
  state.kind = OptimizerKind::Sgd;
  state.step = 1;
  return {params.with_flat(next), std::move(state)};
}

OptStepResult adagrad_step(const ParameterSet& params, const ParameterSet& grads,
                           const OptState& state, const OptHyper& hyper) {
  check_step_inputs(params, grads, hyper);
  if (state.kind != OptimizerKind::Adagrad || state.slots.size() != 1) {
    throw std::invalid_argument("adagrad step: state does not carry an accumulator");
  }
  std::vector<Tensor> next, next_accum;
  const std::vector<Tensor> accum = state.slots[0].flat();
  std::size_t flat = 0;
  for (std::size_t gi = 0; gi < params.group_count(); ++gi) {
    const GroupHyper& h = hyper.for_group(gi);
    for (std::size_t ti = 0; ti < params.group(gi).tensors.size(); ++ti, ++flat) {
      const Tensor& theta = params.group(gi).tensors[ti].value;
      const Tensor& g = grads.group(gi).tensors[ti].value;
      const Tensor acc = add(accum[flat], square(g));
      const Tensor denom = sqrt_(add_const(acc, hyper.accum_eps));
      const Tensor step =
          div(mul(bcast(h.learning_rate, theta.shape()), g), denom);
      next.push_back(sub(theta, step));
      next_accum.push_back(acc);
    }
  }
  OptState out;
  out.kind = OptimizerKind::Adagrad;
  out.step = state.step + 1;
  out.slots = {state.slots[0].with_flat(next_accum)};
  return {params.with_flat(next), std::move(out)};
}

OptStepResult adam_step(const ParameterSet& params, const ParameterSet& grads,
                        const OptState& state, const OptHyper& hyper) {
  check_step_inputs(params, grads, hyper);
  if (state.kind != OptimizerKind::Adam || state.slots.size() != 2) {
    throw std::invalid_argument("adam step: state does not carry both moments");
  }
  const double t_next = static_cast<double>(state.step + 1);
  std::vector<Tensor> next, next_m, next_v;
  const std::vector<Tensor> ms = state.slots[0].flat();
  const std::vector<Tensor> vs = state.slots[1].flat();
  std::size_t flat = 0;
  for (std::size_t gi = 0; gi < params.group_count(); ++gi) {
    const GroupHyper& h = hyper.for_group(gi);
    if (h.beta1.size() != 1 || h.beta2.size() != 1) {
      throw std::invalid_argument("adam step: beta coefficients must be one element");
    }
    const Tensor one = Tensor::scalar(1.0);
    for (std::size_t ti = 0; ti < params.group(gi).tensors.size(); ++ti, ++flat) {
      const Tensor& theta = params.group(gi).tensors[ti].value;
      const Tensor& g = grads.group(gi).tensors[ti].value;
      const Shape& shape = theta.shape();

      const Tensor b1 = bcast(h.beta1, shape), b2 = bcast(h.beta2, shape);
      const Tensor one_b = bcast(one, shape);
      const Tensor m = add(mul(b1, ms[flat]), mul(sub(one_b, b1), g));
      const Tensor v = add(mul(b2, vs[flat]), mul(sub(one_b, b2), square(g)));

      // bias corrections keep their dependence on the betas
      const Tensor c1 = sub(one, pow_const(h.beta1, t_next));
      const Tensor c2 = sub(one, pow_const(h.beta2, t_next));
      const Tensor m_hat = div(m, bcast(c1, shape));
      const Tensor v_hat = div(v, bcast(c2, shape));

      const Tensor denom =
          add_const(sqrt_(add_const(v_hat, hyper.accum_eps)), h.eps);
      const Tensor step = div(mul(bcast(h.learning_rate, shape), m_hat), denom);
      next.push_back(sub(theta, step));
      next_m.push_back(m);
      next_v.push_back(v);
    }
  }
  OptState out;
  out.kind = OptimizerKind::Adam;
  out.step = state.step + 1;
  out.slots = {state.slots[0].with_flat(next_m), state.slots[1].with_flat(next_v)};
  return {params.with_flat(next), std::move(out)};
}

OptStepResult opt_step(const ParameterSet& params, const ParameterSet& grads,
                       const OptState& state, const OptHyper& hyper) {
  switch (hyper.kind) {
    case OptimizerKind::Sgd: return sgd_step(params, grads, hyper);
    case OptimizerKind::Adagrad: return adagrad_step(params, grads, state, hyper);
    case OptimizerKind::Adam: return adam_step(params, grads, state, hyper);
  }
  throw std::logic_error("opt_step: unhandled kind");
}

// --- closed-form oracles ----------------------------------------------------

SgdStepGrads analytic_sgd_grads(const Vec& theta, const Vec& G, double alpha) {
  if (theta.size() != G.size()) {
    throw std::invalid_argument("sgd oracle: dimension mismatch");
  }
  SgdStepGrads out;
  out.G = G;
  out.alpha = alpha;
  return out;
}

Vec SgdStepGrads::dtheta_dalpha() const {
  Vec out(G.size());
  for (std::size_t i = 0; i < G.size(); ++i) out[i] = -G[i];
  return out;
}

Vec SgdStepGrads::dphi(const Vec& dtheta_dphi, double dalpha_dphi,
                       const Vec& dG_dphi) const {
  Vec out(G.size());
  for (std::size_t i = 0; i < G.size(); ++i) {
    const double dt = dtheta_dphi.empty() ? 0.0 : dtheta_dphi[i];
    const double dG = dG_dphi.empty() ? 0.0 : dG_dphi[i];
    out[i] = dt - G[i] * dalpha_dphi - alpha * dG;
  }
  return out;
}

Vec SgdStepGrads::dtheta_action(const Vec& v, const LinearAction& hess) const {
  const Vec hv = hess ? hess(v) : Vec(v.size(), 0.0);
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - alpha * hv[i];
  return out;
}

namespace {

Vec accum_denoms(const std::vector<Vec>& G_history, double accum_eps,
                 std::size_t upto) {
  // S_k after history steps 0..upto inclusive
  const std::size_t n = G_history.at(0).size();
  Vec s2(n, accum_eps);
  for (std::size_t t = 0; t <= upto; ++t) {
    for (std::size_t k = 0; k < n; ++k) s2[k] += G_history[t][k] * G_history[t][k];
  }
  for (double& v : s2) v = std::sqrt(v);
  return s2;
}

}  // namespace

Vec analytic_adagrad_dphi(const std::vector<Vec>& G_history, double eta,
                          double accum_eps, const AdagradDeps& deps) {
  if (G_history.empty()) {
    throw std::invalid_argument("adagrad oracle: empty gradient history");
  }
  const std::size_t n = G_history[0].size();
  Vec d = deps.dtheta0_dphi.empty() ? Vec(n, 0.0) : deps.dtheta0_dphi;
  auto dG_at = [&](std::size_t t, std::size_t k) {
    return deps.dG_dphi.empty() ? 0.0 : deps.dG_dphi.at(t)[k];
  };
  for (std::size_t t = 0; t < G_history.size(); ++t) {
    const Vec S = accum_denoms(G_history, accum_eps, t);
    for (std::size_t k = 0; k < n; ++k) {
      const double Gt = G_history[t][k];
      double hist = 0.0;  // sum_i G_i * dG_i over steps taken so far
      for (std::size_t i = 0; i <= t; ++i) hist += G_history[i][k] * dG_at(i, k);
      d[k] += -eta * dG_at(t, k) / S[k] - Gt * deps.deta_dphi / S[k] +
              eta * Gt * hist / (S[k] * S[k] * S[k]);
    }
  }
  return d;
}

Vec analytic_adagrad_dtheta_action(const std::vector<Vec>& G_history, double eta,
                                   double accum_eps, const Vec& v,
                                   const LinearAction& hess) {
  if (G_history.empty()) {
    throw std::invalid_argument("adagrad oracle: empty gradient history");
  }
  const std::size_t n = v.size();
  const Vec S = accum_denoms(G_history, accum_eps, G_history.size() - 1);
  const Vec& Gt = G_history.back();
  const Vec hv = hess ? hess(v) : Vec(n, 0.0);
  Vec out(n);
  for (std::size_t k = 0; k < n; ++k) {
    out[k] = v[k] - eta * hv[k] / S[k] + eta * Gt[k] * Gt[k] * hv[k] / (S[k] * S[k] * S[k]);
  }
  return out;
}

}  // namespace metaloop
