#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "metaloop/engine.hpp"
#include "metaloop/nn.hpp"
#include "metaloop/rng.hpp"

using namespace metaloop;

namespace {

ParameterSet single(const std::string& name, Tensor t) {
  ParameterSet p;
  p.add_group({"model", {{name, std::move(t)}}});
  return p;
}

// Scalar quadratic bowl: L(theta) = 0.5 * sum(theta^2). Gradient descent on
// it contracts theta by (1 - lr) each step, which makes every meta-gradient
// below available in closed form.
Tensor half_sq_sum(const ParameterSet& p) {
  std::vector<Tensor> terms;
  for (const Tensor& t : p.flat()) terms.push_back(sum(square(t)));
  Tensor acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return scale(acc, 0.5);
}

// Central finite differences through the whole unrolled computation, one raw
// meta-parameter coordinate at a time. This is the reference both engines
// are checked against; it shares no code with either backward path.
std::vector<double> fd_meta_grad(
    const MetaParameters& phi,
    const std::function<double(const MetaParameters&)>& eval, double h) {
  std::vector<double> out;
  std::vector<Tensor> raw = phi.raw_tensors();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    for (std::size_t k = 0; k < raw[i].size(); ++k) {
      auto shifted = [&](double delta) {
        std::vector<Tensor> r = raw;
        std::vector<double> v(r[i].values().begin(), r[i].values().end());
        v[k] += delta;
        r[i] = Tensor(r[i].shape(), v);
        return eval(phi.with_updated(r));
      };
      out.push_back((shifted(h) - shifted(-h)) / (2.0 * h));
    }
  }
  return out;
}

std::vector<double> flat_values(const MetaGradient& g) {
  std::vector<double> out;
  for (const Tensor& t : g.grads) {
    out.insert(out.end(), t.values().begin(), t.values().end());
  }
  return out;
}

void check_close(const std::vector<double>& a, const std::vector<double>& b,
                 double tol) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CAPTURE(i);
    CHECK(std::abs(a[i] - b[i]) <= tol);
  }
}

void check_rel_close(const std::vector<double>& a, const std::vector<double>& b,
                     double rel, double abs_floor) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale =
        std::max({std::abs(a[i]), std::abs(b[i]), abs_floor / rel});
    CAPTURE(i);
    CHECK(std::abs(a[i] - b[i]) <= rel * scale);
  }
}

}  // namespace

TEST_CASE("hyper transforms invert and stay stable") {
  for (double v : {1e-3, 0.1, 1.0, 5.0, 45.0}) {
    const double raw = inverse_transform_value(HyperTransform::Softplus, v);
    CHECK(transform_value(HyperTransform::Softplus, raw) ==
          doctest::Approx(v).epsilon(1e-12));
  }
  for (double v : {1e-6, 0.25, 0.5, 0.9, 1.0 - 1e-9}) {
    const double raw = inverse_transform_value(HyperTransform::Sigmoid, v);
    CHECK(transform_value(HyperTransform::Sigmoid, raw) ==
          doctest::Approx(v).epsilon(1e-9));
  }
  CHECK(transform_value(HyperTransform::Identity, -2.5) == -2.5);
  CHECK(inverse_transform_value(HyperTransform::Detached, 0.3) == 0.3);
  CHECK_THROWS(inverse_transform_value(HyperTransform::Softplus, -1.0));
  CHECK_THROWS(inverse_transform_value(HyperTransform::Softplus, 0.0));
  CHECK_THROWS(inverse_transform_value(HyperTransform::Sigmoid, 1.5));

  // the identity transform must not insert a node: tests that pin exact
  // closed-form values rely on the raw leaf being used directly
  const TapePtr tape = GradTape::make();
  const Tensor leaf = tape->leaf(Tensor::scalar(0.7));
  const Tensor eff = apply_transform(HyperTransform::Identity, leaf);
  CHECK(eff.node() == leaf.node());
}

TEST_CASE("meta parameter bookkeeping") {
  MetaParameters phi(sgd_hyper(0.05));
  const std::size_t i_lr =
      phi.learn_hyper(0, HyperField::LearningRate, 0.5, HyperTransform::Softplus);
  const std::size_t i_w = phi.add_loss("w", Tensor::scalar(2.0));
  CHECK(phi.size() == 2);
  CHECK(phi.entry(i_lr).name == "learning_rate");
  CHECK(phi.entry(i_lr).role == MetaRole::Opt);
  CHECK(phi.entry(i_w).role == MetaRole::Loss);

  const auto scalars = phi.effective_scalars();
  REQUIRE(scalars.size() == 2);
  CHECK(scalars[0].first == "learning_rate");
  CHECK(scalars[0].second == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(scalars[1].second == 2.0);

  auto [opt, loss] = phi.split();
  CHECK(opt.size() == 1);
  CHECK(loss.size() == 1);
  const std::vector<Tensor> joined = phi.join(opt, loss);
  REQUIRE(joined.size() == 2);
  CHECK(joined[0].values()[0] == phi.entry(i_lr).raw.values()[0]);
  CHECK(joined[1].values()[0] == 2.0);

  CHECK_THROWS(phi.learn_hyper(3, HyperField::LearningRate, 0.1));
  const std::vector<Tensor> bad = {Tensor::scalar(1.0)};
  CHECK_THROWS(phi.with_updated(bad));

  const TapePtr tape = GradTape::make();
  const AttachedPhi at = phi.attach(tape);
  CHECK(at.hyper.groups.at(0).learning_rate.on_tape());
  CHECK(at.hyper.groups.at(0).learning_rate.item() ==
        doctest::Approx(0.5).epsilon(1e-12));
  CHECK(at.loss.size() == 1);
  CHECK(at.raw_leaves.size() == 2);

  // two hyper groups get distinguishable auto-names
  OptHyper two = sgd_hyper(0.1);
  two.groups.push_back(two.groups[0]);
  MetaParameters phi2(two);
  phi2.learn_hyper(0, HyperField::LearningRate, 0.1);
  phi2.learn_hyper(1, HyperField::LearningRate, 0.2);
  CHECK(phi2.entry(0).name == "learning_rate/g0");
  CHECK(phi2.entry(1).name == "learning_rate/g1");
}

TEST_CASE("learning rate gradient matches the closed form") {
  // theta0 = 1, lr = 0.1, L = 0.5 theta^2, Lval = 0.5 theta_J^2:
  //   J=1: theta_1 = 0.9,  dLval/dlr = -0.9
  //   J=2: theta_2 = 0.81, dLval/dlr = -1.458
  for (std::size_t J : {std::size_t{1}, std::size_t{2}}) {
    MetaParameters phi(sgd_hyper(0.1));
    phi.learn_hyper(0, HyperField::LearningRate, 0.1);
    const ParameterSet theta0 = single("theta", Tensor::scalar(1.0));
    const OptState s0 = init_opt_state(OptimizerKind::Sgd, theta0);

    const TapePtr tape = GradTape::make();
    const AttachedPhi at = phi.attach(tape);
    const auto step_loss = [](std::size_t, const ParameterSet& p,
                              const AttachedPhi&) { return half_sq_sum(p); };
    const InnerTrace trace =
        unroll_inner(theta0, s0, at, J, step_loss, tape);
    const Tensor lval = meta_loss(trace, [](const ParameterSet& p,
                                            const AttachedPhi&) {
      return half_sq_sum(p);
    });

    const double theta_J = J == 1 ? 0.9 : 0.81;
    const double expect = J == 1 ? -0.9 : -1.458;
    CHECK(trace.thetas.back().flat()[0].item() ==
          doctest::Approx(theta_J).epsilon(1e-15));
    if (J == 1) CHECK(lval.item() == doctest::Approx(0.405).epsilon(1e-15));

    const MetaGradient ga = meta_backward_autodiff(trace, lval);
    const MetaGradient gr = meta_backward_recursive(trace, lval);
    REQUIRE(ga.grads.size() == 1);
    REQUIRE(gr.grads.size() == 1);
    CHECK(std::abs(ga.grads[0].item() - expect) <= 1e-12);
    CHECK(std::abs(gr.grads[0].item() - expect) <= 1e-12);
    CHECK_FALSE(ga.unreachable[0]);
    CHECK_FALSE(gr.unreachable[0]);
    CHECK(ga.method == "autodiff");
    CHECK(gr.method == "recursive");

    // the trace records every intermediate
    CHECK(trace.steps() == J);
    CHECK(trace.thetas.size() == J + 1);
    CHECK(trace.grads.size() == J);
    CHECK(trace.states.size() == J + 1);
    CHECK(trace.train_losses.size() == J);
  }
}

TEST_CASE("meta-learned initialization gradient matches the closed form") {
  // theta0 is itself the meta-parameter (used directly, identity transform,
  // so the raw leaf *is* the first parameter — the aliasing case).
  // dLval/dtheta0 = theta_1 (1 - lr) = 0.9 * 0.9 = 0.81.
  MetaParameters phi(sgd_hyper(0.1));
  phi.add_loss("theta0", Tensor::scalar(1.0));

  const TapePtr tape = GradTape::make();
  const AttachedPhi at = phi.attach(tape);
  const ParameterSet theta0 = single("theta", at.loss[0]);
  const OptState s0 = init_opt_state(OptimizerKind::Sgd, theta0);
  const auto step_loss = [](std::size_t, const ParameterSet& p,
                            const AttachedPhi&) { return half_sq_sum(p); };
  const InnerTrace trace = unroll_inner(theta0, s0, at, 1, step_loss, tape);
  const Tensor lval = meta_loss(
      trace,
      [](const ParameterSet& p, const AttachedPhi&) { return half_sq_sum(p); });

  const MetaGradient ga = meta_backward_autodiff(trace, lval);
  const MetaGradient gr = meta_backward_recursive(trace, lval);
  CHECK(std::abs(ga.grads[0].item() - 0.81) <= 1e-12);
  CHECK(std::abs(gr.grads[0].item() - 0.81) <= 1e-12);

  // dropping the curvature backward leaves only the first-order term,
  // dLval/dtheta' alone = theta_1 = 0.9
  RecursiveOptions first_order;
  first_order.ablate_second_order = true;
  const MetaGradient gfo = meta_backward_recursive(trace, lval, first_order);
  CHECK(std::abs(gfo.grads[0].item() - 0.9) <= 1e-12);

  // removing the partial-derivative isolation double-counts shared paths
  RecursiveOptions unprotected;
  unprotected.protect_partials = false;
  const MetaGradient gu = meta_backward_recursive(trace, lval, unprotected);
  CHECK(std::abs(gu.grads[0].item() - 0.81) > 1e-3);
}

TEST_CASE("isolation removal changes multi-step hyper gradients") {
  MetaParameters phi(sgd_hyper(0.1));
  phi.learn_hyper(0, HyperField::LearningRate, 0.1);
  const ParameterSet theta0 = single("theta", Tensor::scalar(1.0));
  const OptState s0 = init_opt_state(OptimizerKind::Sgd, theta0);
  const TapePtr tape = GradTape::make();
  const AttachedPhi at = phi.attach(tape);
  const auto step_loss = [](std::size_t, const ParameterSet& p,
                            const AttachedPhi&) { return half_sq_sum(p); };
  const InnerTrace trace = unroll_inner(theta0, s0, at, 2, step_loss, tape);
  const Tensor lval = meta_loss(
      trace,
      [](const ParameterSet& p, const AttachedPhi&) { return half_sq_sum(p); });

  RecursiveOptions unprotected;
  unprotected.protect_partials = false;
  const MetaGradient gu = meta_backward_recursive(trace, lval, unprotected);
  CHECK(std::abs(gu.grads[0].item() - (-1.458)) > 1e-3);
}

TEST_CASE("hyper and initialization gradients combine across paths") {
  // both the learning rate and theta0 are learned; finite differences give
  // the reference for the combined flow
  MetaParameters phi(sgd_hyper(0.1));
  phi.learn_hyper(0, HyperField::LearningRate, 0.1);
  phi.add_loss("theta0", Tensor::scalar(1.0));

  const auto step_loss = [](std::size_t, const ParameterSet& p,
                            const AttachedPhi&) { return half_sq_sum(p); };
  const auto val_loss = [](const ParameterSet& p, const AttachedPhi&) {
    return half_sq_sum(p);
  };
  const auto eval = [&](const MetaParameters& p) {
    const TapePtr tape = GradTape::make();
    const AttachedPhi at = p.attach(tape);
    const ParameterSet theta0 = single("theta", at.loss[0]);
    const OptState s0 = init_opt_state(OptimizerKind::Sgd, theta0);
    const InnerTrace tr = unroll_inner(theta0, s0, at, 2, step_loss, tape);
    return meta_loss(tr, val_loss).item();
  };

  const std::vector<double> ref = fd_meta_grad(phi, eval, 1e-6);

  const TapePtr tape = GradTape::make();
  const AttachedPhi at = phi.attach(tape);
  const ParameterSet theta0 = single("theta", at.loss[0]);
  const OptState s0 = init_opt_state(OptimizerKind::Sgd, theta0);
  const InnerTrace trace = unroll_inner(theta0, s0, at, 2, step_loss, tape);
  const Tensor lval = meta_loss(trace, val_loss);

  const MetaGradient ga = meta_backward_autodiff(trace, lval);
  const MetaGradient gr = meta_backward_recursive(trace, lval);
  check_rel_close(flat_values(ga), ref, 1e-7, 1e-9);
  check_rel_close(flat_values(gr), ref, 1e-7, 1e-9);
  check_close(flat_values(ga), flat_values(gr), 1e-13);
}

TEST_CASE("constant training loss leaves parameters untouched") {
  // a loss with no dependence on theta gives zero gradients; the optimizer
  // step must then reproduce theta exactly (no drift, bitwise) and the
  // learning rate must receive an exactly zero meta-gradient
  for (OptimizerKind kind : {OptimizerKind::Sgd, OptimizerKind::Adagrad}) {
    CAPTURE(static_cast<int>(kind));
    MetaParameters phi(kind == OptimizerKind::Sgd ? sgd_hyper(0.1)
                                                  : adagrad_hyper(0.1));
    phi.learn_hyper(0, HyperField::LearningRate, 0.1);
    const ParameterSet theta0 =
        single("theta", Tensor({2}, {1.5, -0.25}));
    const OptState s0 = init_opt_state(kind, theta0);

    const TapePtr tape = GradTape::make();
    const AttachedPhi at = phi.attach(tape);
    const auto step_loss = [](std::size_t, const ParameterSet&,
                              const AttachedPhi&) {
      return Tensor::scalar(2.0);  // plain constant, never on the tape
    };
    const InnerTrace trace = unroll_inner(theta0, s0, at, 3, step_loss, tape);
    const Tensor lval = meta_loss(trace, [](const ParameterSet& p,
                                            const AttachedPhi&) {
      return half_sq_sum(p);
    });

    const auto before = theta0.flat()[0].values();
    const auto after = trace.thetas.back().flat()[0].values();
    REQUIRE(after.size() == before.size());
    for (std::size_t i = 0; i < before.size(); ++i) {
      CHECK(after[i] == before[i]);  // bitwise, not approximately
    }

    const MetaGradient ga = meta_backward_autodiff(trace, lval);
    const MetaGradient gr = meta_backward_recursive(trace, lval);
    CHECK(ga.grads[0].item() == 0.0);
    CHECK(gr.grads[0].item() == 0.0);
  }
}

TEST_CASE("caller parameters and state are never mutated by unrolling") {
  Rng rng(77);
  const ModelSpec spec{{2, 3, 1}, Activation::Tanh};
  const ParameterSet theta = init_params(spec, rng);
  OptState state = init_opt_state(OptimizerKind::Adagrad, theta);
  {  // give the accumulator a nonzero history
    std::vector<Tensor> warm;
    for (const Tensor& t : state.tensors()) {
      std::vector<double> v(t.size());
      for (double& x : v) x = rng.uniform(0.1, 0.5);
      warm.push_back(Tensor(t.shape(), v));
    }
    state = state.with_tensors(warm);
    state.step = 4;
  }

  std::vector<std::vector<double>> theta_before, state_before;
  for (const Tensor& t : theta.flat())
    theta_before.emplace_back(t.values().begin(), t.values().end());
  for (const Tensor& t : state.tensors())
    state_before.emplace_back(t.values().begin(), t.values().end());

  std::vector<double> xv(8 * 2), yv(8);
  for (double& v : xv) v = rng.uniform(-1.0, 1.0);
  for (double& v : yv) v = rng.uniform(-1.0, 1.0);
  const Tensor x({8, 2}, xv), y({8, 1}, yv);

  MetaParameters phi(adagrad_hyper(0.1));
  phi.learn_hyper(0, HyperField::LearningRate, 0.1, HyperTransform::Softplus);
  const TapePtr tape = GradTape::make();
  const AttachedPhi at = phi.attach(tape);
  const auto step_loss = [&](std::size_t, const ParameterSet& p,
                             const AttachedPhi&) {
    return mse_loss(forward(spec, p, x), y);
  };
  const InnerTrace trace = unroll_inner(theta, state, at, 3, step_loss, tape);

  const auto theta_flat = theta.flat();
  for (std::size_t k = 0; k < theta_flat.size(); ++k) {
    const auto now = theta_flat[k].values();
    for (std::size_t i = 0; i < now.size(); ++i)
      CHECK(now[i] == theta_before[k][i]);
  }
  const auto state_ts = state.tensors();
  for (std::size_t k = 0; k < state_ts.size(); ++k) {
    const auto now = state_ts[k].values();
    for (std::size_t i = 0; i < now.size(); ++i)
      CHECK(now[i] == state_before[k][i]);
  }
  CHECK(state.step == 4);

  // the recorded starting state is a copy, not a reference to the caller's
  REQUIRE(trace.states[0].tensors().size() == state_ts.size());
  for (std::size_t k = 0; k < state_ts.size(); ++k) {
    CHECK(trace.states[0].tensors()[k].values().data() !=
          state_ts[k].values().data());
  }
}

TEST_CASE("engines agree on randomized multilayer problems") {
  const ModelSpec spec{{2, 4, 1}, Activation::Tanh};
  int checked = 0;
  for (std::uint64_t seed : {11u, 12u}) {
    for (int opt = 0; opt < 3; ++opt) {
      for (std::size_t J : {std::size_t{1}, std::size_t{2}}) {
        for (int mode = 0; mode < 3; ++mode) {
          CAPTURE(seed);
          CAPTURE(opt);
          CAPTURE(J);
          CAPTURE(mode);
          Rng rng(seed * 1000 + opt * 100 + J * 10 + mode);
          const ParameterSet theta = init_params(spec, rng);
          Rng teacher_rng(seed + 500);
          const ParameterSet teacher = init_params(spec, teacher_rng);

          std::vector<double> xv(8 * 2), xvv(8 * 2);
          for (double& v : xv) v = rng.uniform(-1.0, 1.0);
          for (double& v : xvv) v = rng.uniform(-1.0, 1.0);
          const Tensor xt({8, 2}, xv), xval({8, 2}, xvv);
          const Tensor yt = forward(spec, teacher, xt).detached();
          const Tensor yval = forward(spec, teacher, xval).detached();

          const OptHyper base = opt == 0   ? sgd_hyper(0.05)
                                : opt == 1 ? adagrad_hyper(0.1)
                                           : adam_hyper(0.02);
          MetaParameters phi(base);
          const bool learn_opt = mode == 0 || mode == 2;
          const bool learn_loss = mode == 1 || mode == 2;
          if (learn_opt) {
            phi.learn_hyper(0, HyperField::LearningRate,
                            opt == 0 ? 0.05 : opt == 1 ? 0.1 : 0.02,
                            HyperTransform::Softplus);
          }
          if (learn_loss) {
            Rng loss_rng(seed + 900);
            const std::vector<Tensor> init = learned_loss_mse_init(4, loss_rng);
            const char* names[] = {"W1", "b1", "w2", "b2", "uq"};
            for (std::size_t i = 0; i < init.size(); ++i)
              phi.add_loss(names[i], init[i]);
          }

          const auto step_loss = [&](std::size_t, const ParameterSet& p,
                                     const AttachedPhi& a) {
            const Tensor pred = forward(spec, p, xt);
            return learn_loss ? parametric_loss(a.loss, pred, yt)
                              : mse_loss(pred, yt);
          };
          const auto val_loss = [&](const ParameterSet& p,
                                    const AttachedPhi&) {
            return mse_loss(forward(spec, p, xval), yval);
          };

          const OptState s0 = init_opt_state(base.kind, theta);
          const TapePtr tape = GradTape::make();
          const AttachedPhi at = phi.attach(tape);
          const InnerTrace trace =
              unroll_inner(theta, s0, at, J, step_loss, tape);
          const Tensor lval = meta_loss(trace, val_loss);
          const MetaGradient ga = meta_backward_autodiff(trace, lval);
          const MetaGradient gr = meta_backward_recursive(trace, lval);
          check_close(flat_values(ga), flat_values(gr), 1e-8);
          ++checked;

          // spot finite-difference verification on the cheapest slice
          if (seed == 11u && J == 1 && opt == 0) {
            const auto eval = [&](const MetaParameters& p) {
              const TapePtr t2 = GradTape::make();
              const AttachedPhi a2 = p.attach(t2);
              const InnerTrace tr =
                  unroll_inner(theta, s0, a2, J, step_loss, t2);
              return meta_loss(tr, val_loss).item();
            };
            const std::vector<double> ref = fd_meta_grad(phi, eval, 1e-5);
            check_rel_close(flat_values(ga), ref, 1e-5, 1e-7);
          }
        }
      }
    }
  }
  CHECK(checked == 36);
}

TEST_CASE("meta gradients average in declaration order") {
  MetaParameters phi(sgd_hyper(0.1));
  phi.learn_hyper(0, HyperField::LearningRate, 0.1);

  const auto run = [&](double theta_init) {
    const ParameterSet theta0 = single("theta", Tensor::scalar(theta_init));
    const OptState s0 = init_opt_state(OptimizerKind::Sgd, theta0);
    const TapePtr tape = GradTape::make();
    const AttachedPhi at = phi.attach(tape);
    const InnerTrace trace = unroll_inner(
        theta0, s0, at, 1,
        [](std::size_t, const ParameterSet& p, const AttachedPhi&) {
          return half_sq_sum(p);
        },
        tape);
    return meta_backward_recursive(trace, [](const ParameterSet& p,
                                             const AttachedPhi&) {
      return half_sq_sum(p);
    });
  };

  const MetaGradient g1 = run(1.0);
  const MetaGradient g2 = run(2.0);
  const std::vector<MetaGradient> parts = {g1, g2};
  const MetaGradient avg = average_meta_gradients(parts);
  CHECK(avg.grads[0].item() ==
        doctest::Approx(0.5 * (g1.grads[0].item() + g2.grads[0].item()))
            .epsilon(1e-15));
  CHECK_FALSE(avg.unreachable[0]);

  const std::vector<MetaGradient> none;
  CHECK_THROWS(average_meta_gradients(none));
}

TEST_CASE("meta optimizer updates raw values") {
  MetaParameters phi(sgd_hyper(0.1));
  phi.learn_hyper(0, HyperField::LearningRate, 0.3);

  MetaGradient g;
  g.grads = {Tensor::scalar(2.0)};
  g.roles = {MetaRole::Opt};
  g.names = {"learning_rate"};
  g.unreachable = {false};
  g.detached = {false};
  CHECK(g.global_norm() == doctest::Approx(2.0));

  SUBCASE("plain gradient step") {
    MetaOptimizer opt = MetaOptimizer::sgd(0.05);
    const MetaParameters next = opt.update(phi, g);
    CHECK(next.entry(0).raw.values()[0] ==
          doctest::Approx(0.3 - 0.05 * 2.0).epsilon(1e-15));
  }

  SUBCASE("zero gradient is a fixed point") {
    MetaGradient zero = g;
    zero.grads = {Tensor::scalar(0.0)};
    MetaOptimizer sgd = MetaOptimizer::sgd(0.05);
    CHECK(sgd.update(phi, zero).entry(0).raw.values()[0] == 0.3);
    MetaOptimizer adam = MetaOptimizer::adam(0.05);
    MetaParameters p = phi;
    for (int i = 0; i < 3; ++i) p = adam.update(p, zero);
    CHECK(p.entry(0).raw.values()[0] == 0.3);
  }

  SUBCASE("first adaptive step") {
    MetaOptimizer adam = MetaOptimizer::adam(0.1);
    const MetaParameters next = adam.update(phi, g);
    // bias correction makes the first step lr * g / (|g| + eps)
    const double expect = 0.3 - 0.1 * 2.0 / (2.0 + 1e-8);
    CHECK(next.entry(0).raw.values()[0] ==
          doctest::Approx(expect).epsilon(1e-15));
  }

  SUBCASE("norm clipping rescales before the step") {
    MetaUpdateOptions u;
    u.clip = true;
    u.clip_norm = 1.0;
    MetaOptimizer a = MetaOptimizer::sgd(0.05);
    const MetaParameters clipped = meta_update(phi, g, a, u);
    // grad norm 2 -> scaled to norm 1, i.e. gradient value 1
    CHECK(clipped.entry(0).raw.values()[0] ==
          doctest::Approx(0.3 - 0.05 * 1.0).epsilon(1e-15));
    MetaOptimizer b = MetaOptimizer::sgd(0.05);
    const MetaParameters unclipped = meta_update(phi, g, b, {});
    CHECK(unclipped.entry(0).raw.values()[0] ==
          doctest::Approx(0.3 - 0.05 * 2.0).epsilon(1e-15));
  }

  SUBCASE("non-finite gradients are rejected by name") {
    MetaGradient bad = g;
    bad.grads = {Tensor::scalar(std::nan(""))};
    MetaOptimizer opt = MetaOptimizer::sgd(0.05);
    CHECK_THROWS_WITH_AS(opt.update(phi, bad),
                         doctest::Contains("learning_rate"),
                         std::runtime_error);
  }
}

TEST_CASE("meta_fit iterates, reports, and leaves inputs alone") {
  MetaParameters phi(sgd_hyper(0.1));
  phi.learn_hyper(0, HyperField::LearningRate, 0.1);
  const ParameterSet theta0 = single("theta", Tensor::scalar(1.0));
  const OptState s0 = init_opt_state(OptimizerKind::Sgd, theta0);

  const BatchProvider batches = [](std::size_t) {
    TraceSpec spec;
    spec.step_loss = [](std::size_t, const ParameterSet& p,
                        const AttachedPhi&) { return half_sq_sum(p); };
    spec.val_loss = [](const ParameterSet& p, const AttachedPhi&) {
      return half_sq_sum(p);
    };
    return std::vector<TraceSpec>{spec};
  };

  const auto run = [&](MetaEngine engine) {
    MetaOptimizer opt = MetaOptimizer::sgd(0.05);
    MetaFitOptions o;
    o.meta_iterations = 3;
    o.inner_steps = 1;
    o.engine = engine;
    std::vector<double> means;
    std::vector<std::size_t> iters;
    double first_lr_after = 0.0;
    const MetaParameters out = meta_fit(
        theta0, s0, phi, batches, opt, o, [&](const MetaFitSnapshot& s) {
          means.push_back(s.mean_val_loss);
          iters.push_back(s.iter);
          if (s.iter == 0)
            first_lr_after = s.phi_after.effective_scalars()[0].second;
          CHECK(s.traces.size() == 1);
        });
    CHECK(iters == std::vector<std::size_t>{0, 1, 2});
    REQUIRE(means.size() == 3);
    CHECK(means[0] == doctest::Approx(0.405).epsilon(1e-15));
    // gradient at lr=0.1 is -0.9, so one meta-step moves lr to 0.145
    CHECK(first_lr_after == doctest::Approx(0.145).epsilon(1e-12));
    return out;
  };

  const MetaParameters out_a = run(MetaEngine::Autodiff);
  const MetaParameters out_r = run(MetaEngine::Recursive);
  CHECK(out_a.entry(0).raw.values()[0] == out_r.entry(0).raw.values()[0]);

  // inputs are untouched
  CHECK(theta0.flat()[0].item() == 1.0);
  CHECK(phi.effective_scalars()[0].second == 0.1);

  // failures carry the iteration index
  const BatchProvider empty = [](std::size_t) {
    return std::vector<TraceSpec>{};
  };
  MetaOptimizer opt = MetaOptimizer::sgd(0.05);
  CHECK_THROWS_WITH_AS(meta_fit(theta0, s0, phi, empty, opt, {}),
                       doctest::Contains("meta-iteration 0"),
                       std::runtime_error);
}

TEST_CASE("requirement checks recognize the canonical patterns") {
  const auto quad_step = [](std::size_t, const ParameterSet& p,
                            const AttachedPhi&) { return half_sq_sum(p); };
  const auto quad_val = [](const ParameterSet& p, const AttachedPhi&) {
    return half_sq_sum(p);
  };

  SUBCASE("plain gradient descent with live hyper and loss parameters") {
    MetaParameters phi(sgd_hyper(0.1));
    phi.learn_hyper(0, HyperField::LearningRate, 0.1);
    phi.add_loss("w", Tensor::scalar(1.0));
    RequirementSetup setup;
    setup.theta0 = single("theta", Tensor({2}, {1.0, -0.5}));
    setup.phi = phi;
    setup.steps = 1;
    setup.step_loss = [](std::size_t, const ParameterSet& p,
                         const AttachedPhi& a) {
      // loss = 0.5 * w^2 * sum(theta^2): curvature couples w and theta
      return scale(mul(square(a.loss[0]), half_sq_sum(p)), 1.0);
    };
    setup.val_loss = quad_val;
    const RequirementReport rep = check_requirements(setup);
    CHECK(rep.all_ok());
    CHECK(rep.find("validation-objective-differentiable").satisfied);
    CHECK(rep.find("optimizer-step-differentiable").satisfied);
    CHECK(rep.find("hyperparameter-paths-live").satisfied);
    CHECK(rep.find("training-loss-curvature").satisfied);
    CHECK(rep.text().find("[PASS] validation-objective-differentiable") !=
          std::string::npos);
  }

  SUBCASE("training loss linear in theta starves the initialization") {
    MetaParameters phi(sgd_hyper(0.1));
    phi.add_loss("theta0", Tensor({2}, {1.0, 2.0}));
    RequirementSetup setup;
    setup.theta0 = single("theta", Tensor({2}, {0.0, 0.0}));  // replaced by init
    setup.phi = phi;
    setup.steps = 1;
    setup.init = [](const AttachedPhi& a, const TapePtr&) {
      return ParameterSet({{"model", {{"theta", a.loss[0]}}}});
    };
    setup.step_loss = [](std::size_t, const ParameterSet& p,
                         const AttachedPhi&) {
      const Tensor c = Tensor({2}, {0.3, -0.7});
      return sum(mul(c, p.flat()[0]));
    };
    setup.val_loss = quad_val;
    const RequirementReport rep = check_requirements(setup);
    CHECK_FALSE(rep.all_ok());
    CHECK(rep.find("validation-objective-differentiable").satisfied);
    CHECK(rep.find("optimizer-step-differentiable").satisfied);
    CHECK(rep.find("hyperparameter-paths-live").satisfied);
    CHECK_FALSE(rep.find("training-loss-curvature").satisfied);
  }

  SUBCASE("a detached hyperparameter has no live path") {
    MetaParameters phi(sgd_hyper(0.1));
    phi.learn_hyper(0, HyperField::LearningRate, 0.1,
                    HyperTransform::Detached);
    RequirementSetup setup;
    setup.theta0 = single("theta", Tensor::scalar(1.0));
    setup.phi = phi;
    setup.steps = 1;
    setup.step_loss = quad_step;
    setup.val_loss = quad_val;
    const RequirementReport rep = check_requirements(setup);
    CHECK_FALSE(rep.all_ok());
    CHECK(rep.find("validation-objective-differentiable").satisfied);
    CHECK(rep.find("optimizer-step-differentiable").satisfied);
    CHECK_FALSE(rep.find("hyperparameter-paths-live").satisfied);
    CHECK(rep.find("hyperparameter-paths-live").detail.find("learning_rate") !=
          std::string::npos);
    CHECK(rep.find("training-loss-curvature").satisfied);

    // the gradient through the severed path is zero and flagged as detached
    const TapePtr tape = GradTape::make();
    const AttachedPhi at = phi.attach(tape);
    const ParameterSet theta0 = single("theta", Tensor::scalar(1.0));
    const OptState s0 = init_opt_state(OptimizerKind::Sgd, theta0);
    const InnerTrace trace = unroll_inner(theta0, s0, at, 1, quad_step, tape);
    const MetaGradient g = meta_backward_recursive(trace, quad_val);
    CHECK(g.grads[0].item() == 0.0);
    CHECK(g.unreachable[0]);
    CHECK(g.detached[0]);
  }
}

TEST_CASE("unrolling validates its inputs") {
  MetaParameters phi(sgd_hyper(0.1));
  const ParameterSet theta0 = single("theta", Tensor::scalar(1.0));
  const TapePtr tape = GradTape::make();
  const AttachedPhi at = phi.attach(tape);
  const auto quad = [](std::size_t, const ParameterSet& p,
                       const AttachedPhi&) { return half_sq_sum(p); };

  const OptState wrong = init_opt_state(OptimizerKind::Adam, theta0);
  CHECK_THROWS(unroll_inner(theta0, wrong, at, 1, quad, tape));

  const OptState s0 = init_opt_state(OptimizerKind::Sgd, theta0);
  const auto vector_loss = [](std::size_t, const ParameterSet& p,
                              const AttachedPhi&) { return p.flat()[0]; };
  const ParameterSet theta_vec = single("theta", Tensor({2}, {1.0, 2.0}));
  const OptState s_vec = init_opt_state(OptimizerKind::Sgd, theta_vec);
  CHECK_THROWS(unroll_inner(theta_vec, s_vec, at, 1, vector_loss, tape));

  const auto nan_at_2 = [](std::size_t j, const ParameterSet& p,
                           const AttachedPhi&) {
    return j == 2 ? Tensor::scalar(std::nan("")) : half_sq_sum(p);
  };
  CHECK_THROWS_WITH_AS(unroll_inner(theta0, s0, at, 3, nan_at_2, tape),
                       doctest::Contains("inner step 2"), std::runtime_error);

  const TapePtr other = GradTape::make();
  const ParameterSet on_other = theta0.attached(other);
  CHECK_THROWS(unroll_inner(on_other, s0, at, 1, quad, tape));

  CHECK(engine_from_name("autodiff") == MetaEngine::Autodiff);
  CHECK(engine_from_name("recursive") == MetaEngine::Recursive);
  CHECK_THROWS(engine_from_name("both"));
  CHECK(std::string(engine_name(MetaEngine::Autodiff)) == "autodiff");
}
