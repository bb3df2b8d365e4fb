#include <cmath>
#include <vector>

#include "doctest.h"
#include "metaloop/optim.hpp"
#include "metaloop/rng.hpp"

using namespace metaloop;

namespace {

ParameterSet single(const std::string& name, Tensor t) {
  ParameterSet p;
  p.add_group({"main", {{name, std::move(t)}}});
  return p;
}

Tensor only(const ParameterSet& p) { return p.flat().at(0); }

}  // namespace

TEST_CASE("sgd step value and its learning-rate slope") {
  const auto tape = GradTape::make();
  const ParameterSet theta = single("theta", Tensor({1}, {1.0}));
  const ParameterSet grads = single("theta", Tensor({1}, {1.0}));
  OptHyper h = sgd_hyper(0.1);
  h.groups[0].learning_rate = tape->leaf(Tensor::scalar(0.1));

  const OptStepResult res = sgd_step(theta, grads, h);
  CHECK(only(res.params).values()[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(res.state.step == 1);

  const Tensor out = sum(only(res.params));
  const Tensor wrt[] = {h.groups[0].learning_rate};
  const BackwardResult r = backward(out, wrt);
  CHECK(r.grads[0].item() == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("sgd jacobians match the closed forms on random instances") {
  Rng rng(201);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 1 + rng.below(6);
    std::vector<double> th(n), g(n), v(n);
    for (auto& x : th) x = rng.normal();
    for (auto& x : g) x = rng.normal();
    for (auto& x : v) x = rng.normal();
    const double alpha = rng.uniform(0.01, 0.5);

    const auto tape = GradTape::make();
    OptHyper h = sgd_hyper(alpha);
    h.groups[0].learning_rate = tape->leaf(Tensor::scalar(alpha));
    const OptStepResult res =
        sgd_step(single("t", Tensor({n}, th)), single("t", Tensor({n}, g)), h);

    const Tensor dir({n}, v);
    const Tensor out = dot(dir, only(res.params));
    const Tensor wrt[] = {h.groups[0].learning_rate};
    const BackwardResult r = backward(out, wrt);

    const SgdStepGrads oracle = analytic_sgd_grads(th, g, alpha);
    double want = 0.0;
    const Vec da = oracle.dtheta_dalpha();
    for (std::size_t i = 0; i < n; ++i) want += v[i] * da[i];
    CHECK(std::abs(r.grads[0].item() - want) < 1e-10);
  }
}

TEST_CASE("sgd parameter jacobian through a wired-in gradient") {
  // G = lambda * theta makes theta' = (1 - alpha*lambda) theta, so the slope
  // through one step is 0.8 for alpha = 0.1, lambda = 2.
  const auto tape = GradTape::make();
  const Tensor theta = tape->leaf(Tensor({1}, {1.0}));
  const Tensor g = scale(theta, 2.0);
  const OptStepResult res =
      sgd_step(single("t", theta), single("t", g), sgd_hyper(0.1));
  const Tensor wrt[] = {theta};
  const BackwardResult r = backward(sum(only(res.params)), wrt);
  CHECK(r.grads[0].values()[0] == doctest::Approx(0.8).epsilon(1e-15));

  const SgdStepGrads oracle = analytic_sgd_grads({1.0}, {2.0}, 0.1);
  const Vec action =
      oracle.dtheta_action({1.0}, [](const Vec& x) { return Vec{2.0 * x[0]}; });
  CHECK(action[0] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("adagrad first step with a unit gradient") {
  const auto tape = GradTape::make();
  const ParameterSet theta = single("theta", Tensor({1}, {1.0}));
  const ParameterSet grads = single("theta", Tensor({1}, {1.0}));
  OptHyper h = adagrad_hyper(0.1, 0.0);
  h.groups[0].learning_rate = tape->leaf(Tensor::scalar(0.1));
  const OptState st = init_opt_state(OptimizerKind::Adagrad, theta);

  const OptStepResult res = adagrad_step(theta, grads, st, h);
  // accumulator 1, denominator 1, step of exactly -0.1
  CHECK(only(res.params).values()[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(only(res.state.slots[0]).values()[0] == doctest::Approx(1.0));
  CHECK(res.state.step == 1);

  const Tensor wrt[] = {h.groups[0].learning_rate};
  const BackwardResult r = backward(sum(only(res.params)), wrt);
  CHECK(r.grads[0].item() == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("adagrad rate slope over a constant-gradient history") {
  // Four steps with G = 1 give d theta_4 / d eta = -(1 + 1/sqrt(2)
  // + 1/sqrt(3) + 1/2); the tape and the closed form must agree on it.
  const double want = -(1.0 + 1.0 / std::sqrt(2.0) + 1.0 / std::sqrt(3.0) + 0.5);

  const auto tape = GradTape::make();
  OptHyper h = adagrad_hyper(0.1, 0.0);
  h.groups[0].learning_rate = tape->leaf(Tensor::scalar(0.1));
  ParameterSet cur = single("theta", Tensor({1}, {0.0}));
  const ParameterSet grads = single("theta", Tensor({1}, {1.0}));
  OptState st = init_opt_state(OptimizerKind::Adagrad, cur);
  for (int t = 0; t < 4; ++t) {
    OptStepResult res = adagrad_step(cur, grads, st, h);
    cur = res.params;
    st = res.state;
  }
  const Tensor wrt[] = {h.groups[0].learning_rate};
  const BackwardResult r = backward(sum(only(cur)), wrt);
  CHECK(std::abs(r.grads[0].item() - want) < 1e-12);

  AdagradDeps deps;
  deps.deta_dphi = 1.0;
  const Vec analytic = analytic_adagrad_dphi(
      {Vec{1.0}, Vec{1.0}, Vec{1.0}, Vec{1.0}}, 0.1, 0.0, deps);
  CHECK(std::abs(analytic[0] - want) < 1e-12);
}

TEST_CASE("adagrad slope through gradients that depend on the knob") {
  // G_t = phi * c_t exercises the accumulator path: each later denominator
  // remembers every earlier gradient, so d theta / d phi picks up the cubic
  // correction term. Tape and closed form must agree to near machine level.
  Rng rng(202);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 4;
    const double phi0 = rng.uniform(0.5, 1.5);
    const double eta = rng.uniform(0.05, 0.3);
    std::vector<Vec> c(3, Vec(n));
    for (auto& step : c)
      for (auto& x : step) x = rng.normal();
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();

    const auto tape = GradTape::make();
    const Tensor phi = tape->leaf(Tensor::scalar(phi0));
    OptHyper h = adagrad_hyper(eta, 1e-10);
    ParameterSet cur = single("theta", Tensor::zeros({n}));
    OptState st = init_opt_state(OptimizerKind::Adagrad, cur);
    for (int t = 0; t < 3; ++t) {
      const Tensor g = mul(scalar_broadcast(phi, {n}), Tensor({n}, c[t]));
      OptStepResult res = adagrad_step(cur, single("theta", g), st, h);
      cur = res.params;
      st = res.state;
    }
    const Tensor wrt[] = {phi};
    const BackwardResult r =
        backward(dot(Tensor({n}, v), only(cur)), wrt);

    AdagradDeps deps;
    std::vector<Vec> history;
    for (const auto& step : c) {
      Vec g(n), dg(n);
      for (std::size_t i = 0; i < n; ++i) {
        g[i] = phi0 * step[i];
        dg[i] = step[i];
      }
      history.push_back(g);
      deps.dG_dphi.push_back(dg);
    }
    const Vec analytic = analytic_adagrad_dphi(history, eta, 1e-10, deps);
    double want = 0.0;
    for (std::size_t i = 0; i < n; ++i) want += v[i] * analytic[i];
    CHECK(std::abs(r.grads[0].item() - want) < 1e-10);
  }
}

TEST_CASE("adagrad parameter jacobian action with a loaded accumulator") {
  Rng rng(203);
  const std::size_t n = 3;
  Vec g1(n), g2(n), th(n), v(n);
  for (auto& x : g1) x = rng.normal();
  for (auto& x : g2) x = rng.normal();
  for (auto& x : th) x = rng.normal();
  for (auto& x : v) x = rng.normal();
  std::vector<double> hm(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      const double x = rng.normal();
      hm[i * n + j] = x;
      hm[j * n + i] = x;
    }
  const double eta = 0.2;

  const auto tape = GradTape::make();
  const Tensor theta = tape->leaf(Tensor({n}, th));
  const Tensor hmat({n, n}, hm);
  const Tensor g3 = reshape(matmul(hmat, reshape(theta, {n, 1})), {n});

  ParameterSet pset = single("theta", theta);
  OptState st = init_opt_state(OptimizerKind::Adagrad, pset);
  Vec acc(n);
  for (std::size_t i = 0; i < n; ++i) acc[i] = g1[i] * g1[i] + g2[i] * g2[i];
  std::vector<Tensor> accs = {Tensor({n}, acc)};
  st.slots[0] = st.slots[0].with_flat(accs);
  st.step = 2;

  const OptStepResult res =
      adagrad_step(pset, single("theta", g3), st, adagrad_hyper(eta, 1e-10));

  // backward passes hand out rows of the jacobian (the step scales rows by
  // per-coordinate denominators, so the matrix is not symmetric even though
  // H is); assemble it row by row and apply it to v for the forward action
  std::vector<Vec> jac(n, Vec(n));
  const Tensor out = only(res.params);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor picked = sum(index_select(out, 0, {i}));
    const Tensor wrt[] = {theta};
    const BackwardResult r = backward(picked, wrt);
    for (std::size_t j = 0; j < n; ++j) jac[i][j] = r.grads[0].values()[j];
  }
  Vec taped_action(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) taped_action[i] += jac[i][j] * v[j];

  Vec g3v(n);
  for (std::size_t i = 0; i < n; ++i) {
    g3v[i] = 0.0;
    for (std::size_t j = 0; j < n; ++j) g3v[i] += hm[i * n + j] * th[j];
  }
  const auto hess = [&](const Vec& x) {
    Vec out2(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) out2[i] += hm[i * n + j] * x[j];
    return out2;
  };
  const Vec want =
      analytic_adagrad_dtheta_action({g1, g2, g3v}, eta, 1e-10, v, hess);
  for (std::size_t i = 0; i < n; ++i)
    CHECK(std::abs(taped_action[i] - want[i]) < 1e-10);
}

TEST_CASE("adam first step moves by roughly the rate against the sign") {
  const ParameterSet theta = single("theta", Tensor({1}, {2.0}));
  const ParameterSet grads = single("theta", Tensor({1}, {0.5}));
  const OptState st = init_opt_state(OptimizerKind::Adam, theta);
  const OptStepResult res = adam_step(theta, grads, st, adam_hyper(0.01));
  // bias correction makes the first step -lr * G/|G| up to the epsilons
  CHECK(std::abs(only(res.params).values()[0] - 1.99) < 1e-7);
  CHECK(only(res.state.slots[0]).values()[0] == doctest::Approx(0.05));
  CHECK(only(res.state.slots[1]).values()[0] == doctest::Approx(0.00025));
  CHECK(res.state.step == 1);
}

TEST_CASE("adam leaves parameters alone at a zero gradient") {
  const ParameterSet theta = single("theta", Tensor({1}, {2.0}));
  const ParameterSet grads = single("theta", Tensor({1}, {0.0}));
  const OptState st = init_opt_state(OptimizerKind::Adam, theta);
  const OptStepResult res = adam_step(theta, grads, st, adam_hyper(0.01));
  CHECK(only(res.params).values()[0] == 2.0);
}

TEST_CASE("adam learning-rate slope agrees with a finite difference") {
  const auto step_at = [](double lr) {
    const ParameterSet theta = single("theta", Tensor({1}, {2.0}));
    const ParameterSet grads = single("theta", Tensor({1}, {0.5}));
    const OptState st = init_opt_state(OptimizerKind::Adam, theta);
    return only(adam_step(theta, grads, st, adam_hyper(lr)).params).values()[0];
  };
  const double h = 1e-6;
  const double fd = (step_at(0.01 + h) - step_at(0.01 - h)) / (2.0 * h);

  const auto tape = GradTape::make();
  OptHyper hyper = adam_hyper(0.01);
  hyper.groups[0].learning_rate = tape->leaf(Tensor::scalar(0.01));
  const ParameterSet theta = single("theta", Tensor({1}, {2.0}));
  const ParameterSet grads = single("theta", Tensor({1}, {0.5}));
  const OptState st = init_opt_state(OptimizerKind::Adam, theta);
  const OptStepResult res = adam_step(theta, grads, st, hyper);
  const Tensor wrt[] = {hyper.groups[0].learning_rate};
  const BackwardResult r = backward(sum(only(res.params)), wrt);
  CHECK(std::abs(r.grads[0].item() - fd) < 1e-8);
}

TEST_CASE("opt_step dispatches on the state kind") {
  const ParameterSet theta = single("theta", Tensor({1}, {1.0}));
  const ParameterSet grads = single("theta", Tensor({1}, {1.0}));
  const OptState st = init_opt_state(OptimizerKind::Sgd, theta);
  const OptStepResult via = opt_step(theta, grads, st, sgd_hyper(0.1));
  const OptStepResult direct = sgd_step(theta, grads, sgd_hyper(0.1));
  CHECK(only(via.params).values()[0] == only(direct.params).values()[0]);
}

TEST_CASE("hyperparameter tensor lists match the optimizer family") {
  CHECK(sgd_hyper(0.1).tensors().size() == 1);
  CHECK(adagrad_hyper(0.1).tensors().size() == 1);
  CHECK(adam_hyper(0.001).tensors().size() == 3);
  CHECK(optimizer_from_name("adagrad") == OptimizerKind::Adagrad);
  CHECK(optimizer_name(OptimizerKind::Adam) == std::string("adam"));
  CHECK_THROWS(optimizer_from_name("rmsprop"));
}

TEST_CASE("deep_copy_state duplicates buffers instead of sharing them") {
  const ParameterSet theta = single("theta", Tensor({2}, {1.0, 2.0}));
  OptState st = init_opt_state(OptimizerKind::Adam, theta);
  const OptState copy = deep_copy_state(st);
  REQUIRE(copy.slots.size() == st.slots.size());
  CHECK(copy.slots[0].flat()[0].values().data() !=
        st.slots[0].flat()[0].values().data());
  CHECK(copy.slots[0].flat()[0].values()[0] == 0.0);
  CHECK(copy.step == st.step);
}
