#include "metaloop/tasks.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace metaloop {

namespace {

// Order-independent stream addressing: the stream for (a, b) depends only on
// the two labels, so tasks keep their identity no matter how many are drawn.
std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a + 0x9e3779b97f4a7c15ull * (b + 0x632be59bd9b4e019ull);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

constexpr std::uint64_t kHeldOutStream = 0x48454C444F5554ull;  // eval-only

Tensor draw_uniform(Rng& rng, Shape shape, double lo, double hi) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

Tensor draw_normal(Rng& rng, Shape shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

Task sample_one(const TaskFamily& f, std::uint64_t base) {
  Rng desc(mix64(base, 0));
  Rng train(mix64(base, 1));
  Rng val(mix64(base, 2));
  Task task;
  task.train.split = SplitTag::Train;
  task.validation.split = SplitTag::Validation;
  switch (f.kind) {
    case TaskKind::Quadratic: {
      task.center = draw_normal(desc, {f.dim});
      task.train.inputs = draw_normal(train, {f.dim});  // starting point
      task.train.targets = task.center;
      task.validation.inputs = draw_normal(val, {f.dim});
      task.validation.targets = task.center;
      break;
    }
    case TaskKind::Sinusoid: {
      task.amplitude = desc.uniform(f.amp_lo, f.amp_hi);
      task.phase = desc.uniform(f.phase_lo, f.phase_hi);
      const auto fill = [&](Rng& rng, std::size_t n, TaskBatch& b) {
        b.inputs = draw_uniform(rng, {n, 1}, f.input_lo, f.input_hi);
        std::vector<double> y(n);
        for (std::size_t i = 0; i < n; ++i) {
          y[i] = task.amplitude * std::sin(b.inputs.values()[i] + task.phase);
        }
        b.targets = Tensor({n, 1}, std::move(y));
      };
      fill(train, f.support, task.train);
      fill(val, f.query, task.validation);
      break;
    }
    case TaskKind::RegressionMlp: {
      Rng teacher_rng(mix64(base, 3));
      const ParameterSet teacher = init_params(f.teacher, teacher_rng);
      const std::size_t in = f.teacher.widths.front();
      const auto fill = [&](Rng& rng, std::size_t n, TaskBatch& b) {
        b.inputs = draw_uniform(rng, {n, in}, -1.0, 1.0);
        b.targets = forward(f.teacher, teacher, b.inputs);
      };
      fill(train, f.support, task.train);
      fill(val, f.query, task.validation);
      break;
    }
  }
  return task;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

TaskFamily quadratic_family(double curvature, std::size_t dim,
                            std::uint64_t seed) {
  TaskFamily f;
  f.kind = TaskKind::Quadratic;
  f.seed = seed;
  f.curvature = curvature;
  f.dim = dim;
  return f;
}

TaskFamily sinusoid_family(std::uint64_t seed) {
  TaskFamily f;
  f.kind = TaskKind::Sinusoid;
  f.seed = seed;
  return f;
}

TaskFamily regression_family(ModelSpec teacher, std::uint64_t seed) {
  TaskFamily f;
  f.kind = TaskKind::RegressionMlp;
  f.seed = seed;
  f.teacher = std::move(teacher);
  return f;
}

std::vector<Task> sample_tasks(const TaskFamily& family, std::size_t n,
                               std::uint64_t seed) {
  if (family.kind == TaskKind::Quadratic && family.dim == 0) {
    throw std::invalid_argument("sample_tasks: quadratic dimension is zero");
  }
  if (family.amp_lo > family.amp_hi || family.phase_lo > family.phase_hi) {
    throw std::invalid_argument("sample_tasks: empty sinusoid parameter range");
  }
  std::vector<Task> out;
  out.reserve(n);
  const std::uint64_t call = mix64(family.seed, seed);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(sample_one(family, mix64(call, i)));
  }
  return out;
}

ParameterSet train_inner(const ModelSpec& model, const ParameterSet& start,
                         const Tensor& x, const Tensor& y, std::size_t steps,
                         double lr, const PlainLossFn& loss) {
  const std::vector<double> lrs(start.group_count(), lr);
  ParameterSet cur = start.detached();
  for (std::size_t s = 0; s < steps; ++s) {
    const TapePtr tape = GradTape::make();
    const ParameterSet at = cur.attached(tape);
    const Tensor pred = forward(model, at, x);
    const Tensor L = loss ? loss(pred, y) : mse_loss(pred, y);
    const std::vector<Tensor> wrt = at.flat();
    const BackwardResult r = backward(L, wrt);
    std::vector<Tensor> next;
    std::size_t flat = 0;
    for (std::size_t gi = 0; gi < cur.group_count(); ++gi) {
      for (std::size_t ti = 0; ti < cur.group(gi).tensors.size();
           ++ti, ++flat) {
        const auto tv = wrt[flat].values();
        const auto gv = r.grads[flat].values();
        std::vector<double> v(tv.begin(), tv.end());
        for (std::size_t k = 0; k < v.size(); ++k) v[k] -= lrs[gi] * gv[k];
        next.push_back(Tensor(wrt[flat].shape(), std::move(v)));
      }
    }
    cur = cur.with_flat(next);
  }
  return cur;
}

ParameterSet init_from_phi(const AttachedPhi& phi,
                           const ParameterSet& structure) {
  std::vector<Tensor> loss = phi.loss;
  return structure.with_flat(loss);
}

// ---------------------------------------------------------------------------
// learnable learning rates

namespace {

OptHyper base_hyper_for(OptimizerKind kind, double lr) {
  switch (kind) {
    case OptimizerKind::Sgd: return sgd_hyper(lr);
    case OptimizerKind::Adagrad: return adagrad_hyper(lr);
    case OptimizerKind::Adam: return adam_hyper(lr);
  }
  throw std::logic_error("unknown optimizer kind");
}

MetaOptimizer make_meta_opt(OptimizerKind kind, double lr) {
  switch (kind) {
    case OptimizerKind::Sgd: return MetaOptimizer::sgd(lr);
    case OptimizerKind::Adam: return MetaOptimizer::adam(lr);
    default:
      throw std::invalid_argument("config: meta optimizer must be sgd or adam");
  }
}

// Value-level adaptation for the comparison arms: unroll the chosen inner
// optimizer with fixed rates from theta0 and report the validation value.
// `rates` holds either one shared rate or one per parameter group.
double eval_adapted(const ParameterSet& theta0, OptimizerKind kind,
                    const std::vector<double>& rates, std::size_t steps,
                    const StepLossFn& step_loss, const ValLossFn& val_loss) {
  OptHyper h = base_hyper_for(kind, rates.at(0));
  while (h.groups.size() < theta0.group_count()) {
    h.groups.push_back(h.groups[0]);
  }
  if (rates.size() > 1) {
    for (std::size_t g = 0; g < h.groups.size(); ++g) {
      h.groups[g].learning_rate = Tensor::scalar(rates.at(g));
    }
  }
  const MetaParameters constant(h);
  const TapePtr tape = GradTape::make();
  const AttachedPhi at = constant.attach(tape);
  const InnerTrace trace = unroll_inner(theta0, init_opt_state(kind, theta0),
                                        at, steps, step_loss, tape);
  return meta_loss(trace, val_loss).item();
}

void validate_common(std::size_t meta_iterations, std::size_t inner_steps,
                     std::size_t meta_batch, double meta_lr) {
  if (meta_iterations < 1) {
    throw std::invalid_argument("config: meta_iterations must be at least 1");
  }
  if (inner_steps < 1) {
    throw std::invalid_argument("config: inner_steps must be at least 1");
  }
  if (meta_batch < 1) {
    throw std::invalid_argument("config: meta_batch must be at least 1");
  }
  if (!(meta_lr > 0.0)) {
    throw std::invalid_argument("config: meta_lr must be positive");
  }
}

}  // namespace

LearnLrResult run_learn_lr(const LearnLrConfig& config,
                           const MetricSink& sink) {
  validate_common(config.meta_iterations, config.inner_steps,
                  config.meta_batch, config.meta_lr);
  if (!(config.init_lr > 0.0)) {
    throw std::invalid_argument("learn-lr: init_lr must be positive");
  }
  if (config.family.kind == TaskKind::Sinusoid) {
    throw std::invalid_argument(
        "learn-lr: task family must be quadratic or regression");
  }
  const bool regression = config.family.kind == TaskKind::RegressionMlp;
  if (regression &&
      (config.model.widths.front() != config.family.teacher.widths.front() ||
       config.model.widths.back() != config.family.teacher.widths.back())) {
    throw std::invalid_argument(
        "learn-lr: model and teacher input/output widths must match");
  }

  // template parameters fix the structure (and optimizer-state shapes)
  Rng init_rng(mix64(config.seed, 0x11));
  ParameterSet structure;
  if (regression) {
    structure = init_params(config.model, init_rng);
  } else {
    structure.add_group(
        {"model", {{"theta", Tensor::zeros({config.family.dim})}}});
  }

  OptHyper base = base_hyper_for(config.inner_kind, config.init_lr);
  while (base.groups.size() < structure.group_count()) {
    base.groups.push_back(base.groups[0]);
  }
  MetaParameters phi(base);
  for (std::size_t g = 0; g < structure.group_count(); ++g) {
    phi.learn_hyper(g, HyperField::LearningRate, config.init_lr,
                    HyperTransform::Softplus);
  }

  const double lambda = config.family.curvature;
  const auto quad_loss = [lambda](const ParameterSet& p, const Tensor& c) {
    return scale(sum(square(sub(p.flat()[0], c))), 0.5 * lambda);
  };

  const auto make_specs = [&](std::uint64_t draw_seed,
                              const std::vector<Task>& tasks) {
    std::vector<TraceSpec> specs;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      const Task& task = tasks[t];
      TraceSpec spec;
      if (regression) {
        Rng theta_rng(mix64(draw_seed, 0x7E7A + t));
        const ParameterSet theta0 = init_params(config.model, theta_rng);
        spec.init = [theta0](const AttachedPhi&, const TapePtr&) {
          return theta0;
        };
        spec.step_loss = [this_task = task, model = config.model](
                             std::size_t, const ParameterSet& p,
                             const AttachedPhi&) {
          return mse_loss(forward(model, p, this_task.train.inputs),
                          this_task.train.targets);
        };
        spec.val_loss = [this_task = task, model = config.model](
                            const ParameterSet& p, const AttachedPhi&) {
          return mse_loss(forward(model, p, this_task.validation.inputs),
                          this_task.validation.targets);
        };
      } else {
        const Tensor theta0 = task.train.inputs;
        spec.init = [theta0](const AttachedPhi&, const TapePtr&) {
          ParameterSet p;
          p.add_group({"model", {{"theta", theta0}}});
          return p;
        };
        spec.step_loss = [quad_loss, c = task.train.targets](
                             std::size_t, const ParameterSet& p,
                             const AttachedPhi&) { return quad_loss(p, c); };
        spec.val_loss = [quad_loss, c = task.validation.targets](
                            const ParameterSet& p, const AttachedPhi&) {
          return quad_loss(p, c);
        };
      }
      specs.push_back(std::move(spec));
    }
    return specs;
  };

  const BatchProvider provider = [&](std::size_t iter) {
    const std::uint64_t draw = mix64(config.seed, iter);
    return make_specs(draw,
                      sample_tasks(config.family, config.meta_batch, draw));
  };

  MetaOptimizer meta_opt = make_meta_opt(config.meta_kind, config.meta_lr);
  MetaFitOptions opts;
  opts.meta_iterations = config.meta_iterations;
  opts.inner_steps = config.inner_steps;
  opts.engine = config.engine;
  opts.update = config.update;

  const MetaFitSink fit_sink = [&](const MetaFitSnapshot& snap) {
    if (!sink) return;
    MetricRow row;
    row.iter = snap.iter;
    for (const auto& [name, value] : snap.phi_after.effective_scalars()) {
      row.values.emplace_back(name, value);
    }
    std::vector<double> first_losses;
    for (const InnerTrace& tr : snap.traces) {
      first_losses.push_back(tr.train_losses.front().item());
    }
    row.values.emplace_back("train_loss", mean_of(first_losses));
    row.values.emplace_back("val_loss", snap.mean_val_loss);
    row.values.emplace_back("grad_norm", snap.grad.global_norm());
    sink(row);
  };

  const OptState state = init_opt_state(config.inner_kind, structure);
  LearnLrResult result;
  result.phi = meta_fit(structure, state, phi, provider, meta_opt, opts,
                        fit_sink);
  result.learned_rates = result.phi.effective_scalars();

  // held-out comparison: same tasks, same budget, learned vs initial rates
  const std::uint64_t held = mix64(config.seed, kHeldOutStream);
  const std::vector<Task> eval_tasks =
      sample_tasks(config.family, config.eval_tasks, held);
  std::vector<double> learned_rates;
  for (const auto& [name, value] : result.learned_rates) {
    learned_rates.push_back(value);
  }
  const std::vector<double> fixed_rates(learned_rates.size(), config.init_lr);

  std::vector<double> learned_losses, fixed_losses;
  for (std::size_t t = 0; t < eval_tasks.size(); ++t) {
    const Task& task = eval_tasks[t];
    ParameterSet theta0;
    StepLossFn step;
    ValLossFn val;
    if (regression) {
      Rng theta_rng(mix64(held, 0x7E7A + t));
      theta0 = init_params(config.model, theta_rng);
      step = [&task, &config](std::size_t, const ParameterSet& p,
                              const AttachedPhi&) {
        return mse_loss(forward(config.model, p, task.train.inputs),
                        task.train.targets);
      };
      val = [&task, &config](const ParameterSet& p, const AttachedPhi&) {
        return mse_loss(forward(config.model, p, task.validation.inputs),
                        task.validation.targets);
      };
    } else {
      theta0.add_group({"model", {{"theta", task.train.inputs}}});
      step = [quad_loss, c = task.train.targets](
                 std::size_t, const ParameterSet& p,
                 const AttachedPhi&) { return quad_loss(p, c); };
      val = [quad_loss, c = task.validation.targets](
                const ParameterSet& p, const AttachedPhi&) {
        return quad_loss(p, c);
      };
    }
    learned_losses.push_back(eval_adapted(theta0, config.inner_kind,
                                          learned_rates, config.inner_steps,
                                          step, val));
    fixed_losses.push_back(eval_adapted(theta0, config.inner_kind, fixed_rates,
                                        config.inner_steps, step, val));
  }
  result.learned_eval_loss = mean_of(learned_losses);
  result.fixed_eval_loss = mean_of(fixed_losses);
  return result;
}

// ---------------------------------------------------------------------------
// learnable initialization

MamlResult run_maml(const MamlConfig& config, const MetricSink& sink) {
  validate_common(config.meta_iterations, config.inner_steps,
                  config.meta_batch, config.meta_lr);
  if (config.family.kind != TaskKind::Sinusoid) {
    throw std::invalid_argument(
        "maml: task family must be sinusoid regression");
  }
  if (config.model.widths.front() != 1 || config.model.widths.back() != 1) {
    throw std::invalid_argument("maml: model must map one input to one output");
  }
  if (!(config.inner_lr > 0.0)) {
    throw std::invalid_argument("maml: inner_lr must be positive");
  }
  if (config.first_order && config.engine != MetaEngine::Recursive) {
    throw std::invalid_argument(
        "maml: the first-order ablation requires the recursive engine");
  }

  Rng init_rng(mix64(config.seed, 0x11));
  const ParameterSet structure = init_params(config.model, init_rng);

  MetaParameters phi(base_hyper_for(config.inner_kind, config.inner_lr));
  for (const ParamGroup& g : structure.groups()) {
    for (const NamedTensor& t : g.tensors) {
      phi.add_loss(g.name + "/" + t.name, t.value);
    }
  }

  std::vector<Task> current;  // batch of the iteration being reported
  const BatchProvider provider = [&](std::size_t iter) {
    current = sample_tasks(config.family, config.meta_batch,
                           mix64(config.seed, iter));
    std::vector<TraceSpec> specs;
    for (const Task& task : current) {
      TraceSpec spec;
      spec.init = [&structure](const AttachedPhi& a, const TapePtr&) {
        return init_from_phi(a, structure);
      };
      spec.step_loss = [this_task = task, model = config.model](
                           std::size_t, const ParameterSet& p,
                           const AttachedPhi&) {
        return mse_loss(forward(model, p, this_task.train.inputs),
                        this_task.train.targets);
      };
      spec.val_loss = [this_task = task, model = config.model](
                          const ParameterSet& p, const AttachedPhi&) {
        return mse_loss(forward(model, p, this_task.validation.inputs),
                        this_task.validation.targets);
      };
      specs.push_back(std::move(spec));
    }
    return specs;
  };

  MetaOptimizer meta_opt = make_meta_opt(config.meta_kind, config.meta_lr);
  MetaFitOptions opts;
  opts.meta_iterations = config.meta_iterations;
  opts.inner_steps = config.inner_steps;
  opts.engine = config.engine;
  opts.recursive.ablate_second_order = config.first_order;
  opts.update = config.update;

  const MetaFitSink fit_sink = [&](const MetaFitSnapshot& snap) {
    if (!sink) return;
    // query error of the current initialization before any adaptation
    const ParameterSet init_now =
        structure.with_flat(snap.phi_after.raw_tensors());
    std::vector<double> pre;
    for (const Task& task : current) {
      pre.push_back(mse_loss(forward(config.model, init_now,
                                     task.validation.inputs),
                             task.validation.targets)
                        .item());
    }
    MetricRow row;
    row.iter = snap.iter;
    row.values.emplace_back("pre_adapt_mse", mean_of(pre));
    row.values.emplace_back("post_adapt_mse", snap.mean_val_loss);
    row.values.emplace_back("grad_norm", snap.grad.global_norm());
    sink(row);
  };

  const OptState state = init_opt_state(config.inner_kind, structure);
  MamlResult result;
  result.phi = meta_fit(structure, state, phi, provider, meta_opt, opts,
                        fit_sink);

  // held-out evaluation: adapt the learned and a random initialization with
  // the same budget on the same tasks
  const std::uint64_t held = mix64(config.seed, kHeldOutStream);
  const std::vector<Task> eval =
      sample_tasks(config.family, config.eval_tasks, held);
  const ParameterSet learned_init =
      structure.with_flat(result.phi.raw_tensors());

  std::vector<double> pre, adapted, baseline;
  for (std::size_t t = 0; t < eval.size(); ++t) {
    const Task& task = eval[t];
    const StepLossFn adapt_step = [&task, &config](std::size_t,
                                                   const ParameterSet& p,
                                                   const AttachedPhi&) {
      return mse_loss(forward(config.model, p, task.train.inputs),
                      task.train.targets);
    };
    const ValLossFn query_val = [&task, &config](const ParameterSet& p,
                                                 const AttachedPhi&) {
      return mse_loss(forward(config.model, p, task.validation.inputs),
                      task.validation.targets);
    };
    pre.push_back(mse_loss(forward(config.model, learned_init,
                                   task.validation.inputs),
                           task.validation.targets)
                      .item());
    adapted.push_back(eval_adapted(learned_init, config.inner_kind,
                                   {config.inner_lr}, config.eval_steps,
                                   adapt_step, query_val));
    Rng rand_rng(mix64(held, 0xBA5E + t));
    const ParameterSet random_init = init_params(config.model, rand_rng);
    baseline.push_back(eval_adapted(random_init, config.inner_kind,
                                    {config.inner_lr}, config.eval_steps,
                                    adapt_step, query_val));
  }
  result.pre_adaptation_mse = mean_of(pre);
  result.adapted_mse = mean_of(adapted);
  result.baseline_adapted_mse = mean_of(baseline);
  return result;
}

// ---------------------------------------------------------------------------
// learnable loss

LearnedLossResult run_learned_loss(const LearnedLossConfig& config,
                                   const MetricSink& sink) {
  validate_common(config.meta_iterations, config.inner_steps,
                  config.meta_batch, config.meta_lr);
  if (config.family.kind != TaskKind::RegressionMlp) {
    throw std::invalid_argument(
        "learned-loss: task family must be regression");
  }
  if (config.hidden < 1) {
    throw std::invalid_argument("learned-loss: head width must be at least 1");
  }
  if (config.model.widths.front() != config.family.teacher.widths.front() ||
      config.model.widths.back() != config.family.teacher.widths.back()) {
    throw std::invalid_argument(
        "learned-loss: model and teacher input/output widths must match");
  }

  Rng loss_rng(mix64(config.seed, 0x1055));
  const std::vector<Tensor> loss_init =
      config.zero_init ? learned_loss_zero_init(config.hidden, loss_rng)
                       : learned_loss_mse_init(config.hidden, loss_rng);
  static const char* kNames[] = {"W1", "b1", "w2", "b2", "uq"};
  MetaParameters phi(base_hyper_for(config.inner_kind, config.inner_lr));
  for (std::size_t i = 0; i < loss_init.size(); ++i) {
    phi.add_loss(kNames[i], loss_init[i]);
  }

  Rng init_rng(mix64(config.seed, 0x11));
  const ParameterSet structure = init_params(config.model, init_rng);

  const auto make_specs = [&](std::uint64_t draw_seed,
                              const std::vector<Task>& tasks) {
    std::vector<TraceSpec> specs;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      const Task& task = tasks[t];
      TraceSpec spec;
      Rng theta_rng(mix64(draw_seed, 0x7E7A + t));
      const ParameterSet theta0 = init_params(config.model, theta_rng);
      spec.init = [theta0](const AttachedPhi&, const TapePtr&) {
        return theta0;
      };
      spec.step_loss = [this_task = task, model = config.model](
                           std::size_t, const ParameterSet& p,
                           const AttachedPhi& a) {
        return parametric_loss(a.loss,
                               forward(model, p, this_task.train.inputs),
                               this_task.train.targets);
      };
      spec.val_loss = [this_task = task, model = config.model](
                          const ParameterSet& p, const AttachedPhi&) {
        return mse_loss(forward(model, p, this_task.validation.inputs),
                        this_task.validation.targets);
      };
      specs.push_back(std::move(spec));
    }
    return specs;
  };

  const BatchProvider provider = [&](std::size_t iter) {
    const std::uint64_t draw = mix64(config.seed, iter);
    return make_specs(draw,
                      sample_tasks(config.family, config.meta_batch, draw));
  };

  MetaOptimizer meta_opt = make_meta_opt(config.meta_kind, config.meta_lr);
  MetaFitOptions opts;
  opts.meta_iterations = config.meta_iterations;
  opts.inner_steps = config.inner_steps;
  opts.engine = config.engine;
  opts.update = config.update;

  const MetaFitSink fit_sink = [&](const MetaFitSnapshot& snap) {
    if (!sink) return;
    MetricRow row;
    row.iter = snap.iter;
    row.values.emplace_back("val_mse", snap.mean_val_loss);
    row.values.emplace_back("grad_norm", snap.grad.global_norm());
    for (const auto& [name, value] : snap.phi_after.effective_scalars()) {
      if (name == std::string("uq")) row.values.emplace_back("uq", value);
    }
    sink(row);
  };

  const OptState state = init_opt_state(config.inner_kind, structure);
  LearnedLossResult result;
  result.phi = meta_fit(structure, state, phi, provider, meta_opt, opts,
                        fit_sink);

  // the structural health check runs on a probe task with the final loss
  const std::vector<Task> probe =
      sample_tasks(config.family, 1, mix64(config.seed, 0x906E));
  {
    RequirementSetup setup;
    Rng theta_rng(mix64(config.seed, 0x906E + 1));
    setup.theta0 = init_params(config.model, theta_rng);
    setup.phi = result.phi;
    setup.steps = 1;
    setup.step_loss = [task = probe[0], model = config.model](
                          std::size_t, const ParameterSet& p,
                          const AttachedPhi& a) {
      return parametric_loss(a.loss, forward(model, p, task.train.inputs),
                             task.train.targets);
    };
    setup.val_loss = [task = probe[0], model = config.model](
                         const ParameterSet& p, const AttachedPhi&) {
      return mse_loss(forward(model, p, task.validation.inputs),
                      task.validation.targets);
    };
    result.requirements = check_requirements(setup);
  }

  // held-out comparison: equal-budget inner training under the learned loss
  // and under plain mse, from the same starting parameters
  const std::uint64_t held = mix64(config.seed, kHeldOutStream);
  const std::vector<Task> eval =
      sample_tasks(config.family, config.eval_tasks, held);
  const std::vector<Tensor> learned_loss_params = result.phi.raw_tensors();

  std::vector<double> learned_mse, plain_mse;
  for (std::size_t t = 0; t < eval.size(); ++t) {
    const Task& task = eval[t];
    Rng theta_rng(mix64(held, 0x7E7A + t));
    const ParameterSet theta0 = init_params(config.model, theta_rng);
    const StepLossFn learned_step =
        [&task, &config, &learned_loss_params](std::size_t,
                                               const ParameterSet& p,
                                               const AttachedPhi&) {
          return parametric_loss(learned_loss_params,
                                 forward(config.model, p, task.train.inputs),
                                 task.train.targets);
        };
    const StepLossFn mse_step = [&task, &config](std::size_t,
                                                 const ParameterSet& p,
                                                 const AttachedPhi&) {
      return mse_loss(forward(config.model, p, task.train.inputs),
                      task.train.targets);
    };
    const ValLossFn val = [&task, &config](const ParameterSet& p,
                                           const AttachedPhi&) {
      return mse_loss(forward(config.model, p, task.validation.inputs),
                      task.validation.targets);
    };
    learned_mse.push_back(eval_adapted(theta0, config.inner_kind,
                                       {config.inner_lr}, config.inner_steps,
                                       learned_step, val));
    plain_mse.push_back(eval_adapted(theta0, config.inner_kind,
                                     {config.inner_lr}, config.inner_steps,
                                     mse_step, val));
  }
  result.learned_eval_mse = mean_of(learned_mse);
  result.mse_eval_mse = mean_of(plain_mse);
  return result;
}

}  // namespace metaloop
