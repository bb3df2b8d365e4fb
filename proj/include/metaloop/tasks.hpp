#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "metaloop/engine.hpp"
#include "metaloop/nn.hpp"

namespace metaloop {

// ---------------------------------------------------------------------------
// task sampling

enum class SplitTag { Train, Validation };

/// One split's worth of data for a task. inputs/targets share their leading
/// dimension; the train and validation batches of a task are drawn from
/// disjoint random streams.
struct TaskBatch {
  Tensor inputs;
  Tensor targets;
  SplitTag split = SplitTag::Train;
};

/// A sampled task: the two batches plus the generative description (filled
/// per family kind) so tests can verify ranges and minima analytically.
struct Task {
  TaskBatch train;
  TaskBatch validation;
  double amplitude = 0.0;  // sinusoid
  double phase = 0.0;      // sinusoid
  Tensor center;           // quadratic: the exact minimizer
};

enum class TaskKind { Quadratic, Sinusoid, RegressionMlp };

struct TaskFamily {
  TaskKind kind = TaskKind::Sinusoid;
  std::uint64_t seed = 0;
  std::size_t support = 10;  // train batch size (per-sample families)
  std::size_t query = 10;    // validation batch size

  // quadratic: loss(theta) = 0.5 * curvature * |theta - center|^2
  double curvature = 1.0;
  std::size_t dim = 4;

  // sinusoid: y = amplitude * sin(x + phase)
  double amp_lo = 0.1, amp_hi = 5.0;
  double phase_lo = 0.0, phase_hi = 3.14159265358979323846;
  double input_lo = -5.0, input_hi = 5.0;

  // regression: targets produced by a per-task random teacher network
  ModelSpec teacher{{2, 8, 1}, Activation::Tanh};
};

TaskFamily quadratic_family(double curvature, std::size_t dim,
                            std::uint64_t seed);
TaskFamily sinusoid_family(std::uint64_t seed);
TaskFamily regression_family(ModelSpec teacher, std::uint64_t seed);

/// Deterministic: the task at index i depends only on (family.seed, seed, i),
/// never on sampling order or count. Train/validation streams are disjoint.
std::vector<Task> sample_tasks(const TaskFamily& family, std::size_t n,
                               std::uint64_t seed);

// ---------------------------------------------------------------------------
// shared plumbing

/// One row of named metrics for a meta-iteration; the harness turns these
/// into CSV columns.
struct MetricRow {
  std::size_t iter = 0;
  std::vector<std::pair<std::string, double>> values;
};
using MetricSink = std::function<void(const MetricRow&)>;

/// Plain (value-level) training used for evaluation arms: `steps` gradient
/// steps of learning rate `lr` on loss(prediction, target), one fresh tape
/// per step. Defaults to mean squared error when `loss` is empty.
using PlainLossFn = std::function<Tensor(const Tensor&, const Tensor&)>;
ParameterSet train_inner(const ModelSpec& model, const ParameterSet& start,
                         const Tensor& x, const Tensor& y, std::size_t steps,
                         double lr, const PlainLossFn& loss = {});

// ---------------------------------------------------------------------------
// learnable learning rates

struct LearnLrConfig {
  std::uint64_t seed = 0;
  MetaEngine engine = MetaEngine::Recursive;
  OptimizerKind inner_kind = OptimizerKind::Sgd;
  OptimizerKind meta_kind = OptimizerKind::Adam;  // sgd or adam
  TaskFamily family = quadratic_family(1.0, 4, 0);
  std::size_t meta_iterations = 200;
  std::size_t inner_steps = 1;
  std::size_t meta_batch = 8;
  double init_lr = 0.1;
  double meta_lr = 0.05;
  ModelSpec model{{2, 8, 1}, Activation::Tanh};  // regression mode only
  std::size_t eval_tasks = 20;
  MetaUpdateOptions update;
};

struct LearnLrResult {
  /// entry name -> effective rate after meta-training
  std::vector<std::pair<std::string, double>> learned_rates;
  double learned_eval_loss = 0.0;  // held-out tasks, learned rates
  double fixed_eval_loss = 0.0;    // held-out tasks, initial fixed rate
  MetaParameters phi;
};

/// Meta-learns the inner learning rate(s). Quadratic family: a single rate,
/// whose one-step optimum is 1/curvature. Regression family: one rate per
/// layer group of `model`. Emits per-iteration rate, train and validation
/// loss.
LearnLrResult run_learn_lr(const LearnLrConfig& config,
                           const MetricSink& sink = {});

// ---------------------------------------------------------------------------
// learnable initialization

struct MamlConfig {
  std::uint64_t seed = 0;
  MetaEngine engine = MetaEngine::Recursive;
  OptimizerKind inner_kind = OptimizerKind::Sgd;
  OptimizerKind meta_kind = OptimizerKind::Adam;  // sgd or adam
  TaskFamily family = sinusoid_family(0);
  std::size_t meta_iterations = 2000;
  std::size_t inner_steps = 5;
  std::size_t meta_batch = 4;
  double inner_lr = 0.01;
  double meta_lr = 0.001;
  ModelSpec model{{1, 32, 32, 1}, Activation::Tanh};
  bool first_order = false;  // ablation: drop the curvature backward
  std::size_t eval_tasks = 100;
  std::size_t eval_steps = 10;
  MetaUpdateOptions update;
};

struct MamlResult {
  double pre_adaptation_mse = 0.0;    // learned init, no adaptation
  double adapted_mse = 0.0;           // learned init, eval_steps adaptation
  double baseline_adapted_mse = 0.0;  // random init, same adaptation
  MetaParameters phi;                 // the learned initialization
};

/// Meta-learns the model initialization on sinusoid regression: adapt
/// inner_steps on each task's support points, meta-optimize query error.
/// Requires a sinusoid family. Emits pre/post-adaptation query MSE per
/// meta-iteration; the result compares eval_steps-adapted query MSE of the
/// learned and of a random initialization over eval_tasks held-out tasks.
MamlResult run_maml(const MamlConfig& config, const MetricSink& sink = {});

/// Rebuilds a parameter set shaped like `structure` from the loss-role
/// tensors of an attached meta-parameter bundle (declaration order).
ParameterSet init_from_phi(const AttachedPhi& phi,
                           const ParameterSet& structure);

// ---------------------------------------------------------------------------
// learnable loss

struct LearnedLossConfig {
  std::uint64_t seed = 0;
  MetaEngine engine = MetaEngine::Recursive;
  OptimizerKind inner_kind = OptimizerKind::Sgd;
  OptimizerKind meta_kind = OptimizerKind::Adam;  // sgd or adam
  TaskFamily family = regression_family({{2, 8, 1}, Activation::Tanh}, 0);
  std::size_t meta_iterations = 250;
  std::size_t inner_steps = 3;
  std::size_t meta_batch = 8;
  double inner_lr = 0.05;
  double meta_lr = 0.01;
  std::size_t hidden = 8;  // width of the learned-loss head
  ModelSpec model{{2, 8, 1}, Activation::Tanh};
  bool zero_init = false;  // degenerate probe: constant loss, zero gradients
  std::size_t eval_tasks = 20;
  MetaUpdateOptions update;
};

struct LearnedLossResult {
  double learned_eval_mse = 0.0;  // inner training under the learned loss
  double mse_eval_mse = 0.0;      // inner training under plain mse
  RequirementReport requirements;
  MetaParameters phi;
};

/// Meta-learns a parametric training loss so that inner training under it
/// minimizes validation MSE. Requires a regression family. Emits validation
/// MSE per meta-iteration; the result compares equal-budget inner training
/// under the learned loss and under mse on held-out tasks.
LearnedLossResult run_learned_loss(const LearnedLossConfig& config,
                                   const MetricSink& sink = {});

}  // namespace metaloop
