#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "metaloop/harness.hpp"

namespace py = pybind11;
using namespace metaloop;

namespace {

TaskKind kind_from(const std::string& name) {
  if (name == "quadratic") return TaskKind::Quadratic;
  if (name == "sinusoid") return TaskKind::Sinusoid;
  if (name == "regression") return TaskKind::RegressionMlp;
  throw ConfigError("task must be quadratic, sinusoid, or regression, got '" +
                    name + "'");
}

py::list phi_scalars(const MetaParameters& phi) {
  py::list out;
  for (const auto& [name, value] : phi.effective_scalars()) {
    out.append(py::make_tuple(name, value));
  }
  return out;
}

// Runs a task entirely in memory: metric rows are collected through the sink
// instead of a CSV, and nothing touches the filesystem.
py::dict run_in_memory(const std::string& task, const std::string& config) {
  const RunConfig cfg = config.empty() ? default_config(task)
                                       : parse_config(config, task);
  py::list rows;
  const MetricSink sink = [&rows](const MetricRow& r) {
    py::dict d;
    d["meta_iter"] = r.iter;
    for (const auto& [name, value] : r.values) d[py::str(name)] = value;
    rows.append(d);
  };

  py::dict out;
  out["task"] = task;
  out["config"] = config_json(cfg);
  if (task == "learn-lr") {
    const LearnLrResult r = run_learn_lr(build_learn_lr(cfg), sink);
    py::dict rates;
    for (const auto& [name, value] : r.learned_rates) {
      rates[py::str(name)] = value;
    }
    out["learned_rates"] = rates;
    out["eval_loss_learned"] = r.learned_eval_loss;
    out["eval_loss_fixed"] = r.fixed_eval_loss;
    out["phi"] = phi_scalars(r.phi);
  } else if (task == "maml") {
    const MamlResult r = run_maml(build_maml(cfg), sink);
    out["pre_adaptation_mse"] = r.pre_adaptation_mse;
    out["adapted_mse"] = r.adapted_mse;
    out["baseline_adapted_mse"] = r.baseline_adapted_mse;
  } else if (task == "learned-loss") {
    const LearnedLossResult r = run_learned_loss(build_learned_loss(cfg), sink);
    out["eval_mse_learned"] = r.learned_eval_mse;
    out["eval_mse_plain"] = r.mse_eval_mse;
    out["requirements_ok"] = r.requirements.all_ok();
    out["requirements_report"] = r.requirements.text();
  } else {
    throw ConfigError("unknown task '" + task + "'");
  }
  out["metrics"] = rows;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() =
      "meta-learning workbench core: tape-based reverse-mode derivatives, "
      "differentiable optimizers, and two interchangeable meta-gradient "
      "engines over unrolled inner loops";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.attr("__version__") = kLibraryVersion;
  m.def("version", [] { return std::string(kLibraryVersion); },
        "library version string");

  m.def(
      "gradcheck",
      [](std::uint64_t seed) {
        py::list out;
        for (const SuiteLine& l : gradcheck_suite(seed)) {
          py::dict d;
          d["name"] = l.name;
          d["max_err"] = l.max_err;
          d["tol"] = l.tol;
          d["ok"] = l.pass;
          out.append(d);
        }
        return out;
      },
      py::arg("seed") = 0,
      "first- and second-order derivative checks plus the optimizer-step "
      "jacobian oracles; one entry per check");

  m.def(
      "compare_engines",
      [](const std::string& task, std::size_t inner_steps,
         std::uint64_t seed) {
        const EngineComparison c =
            compare_engines_on(kind_from(task), inner_steps, seed);
        py::dict d;
        d["max_abs_gap"] = c.max_abs_gap;
        py::list b;
        for (const auto& [name, gap] : c.breakdown) {
          b.append(py::make_tuple(name, gap));
        }
        d["breakdown"] = b;
        return d;
      },
      py::arg("task") = "quadratic", py::arg("inner_steps") = 3,
      py::arg("seed") = 0,
      "largest per-component gap between the whole-graph and the recursive "
      "meta-gradient engines across optimizers and learnable sets");

  m.def(
      "check_requirements",
      [] {
        py::list out;
        for (const PatternCheck& p : requirement_patterns()) {
          py::dict d;
          d["name"] = p.name;
          d["as_documented"] = p.as_documented;
          d["report"] = p.report;
          out.append(d);
        }
        return out;
      },
      "the canonical structural-requirement scenarios and whether each "
      "reproduces its documented pass/fail pattern");

  m.def("default_config",
        [](const std::string& task) { return config_json(default_config(task)); },
        py::arg("task"), "the default configuration for a task, as JSON");

  m.def("run", &run_in_memory, py::arg("task"), py::arg("config") = "",
        "run a meta-training task in memory; `config` is a JSON object (or "
        "empty for defaults) and the result carries the per-iteration "
        "metric rows plus the task's summary numbers");
}
