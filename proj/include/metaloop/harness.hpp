#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "metaloop/tasks.hpp"

namespace metaloop {

inline constexpr const char* kLibraryVersion = "1.0.0";

/// The only environment variable the CLI reads: it replaces the default
/// base directory ("runs") under which run outputs land. An explicit --out
/// or a config out_dir always wins over it.
inline constexpr const char* kOutDirEnv = "METALOOP_OUT";

// Exit codes. Bad flags or configs are reported differently from runs that
// start fine but fail numerically (non-finite metrics, tolerance breaches).
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;

/// Malformed, unknown, or out-of-range configuration. The CLI maps this to
/// kExitUsage; everything else escaping a run maps to kExitNumerical.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flat bag of every experiment knob, parsed from a JSON document. Which
/// keys apply depends on the task; defaults are the per-task ones from the
/// runner config structs, so an empty document is a valid config.
struct RunConfig {
  std::string task;  // "learn-lr" | "maml" | "learned-loss"

  std::uint64_t seed = 0;
  std::string engine = "recursive";     // "autodiff" | "recursive"
  std::string inner_optimizer = "sgd";  // "sgd" | "adagrad" | "adam"
  std::string meta_optimizer = "adam";  // "sgd" | "adam"
  std::size_t meta_iterations = 1;
  std::size_t inner_steps = 1;
  std::size_t meta_batch = 1;
  double inner_lr = 0.1;
  double meta_lr = 0.01;
  double clip_meta_grad = 0.0;  // 0 disables clipping
  std::string out_dir;          // empty: resolved from --out / env / default

  std::string family = "quadratic";  // "quadratic" | "sinusoid" | "regression"
  std::uint64_t family_seed = 0;
  std::size_t support = 10, query = 10;
  double curvature = 1.0;
  std::size_t dim = 4;
  double amp_lo = 0.1, amp_hi = 5.0;
  double phase_lo = 0.0, phase_hi = 3.14159265358979323846;
  double input_lo = -5.0, input_hi = 5.0;
  std::vector<std::size_t> model_widths{2, 8, 1};
  std::vector<std::size_t> teacher_widths{2, 8, 1};
  std::string activation = "tanh";  // "tanh" | "relu"

  std::size_t eval_tasks = 20;
  std::size_t eval_steps = 10;  // maml: adaptation budget at evaluation
  bool first_order = false;     // maml: drop the curvature backward
  std::size_t hidden = 8;       // learned-loss: head width
  bool zero_init = false;       // learned-loss: degenerate probe start
};

/// The defaults for one task, mirroring the runner config structs.
RunConfig default_config(const std::string& task);

/// Strict parse of a JSON config — or of a previous run's manifest, whose
/// embedded config is then used — for the given task. Unknown keys are
/// rejected with a nearest-key suggestion; missing keys keep the task's
/// defaults; malformed or out-of-range values name the key precisely.
/// `origin` labels error messages (a path, usually).
RunConfig parse_config(const std::string& json_text, const std::string& task,
                       const std::string& origin = "<config>");

/// parse_config over a file's contents.
RunConfig load_config(const std::string& path, const std::string& task);

/// Every range/consistency invariant. parse_config ends with this; the CLI
/// re-runs it after applying flag overrides.
void validate_config(const RunConfig& cfg);

/// Canonical JSON echo of the applicable keys (stable key order).
std::string config_json(const RunConfig& cfg);

/// Versioned manifest: library version + subcommand + full config echo.
/// Feeding a manifest back through load_config reproduces the run.
std::string manifest_json(const RunConfig& cfg);

// Builders mapping a validated RunConfig onto the task runner configs.
LearnLrConfig build_learn_lr(const RunConfig& cfg);
MamlConfig build_maml(const RunConfig& cfg);
LearnedLossConfig build_learned_loss(const RunConfig& cfg);

/// CSV metric sink with the fixed header
///   meta_iter,<metric names...>,wall_seconds
/// one row per meta-iteration, flushed per row so interrupted runs keep
/// their partial series. Values are printed with enough digits to
/// round-trip exactly. Enforces finite values, monotone iteration indices,
/// and a stable column set; I/O failures are reported with the path.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::filesystem::path path);
  ~MetricsWriter();
  MetricsWriter(const MetricsWriter&) = delete;
  MetricsWriter& operator=(const MetricsWriter&) = delete;

  void write(const MetricRow& row, double wall_seconds);

  /// Writes the header even when no rows arrived, flushes, closes. Called
  /// by the destructor if forgotten (errors are then swallowed).
  void finish();

  std::size_t rows_written() const { return rows_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  void fail(const std::string& what) const;

  std::filesystem::path path_;
  std::ofstream out_;
  std::vector<std::string> names_;
  bool header_done_ = false;
  bool finished_ = false;
  std::size_t rows_ = 0;
  std::optional<std::size_t> last_iter_;
};

/// Whole-series convenience over MetricsWriter; sizes must match.
void write_metrics(const std::filesystem::path& path,
                   const std::vector<MetricRow>& rows,
                   const std::vector<double>& wall_seconds);

struct MetricsFile {
  std::vector<std::string> names;  // metric columns, without iter/wall
  std::vector<MetricRow> rows;
  std::vector<double> wall_seconds;
};

/// Strict reader for the writer's format; round-trips values bit-exactly.
MetricsFile read_metrics(const std::filesystem::path& path);

/// `explicit_dir` when given; otherwise <base>/<task>-seed<seed> where base
/// is `env_value` (pass getenv(kOutDirEnv)) or "runs".
std::filesystem::path resolve_out_dir(const std::string& explicit_dir,
                                      const std::string& task,
                                      std::uint64_t seed,
                                      const char* env_value);

struct RunArtifacts {
  std::filesystem::path out_dir;
  std::filesystem::path metrics;     // metrics.csv
  std::filesystem::path checkpoint;  // checkpoint.bin (parameter format)
  std::filesystem::path manifest;    // manifest.json
  std::vector<std::pair<std::string, double>> summary;
  std::string notes;  // e.g. the learned-loss requirement report
};

/// Runs cfg.task end to end, writing manifest, metrics and the final
/// checkpoint into cfg.out_dir (which must already be resolved). The run
/// subcommands are thin wrappers around this; tests drive it directly.
RunArtifacts execute_run(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// diagnostic suites behind the gradcheck / compare-engines /
// check-requirements subcommands

struct SuiteLine {
  std::string name;
  double max_err = 0.0;
  double tol = 0.0;
  bool pass = false;
};

/// First-order finite-difference checks over every tensor primitive and the
/// network forward pass, second-order checks through representative
/// composites, and closed-form Jacobian checks of the optimizer steps.
std::vector<SuiteLine> gradcheck_suite(std::uint64_t seed);

struct EngineComparison {
  double max_abs_gap = 0.0;
  /// per-configuration gaps, labeled "<optimizer>/<learnables>"
  std::vector<std::pair<std::string, double>> breakdown;
};

/// Runs both meta-gradient engines on one sampled instance of the given
/// task shape for every inner optimizer and learnable-set choice, and
/// reports the largest per-component disagreement.
EngineComparison compare_engines_on(TaskKind kind, std::size_t inner_steps,
                                    std::uint64_t seed);

struct PatternCheck {
  std::string name;
  bool as_documented = false;  // the pass/fail pattern matched expectations
  std::string report;
};

/// The three canonical requirement-checker scenarios: an all-pass descent
/// setup, a curvature-free training loss that starves a learned
/// initialization, and a stop-gradient-severed hyperparameter.
std::vector<PatternCheck> requirement_patterns();

/// CLI entry point (subcommands: gradcheck, check-requirements, learn-lr,
/// maml, learned-loss, compare-engines).
int run_cli(int argc, char** argv);

}  // namespace metaloop
