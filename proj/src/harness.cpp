#include "metaloop/harness.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <limits>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "metaloop/gradcheck.hpp"
#include "metaloop/serialize.hpp"

namespace metaloop {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

const std::vector<std::string> kCommonKeys = {
    "task",           "seed",        "engine",       "inner_optimizer",
    "meta_optimizer", "meta_iterations", "inner_steps", "meta_batch",
    "inner_lr",       "meta_lr",     "clip_meta_grad", "out_dir",
    "family",         "family_seed", "support",      "query",
    "model_widths",   "activation",  "eval_tasks"};

std::vector<std::string> known_keys(const std::string& task) {
  std::vector<std::string> keys = kCommonKeys;
  if (task == "learn-lr") {
    keys.insert(keys.end(), {"curvature", "dim", "teacher_widths"});
  } else if (task == "maml") {
    keys.insert(keys.end(), {"amp_lo", "amp_hi", "phase_lo", "phase_hi",
                             "input_lo", "input_hi", "eval_steps",
                             "first_order"});
  } else if (task == "learned-loss") {
    keys.insert(keys.end(), {"teacher_widths", "hidden", "zero_init"});
  }
  return keys;
}

std::string nearest_key(const std::string& unknown,
                        const std::vector<std::string>& keys) {
  std::string best;
  std::size_t best_d = std::numeric_limits<std::size_t>::max();
  for (const std::string& k : keys) {
    const std::size_t d = edit_distance(unknown, k);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

[[noreturn]] void config_fail(const std::string& origin,
                              const std::string& what) {
  throw ConfigError(origin + ": " + what);
}

// Typed readers with key-specific error messages.
struct JsonReader {
  const Json& j;
  const std::string& origin;

  bool has(const char* key) const { return j.contains(key); }

  void read(const char* key, std::uint64_t& into) const {
    if (!has(key)) return;
    const Json& v = j.at(key);
    if (!v.is_number_unsigned()) {
      config_fail(origin, std::string("key '") + key +
                              "': must be a non-negative integer");
    }
    into = v.get<std::uint64_t>();
  }

  void read(const char* key, double& into) const {
    if (!has(key)) return;
    const Json& v = j.at(key);
    if (!v.is_number()) {
      config_fail(origin, std::string("key '") + key + "': must be a number");
    }
    into = v.get<double>();
  }

  void read(const char* key, bool& into) const {
    if (!has(key)) return;
    const Json& v = j.at(key);
    if (!v.is_boolean()) {
      config_fail(origin, std::string("key '") + key + "': must be a boolean");
    }
    into = v.get<bool>();
  }

  void read(const char* key, std::string& into) const {
    if (!has(key)) return;
    const Json& v = j.at(key);
    if (!v.is_string()) {
      config_fail(origin, std::string("key '") + key + "': must be a string");
    }
    into = v.get<std::string>();
  }

  void read(const char* key, std::vector<std::size_t>& into) const {
    if (!has(key)) return;
    const Json& v = j.at(key);
    if (!v.is_array()) {
      config_fail(origin, std::string("key '") + key +
                              "': must be an array of positive integers");
    }
    std::vector<std::size_t> widths;
    for (const Json& e : v) {
      if (!e.is_number_unsigned() || e.get<std::uint64_t>() == 0) {
        config_fail(origin, std::string("key '") + key +
                                "': entries must be positive integers");
      }
      widths.push_back(static_cast<std::size_t>(e.get<std::uint64_t>()));
    }
    into = std::move(widths);
  }
};

void require_count(const char* key, std::size_t v) {
  if (v < 1) {
    throw ConfigError(std::string("key '") + key +
                      "': must be at least 1, got " + std::to_string(v));
  }
}

void require_positive(const char* key, double v) {
  if (!(std::isfinite(v) && v > 0.0)) {
    throw ConfigError(std::string("key '") + key +
                      "': must be a positive finite number, got " +
                      fmt_double(v));
  }
}

Activation activation_from(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "relu") return Activation::Relu;
  throw ConfigError("key 'activation': must be 'tanh' or 'relu', got '" +
                    name + "'");
}

TaskFamily family_from(const RunConfig& cfg) {
  TaskFamily f;
  if (cfg.family == "quadratic") {
    f = quadratic_family(cfg.curvature, cfg.dim, cfg.family_seed);
  } else if (cfg.family == "sinusoid") {
    f = sinusoid_family(cfg.family_seed);
    f.amp_lo = cfg.amp_lo;
    f.amp_hi = cfg.amp_hi;
    f.phase_lo = cfg.phase_lo;
    f.phase_hi = cfg.phase_hi;
    f.input_lo = cfg.input_lo;
    f.input_hi = cfg.input_hi;
  } else {
    f = regression_family({cfg.teacher_widths,
                           activation_from(cfg.activation)},
                          cfg.family_seed);
  }
  f.support = cfg.support;
  f.query = cfg.query;
  return f;
}

MetaUpdateOptions update_from(const RunConfig& cfg) {
  MetaUpdateOptions u;
  if (cfg.clip_meta_grad > 0.0) {
    u.clip = true;
    u.clip_norm = cfg.clip_meta_grad;
  }
  return u;
}

}  // namespace

RunConfig default_config(const std::string& task) {
  RunConfig c;
  c.task = task;
  if (task == "learn-lr") {
    const LearnLrConfig d;
    c.engine = engine_name(d.engine);
    c.inner_optimizer = optimizer_name(d.inner_kind);
    c.meta_optimizer = optimizer_name(d.meta_kind);
    c.meta_iterations = d.meta_iterations;
    c.inner_steps = d.inner_steps;
    c.meta_batch = d.meta_batch;
    c.inner_lr = d.init_lr;
    c.meta_lr = d.meta_lr;
    c.family = "quadratic";
    c.family_seed = d.family.seed;
    c.support = d.family.support;
    c.query = d.family.query;
    c.curvature = d.family.curvature;
    c.dim = d.family.dim;
    c.model_widths = d.model.widths;
    c.eval_tasks = d.eval_tasks;
  } else if (task == "maml") {
    const MamlConfig d;
    c.engine = engine_name(d.engine);
    c.inner_optimizer = optimizer_name(d.inner_kind);
    c.meta_optimizer = optimizer_name(d.meta_kind);
    c.meta_iterations = d.meta_iterations;
    c.inner_steps = d.inner_steps;
    c.meta_batch = d.meta_batch;
    c.inner_lr = d.inner_lr;
    c.meta_lr = d.meta_lr;
    c.family = "sinusoid";
    c.family_seed = d.family.seed;
    c.support = d.family.support;
    c.query = d.family.query;
    c.amp_lo = d.family.amp_lo;
    c.amp_hi = d.family.amp_hi;
    c.phase_lo = d.family.phase_lo;
    c.phase_hi = d.family.phase_hi;
    c.input_lo = d.family.input_lo;
    c.input_hi = d.family.input_hi;
    c.model_widths = d.model.widths;
    c.eval_tasks = d.eval_tasks;
    c.eval_steps = d.eval_steps;
    c.first_order = d.first_order;
  } else if (task == "learned-loss") {
    const LearnedLossConfig d;
    c.engine = engine_name(d.engine);
    c.inner_optimizer = optimizer_name(d.inner_kind);
    c.meta_optimizer = optimizer_name(d.meta_kind);
    c.meta_iterations = d.meta_iterations;
    c.inner_steps = d.inner_steps;
    c.meta_batch = d.meta_batch;
    c.inner_lr = d.inner_lr;
    c.meta_lr = d.meta_lr;
    c.family = "regression";
    c.family_seed = d.family.seed;
    c.support = d.family.support;
    c.query = d.family.query;
    c.teacher_widths = d.family.teacher.widths;
    c.model_widths = d.model.widths;
    c.hidden = d.hidden;
    c.zero_init = d.zero_init;
    c.eval_tasks = d.eval_tasks;
  } else {
    throw ConfigError("unknown task '" + task +
                      "' (expected learn-lr, maml, or learned-loss)");
  }
  return c;
}

RunConfig parse_config(const std::string& json_text, const std::string& task,
                       const std::string& origin) {
  Json doc;
  try {
    doc = Json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    config_fail(origin, std::string("not valid JSON — ") + e.what());
  }
  if (!doc.is_object()) {
    config_fail(origin, "the top level must be a JSON object");
  }

  // A run manifest carries the config under "config"; accept it directly so
  // any run can be reproduced from its manifest alone.
  const Json* body = &doc;
  if (doc.contains("config")) {
    for (const auto& [key, value] : doc.items()) {
      (void)value;
      if (key != "config" && key != "manifest_version" &&
          key != "library_version" && key != "subcommand") {
        config_fail(origin, "unknown manifest key '" + key + "'");
      }
    }
    if (doc.contains("subcommand")) {
      const std::string sub = doc.at("subcommand").get<std::string>();
      if (sub != task) {
        config_fail(origin, "this manifest was written by subcommand '" + sub +
                                "', not '" + task + "'");
      }
    }
    if (!doc.at("config").is_object()) {
      config_fail(origin, "manifest key 'config' must be an object");
    }
    body = &doc.at("config");
  }

  const std::vector<std::string> keys = known_keys(task);
  for (const auto& [key, value] : body->items()) {
    (void)value;
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      config_fail(origin, "unknown key '" + key + "'; did you mean '" +
                              nearest_key(key, keys) + "'?");
    }
  }

  RunConfig cfg = default_config(task);
  const JsonReader r{*body, origin};
  std::string cfg_task = task;
  r.read("task", cfg_task);
  if (cfg_task != task) {
    config_fail(origin, "config sets task '" + cfg_task +
                            "' but the subcommand is '" + task + "'");
  }
  r.read("seed", cfg.seed);
  r.read("engine", cfg.engine);
  r.read("inner_optimizer", cfg.inner_optimizer);
  r.read("meta_optimizer", cfg.meta_optimizer);
  r.read("meta_iterations", cfg.meta_iterations);
  r.read("inner_steps", cfg.inner_steps);
  r.read("meta_batch", cfg.meta_batch);
  r.read("inner_lr", cfg.inner_lr);
  r.read("meta_lr", cfg.meta_lr);
  r.read("clip_meta_grad", cfg.clip_meta_grad);
  r.read("out_dir", cfg.out_dir);
  r.read("family", cfg.family);
  r.read("family_seed", cfg.family_seed);
  r.read("support", cfg.support);
  r.read("query", cfg.query);
  r.read("curvature", cfg.curvature);
  r.read("dim", cfg.dim);
  r.read("amp_lo", cfg.amp_lo);
  r.read("amp_hi", cfg.amp_hi);
  r.read("phase_lo", cfg.phase_lo);
  r.read("phase_hi", cfg.phase_hi);
  r.read("input_lo", cfg.input_lo);
  r.read("input_hi", cfg.input_hi);
  r.read("model_widths", cfg.model_widths);
  r.read("teacher_widths", cfg.teacher_widths);
  r.read("activation", cfg.activation);
  r.read("eval_tasks", cfg.eval_tasks);
  r.read("eval_steps", cfg.eval_steps);
  r.read("first_order", cfg.first_order);
  r.read("hidden", cfg.hidden);
  r.read("zero_init", cfg.zero_init);

  try {
    validate_config(cfg);
  } catch (const ConfigError& e) {
    config_fail(origin, e.what());
  }
  return cfg;
}

RunConfig load_config(const std::string& path, const std::string& task) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config file '" + path + "'");
  }
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), task, path);
}

void validate_config(const RunConfig& cfg) {
  if (cfg.task != "learn-lr" && cfg.task != "maml" &&
      cfg.task != "learned-loss") {
    throw ConfigError("unknown task '" + cfg.task +
                      "' (expected learn-lr, maml, or learned-loss)");
  }
  if (cfg.engine != "autodiff" && cfg.engine != "recursive") {
    throw ConfigError("key 'engine': must be 'autodiff' or 'recursive', got '" +
                      cfg.engine + "'");
  }
  if (cfg.inner_optimizer != "sgd" && cfg.inner_optimizer != "adagrad" &&
      cfg.inner_optimizer != "adam") {
    throw ConfigError(
        "key 'inner_optimizer': must be 'sgd', 'adagrad', or 'adam', got '" +
        cfg.inner_optimizer + "'");
  }
  if (cfg.meta_optimizer != "sgd" && cfg.meta_optimizer != "adam") {
    throw ConfigError("key 'meta_optimizer': must be 'sgd' or 'adam', got '" +
                      cfg.meta_optimizer + "'");
  }
  require_count("meta_iterations", cfg.meta_iterations);
  require_count("inner_steps", cfg.inner_steps);
  require_count("meta_batch", cfg.meta_batch);
  require_count("support", cfg.support);
  require_count("query", cfg.query);
  require_count("eval_tasks", cfg.eval_tasks);
  require_positive("inner_lr", cfg.inner_lr);
  require_positive("meta_lr", cfg.meta_lr);
  if (!(std::isfinite(cfg.clip_meta_grad) && cfg.clip_meta_grad >= 0.0)) {
    throw ConfigError("key 'clip_meta_grad': must be zero (off) or a positive "
                      "finite norm, got " +
                      fmt_double(cfg.clip_meta_grad));
  }

  if (cfg.family != "quadratic" && cfg.family != "sinusoid" &&
      cfg.family != "regression") {
    throw ConfigError(
        "key 'family': must be 'quadratic', 'sinusoid', or 'regression', "
        "got '" +
        cfg.family + "'");
  }
  if (cfg.task == "learn-lr" && cfg.family == "sinusoid") {
    throw ConfigError(
        "key 'family': learn-lr runs on 'quadratic' or 'regression'");
  }
  if (cfg.task == "maml" && cfg.family != "sinusoid") {
    throw ConfigError("key 'family': maml runs on 'sinusoid'");
  }
  if (cfg.task == "learned-loss" && cfg.family != "regression") {
    throw ConfigError("key 'family': learned-loss runs on 'regression'");
  }

  activation_from(cfg.activation);
  if (cfg.family != "quadratic" || cfg.task != "learn-lr") {
    if (cfg.model_widths.size() < 2) {
      throw ConfigError(
          "key 'model_widths': needs at least an input and an output width");
    }
  }
  if (cfg.family == "quadratic") {
    require_count("dim", cfg.dim);
    require_positive("curvature", cfg.curvature);
  }
  if (cfg.family == "sinusoid") {
    require_positive("amp_lo", cfg.amp_lo);
    if (cfg.amp_hi < cfg.amp_lo) {
      throw ConfigError("key 'amp_hi': must be at least amp_lo");
    }
    if (cfg.phase_hi < cfg.phase_lo) {
      throw ConfigError("key 'phase_hi': must be at least phase_lo");
    }
    if (!(cfg.input_hi > cfg.input_lo)) {
      throw ConfigError("key 'input_hi': must exceed input_lo");
    }
    if (cfg.task == "maml" &&
        (cfg.model_widths.front() != 1 || cfg.model_widths.back() != 1)) {
      throw ConfigError(
          "key 'model_widths': the sinusoid task maps one input to one "
          "output");
    }
  }
  if (cfg.family == "regression") {
    if (cfg.teacher_widths.size() < 2) {
      throw ConfigError(
          "key 'teacher_widths': needs at least an input and an output width");
    }
    if (cfg.model_widths.front() != cfg.teacher_widths.front() ||
        cfg.model_widths.back() != cfg.teacher_widths.back()) {
      throw ConfigError(
          "key 'model_widths': input/output widths must match "
          "teacher_widths");
    }
  }
  if (cfg.task == "maml") {
    require_count("eval_steps", cfg.eval_steps);
  }
  if (cfg.task == "learned-loss") {
    require_count("hidden", cfg.hidden);
  }
}

std::string config_json(const RunConfig& cfg) {
  Json j;
  j["task"] = cfg.task;
  j["seed"] = cfg.seed;
  j["engine"] = cfg.engine;
  j["inner_optimizer"] = cfg.inner_optimizer;
  j["meta_optimizer"] = cfg.meta_optimizer;
  j["meta_iterations"] = cfg.meta_iterations;
  j["inner_steps"] = cfg.inner_steps;
  j["meta_batch"] = cfg.meta_batch;
  j["inner_lr"] = cfg.inner_lr;
  j["meta_lr"] = cfg.meta_lr;
  j["clip_meta_grad"] = cfg.clip_meta_grad;
  j["out_dir"] = cfg.out_dir;
  j["family"] = cfg.family;
  j["family_seed"] = cfg.family_seed;
  j["support"] = cfg.support;
  j["query"] = cfg.query;
  j["model_widths"] = cfg.model_widths;
  j["activation"] = cfg.activation;
  j["eval_tasks"] = cfg.eval_tasks;
  if (cfg.task == "learn-lr") {
    j["curvature"] = cfg.curvature;
    j["dim"] = cfg.dim;
    j["teacher_widths"] = cfg.teacher_widths;
  } else if (cfg.task == "maml") {
    j["amp_lo"] = cfg.amp_lo;
    j["amp_hi"] = cfg.amp_hi;
    j["phase_lo"] = cfg.phase_lo;
    j["phase_hi"] = cfg.phase_hi;
    j["input_lo"] = cfg.input_lo;
    j["input_hi"] = cfg.input_hi;
    j["eval_steps"] = cfg.eval_steps;
    j["first_order"] = cfg.first_order;
  } else if (cfg.task == "learned-loss") {
    j["teacher_widths"] = cfg.teacher_widths;
    j["hidden"] = cfg.hidden;
    j["zero_init"] = cfg.zero_init;
  }
  return j.dump(2);
}

std::string manifest_json(const RunConfig& cfg) {
  Json j;
  j["manifest_version"] = 1;
  j["library_version"] = kLibraryVersion;
  j["subcommand"] = cfg.task;
  j["config"] = Json::parse(config_json(cfg));
  return j.dump(2);
}

LearnLrConfig build_learn_lr(const RunConfig& cfg) {
  LearnLrConfig d;
  d.seed = cfg.seed;
  d.engine = engine_from_name(cfg.engine);
  d.inner_kind = optimizer_from_name(cfg.inner_optimizer);
  d.meta_kind = optimizer_from_name(cfg.meta_optimizer);
  d.family = family_from(cfg);
  d.meta_iterations = cfg.meta_iterations;
  d.inner_steps = cfg.inner_steps;
  d.meta_batch = cfg.meta_batch;
  d.init_lr = cfg.inner_lr;
  d.meta_lr = cfg.meta_lr;
  d.model = {cfg.model_widths, activation_from(cfg.activation)};
  d.eval_tasks = cfg.eval_tasks;
  d.update = update_from(cfg);
  return d;
}

MamlConfig build_maml(const RunConfig& cfg) {
  MamlConfig d;
  d.seed = cfg.seed;
  d.engine = engine_from_name(cfg.engine);
  d.inner_kind = optimizer_from_name(cfg.inner_optimizer);
  d.meta_kind = optimizer_from_name(cfg.meta_optimizer);
  d.family = family_from(cfg);
  d.meta_iterations = cfg.meta_iterations;
  d.inner_steps = cfg.inner_steps;
  d.meta_batch = cfg.meta_batch;
  d.inner_lr = cfg.inner_lr;
  d.meta_lr = cfg.meta_lr;
  d.model = {cfg.model_widths, activation_from(cfg.activation)};
  d.first_order = cfg.first_order;
  d.eval_tasks = cfg.eval_tasks;
  d.eval_steps = cfg.eval_steps;
  d.update = update_from(cfg);
  return d;
}

LearnedLossConfig build_learned_loss(const RunConfig& cfg) {
  LearnedLossConfig d;
  d.seed = cfg.seed;
  d.engine = engine_from_name(cfg.engine);
  d.inner_kind = optimizer_from_name(cfg.inner_optimizer);
  d.meta_kind = optimizer_from_name(cfg.meta_optimizer);
  d.family = family_from(cfg);
  d.meta_iterations = cfg.meta_iterations;
  d.inner_steps = cfg.inner_steps;
  d.meta_batch = cfg.meta_batch;
  d.inner_lr = cfg.inner_lr;
  d.meta_lr = cfg.meta_lr;
  d.hidden = cfg.hidden;
  d.model = {cfg.model_widths, activation_from(cfg.activation)};
  d.zero_init = cfg.zero_init;
  d.eval_tasks = cfg.eval_tasks;
  d.update = update_from(cfg);
  return d;
}

// ---------------------------------------------------------------------------
// metrics persistence

MetricsWriter::MetricsWriter(std::filesystem::path path)
    : path_(std::move(path)), out_(path_, std::ios::trunc) {
  if (!out_) fail("cannot open for writing");
}

MetricsWriter::~MetricsWriter() {
  try {
    finish();
  } catch (...) {
    // destructor cleanup must not throw; finish() explicitly to observe errors
  }
}

void MetricsWriter::fail(const std::string& what) const {
  throw std::runtime_error("metrics file '" + path_.string() + "': " + what);
}

void MetricsWriter::write(const MetricRow& row, double wall_seconds) {
  if (finished_) fail("write after finish");
  std::vector<std::string> names;
  names.reserve(row.values.size());
  for (const auto& [name, value] : row.values) {
    (void)value;
    names.push_back(name);
  }
  if (!header_done_) {
    names_ = names;
    std::string header = "meta_iter";
    for (const std::string& n : names_) header += "," + n;
    header += ",wall_seconds\n";
    out_ << header;
    header_done_ = true;
  } else if (names != names_) {
    fail("metric columns changed at meta-iteration " +
         std::to_string(row.iter));
  }
  if (last_iter_ && row.iter <= *last_iter_) {
    fail("meta_iter must increase (got " + std::to_string(row.iter) +
         " after " + std::to_string(*last_iter_) + ")");
  }
  for (const auto& [name, value] : row.values) {
    if (!std::isfinite(value)) {
      fail("non-finite metric '" + name + "' at meta-iteration " +
           std::to_string(row.iter));
    }
  }
  if (!std::isfinite(wall_seconds)) {
    fail("non-finite wall_seconds at meta-iteration " +
         std::to_string(row.iter));
  }
  std::string line = std::to_string(row.iter);
  for (const auto& [name, value] : row.values) {
    (void)name;
    line += "," + fmt_double(value);
  }
  line += "," + fmt_double(wall_seconds) + "\n";
  out_ << line;
  out_.flush();
  if (!out_.good()) fail("write failed");
  last_iter_ = row.iter;
  ++rows_;
}

void MetricsWriter::finish() {
  if (finished_) return;
  if (!header_done_) {
    out_ << "meta_iter,wall_seconds\n";
    header_done_ = true;
  }
  out_.flush();
  if (!out_.good()) fail("flush failed");
  out_.close();
  finished_ = true;
}

void write_metrics(const std::filesystem::path& path,
                   const std::vector<MetricRow>& rows,
                   const std::vector<double>& wall_seconds) {
  if (rows.size() != wall_seconds.size()) {
    throw std::logic_error("write_metrics: rows and wall_seconds differ");
  }
  MetricsWriter w(path);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    w.write(rows[i], wall_seconds[i]);
  }
  w.finish();
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(field);
      field.clear();
    } else {
      field += c;
    }
  }
  out.push_back(field);
  return out;
}

double parse_field(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || s.empty()) {
    throw std::runtime_error(where + ": not a number: '" + s + "'");
  }
  return v;
}

}  // namespace

MetricsFile read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open metrics file '" + path.string() +
                             "'");
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw std::runtime_error("metrics file '" + path.string() + "' is empty");
  }
  const std::vector<std::string> header = split_csv(line);
  if (header.size() < 2 || header.front() != "meta_iter" ||
      header.back() != "wall_seconds") {
    throw std::runtime_error("metrics file '" + path.string() +
                             "': bad header '" + line + "'");
  }
  MetricsFile file;
  file.names.assign(header.begin() + 1, header.end() - 1);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::vector<std::string> fields = split_csv(line);
    const std::string where =
        path.string() + ":" + std::to_string(lineno);
    if (fields.size() != header.size()) {
      throw std::runtime_error(where + ": expected " +
                               std::to_string(header.size()) + " fields, got " +
                               std::to_string(fields.size()));
    }
    MetricRow row;
    row.iter = static_cast<std::size_t>(parse_field(fields[0], where));
    for (std::size_t i = 0; i < file.names.size(); ++i) {
      row.values.emplace_back(file.names[i], parse_field(fields[i + 1], where));
    }
    file.wall_seconds.push_back(parse_field(fields.back(), where));
    file.rows.push_back(std::move(row));
  }
  return file;
}

std::filesystem::path resolve_out_dir(const std::string& explicit_dir,
                                      const std::string& task,
                                      std::uint64_t seed,
                                      const char* env_value) {
  if (!explicit_dir.empty()) return fs::path(explicit_dir);
  const fs::path base =
      (env_value != nullptr && *env_value != '\0') ? env_value : "runs";
  return base / (task + "-seed" + std::to_string(seed));
}

// ---------------------------------------------------------------------------
// run execution

namespace {

ParameterSet phi_to_params(const MetaParameters& phi) {
  ParamGroup g{"meta", {}};
  const std::vector<Tensor> raw = phi.raw_tensors();
  for (std::size_t i = 0; i < phi.size(); ++i) {
    g.tensors.push_back({phi.entry(i).name, raw[i]});
  }
  ParameterSet out;
  out.add_group(std::move(g));
  return out;
}

}  // namespace

RunArtifacts execute_run(const RunConfig& cfg) {
  validate_config(cfg);
  if (cfg.out_dir.empty()) {
    throw std::logic_error("execute_run: out_dir must be resolved first");
  }
  const fs::path dir(cfg.out_dir);
  fs::create_directories(dir);

  RunArtifacts art;
  art.out_dir = dir;
  art.metrics = dir / "metrics.csv";
  art.checkpoint = dir / "checkpoint.bin";
  art.manifest = dir / "manifest.json";

  {
    std::ofstream m(art.manifest, std::ios::trunc);
    if (!m) {
      throw std::runtime_error("cannot write manifest '" +
                               art.manifest.string() + "'");
    }
    m << manifest_json(cfg) << "\n";
    m.flush();
    if (!m.good()) {
      throw std::runtime_error("failed writing manifest '" +
                               art.manifest.string() + "'");
    }
  }

  MetricsWriter writer(art.metrics);
  const auto start = std::chrono::steady_clock::now();
  const MetricSink sink = [&](const MetricRow& row) {
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    writer.write(row, wall);
  };

  MetaParameters learned;
  if (cfg.task == "learn-lr") {
    const LearnLrResult r = run_learn_lr(build_learn_lr(cfg), sink);
    learned = r.phi;
    for (const auto& [name, value] : r.learned_rates) {
      art.summary.emplace_back("learned " + name, value);
    }
    art.summary.emplace_back("held-out loss (learned rates)",
                             r.learned_eval_loss);
    art.summary.emplace_back("held-out loss (fixed rate)", r.fixed_eval_loss);
  } else if (cfg.task == "maml") {
    const MamlResult r = run_maml(build_maml(cfg), sink);
    learned = r.phi;
    art.summary.emplace_back("pre-adaptation query mse", r.pre_adaptation_mse);
    art.summary.emplace_back("adapted query mse (learned init)",
                             r.adapted_mse);
    art.summary.emplace_back("adapted query mse (random init)",
                             r.baseline_adapted_mse);
  } else {
    const LearnedLossResult r = run_learned_loss(build_learned_loss(cfg), sink);
    learned = r.phi;
    art.summary.emplace_back("held-out mse (learned loss)",
                             r.learned_eval_mse);
    art.summary.emplace_back("held-out mse (plain mse)", r.mse_eval_mse);
    art.summary.emplace_back("structural requirements satisfied",
                             r.requirements.all_ok() ? 1.0 : 0.0);
    art.notes = r.requirements.text();
  }
  writer.finish();

  Checkpoint ckpt;
  ckpt.params = phi_to_params(learned);
  save_checkpoint(art.checkpoint.string(), ckpt);
  return art;
}

// ---------------------------------------------------------------------------
// derivative oracle suite

namespace {

Tensor draw(Rng& rng, Shape shape, double lo, double hi) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

// Away-from-zero draw for kink/pole safety (relu, division).
Tensor draw_off_zero(Rng& rng, Shape shape, double lo, double hi) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  std::vector<double> v(n);
  for (double& x : v) {
    x = rng.uniform(lo, hi) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  }
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

std::vector<SuiteLine> gradcheck_suite(std::uint64_t seed) {
  Rng rng(seed * 0x9e3779b97f4a7c15ull + 0x51);
  std::vector<SuiteLine> out;
  constexpr int kInstances = 6;
  constexpr double kTol1 = 1e-6;
  constexpr double kTol2 = 1e-5;

  const auto first_order = [&](const std::string& name, auto make_case) {
    double mx = 0.0;
    bool finite = true;
    for (int i = 0; i < kInstances; ++i) {
      const auto [f, x] = make_case();
      const GradCheckReport rep = grad_check(f, x, 1);
      mx = std::max(mx, rep.max_rel_err);
      finite = finite && rep.finite;
    }
    out.push_back({"first-order " + name, mx, kTol1, finite && mx < kTol1});
  };

  using Case = std::pair<TensorFn, Tensor>;

  first_order("add/sub/neg", [&]() -> Case {
    const Tensor c = draw(rng, {4}, -2.0, 2.0);
    return {[c](const Tensor& x, const TapePtr&) {
              return sum(add(sub(c, neg(x)), x));
            },
            draw(rng, {4}, -2.0, 2.0)};
  });
  first_order("mul", [&]() -> Case {
    const Tensor c = draw(rng, {5}, -2.0, 2.0);
    return {[c](const Tensor& x, const TapePtr&) { return sum(mul(x, c)); },
            draw(rng, {5}, -2.0, 2.0)};
  });
  first_order("div", [&]() -> Case {
    const Tensor c = draw(rng, {4}, 0.5, 2.0);
    return {[c](const Tensor& x, const TapePtr&) {
              // x in both numerator and denominator roles
              return sum(add(div(x, c), div(c, add_const(square(x), 1.0))));
            },
            draw(rng, {4}, -2.0, 2.0)};
  });
  first_order("matmul", [&]() -> Case {
    const Tensor c = draw(rng, {3, 2}, -1.0, 1.0);
    const Tensor d = draw(rng, {4, 2}, -1.0, 1.0);
    return {[c, d](const Tensor& x, const TapePtr&) {
              return add(sum(matmul(x, c)), sum(matmul(d, x)));
            },
            draw(rng, {2, 3}, -1.0, 1.0)};
  });
  first_order("transpose", [&]() -> Case {
    const Tensor c = draw(rng, {3, 2}, -1.0, 1.0);
    return {[c](const Tensor& x, const TapePtr&) {
              return sum(mul(transpose(x), c));
            },
            draw(rng, {2, 3}, -1.0, 1.0)};
  });
  first_order("sum/mean", [&]() -> Case {
    return {[](const Tensor& x, const TapePtr&) {
              return add(sum(x), mean(square(x)));
            },
            draw(rng, {6}, -2.0, 2.0)};
  });
  first_order("square", [&]() -> Case {
    return {[](const Tensor& x, const TapePtr&) { return sum(square(x)); },
            draw(rng, {5}, -2.0, 2.0)};
  });
  first_order("sqrt", [&]() -> Case {
    return {[](const Tensor& x, const TapePtr&) {
              return sum(sqrt_(add_const(square(x), 0.5)));
            },
            draw(rng, {4}, -2.0, 2.0)};
  });
  first_order("exp", [&]() -> Case {
    return {[](const Tensor& x, const TapePtr&) { return sum(exp_(x)); },
            draw(rng, {4}, -1.0, 1.0)};
  });
  first_order("log", [&]() -> Case {
    return {[](const Tensor& x, const TapePtr&) {
              return sum(log_(add_const(square(x), 0.7)));
            },
            draw(rng, {4}, -2.0, 2.0)};
  });
  first_order("tanh", [&]() -> Case {
    return {[](const Tensor& x, const TapePtr&) { return sum(tanh_(x)); },
            draw(rng, {5}, -2.0, 2.0)};
  });
  first_order("relu (away from the kink)", [&]() -> Case {
    return {[](const Tensor& x, const TapePtr&) { return sum(relu(x)); },
            draw_off_zero(rng, {6}, 0.2, 1.5)};
  });
  first_order("sin/cos", [&]() -> Case {
    return {[](const Tensor& x, const TapePtr&) {
              return add(sum(sin_(x)), sum(cos_(x)));
            },
            draw(rng, {5}, -3.0, 3.0)};
  });
  first_order("pow_const", [&]() -> Case {
    return {[](const Tensor& x, const TapePtr&) {
              return sum(pow_const(add_const(square(x), 0.5), 1.7));
            },
            draw(rng, {4}, -2.0, 2.0)};
  });
  first_order("scalar_broadcast", [&]() -> Case {
    const Tensor c = draw(rng, {4}, -1.0, 1.0);
    return {[c](const Tensor& x, const TapePtr&) {
              return sum(mul(scalar_broadcast(mean(x), {4}), c));
            },
            draw(rng, {3}, -2.0, 2.0)};
  });
  first_order("reshape", [&]() -> Case {
    const Tensor c = draw(rng, {3, 2}, -1.0, 1.0);
    return {[c](const Tensor& x, const TapePtr&) {
              return sum(mul(reshape(x, {3, 2}), c));
            },
            draw(rng, {2, 3}, -1.0, 1.0)};
  });
  first_order("concat", [&]() -> Case {
    const Tensor c = draw(rng, {2}, -1.0, 1.0);
    const Tensor w = draw(rng, {5}, -1.0, 1.0);
    return {[c, w](const Tensor& x, const TapePtr&) {
              const std::array<Tensor, 2> parts{x, c};
              return sum(mul(concat(parts, 0), w));
            },
            draw(rng, {3}, -2.0, 2.0)};
  });
  first_order("index_select", [&]() -> Case {
    return {[](const Tensor& x, const TapePtr&) {
              return sum(square(index_select(x, 0, {2, 0, 2})));
            },
            draw(rng, {4}, -2.0, 2.0)};
  });
  first_order("scatter_add", [&]() -> Case {
    const Tensor w = draw(rng, {5}, -1.0, 1.0);
    return {[w](const Tensor& x, const TapePtr&) {
              return sum(mul(scatter_add(x, 0, {1, 3, 1}, 5), w));
            },
            draw(rng, {3}, -2.0, 2.0)};
  });
  first_order("scale/add_const", [&]() -> Case {
    return {[](const Tensor& x, const TapePtr&) {
              return sum(square(add_const(scale(x, 1.7), 0.3)));
            },
            draw(rng, {4}, -2.0, 2.0)};
  });
  first_order("softplus", [&]() -> Case {
    return {[](const Tensor& x, const TapePtr&) { return sum(softplus(x)); },
            draw(rng, {5}, -3.0, 3.0)};
  });
  first_order("sigmoid", [&]() -> Case {
    return {[](const Tensor& x, const TapePtr&) { return sum(sigmoid(x)); },
            draw(rng, {5}, -3.0, 3.0)};
  });
  first_order("dot", [&]() -> Case {
    const Tensor c = draw(rng, {5}, -2.0, 2.0);
    return {[c](const Tensor& x, const TapePtr&) { return dot(x, c); },
            draw(rng, {5}, -2.0, 2.0)};
  });

  // stop_gradient: the tape must report exactly zero and mark the detach as
  // intentional while finite differences see the true slope.
  {
    bool ok = true;
    for (int i = 0; i < kInstances; ++i) {
      const Tensor x = draw(rng, {3}, -2.0, 2.0);
      const auto f = [](const Tensor& t, const TapePtr&) {
        return sum(square(stop_gradient(t)));
      };
      const GradCheckReport rep = grad_check(f, x, 1);
      ok = ok && rep.finite && rep.intentional_detach && rep.ok(kTol1);
    }
    out.push_back({"first-order stop_gradient (intentional zero)", 0.0, kTol1,
                   ok});
  }

  // model forward: derivative wrt every parameter tensor
  {
    const ModelSpec spec{{2, 4, 1}, Activation::Tanh};
    Rng prng(rng.bits());
    const ParameterSet tmpl = init_params(spec, prng);
    const Tensor X = draw(rng, {5, 2}, -1.0, 1.0);
    const Tensor Y = draw(rng, {5, 1}, -1.0, 1.0);
    double mx = 0.0;
    bool finite = true;
    const std::vector<Tensor> flats = tmpl.flat();
    for (std::size_t k = 0; k < flats.size(); ++k) {
      const auto f = [&, k](const Tensor& x, const TapePtr&) {
        std::vector<Tensor> slots = tmpl.flat();
        slots[k] = x;
        return mse_loss(forward(spec, tmpl.with_flat(slots), X), Y);
      };
      const GradCheckReport rep = grad_check(f, flats[k], 1);
      mx = std::max(mx, rep.max_rel_err);
      finite = finite && rep.finite;
    }
    out.push_back({"first-order model forward (all parameter tensors)", mx,
                   kTol1, finite && mx < kTol1});
  }

  // second order: finite differences of the analytic first derivative
  const auto second_order = [&](const std::string& name, const TensorFn& f,
                                const Tensor& x) {
    const GradCheckReport rep = grad_check(f, x, 2);
    out.push_back(
        {"second-order " + name, rep.max_rel_err, kTol2,
         rep.finite && rep.max_rel_err < kTol2});
  };
  second_order(
      "square of tanh",
      [](const Tensor& x, const TapePtr&) { return sum(square(tanh_(x))); },
      draw(rng, {4}, -1.5, 1.5));
  {
    const ModelSpec spec{{2, 3, 1}, Activation::Tanh};
    Rng prng(rng.bits());
    const ParameterSet tmpl = init_params(spec, prng);
    const Tensor X = draw(rng, {4, 2}, -1.0, 1.0);
    const Tensor Y = draw(rng, {4, 1}, -1.0, 1.0);
    const auto f = [&](const Tensor& x, const TapePtr&) {
      std::vector<Tensor> slots = tmpl.flat();
      slots[0] = x;  // first-layer weights
      return mse_loss(forward(spec, tmpl.with_flat(slots), X), Y);
    };
    second_order("mse of model forward", f, tmpl.flat()[0]);
  }
  {
    const auto f = [](const Tensor& x, const TapePtr&) {
      ParameterSet p({{"model", {{"theta", x}}}});
      const Tensor train = sum(square(tanh_(x)));
      BackwardOptions bo;
      bo.create_graph = true;
      const BackwardResult r = backward(train, p.flat(), bo);
      const OptStepResult stepped =
          sgd_step(p, p.with_flat(r.grads), sgd_hyper(0.1));
      return scale(sum(square(stepped.params.flat()[0])), 0.5);
    };
    second_order("one optimizer step", f, draw(rng, {3}, -1.0, 1.0));
  }

  // optimizer-step jacobians against the closed forms
  const auto jacobian_rows = [](const Tensor& output,
                                std::span<const Tensor> wrt) {
    // rows of d(output)/d(wrt[k]) assembled one output coordinate at a time
    std::vector<std::vector<std::vector<double>>> rows;
    const std::size_t n = output.values().size();
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> hot(n, 0.0);
      hot[i] = 1.0;
      const Tensor sel = dot(Tensor(output.shape(), hot), output);
      const BackwardResult r = backward(sel, wrt);
      std::vector<std::vector<double>> row;
      for (const Tensor& g : r.grads) {
        row.emplace_back(g.values().begin(), g.values().end());
      }
      rows.push_back(std::move(row));
    }
    return rows;
  };

  {
    double mx = 0.0;
    Rng jrng(rng.bits());
    for (int inst = 0; inst < 8; ++inst) {
      const std::size_t n = 2 + static_cast<std::size_t>(jrng.bits() % 5);
      std::vector<double> tv(n), gv(n);
      for (double& v : tv) v = jrng.normal();
      for (double& v : gv) v = jrng.normal();
      const double alpha = jrng.uniform(0.05, 0.5);
      const TapePtr tape = GradTape::make();
      const Tensor th = tape->leaf(Tensor({n}, tv));
      const Tensor g = tape->leaf(Tensor({n}, gv));
      const Tensor lr = tape->leaf(Tensor::scalar(alpha));
      OptHyper h = sgd_hyper(alpha);
      h.groups[0].learning_rate = lr;
      const ParameterSet p({{"m", {{"theta", th}}}});
      const ParameterSet gs({{"m", {{"theta", g}}}});
      const OptStepResult res = sgd_step(p, gs, h);
      const std::array<Tensor, 3> wrt{th, g, lr};
      const auto rows = jacobian_rows(res.params.flat()[0], wrt);
      const SgdStepGrads oracle = analytic_sgd_grads(tv, gv, alpha);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < n; ++k) {
          const double want_th = i == k ? 1.0 : 0.0;
          const double want_g = i == k ? oracle.dG_diag() : 0.0;
          mx = std::max(mx, std::abs(rows[i][0][k] - want_th));
          mx = std::max(mx, std::abs(rows[i][1][k] - want_g));
        }
        mx = std::max(mx, std::abs(rows[i][2][0] - oracle.dtheta_dalpha()[i]));
      }
    }
    out.push_back({"sgd-step jacobian vs closed form", mx, 1e-10, mx < 1e-10});
  }
  {
    double mx = 0.0;
    Rng jrng(rng.bits());
    const double accum_eps = 1e-10;
    for (int inst = 0; inst < 8; ++inst) {
      const std::size_t n = 2 + static_cast<std::size_t>(jrng.bits() % 5);
      std::vector<double> tv(n), gv(n), rv(n);
      for (double& v : tv) v = jrng.normal();
      for (double& v : gv) v = jrng.normal();
      for (double& v : rv) v = jrng.uniform(0.0, 2.0);
      const double eta = jrng.uniform(0.05, 0.5);
      const TapePtr tape = GradTape::make();
      const Tensor th = tape->leaf(Tensor({n}, tv));
      const Tensor g = tape->leaf(Tensor({n}, gv));
      const Tensor lr = tape->leaf(Tensor::scalar(eta));
      OptHyper h = adagrad_hyper(eta, accum_eps);
      h.groups[0].learning_rate = lr;
      const ParameterSet p({{"m", {{"theta", th}}}});
      const ParameterSet gs({{"m", {{"theta", g}}}});
      OptState st = init_opt_state(OptimizerKind::Adagrad, p);
      st.slots[0] = st.slots[0].with_flat(
          std::vector<Tensor>{tape->leaf(Tensor({n}, rv))});
      const OptStepResult res = adagrad_step(p, gs, st, h);
      const std::array<Tensor, 3> wrt{th, g, lr};
      const auto rows = jacobian_rows(res.params.flat()[0], wrt);
      for (std::size_t i = 0; i < n; ++i) {
        // S = sqrt(r + g^2 + eps) per coordinate
        const double S = std::sqrt(rv[i] + gv[i] * gv[i] + accum_eps);
        const double dth = 1.0;
        const double dg = -eta * (1.0 / S - gv[i] * gv[i] / (S * S * S));
        const double deta = -gv[i] / S;
        for (std::size_t k = 0; k < n; ++k) {
          mx = std::max(mx, std::abs(rows[i][0][k] - (i == k ? dth : 0.0)));
          mx = std::max(mx, std::abs(rows[i][1][k] - (i == k ? dg : 0.0)));
        }
        mx = std::max(mx, std::abs(rows[i][2][0] - deta));
      }
    }
    out.push_back(
        {"adagrad-step jacobian vs closed form", mx, 1e-10, mx < 1e-10});
  }

  return out;
}

// ---------------------------------------------------------------------------
// engine comparison

namespace {

OptHyper plain_hyper(OptimizerKind kind, double lr) {
  switch (kind) {
    case OptimizerKind::Sgd: return sgd_hyper(lr);
    case OptimizerKind::Adagrad: return adagrad_hyper(lr);
    case OptimizerKind::Adam: return adam_hyper(lr);
  }
  throw std::logic_error("unknown optimizer kind");
}

struct EngineProbe {
  MetaParameters phi;
  ParameterSet theta0;
  std::function<ParameterSet(const AttachedPhi&, const TapePtr&)> init;
  StepLossFn step;
  ValLossFn val;
};

// learnables: 0 = optimizer hypers, 1 = loss-side parameters, 2 = both
EngineProbe engine_probe(TaskKind kind, OptimizerKind opt, int learnables,
                         std::uint64_t seed) {
  Rng rng(seed * 0x2545f4914f6cdd1dull + static_cast<std::uint64_t>(kind) * 97 +
          static_cast<std::uint64_t>(opt) * 13 +
          static_cast<std::uint64_t>(learnables));
  const bool learn_opt = learnables != 1;
  const bool learn_loss = learnables != 0;
  EngineProbe pr;

  const auto add_opt_entries = [&](MetaParameters& phi, double lr) {
    if (!learn_opt) return;
    phi.learn_hyper(0, HyperField::LearningRate, lr, HyperTransform::Softplus);
    if (opt == OptimizerKind::Adam) {
      phi.learn_hyper(0, HyperField::Beta1, 0.9, HyperTransform::Sigmoid);
    }
  };

  if (kind == TaskKind::Quadratic) {
    const std::size_t n = 3;
    std::vector<double> th(n), ct(n), cv(n);
    for (double& v : th) v = rng.normal();
    for (double& v : ct) v = rng.normal();
    for (double& v : cv) v = rng.normal();
    pr.theta0 = ParameterSet({{"model", {{"theta", Tensor({n}, th)}}}});
    MetaParameters phi(plain_hyper(opt, 0.07));
    add_opt_entries(phi, 0.07);
    if (learn_loss) {
      phi.add_loss("theta0", Tensor({n}, th));
      pr.init = [](const AttachedPhi& a, const TapePtr&) {
        return ParameterSet({{"model", {{"theta", a.loss[0]}}}});
      };
    }
    pr.step = [c = Tensor({n}, ct)](std::size_t, const ParameterSet& p,
                                    const AttachedPhi&) {
      return scale(sum(square(sub(p.flat()[0], c))), 0.65);
    };
    pr.val = [c = Tensor({n}, cv)](const ParameterSet& p, const AttachedPhi&) {
      return scale(sum(square(sub(p.flat()[0], c))), 0.5);
    };
    pr.phi = phi;
    return pr;
  }

  const bool sinusoid = kind == TaskKind::Sinusoid;
  const ModelSpec spec{sinusoid ? std::vector<std::size_t>{1, 4, 1}
                                : std::vector<std::size_t>{2, 4, 1},
                       Activation::Tanh};
  TaskFamily fam = sinusoid
                       ? sinusoid_family(seed)
                       : regression_family({spec.widths, Activation::Tanh},
                                           seed);
  fam.support = 6;
  fam.query = 6;
  const Task task = sample_tasks(fam, 1, 5)[0];
  Rng prng(rng.bits());
  pr.theta0 = init_params(spec, prng);

  MetaParameters phi(plain_hyper(opt, 0.05));
  add_opt_entries(phi, 0.05);
  if (learn_loss && sinusoid) {
    // meta-learned initialization wiring
    for (const ParamGroup& g : pr.theta0.groups()) {
      for (const NamedTensor& t : g.tensors) {
        phi.add_loss(g.name + "/" + t.name, t.value);
      }
    }
    pr.init = [structure = pr.theta0](const AttachedPhi& a, const TapePtr&) {
      return init_from_phi(a, structure);
    };
  }
  if (learn_loss && !sinusoid) {
    Rng lrng(rng.bits());
    const std::vector<Tensor> head = learned_loss_mse_init(4, lrng);
    static const char* kNames[] = {"W1", "b1", "w2", "b2", "uq"};
    for (std::size_t i = 0; i < head.size(); ++i) {
      phi.add_loss(kNames[i], head[i]);
    }
    pr.step = [t = task, spec](std::size_t, const ParameterSet& p,
                               const AttachedPhi& a) {
      return parametric_loss(a.loss, forward(spec, p, t.train.inputs),
                             t.train.targets);
    };
  }
  if (!pr.step) {
    pr.step = [t = task, spec](std::size_t, const ParameterSet& p,
                               const AttachedPhi&) {
      return mse_loss(forward(spec, p, t.train.inputs), t.train.targets);
    };
  }
  pr.val = [t = task, spec](const ParameterSet& p, const AttachedPhi&) {
    return mse_loss(forward(spec, p, t.validation.inputs),
                    t.validation.targets);
  };
  pr.phi = phi;
  return pr;
}

}  // namespace

EngineComparison compare_engines_on(TaskKind kind, std::size_t inner_steps,
                                    std::uint64_t seed) {
  if (inner_steps < 1) {
    throw ConfigError("compare-engines: inner steps must be at least 1");
  }
  EngineComparison out;
  const std::array<OptimizerKind, 3> opts{
      OptimizerKind::Sgd, OptimizerKind::Adagrad, OptimizerKind::Adam};
  const std::array<const char*, 3> mode_names{"opt-hypers", "loss-params",
                                              "both"};
  for (const OptimizerKind opt : opts) {
    for (int mode = 0; mode < 3; ++mode) {
      const EngineProbe pr = engine_probe(kind, opt, mode, seed);
      const TapePtr tape = GradTape::make();
      const AttachedPhi at = pr.phi.attach(tape);
      const ParameterSet start = pr.init ? pr.init(at, tape) : pr.theta0;
      const InnerTrace trace =
          unroll_inner(start, init_opt_state(opt, pr.theta0), at, inner_steps,
                       pr.step, tape);
      const Tensor lval = meta_loss(trace, pr.val);
      const MetaGradient ga = meta_backward_autodiff(trace, lval);
      const MetaGradient gr = meta_backward_recursive(trace, lval);
      double gap = 0.0;
      for (std::size_t i = 0; i < ga.grads.size(); ++i) {
        const auto av = ga.grads[i].values();
        const auto rv = gr.grads[i].values();
        for (std::size_t k = 0; k < av.size(); ++k) {
          gap = std::max(gap, std::abs(av[k] - rv[k]));
        }
      }
      out.breakdown.emplace_back(
          std::string(optimizer_name(opt)) + "/" + mode_names[mode], gap);
      out.max_abs_gap = std::max(out.max_abs_gap, gap);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// canonical requirement patterns

std::vector<PatternCheck> requirement_patterns() {
  std::vector<PatternCheck> out;
  static const char* kIds[] = {
      "validation-objective-differentiable", "optimizer-step-differentiable",
      "hyperparameter-paths-live", "training-loss-curvature"};

  const auto half_sq = [](const ParameterSet& p) {
    Tensor acc;
    for (const Tensor& t : p.flat()) {
      const Tensor s = scale(sum(square(t)), 0.5);
      acc = acc.defined() ? add(acc, s) : s;
    }
    return acc;
  };
  const auto quad_val = [half_sq](const ParameterSet& p, const AttachedPhi&) {
    return half_sq(p);
  };

  const auto run = [&](std::string name, const RequirementSetup& setup,
                       std::array<bool, 4> expect) {
    const RequirementReport rep = check_requirements(setup);
    bool ok = true;
    for (std::size_t i = 0; i < 4; ++i) {
      ok = ok && rep.find(kIds[i]).satisfied == expect[i];
    }
    out.push_back({std::move(name), ok, rep.text()});
  };

  {
    MetaParameters phi(sgd_hyper(0.1));
    phi.learn_hyper(0, HyperField::LearningRate, 0.1);
    phi.add_loss("w", Tensor::scalar(1.0));
    RequirementSetup setup;
    setup.theta0 = ParameterSet(
        {{"model", {{"theta", Tensor({2}, {1.0, -0.5})}}}});
    setup.phi = phi;
    setup.steps = 1;
    setup.step_loss = [half_sq](std::size_t, const ParameterSet& p,
                                const AttachedPhi& a) {
      return mul(square(a.loss[0]), half_sq(p));
    };
    setup.val_loss = quad_val;
    run("descent with live hyper and loss parameters", setup,
        {true, true, true, true});
  }
  {
    MetaParameters phi(sgd_hyper(0.1));
    phi.add_loss("theta0", Tensor({2}, {1.0, 2.0}));
    RequirementSetup setup;
    setup.theta0 =
        ParameterSet({{"model", {{"theta", Tensor({2}, {0.0, 0.0})}}}});
    setup.phi = phi;
    setup.steps = 1;
    setup.init = [](const AttachedPhi& a, const TapePtr&) {
      return ParameterSet({{"model", {{"theta", a.loss[0]}}}});
    };
    setup.step_loss = [](std::size_t, const ParameterSet& p,
                         const AttachedPhi&) {
      return sum(mul(Tensor({2}, {0.3, -0.7}), p.flat()[0]));
    };
    setup.val_loss = quad_val;
    run("curvature-free training loss with a learned initialization", setup,
        {true, true, true, false});
  }
  {
    MetaParameters phi(sgd_hyper(0.1));
    phi.learn_hyper(0, HyperField::LearningRate, 0.1,
                    HyperTransform::Detached);
    RequirementSetup setup;
    setup.theta0 =
        ParameterSet({{"model", {{"theta", Tensor::scalar(1.0)}}}});
    setup.phi = phi;
    setup.steps = 1;
    setup.step_loss = [half_sq](std::size_t, const ParameterSet& p,
                                const AttachedPhi&) { return half_sq(p); };
    setup.val_loss = quad_val;
    run("stop-gradient-severed learning rate", setup,
        {true, true, false, true});
  }
  return out;
}

// ---------------------------------------------------------------------------
// CLI

namespace {

void print_summary(const RunArtifacts& art, const RunConfig& cfg) {
  std::cout << cfg.task << " finished (engine " << cfg.engine << ", seed "
            << cfg.seed << ", " << cfg.meta_iterations
            << " meta-iterations)\n";
  for (const auto& [name, value] : art.summary) {
    std::cout << "  " << name << " = " << fmt_double(value) << "\n";
  }
  if (!art.notes.empty()) {
    std::istringstream lines(art.notes);
    std::string l;
    while (std::getline(lines, l)) std::cout << "  " << l << "\n";
  }
  std::cout << "  metrics:    " << art.metrics.string() << "\n"
            << "  checkpoint: " << art.checkpoint.string() << "\n"
            << "  manifest:   " << art.manifest.string() << "\n";
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{
      "meta-learning workbench: differentiable inner loops with two "
      "interchangeable meta-gradient engines"};
  app.set_version_flag("--version", kLibraryVersion);
  app.require_subcommand(1);

  std::string config_path, out_dir, engine, ce_task = "quadratic";
  std::optional<std::uint64_t> seed;
  std::optional<double> clip;
  std::size_t ce_steps = 3;

  const auto add_run_flags = [&](CLI::App* sub) {
    sub->add_option("--config", config_path,
                    "JSON config, or a previous run's manifest.json");
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out", out_dir,
                    "output directory (default <base>/<task>-seed<N>, base "
                    "from $" + std::string(kOutDirEnv) + " or ./runs)");
    sub->add_option("--engine", engine,
                    "meta-gradient engine: autodiff | recursive");
    sub->add_option("--clip-meta-grad", clip,
                    "clip the meta-gradient to this global norm");
  };

  CLI::App* lr = app.add_subcommand(
      "learn-lr", "meta-learn the inner learning rate(s)");
  add_run_flags(lr);
  CLI::App* maml = app.add_subcommand(
      "maml", "meta-learn a model initialization on sinusoid tasks");
  add_run_flags(maml);
  CLI::App* lloss = app.add_subcommand(
      "learned-loss", "meta-learn a parametric training loss");
  add_run_flags(lloss);

  CLI::App* gc = app.add_subcommand(
      "gradcheck", "run the derivative oracle suites and report max errors");
  std::uint64_t gc_seed = 0;
  gc->add_option("--seed", gc_seed, "suite seed");

  CLI::App* reqs = app.add_subcommand(
      "check-requirements",
      "probe the structural requirements on the canonical scenarios");

  CLI::App* ce = app.add_subcommand(
      "compare-engines",
      "largest per-component gap between the meta-gradient engines");
  std::uint64_t ce_seed = 0;
  ce->add_option("--task", ce_task, "quadratic | sinusoid | regression");
  ce->add_option("--J", ce_steps, "inner steps to unroll");
  ce->add_option("--seed", ce_seed, "instance seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const auto run_task = [&](const std::string& task) -> int {
    RunConfig cfg;
    try {
      cfg = config_path.empty() ? default_config(task)
                                : load_config(config_path, task);
      if (seed) cfg.seed = *seed;
      if (!engine.empty()) {
        if (engine == "both") {
          throw ConfigError(
              "--engine both applies only to compare-engines; pick autodiff "
              "or recursive for a run");
        }
        cfg.engine = engine;
      }
      if (clip) cfg.clip_meta_grad = *clip;
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      cfg.out_dir = resolve_out_dir(cfg.out_dir, task, cfg.seed,
                                    std::getenv(kOutDirEnv))
                        .string();
      validate_config(cfg);
      if (!config_path.empty()) {
        // never mutate an input file: the output files must not land on it
        const fs::path in = fs::weakly_canonical(config_path);
        for (const char* name :
             {"manifest.json", "metrics.csv", "checkpoint.bin"}) {
          if (fs::weakly_canonical(fs::path(cfg.out_dir) / name) == in) {
            throw ConfigError("output would overwrite the input config '" +
                              config_path + "'; pass a different --out");
          }
        }
      }
    } catch (const ConfigError& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return kExitUsage;
    }
    try {
      const RunArtifacts art = execute_run(cfg);
      print_summary(art, cfg);
      return kExitOk;
    } catch (const std::exception& e) {
      std::cerr << "run failed: " << e.what() << "\n";
      return kExitNumerical;
    }
  };

  if (lr->parsed()) return run_task("learn-lr");
  if (maml->parsed()) return run_task("maml");
  if (lloss->parsed()) return run_task("learned-loss");

  if (gc->parsed()) {
    try {
      const std::vector<SuiteLine> lines = gradcheck_suite(gc_seed);
      bool all = true;
      for (const SuiteLine& l : lines) {
        std::printf("  %-48s max err %-12.3e tol %-8.0e %s\n", l.name.c_str(),
                    l.max_err, l.tol, l.pass ? "ok" : "FAIL");
        all = all && l.pass;
      }
      if (all) {
        std::printf("gradcheck: all %zu checks within tolerance\n",
                    lines.size());
        return kExitOk;
      }
      std::size_t failed = 0;
      for (const SuiteLine& l : lines) failed += l.pass ? 0 : 1;
      std::printf("gradcheck: %zu of %zu checks FAILED\n", failed,
                  lines.size());
      return kExitNumerical;
    } catch (const std::exception& e) {
      std::cerr << "gradcheck failed: " << e.what() << "\n";
      return kExitNumerical;
    }
  }

  if (reqs->parsed()) {
    try {
      const std::vector<PatternCheck> pats = requirement_patterns();
      bool all = true;
      for (const PatternCheck& p : pats) {
        std::cout << "== " << p.name << " ==\n" << p.report
                  << "pattern as documented: "
                  << (p.as_documented ? "yes" : "NO") << "\n";
        all = all && p.as_documented;
      }
      return all ? kExitOk : kExitNumerical;
    } catch (const std::exception& e) {
      std::cerr << "check-requirements failed: " << e.what() << "\n";
      return kExitNumerical;
    }
  }

  if (ce->parsed()) {
    TaskKind kind;
    if (ce_task == "quadratic") {
      kind = TaskKind::Quadratic;
    } else if (ce_task == "sinusoid") {
      kind = TaskKind::Sinusoid;
    } else if (ce_task == "regression") {
      kind = TaskKind::RegressionMlp;
    } else {
      std::cerr << "config error: --task must be quadratic, sinusoid, or "
                   "regression, got '"
                << ce_task << "'\n";
      return kExitUsage;
    }
    if (ce_steps < 1) {
      std::cerr << "config error: --J must be at least 1\n";
      return kExitUsage;
    }
    try {
      const EngineComparison c = compare_engines_on(kind, ce_steps, ce_seed);
      for (const auto& [name, gap] : c.breakdown) {
        std::printf("  %-22s %.3e\n", name.c_str(), gap);
      }
      std::printf(
          "max per-component |autodiff - recursive| = %.3e (tolerance "
          "1e-8)\n",
          c.max_abs_gap);
      return c.max_abs_gap < 1e-8 ? kExitOk : kExitNumerical;
    } catch (const std::exception& e) {
      std::cerr << "compare-engines failed: " << e.what() << "\n";
      return kExitNumerical;
    }
  }

  return kExitUsage;  // unreachable with require_subcommand(1)
}

}  // namespace metaloop
