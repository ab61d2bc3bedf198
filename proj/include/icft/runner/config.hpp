#pragma once

// JSON experiment configuration. Every object is parsed strictly: an unknown
// key is an error, so a typo in a grid never silently falls back to a default.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icft/optim/optimizers.hpp"
#include "icft/prequential/hp_config.hpp"
#include "icft/prequential/run.hpp"
#include "icft/prompt/prompt.hpp"
#include "icft/runner/pretrain.hpp"
#include "icft/strategies/strategies.hpp"
#include "icft/tasks/generators.hpp"
#include "icft/tasks/task_file.hpp"

namespace icft::runner {

using json = nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Where a run's data comes from: a task file or a generator.
struct TaskSpec {
  enum class Source { file, keyed, parity };
  Source source = Source::keyed;
  std::filesystem::path file;
  bool infer_labels = false;
  tasks::KeyedSpec keyed;
  int n_bits = 4;
  std::size_t n_examples = 400;
  std::optional<std::uint64_t> seed;  // unset: a fresh task instance per run seed
  std::string variant = "none";       // none | flipped | permuted
};

/// A strategy entry: the kind plus training mode (iid only for trained kinds).
struct StrategySpec {
  strategies::StrategyKind kind = strategies::StrategyKind::icl_ft;
  strategies::TrainingMode mode = strategies::TrainingMode::prequential;

  std::string label() const {
    std::string s(strategies::to_string(kind));
    if (mode == strategies::TrainingMode::iid) s += ":iid";
    return s;
  }
  friend bool operator==(const StrategySpec&, const StrategySpec&) = default;
};

inline StrategySpec parse_strategy(const std::string& s) {
  StrategySpec out;
  auto name = s;
  if (const auto colon = s.find(':'); colon != std::string::npos) {
    const auto mode = s.substr(colon + 1);
    name = s.substr(0, colon);
    if (mode == "iid") out.mode = strategies::TrainingMode::iid;
    else if (mode != "prequential") throw ConfigError("unknown training mode '" + mode + "' in '" + s + "'");
  }
  out.kind = strategies::strategy_from_string(name);
  if (out.kind == strategies::StrategyKind::icl_only && out.mode == strategies::TrainingMode::iid) {
    throw ConfigError("ICL_ONLY has no training mode");
  }
  return out;
}

struct RunConfig {
  TaskSpec task;
  std::vector<StrategySpec> strategies;
  std::vector<double> lrs = {3e-4, 1e-3, 3e-3};
  std::vector<int> epochs = {1, 2, 5};
  optim::OptimizerKind optimizer = optim::OptimizerKind::adafactor;
  std::optional<int> lora_rank;
  int k_train = 8;                      // K for ICL_FT training and prediction
  std::vector<int> k_eval = {0, 1, 2, 4, 8};  // ICL_ONLY sweep
  std::vector<std::size_t> budgets = {4, 64};
  std::size_t n_seeds = 5;
  std::uint64_t seed = 0;
  std::size_t n_test = 200;
  prompt::Template tpl{"\n", "=", std::nullopt};
  std::optional<prequential::MetricKind> metric;  // default: per task type
  bool resample_context = true;
  bool emit_wall_time = false;
  std::filesystem::path base_checkpoint;
  std::string model_tag;                // default: checkpoint file stem
  std::filesystem::path out_dir = "out";

  /// Grid in lr-major order.
  std::vector<prequential::HPConfig> grid(int k) const {
    std::vector<prequential::HPConfig> out;
    for (double lr : lrs)
      for (int e : epochs) {
        prequential::HPConfig hp;
        hp.lr = lr;
        hp.epochs = e;
        hp.k = k;
        hp.optimizer = optimizer;
        hp.lora_rank = lora_rank;
        out.push_back(hp);
      }
    return out;
  }

  std::string tag() const { return model_tag.empty() ? base_checkpoint.stem().string() : model_tag; }

  void validate() const {
    if (strategies.empty()) throw ConfigError("config: strategies must not be empty");
    if (budgets.empty()) throw ConfigError("config: budgets must not be empty");
    if (!std::is_sorted(budgets.begin(), budgets.end()) ||
        std::adjacent_find(budgets.begin(), budgets.end()) != budgets.end()) {
      throw ConfigError("config: budgets must be strictly ascending");
    }
    if (budgets.front() < 1) throw ConfigError("config: budgets must be >= 1");
    if (n_seeds < 1) throw ConfigError("config: n_seeds must be >= 1");
    if (n_test < 1) throw ConfigError("config: n_test must be >= 1");
    if (lrs.empty() || epochs.empty()) throw ConfigError("config: hp grid must not be empty");
    for (const auto& hp : grid(k_train)) hp.validate();
    if (k_eval.empty()) throw ConfigError("config: k_eval must not be empty");
    for (int k : k_eval)
      if (k < 0) throw ConfigError("config: k_eval entries must be >= 0");
    if (task.source != TaskSpec::Source::file && task.n_examples < budgets.back() + n_test) {
      throw ConfigError("config: task.n_examples (" + std::to_string(task.n_examples) +
                        ") is smaller than the largest budget plus n_test");
    }
    tpl.validate();
  }
};

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

template <class T>
void get_if(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline tasks::KeyPool pool_from_string(const std::string& s) {
  if (s == "any") return tasks::KeyPool::any;
  if (s == "pretrain") return tasks::KeyPool::pretrain;
  if (s == "reserved") return tasks::KeyPool::reserved;
  throw ConfigError("unknown key pool '" + s + "'");
}

inline std::string to_string(tasks::KeyPool p) {
  switch (p) {
    case tasks::KeyPool::pretrain: return "pretrain";
    case tasks::KeyPool::reserved: return "reserved";
    default: return "any";
  }
}

inline prompt::Template parse_template(const json& j) {
  check_keys(j, {"separator", "query_suffix", "instruction"}, "template");
  prompt::Template t{"\n", "=", std::nullopt};
  get_if(j, "separator", t.separator, "template");
  get_if(j, "query_suffix", t.query_suffix, "template");
  if (j.contains("instruction") && !j["instruction"].is_null()) t.instruction = j["instruction"].get<std::string>();
  return t;
}

inline json template_json(const prompt::Template& t) {
  return {{"separator", t.separator}, {"query_suffix", t.query_suffix},
          {"instruction", t.instruction ? json(*t.instruction) : json(nullptr)}};
}

inline TaskSpec parse_task(const json& j) {
  TaskSpec t;
  std::string gen;
  if (j.contains("file")) {
    check_keys(j, {"file", "infer_labels", "variant", "seed"}, "task");
    t.source = TaskSpec::Source::file;
    t.file = j["file"].get<std::string>();
    get_if(j, "infer_labels", t.infer_labels, "task");
  } else {
    get_if(j, "generator", gen, "task");
    if (gen == "keyed") {
      check_keys(j, {"generator", "n_keys", "n_classes", "noise_len", "pool", "prior_fraction", "labels", "n_examples",
                     "seed", "variant"},
                 "task");
      t.source = TaskSpec::Source::keyed;
      get_if(j, "n_keys", t.keyed.n_keys, "task");
      get_if(j, "n_classes", t.keyed.n_classes, "task");
      get_if(j, "noise_len", t.keyed.noise_len, "task");
      get_if(j, "prior_fraction", t.keyed.prior_fraction, "task");
      get_if(j, "labels", t.keyed.labels, "task");
      std::string pool = "reserved";
      get_if(j, "pool", pool, "task");
      t.keyed.pool = pool_from_string(pool);
    } else if (gen == "parity") {
      check_keys(j, {"generator", "n_bits", "n_examples", "seed", "variant"}, "task");
      t.source = TaskSpec::Source::parity;
      get_if(j, "n_bits", t.n_bits, "task");
    } else {
      throw ConfigError("task: needs either 'file' or 'generator' (keyed | parity)");
    }
    get_if(j, "n_examples", t.n_examples, "task");
  }
  if (j.contains("seed")) t.seed = j["seed"].get<std::uint64_t>();
  get_if(j, "variant", t.variant, "task");
  if (t.variant != "none" && t.variant != "flipped" && t.variant != "permuted") {
    throw ConfigError("task.variant must be none, flipped or permuted");
  }
  return t;
}

inline json task_json(const TaskSpec& t) {
  json j;
  switch (t.source) {
    case TaskSpec::Source::file:
      j = {{"file", t.file.string()}, {"infer_labels", t.infer_labels}};
      break;
    case TaskSpec::Source::keyed:
      j = {{"generator", "keyed"},       {"n_keys", t.keyed.n_keys},
           {"n_classes", t.keyed.n_classes}, {"noise_len", t.keyed.noise_len},
           {"pool", to_string(t.keyed.pool)}, {"prior_fraction", t.keyed.prior_fraction},
           {"labels", t.keyed.labels},    {"n_examples", t.n_examples}};
      break;
    case TaskSpec::Source::parity:
      j = {{"generator", "parity"}, {"n_bits", t.n_bits}, {"n_examples", t.n_examples}};
      break;
  }
  if (t.seed) j["seed"] = *t.seed;
  j["variant"] = t.variant;
  return j;
}

}  // namespace detail

inline RunConfig parse_run_config(const json& j) {
  detail::check_keys(j,
                     {"task", "strategies", "hp_grid", "k_train", "k_eval", "budgets", "n_seeds", "seed", "n_test",
                      "template", "metric", "resample_context", "emit_wall_time", "base_checkpoint", "model_tag",
                      "out_dir"},
                     "config");
  RunConfig c;
  if (!j.contains("task")) throw ConfigError("config: missing 'task'");
  c.task = detail::parse_task(j["task"]);
  if (!j.contains("strategies")) throw ConfigError("config: missing 'strategies'");
  for (const auto& s : j["strategies"]) c.strategies.push_back(parse_strategy(s.get<std::string>()));
  if (j.contains("hp_grid")) {
    const auto& g = j["hp_grid"];
    detail::check_keys(g, {"lr", "epochs", "optimizer", "lora_rank"}, "hp_grid");
    detail::get_if(g, "lr", c.lrs, "hp_grid");
    detail::get_if(g, "epochs", c.epochs, "hp_grid");
    if (g.contains("optimizer")) c.optimizer = optim::optimizer_from_string(g["optimizer"].get<std::string>());
    if (g.contains("lora_rank") && !g["lora_rank"].is_null()) c.lora_rank = g["lora_rank"].get<int>();
  }
  detail::get_if(j, "k_train", c.k_train, "config");
  detail::get_if(j, "k_eval", c.k_eval, "config");
  detail::get_if(j, "budgets", c.budgets, "config");
  detail::get_if(j, "n_seeds", c.n_seeds, "config");
  detail::get_if(j, "seed", c.seed, "config");
  detail::get_if(j, "n_test", c.n_test, "config");
  if (j.contains("template")) c.tpl = detail::parse_template(j["template"]);
  if (j.contains("metric") && !j["metric"].is_null()) c.metric = prequential::metric_from_string(j["metric"].get<std::string>());
  detail::get_if(j, "resample_context", c.resample_context, "config");
  detail::get_if(j, "emit_wall_time", c.emit_wall_time, "config");
  if (j.contains("base_checkpoint")) c.base_checkpoint = j["base_checkpoint"].get<std::string>();
  detail::get_if(j, "model_tag", c.model_tag, "config");
  if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
  c.validate();
  return c;
}

/// Canonical JSON form; parse_run_config(to_json(c)) == c.
inline json to_json(const RunConfig& c) {
  json strat = json::array();
  for (const auto& s : c.strategies) strat.push_back(s.label());
  return {{"task", detail::task_json(c.task)},
          {"strategies", strat},
          {"hp_grid",
           {{"lr", c.lrs},
            {"epochs", c.epochs},
            {"optimizer", optim::to_string(c.optimizer)},
            {"lora_rank", c.lora_rank ? json(*c.lora_rank) : json(nullptr)}}},
          {"k_train", c.k_train},
          {"k_eval", c.k_eval},
          {"budgets", c.budgets},
          {"n_seeds", c.n_seeds},
          {"seed", c.seed},
          {"n_test", c.n_test},
          {"template", detail::template_json(c.tpl)},
          {"metric", c.metric ? json(prequential::to_string(*c.metric)) : json(nullptr)},
          {"resample_context", c.resample_context},
          {"emit_wall_time", c.emit_wall_time},
          {"base_checkpoint", c.base_checkpoint.string()},
          {"model_tag", c.model_tag},
          {"out_dir", c.out_dir.string()}};
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  try {
    return parse_run_config(read_json_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Pretraining config: {"model": {...}, "family": {...}, "optimizer", "lr", ...}.
inline PretrainConfig parse_pretrain_config(const json& j) {
  detail::check_keys(j, {"model", "family", "optimizer", "lr", "warmup_steps", "steps", "batch_size", "checkpoint_every",
                         "log_every", "seed", "out_dir"},
                     "pretrain");
  PretrainConfig c;
  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::check_keys(m, {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"}, "model");
    detail::get_if(m, "vocab_size", c.model.vocab_size, "model");
    detail::get_if(m, "d_model", c.model.d_model, "model");
    detail::get_if(m, "n_layers", c.model.n_layers, "model");
    detail::get_if(m, "n_heads", c.model.n_heads, "model");
    detail::get_if(m, "d_ff", c.model.d_ff, "model");
    detail::get_if(m, "max_seq_len", c.model.max_seq_len, "model");
  }
  if (j.contains("family")) {
    const auto& f = j["family"];
    detail::check_keys(f, {"keyed_weight", "parity_weight", "min_keys", "max_keys", "min_classes", "max_classes",
                           "min_noise", "max_noise", "prior_fractions", "label_sets", "min_bits", "max_bits", "min_k",
                           "max_k", "template"},
                       "family");
    auto& fam = c.family;
    detail::get_if(f, "keyed_weight", fam.keyed_weight, "family");
    detail::get_if(f, "parity_weight", fam.parity_weight, "family");
    detail::get_if(f, "min_keys", fam.min_keys, "family");
    detail::get_if(f, "max_keys", fam.max_keys, "family");
    detail::get_if(f, "min_classes", fam.min_classes, "family");
    detail::get_if(f, "max_classes", fam.max_classes, "family");
    detail::get_if(f, "min_noise", fam.min_noise, "family");
    detail::get_if(f, "max_noise", fam.max_noise, "family");
    detail::get_if(f, "prior_fractions", fam.prior_fractions, "family");
    detail::get_if(f, "label_sets", fam.label_sets, "family");
    detail::get_if(f, "min_bits", fam.min_bits, "family");
    detail::get_if(f, "max_bits", fam.max_bits, "family");
    detail::get_if(f, "min_k", fam.min_k, "family");
    detail::get_if(f, "max_k", fam.max_k, "family");
    if (f.contains("template")) fam.tpl = detail::parse_template(f["template"]);
  }
  if (j.contains("optimizer")) c.optimizer = optim::optimizer_from_string(j["optimizer"].get<std::string>());
  detail::get_if(j, "lr", c.lr, "pretrain");
  detail::get_if(j, "warmup_steps", c.warmup_steps, "pretrain");
  detail::get_if(j, "steps", c.steps, "pretrain");
  detail::get_if(j, "batch_size", c.batch_size, "pretrain");
  detail::get_if(j, "checkpoint_every", c.checkpoint_every, "pretrain");
  detail::get_if(j, "log_every", c.log_every, "pretrain");
  detail::get_if(j, "seed", c.seed, "pretrain");
  if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
  c.model.validate();
  if (c.log_every < 1 || c.checkpoint_every < 1) throw ConfigError("pretrain: log_every and checkpoint_every must be >= 1");
  return c;
}

}  // namespace icft::runner
