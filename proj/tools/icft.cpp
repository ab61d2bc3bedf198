// icft: meta-pretraining, task generation, strategy comparisons and reports.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "icft/model/checkpoint.hpp"
#include "icft/prequential/run.hpp"
#include "icft/runner/comparison.hpp"
#include "icft/runner/config.hpp"
#include "icft/runner/pretrain.hpp"
#include "icft/tasks/task_file.hpp"

namespace fs = std::filesystem;
using namespace icft;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::optional<std::size_t> budget;
  std::string strategy;
  std::optional<int> k;
  std::optional<double> lr;
  std::optional<int> epochs;
  std::vector<std::string> inputs;
};

void print_cells(const std::vector<runner::CellSummary>& cells) {
  std::printf("%-28s %-22s %7s %3s %8s %8s %10s\n", "task", "strategy", "budget", "n", "acc", "2sem", "preq");
  for (const auto& c : cells) {
    const std::string sem = c.sem2 ? runner::format_double(*c.sem2).substr(0, 8) : "-";
    const std::string preq = c.mean_preq ? runner::format_double(*c.mean_preq).substr(0, 10) : "-";
    std::printf("%-28s %-22s %7zu %3zu %8.4f %8s %10s\n", c.task.c_str(), c.strategy.c_str(), c.budget, c.n, c.mean,
                sem.c_str(), preq.c_str());
  }
}

runner::RunConfig run_config(const Flags& f) {
  if (f.config.empty()) throw runner::ConfigError("--config is required");
  auto j = runner::read_json_file(f.config);
  // Paths inside the config are relative to the config file.
  const auto base = fs::path(f.config).parent_path();
  auto rebase = [&](nlohmann::json& node, const char* key) {
    if (node.contains(key) && node[key].is_string()) {
      const fs::path p = node[key].get<std::string>();
      if (p.is_relative()) node[key] = (base / p).lexically_normal().string();
    }
  };
  rebase(j, "base_checkpoint");
  if (j.contains("task")) rebase(j["task"], "file");
  auto c = runner::parse_run_config(j);
  if (f.seed) c.seed = *f.seed;
  if (!f.out_dir.empty()) c.out_dir = f.out_dir;
  if (f.budget) c.budgets = {*f.budget};
  if (!f.strategy.empty()) c.strategies = {runner::parse_strategy(f.strategy)};
  if (f.k) {
    c.k_train = *f.k;
    c.k_eval = {*f.k};
  }
  c.validate();
  return c;
}

model::Parameters load_base(const runner::RunConfig& c) {
  if (c.base_checkpoint.empty()) throw runner::ConfigError("config: base_checkpoint is required");
  return model::load_checkpoint(c.base_checkpoint);
}

int cmd_pretrain(const Flags& f) {
  if (f.config.empty()) throw runner::ConfigError("--config is required");
  auto cfg = runner::parse_pretrain_config(runner::read_json_file(f.config));
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
  if (cfg.out_dir.empty()) cfg.out_dir = "out/pretrain";
  std::fprintf(stderr, "pretraining %lld steps into %s\n", static_cast<long long>(cfg.steps), cfg.out_dir.c_str());
  runner::meta_pretrain(cfg, [](std::int64_t step, double loss) {
    std::fprintf(stderr, "step %lld  loss %.4f\n", static_cast<long long>(step), loss);
  });
  std::printf("%s\n", runner::checkpoint_path(cfg.out_dir).c_str());
  return 0;
}

int cmd_gen_task(const Flags& f) {
  if (f.config.empty()) throw runner::ConfigError("--config is required");
  auto j = runner::read_json_file(f.config);
  if (j.contains("task")) j = j["task"];
  const auto spec = runner::detail::parse_task(j);
  const std::uint64_t seed = f.seed.value_or(0);
  const auto d = runner::build_dataset(spec, seed);
  const fs::path dir = f.out_dir.empty() ? fs::path(".") : fs::path(f.out_dir);
  fs::create_directories(dir);
  std::string name = runner::task_name(spec);
  for (auto& ch : name)
    if (ch == '/') ch = '_';
  const auto path = dir / (name + "-s" + std::to_string(seed) + ".jsonl");
  tasks::save_task_file(path, d);
  std::printf("%s\n", path.c_str());
  return 0;
}

int cmd_run(const Flags& f) {
  const auto cfg = run_config(f);
  const auto base = load_base(cfg);
  runner::ComparisonHooks hooks;
  hooks.on_row = [](const runner::ResultRow& r) {
    std::fprintf(stderr, "seed %llu budget %zu %-16s %s %s\n", static_cast<unsigned long long>(r.seed), r.budget,
                 r.strategy.c_str(), r.test_accuracy ? runner::format_double(*r.test_accuracy).c_str() : "-",
                 r.error.c_str());
  };
  const auto res = runner::run_comparison(cfg, base, hooks);
  runner::write_outputs(cfg, res);
  auto cells = res.cells;
  const auto best = runner::best_icl_only(res.cells);
  cells.insert(cells.end(), best.begin(), best.end());
  print_cells(cells);
  std::size_t failed = 0;
  for (const auto& r : res.rows) failed += !r.error.empty();
  if (failed) {
    std::fprintf(stderr, "%zu of %zu rows failed; see %s\n", failed, res.rows.size(),
                 (cfg.out_dir / "results.csv").c_str());
    return 3;
  }
  return 0;
}

int cmd_preq(const Flags& f) {
  const auto cfg = run_config(f);
  const auto base = load_base(cfg);
  const auto kind = f.strategy.empty() ? strategies::StrategyKind::icl_ft : runner::parse_strategy(f.strategy).kind;
  auto hp = cfg.grid(kind == strategies::StrategyKind::icl_ft ? cfg.k_train : 0).front();
  if (kind == strategies::StrategyKind::icl_only) {
    hp.epochs = 0;
    hp.k = cfg.k_eval.back();
  }
  if (f.lr) hp.lr = *f.lr;
  if (f.epochs) hp.epochs = *f.epochs;
  hp.validate();
  const auto data = runner::build_dataset(cfg.task, cfg.seed);
  const auto sp = tasks::split(data, {cfg.seed, cfg.budgets.back(), 0});
  const auto metric = cfg.metric.value_or(prequential::default_metric(data));
  const auto trace = prequential::run_prequential(base, sp.train, hp, cfg.tpl, cfg.seed);
  fs::create_directories(cfg.out_dir);
  const auto path = cfg.out_dir / "trace.csv";
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  prequential::write_trace_csv(os, trace);
  std::printf("%s N=%zu %s prequential %s = %.6f (trace: %s)\n", hp.describe().c_str(), trace.size(),
              std::string(strategies::to_string(kind)).c_str(), std::string(prequential::to_string(metric)).c_str(),
              prequential::prequential_average(trace, metric), path.c_str());
  return 0;
}

int cmd_report(const Flags& f) {
  std::vector<fs::path> files(f.inputs.begin(), f.inputs.end());
  if (files.empty()) {
    if (f.out_dir.empty()) throw runner::ConfigError("report needs result CSV files or --out-dir");
    files.push_back(fs::path(f.out_dir) / "results.csv");
  }
  std::vector<runner::ResultRow> rows;
  for (const auto& p : files) {
    auto part = runner::read_results_csv(p);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  auto cells = runner::aggregate(rows);
  const auto best = runner::best_icl_only(cells);
  cells.insert(cells.end(), best.begin(), best.end());
  print_cells(cells);
  if (!f.out_dir.empty() && !f.inputs.empty()) {
    fs::create_directories(f.out_dir);
    std::ofstream os(fs::path(f.out_dir) / "aggregate.csv", std::ios::binary | std::ios::trunc);
    runner::write_aggregate_csv(os, cells);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-context learning and fine-tuning experiments on a small transformer"};
  app.require_subcommand(1);
  Flags f;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "JSON config file");
    sub->add_option("--seed", f.seed, "Base seed (overrides the config)");
    sub->add_option("--out-dir", f.out_dir, "Output directory (overrides the config)");
  };
  auto* pretrain = app.add_subcommand("pretrain", "Meta-pretrain a base checkpoint");
  common(pretrain);
  auto* gen = app.add_subcommand("gen-task", "Write a generated task to a line-JSON file");
  common(gen);
  auto* run = app.add_subcommand("run", "Compare strategies over budgets and seeds");
  common(run);
  auto* preq = app.add_subcommand("preq", "Single prequential run on the largest budget");
  common(preq);
  for (auto* sub : {run, preq}) {
    sub->add_option("--budget", f.budget, "Restrict to one train-set size");
    sub->add_option("--strategy", f.strategy, "ICL_ONLY, FT_ONLY or ICL_FT (optionally with :iid)");
    sub->add_option("--k", f.k, "Number of context examples");
  }
  preq->add_option("--lr", f.lr, "Learning rate (default: first grid value)");
  preq->add_option("--epochs", f.epochs, "Gradient steps per example (default: first grid value)");
  auto* report = app.add_subcommand("report", "Aggregate results CSV files");
  report->add_option("--out-dir", f.out_dir, "Directory with results.csv, or where to write aggregate.csv");
  report->add_option("files", f.inputs, "results.csv files");

  CLI11_PARSE(app, argc, argv);
  try {
    if (pretrain->parsed()) return cmd_pretrain(f);
    if (gen->parsed()) return cmd_gen_task(f);
    if (run->parsed()) return cmd_run(f);
    if (preq->parsed()) return cmd_preq(f);
    if (report->parsed()) return cmd_report(f);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "icft: error: %s\n", e.what());
    return 1;
  }
  return 1;
}
