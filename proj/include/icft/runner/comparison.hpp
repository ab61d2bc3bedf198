#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "icft/model/checkpoint.hpp"
#include "icft/prequential/run.hpp"
#include "icft/runner/config.hpp"
#include "icft/strategies/strategies.hpp"
#include "icft/tasks/generators.hpp"
#include "icft/tasks/task_file.hpp"

namespace icft::runner {

namespace fs = std::filesystem;

struct ResultRow {
  std::string task;
  std::string strategy;  // ICL_ONLY rows carry their K: "ICL_ONLY/K=4"
  std::string model_tag;
  std::size_t budget = 0;
  std::uint64_t seed = 0;
  std::string selected_hp;
  std::optional<double> test_accuracy;
  std::optional<double> prequential_score;
  std::optional<double> wall_time;
  std::string error;  // empty unless the sub-run failed

  friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

inline const std::vector<std::string>& result_columns() {
  static const std::vector<std::string> cols = {"task",        "strategy",      "model_tag",         "budget",
                                                "seed",        "selected_hp",   "test_accuracy",     "prequential_score",
                                                "wall_time",   "error"};
  return cols;
}

struct Timing {
  std::string strategy;
  std::size_t budget = 0;
  std::uint64_t seed = 0;
  std::string phase;  // prequential_eval | prequential_train | heldout_eval | iid_train
  double seconds = 0.0;
};

struct CellSummary {
  std::string task, strategy, model_tag;
  std::size_t budget = 0;
  std::size_t n = 0;
  double mean = 0.0;
  std::optional<double> sem2;  // 2 * sample std / sqrt(n); absent when n == 1
  std::optional<double> mean_preq;
};

// ---------------------------------------------------------------------------
// CSV helpers.

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

/// Splits CSV text into records, honouring double-quoted fields.
inline std::vector<std::vector<std::string>> parse_csv(std::istream& is) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  char c;
  while (is.get(c)) {
    any = true;
    if (quoted) {
      if (c == '"') {
        if (is.peek() == '"') {
          field += '"';
          is.get();
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else if (c != '\r') {
      field += c;
    }
  }
  if (any) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string opt_field(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

inline void write_results_csv(std::ostream& os, const std::vector<ResultRow>& rows) {
  for (std::size_t i = 0; i < result_columns().size(); ++i) os << (i ? "," : "") << result_columns()[i];
  os << '\n';
  for (const auto& r : rows) {
    os << csv_field(r.task) << ',' << csv_field(r.strategy) << ',' << csv_field(r.model_tag) << ',' << r.budget << ','
       << r.seed << ',' << csv_field(r.selected_hp) << ',' << opt_field(r.test_accuracy) << ','
       << opt_field(r.prequential_score) << ',' << opt_field(r.wall_time) << ',' << csv_field(r.error) << '\n';
  }
}

inline std::vector<ResultRow> read_results_csv(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  auto recs = parse_csv(is);
  if (recs.empty() || recs.front() != result_columns()) {
    throw std::runtime_error(path.string() + ": header does not match the results format");
  }
  auto num = [&](const std::string& s) -> std::optional<double> {
    if (s.empty()) return std::nullopt;
    return std::stod(s);
  };
  std::vector<ResultRow> rows;
  for (std::size_t i = 1; i < recs.size(); ++i) {
    const auto& f = recs[i];
    if (f.size() != result_columns().size()) {
      throw std::runtime_error(path.string() + ":" + std::to_string(i + 1) + ": expected " +
                               std::to_string(result_columns().size()) + " fields");
    }
    rows.push_back({f[0], f[1], f[2], std::stoull(f[3]), std::stoull(f[4]), f[5], num(f[6]), num(f[7]), num(f[8]), f[9]});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Aggregation.

/// Mean and 2 * SEM (sample standard deviation over sqrt(n)); SEM is absent for n == 1.
inline std::pair<double, std::optional<double>> mean_sem2(const std::vector<double>& xs) {
  if (xs.empty()) throw std::invalid_argument("mean_sem2: no values");
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() == 1) return {mean, std::nullopt};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  return {mean, 2.0 * sd / std::sqrt(static_cast<double>(xs.size()))};
}

/// One summary per (task, strategy, model tag, budget), over rows with a test accuracy.
inline std::vector<CellSummary> aggregate(const std::vector<ResultRow>& rows) {
  using Key = std::tuple<std::string, std::string, std::string, std::size_t>;
  std::map<Key, std::pair<std::vector<double>, std::vector<double>>> cells;
  std::vector<Key> order;
  for (const auto& r : rows) {
    if (!r.test_accuracy) continue;
    Key k{r.task, r.strategy, r.model_tag, r.budget};
    auto [it, fresh] = cells.try_emplace(k);
    if (fresh) order.push_back(k);
    it->second.first.push_back(*r.test_accuracy);
    if (r.prequential_score) it->second.second.push_back(*r.prequential_score);
  }
  std::vector<CellSummary> out;
  for (const auto& k : order) {
    const auto& [acc, preq] = cells.at(k);
    CellSummary s;
    std::tie(s.task, s.strategy, s.model_tag, s.budget) = k;
    s.n = acc.size();
    std::tie(s.mean, s.sem2) = mean_sem2(acc);
    if (!preq.empty()) s.mean_preq = mean_sem2(preq).first;
    out.push_back(s);
  }
  return out;
}

inline void write_aggregate_csv(std::ostream& os, const std::vector<CellSummary>& cells) {
  os << "task,strategy,model_tag,budget,n,mean_accuracy,sem2_accuracy,mean_prequential_score\n";
  for (const auto& c : cells) {
    os << csv_field(c.task) << ',' << csv_field(c.strategy) << ',' << csv_field(c.model_tag) << ',' << c.budget << ','
       << c.n << ',' << format_double(c.mean) << ',' << opt_field(c.sem2) << ',' << opt_field(c.mean_preq) << '\n';
  }
}

/// Best ICL_ONLY cell (over K) per (task, model tag, budget), renamed "ICL_ONLY/best".
inline std::vector<CellSummary> best_icl_only(const std::vector<CellSummary>& cells) {
  std::vector<CellSummary> out;
  for (const auto& c : cells) {
    if (c.strategy.rfind("ICL_ONLY/", 0) != 0) continue;
    auto it = std::find_if(out.begin(), out.end(), [&](const CellSummary& o) {
      return o.task == c.task && o.model_tag == c.model_tag && o.budget == c.budget;
    });
    if (it == out.end()) {
      out.push_back(c);
      out.back().strategy = "ICL_ONLY/best";
    } else if (c.mean > it->mean) {
      *it = c;
      it->strategy = "ICL_ONLY/best";
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Orchestration.

/// The dataset used under run seed `seed`.
inline tasks::Dataset build_dataset(const TaskSpec& t, std::uint64_t seed) {
  const std::uint64_t task_seed = t.seed.value_or(seed);
  tasks::Dataset d;
  switch (t.source) {
    case TaskSpec::Source::file: {
      tasks::LoadOptions lo;
      lo.infer_labels = t.infer_labels;
      d = tasks::load_task_file(t.file, lo);
      break;
    }
    case TaskSpec::Source::keyed:
      d = tasks::gen_keyed_classification(t.keyed, t.n_examples, task_seed);
      break;
    case TaskSpec::Source::parity:
      d = tasks::gen_parity(t.n_bits, t.n_examples, task_seed);
      break;
  }
  if (t.variant == "flipped") d = tasks::flip_labels(d);
  if (t.variant == "permuted") d = tasks::permute_labels(d, task_seed);
  d.validate();
  return d;
}

/// Stable name of the task for result tables (independent of the run seed).
inline std::string task_name(const TaskSpec& t) {
  std::string base;
  switch (t.source) {
    case TaskSpec::Source::file: base = t.file.stem().string(); break;
    case TaskSpec::Source::keyed:
      base = "keyed-k" + std::to_string(t.keyed.n_keys) + "-c" + std::to_string(t.keyed.n_classes);
      break;
    case TaskSpec::Source::parity: base = "parity" + std::to_string(t.n_bits); break;
  }
  return t.variant == "none" ? base : base + "/" + t.variant;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash(const RunConfig& c) {
  std::ostringstream os;
  os << std::hex << fnv1a(to_json(c).dump());
  return os.str();
}

struct ComparisonHooks {
  /// Sees every (context, target) pair that reaches a gradient step.
  strategies::StepObserver on_train_step;
  std::function<void(const ResultRow&)> on_row;
};

struct ComparisonResult {
  std::vector<ResultRow> rows;
  std::vector<CellSummary> cells;
  std::vector<Timing> timings;
};

inline constexpr std::uint64_t kTagEval = 0x6576616c;  // "eval"
inline constexpr std::uint64_t kTagPreq = 0x70726571;  // "preq"

/// All strategies over every (seed, budget) cell; see the README for the file layout.
inline ComparisonResult run_comparison(const RunConfig& cfg, const model::Parameters& base,
                                       const ComparisonHooks& hooks = {}) {
  cfg.validate();
  using clock = std::chrono::steady_clock;
  auto seconds_since = [](clock::time_point t) { return std::chrono::duration<double>(clock::now() - t).count(); };
  ComparisonResult out;
  const std::string task = task_name(cfg.task);
  const std::string tag = cfg.tag();

  for (std::size_t j = 0; j < cfg.n_seeds; ++j) {
    const std::uint64_t seed = cfg.seed + j;
    std::optional<tasks::Dataset> data;
    std::string data_error;
    try {
      data = build_dataset(cfg.task, seed);
    } catch (const std::exception& e) {
      data_error = e.what();
    }
    for (const std::size_t budget : cfg.budgets) {
      std::optional<tasks::Split> sp;
      std::string cell_error = data_error;
      if (data) {
        try {
          sp = tasks::split(*data, {seed, budget, cfg.n_test});
        } catch (const std::exception& e) {
          cell_error = e.what();
        }
      }
      const auto metric = cfg.metric.value_or(data ? prequential::default_metric(*data) : prequential::MetricKind::nll);
      const std::uint64_t eval_seed = derive_seed(seed, {kTagEval, budget});
      const std::uint64_t preq_seed = derive_seed(seed, {kTagPreq, budget});
      // Prequential selections, shared by the prequential and iid entries of a kind.
      std::map<strategies::StrategyKind, prequential::Selection> selections;

      auto new_row = [&](std::string strategy) {
        ResultRow r;
        r.task = task;
        r.strategy = std::move(strategy);
        r.model_tag = tag;
        r.budget = budget;
        r.seed = seed;
        return r;
      };
      auto emit = [&](ResultRow row, clock::time_point t0) {
        if (cfg.emit_wall_time) row.wall_time = seconds_since(t0);
        if (hooks.on_row) hooks.on_row(row);
        out.rows.push_back(std::move(row));
      };
      auto predictor = [&](const model::Parameters& p, strategies::StrategyKind kind, std::size_t k) {
        strategies::Predictor pr;
        pr.params = &p;
        pr.kind = kind;
        pr.k_eval = k;
        pr.tpl = cfg.tpl;
        pr.train = &sp->train;
        pr.labels = sp->train.labels;
        pr.resample_context = cfg.resample_context;
        return pr;
      };
      auto heldout = [&](const strategies::Predictor& pr, const std::string& label) {
        const auto t0 = clock::now();
        const double acc = strategies::evaluate(pr, sp->test, eval_seed).accuracy;
        out.timings.push_back({label, budget, seed, "heldout_eval", seconds_since(t0)});
        return acc;
      };

      for (const auto& s : cfg.strategies) {
        if (s.kind == strategies::StrategyKind::icl_only) {
          for (int k : cfg.k_eval) {
            const auto t0 = clock::now();
            ResultRow row = new_row("ICL_ONLY/K=" + std::to_string(k));
            row.selected_hp = "K=" + std::to_string(k);
            if (!sp) {
              row.error = cell_error;
            } else {
              try {
                row.test_accuracy = heldout(predictor(base, s.kind, static_cast<std::size_t>(k)), row.strategy);
              } catch (const std::exception& e) {
                row.error = e.what();
              }
            }
            emit(std::move(row), t0);
          }
          continue;
        }
        const auto t0 = clock::now();
        ResultRow row = new_row(s.label());
        if (!sp) {
          row.error = cell_error;
          emit(std::move(row), t0);
          continue;
        }
        try {
          const int k = s.kind == strategies::StrategyKind::ft_only ? 0 : cfg.k_train;
          auto it = selections.find(s.kind);
          if (it == selections.end()) {
            prequential::RunOptions ro;
            ro.observer = hooks.on_train_step;
            auto sel = prequential::hp_select(base, sp->train, cfg.grid(k), cfg.tpl, preq_seed, metric, ro);
            double ev = 0.0, tr = 0.0;
            for (const auto& t : sel.traces)
              for (const auto& r : t.steps) {
                ev += r.eval_seconds;
                tr += r.train_seconds;
              }
            const std::string kind_label(strategies::to_string(s.kind));
            out.timings.push_back({kind_label, budget, seed, "prequential_eval", ev});
            out.timings.push_back({kind_label, budget, seed, "prequential_train", tr});
            it = selections.emplace(s.kind, std::move(sel)).first;
          }
          const auto& sel = it->second;
          row.selected_hp = sel.best_hp().describe();
          row.prequential_score = sel.scores[sel.best];
          const std::size_t k_eval = static_cast<std::size_t>(k);
          if (s.mode == strategies::TrainingMode::prequential) {
            row.test_accuracy = heldout(predictor(sel.winner().final_params, s.kind, k_eval), row.strategy);
          } else {
            const auto t1 = clock::now();
            auto iid = strategies::train_iid(base, sp->train, sel.best_hp(), s.kind, cfg.tpl, preq_seed,
                                             hooks.on_train_step);
            out.timings.push_back({row.strategy, budget, seed, "iid_train", seconds_since(t1)});
            row.test_accuracy = heldout(predictor(iid.params, s.kind, k_eval), row.strategy);
          }
        } catch (const std::exception& e) {
          row.error = e.what();
        }
        emit(std::move(row), t0);
      }
    }
  }
  out.cells = aggregate(out.rows);
  return out;
}

inline void write_timings_csv(std::ostream& os, const std::vector<Timing>& ts) {
  os << "strategy,budget,seed,phase,seconds\n";
  for (const auto& t : ts)
    os << csv_field(t.strategy) << ',' << t.budget << ',' << t.seed << ',' << t.phase << ',' << format_double(t.seconds)
       << '\n';
}

/// results.csv, aggregate.csv, timings.csv and manifest.json under cfg.out_dir.
inline void write_outputs(const RunConfig& cfg, const ComparisonResult& res) {
  fs::create_directories(cfg.out_dir);
  {
    std::ofstream os(cfg.out_dir / "results.csv", std::ios::binary | std::ios::trunc);
    write_results_csv(os, res.rows);
  }
  {
    std::ofstream os(cfg.out_dir / "aggregate.csv", std::ios::binary | std::ios::trunc);
    auto cells = res.cells;
    const auto best = best_icl_only(res.cells);
    cells.insert(cells.end(), best.begin(), best.end());
    write_aggregate_csv(os, cells);
  }
  {
    std::ofstream os(cfg.out_dir / "timings.csv", std::ios::binary | std::ios::trunc);
    write_timings_csv(os, res.timings);
  }
  std::vector<std::uint64_t> seeds;
  for (std::size_t j = 0; j < cfg.n_seeds; ++j) seeds.push_back(cfg.seed + j);
  std::size_t errors = 0;
  for (const auto& r : res.rows) errors += !r.error.empty();
  const nlohmann::json manifest = {{"config_hash", config_hash(cfg)},
                                   {"config", to_json(cfg)},
                                   {"seeds", seeds},
                                   {"rows", res.rows.size()},
                                   {"failed_rows", errors},
                                   {"format_version", 1}};
  std::ofstream(cfg.out_dir / "manifest.json", std::ios::trunc) << manifest.dump(2) << '\n';
}

}  // namespace icft::runner
