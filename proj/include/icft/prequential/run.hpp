#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "icft/model/transformer.hpp"
#include "icft/prequential/hp_config.hpp"
#include "icft/prompt/prompt.hpp"
#include "icft/rng.hpp"
#include "icft/strategies/strategies.hpp"
#include "icft/tasks/dataset.hpp"

namespace icft::prequential {

using prompt::Example;

enum class MetricKind { accuracy, nll };

inline std::string_view to_string(MetricKind k) { return k == MetricKind::accuracy ? "accuracy" : "nll"; }

inline MetricKind metric_from_string(std::string_view s) {
  if (s == "accuracy") return MetricKind::accuracy;
  if (s == "nll") return MetricKind::nll;
  throw std::invalid_argument("unknown metric '" + std::string(s) + "'");
}

/// Accuracy for classification tasks, NLL otherwise.
inline MetricKind default_metric(const tasks::Dataset& d) {
  return d.is_classification() ? MetricKind::accuracy : MetricKind::nll;
}

struct StepRecord {
  std::size_t step = 0;  // 1-based position i
  std::size_t x_id = 0;  // index of the example in the caller's numbering
  double acc = 0.0;
  double nll = 0.0;      // mean per-token NLL of y_i (and its EOS) under the prediction context
  double cum_acc = 0.0;
  double cum_nll = 0.0;
  std::size_t n_ctx = 0;
  int epoch_steps = 0;
  double eval_seconds = 0.0;
  double train_seconds = 0.0;
};

struct PrequentialTrace {
  HPConfig hp;
  std::vector<StepRecord> steps;
  model::Parameters final_params;
  std::int64_t gradient_steps = 0;

  std::size_t size() const { return steps.size(); }
  double cumulative(MetricKind k) const {
    if (steps.empty()) return 0.0;
    return k == MetricKind::accuracy ? steps.back().cum_acc : steps.back().cum_nll;
  }
};

struct RunOptions {
  std::optional<std::vector<std::string>> labels;  // defaults to the dataset's label set
  std::span<const std::size_t> ids;                // x_id per position; defaults to 0..N-1
  strategies::StepObserver observer;
  int max_new_tokens = 48;
};

inline constexpr std::uint64_t kTagPredictCtx = 0x70637478;  // "pctx"
inline constexpr std::uint64_t kTagTrainCtx = 0x74637478;    // "tctx"

/// Next-step evaluation interleaved with k-shot training. Step i predicts y_i
/// from min(K, i-1) earlier examples, scores it, then takes E gradient steps on
/// freshly sampled contexts followed by (x_i, y_i).
inline PrequentialTrace run_prequential(const model::Parameters& base, const tasks::Dataset& d, const HPConfig& hp,
                                        const prompt::Template& tpl, std::uint64_t seed, const RunOptions& opts = {}) {
  if (d.empty()) throw std::invalid_argument("run_prequential: empty dataset");
  if (!opts.ids.empty() && opts.ids.size() != d.size()) throw std::invalid_argument("run_prequential: ids size mismatch");
  hp.validate();
  using clock = std::chrono::steady_clock;
  const auto labels = opts.labels ? opts.labels : d.labels;
  const auto max_len = static_cast<std::size_t>(base.config.max_seq_len);
  const auto k = static_cast<std::size_t>(hp.k);

  strategies::Trainer trainer(base, hp, seed);
  trainer.set_observer(opts.observer);
  PrequentialTrace trace;
  trace.hp = hp;
  double cum_acc = 0.0;
  double cum_nll = 0.0;
  const std::span<const Example> all(d.examples);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& ex = d.examples[i];
    const auto past = all.first(i);
    StepRecord r;
    r.step = i + 1;
    r.x_id = opts.ids.empty() ? i : opts.ids[i];

    const auto t0 = clock::now();
    Rng prng = make_rng(seed, {kTagPredictCtx, i});
    const auto ctx = tasks::sample_context(past, k, prng);
    r.n_ctx = ctx.size();
    const auto raw = strategies::answer(trainer.params(), ctx, ex.x, tpl, labels, opts.max_new_tokens);
    r.acc = strategies::matches(raw, ex.y) ? 1.0 : 0.0;
    const auto scored = prompt::build_training_sequence(ctx, ex, tpl, max_len).target_only();
    r.nll = model::sequence_nll(trainer.params(), {scored.tokens, scored.loss_mask});
    cum_acc += r.acc;
    cum_nll += r.nll;
    r.cum_acc = cum_acc;
    r.cum_nll = cum_nll;
    const auto t1 = clock::now();

    for (int e = 0; e < hp.epochs; ++e) {
      Rng trng = make_rng(seed, {kTagTrainCtx, i, static_cast<std::uint64_t>(e)});
      trainer.step(tasks::sample_context(past, k, trng), ex, tpl);
      ++r.epoch_steps;
    }
    r.eval_seconds = std::chrono::duration<double>(t1 - t0).count();
    r.train_seconds = std::chrono::duration<double>(clock::now() - t1).count();
    trace.steps.push_back(r);
  }
  trace.gradient_steps = trainer.steps();
  trace.final_params = std::move(trainer).release();
  return trace;
}

/// Mean metric over the whole run, or over the last `window` steps.
inline double prequential_average(const PrequentialTrace& t, MetricKind kind, std::optional<std::size_t> window = {}) {
  if (t.steps.empty()) throw std::invalid_argument("prequential_average: empty trace");
  const std::size_t n = t.size();
  const std::size_t w = window.value_or(n);
  if (w == 0 || w > n) {
    throw std::invalid_argument("prequential_average: window " + std::to_string(w) + " outside [1, " +
                                std::to_string(n) + "]");
  }
  if (w == n) return t.cumulative(kind) / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = n - w; i < n; ++i) total += kind == MetricKind::accuracy ? t.steps[i].acc : t.steps[i].nll;
  return total / static_cast<double>(w);
}

struct Selection {
  std::vector<PrequentialTrace> traces;  // one per grid point, in grid order
  std::vector<double> scores;
  std::size_t best = 0;

  const PrequentialTrace& winner() const { return traces.at(best); }
  const HPConfig& best_hp() const { return winner().hp; }
};

/// Is grid point a (score sa) preferred over b? Ties go to lower lr, then fewer epochs.
inline bool preferred(double sa, const HPConfig& a, double sb, const HPConfig& b, MetricKind kind) {
  if (sa != sb) return kind == MetricKind::accuracy ? sa > sb : sa < sb;
  if (a.lr != b.lr) return a.lr < b.lr;
  return a.epochs < b.epochs;
}

/// One prequential run per grid point, all from the same base parameters, data
/// order and seed; the best prequential average wins.
inline Selection hp_select(const model::Parameters& base, const tasks::Dataset& d, const std::vector<HPConfig>& grid,
                           const prompt::Template& tpl, std::uint64_t seed, MetricKind kind,
                           const RunOptions& opts = {}) {
  if (grid.empty()) throw std::invalid_argument("hp_select: empty grid");
  Selection s;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    s.traces.push_back(run_prequential(base, d, grid[g], tpl, seed, opts));
    s.scores.push_back(prequential_average(s.traces.back(), kind));
    if (g > 0 && preferred(s.scores[g], grid[g], s.scores[s.best], grid[s.best], kind)) s.best = g;
  }
  return s;
}

/// Position-wise mean and population variance over permutations.
struct Curve {
  std::vector<double> mean_acc, var_acc, mean_nll, var_nll;
  std::size_t n_perms = 0;
};

inline Curve multi_permutation_curve(const model::Parameters& base, const tasks::Dataset& d, const HPConfig& hp,
                                     const prompt::Template& tpl, std::size_t n_perms, std::uint64_t seed) {
  if (n_perms < 1) throw std::invalid_argument("multi_permutation_curve: n_perms must be >= 1");
  if (d.empty()) throw std::invalid_argument("multi_permutation_curve: empty dataset");
  const std::size_t n = d.size();
  Curve c;
  c.n_perms = n_perms;
  std::vector<double> s_acc(n), q_acc(n), s_nll(n), q_nll(n);
  for (std::size_t p = 0; p < n_perms; ++p) {
    const auto order_seed = derive_seed(seed, {0x7065726d, p});  // "perm"
    const auto ids = tasks::seeded_permutation(n, order_seed);
    RunOptions opts;
    opts.ids = ids;
    const auto t = run_prequential(base, tasks::permuted(d, order_seed), hp, tpl, derive_seed(seed, {0x72756e, p}), opts);
    for (std::size_t i = 0; i < n; ++i) {
      s_acc[i] += t.steps[i].acc;
      q_acc[i] += t.steps[i].acc * t.steps[i].acc;
      s_nll[i] += t.steps[i].nll;
      q_nll[i] += t.steps[i].nll * t.steps[i].nll;
    }
  }
  const double np = static_cast<double>(n_perms);
  for (std::size_t i = 0; i < n; ++i) {
    const double ma = s_acc[i] / np, mn = s_nll[i] / np;
    c.mean_acc.push_back(ma);
    c.var_acc.push_back(std::max(0.0, q_acc[i] / np - ma * ma));
    c.mean_nll.push_back(mn);
    c.var_nll.push_back(std::max(0.0, q_nll[i] / np - mn * mn));
  }
  return c;
}

inline void write_trace_csv(std::ostream& os, const PrequentialTrace& t) {
  const auto old = os.precision(17);
  os << "step,x_id,acc,nll,cum_acc,cum_nll,n_ctx,epoch_steps\n";
  for (const auto& r : t.steps) {
    os << r.step << ',' << r.x_id << ',' << r.acc << ',' << r.nll << ',' << r.cum_acc << ',' << r.cum_nll << ','
       << r.n_ctx << ',' << r.epoch_steps << '\n';
  }
  os.precision(old);
}

}  // namespace icft::prequential
