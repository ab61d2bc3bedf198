#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "icft/model/transformer.hpp"
#include "icft/optim/optimizers.hpp"
#include "icft/prequential/hp_config.hpp"
#include "icft/prompt/prompt.hpp"
#include "icft/rng.hpp"
#include "icft/runner/parse_response.hpp"
#include "icft/tasks/dataset.hpp"

namespace icft::strategies {

using prompt::Example;
using prequential::HPConfig;

enum class StrategyKind { icl_only, ft_only, icl_ft };
enum class TrainingMode { prequential, iid };

inline std::string_view to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::icl_only: return "ICL_ONLY";
    case StrategyKind::ft_only: return "FT_ONLY";
    default: return "ICL_FT";
  }
}

inline StrategyKind strategy_from_string(std::string_view s) {
  if (s == "ICL_ONLY" || s == "icl_only") return StrategyKind::icl_only;
  if (s == "FT_ONLY" || s == "ft_only") return StrategyKind::ft_only;
  if (s == "ICL_FT" || s == "icl_ft") return StrategyKind::icl_ft;
  throw std::invalid_argument("unknown strategy '" + std::string(s) + "'");
}

inline bool trains(StrategyKind k) { return k != StrategyKind::icl_only; }
inline bool uses_context(StrategyKind k) { return k != StrategyKind::ft_only; }

// Seed-stream tags.
inline constexpr std::uint64_t kTagPredict = 0x70726564;  // "pred"
inline constexpr std::uint64_t kTagTrain = 0x7472616e;    // "tran"
inline constexpr std::uint64_t kTagOrder = 0x6f726472;    // "ordr"
inline constexpr std::uint64_t kTagAdapter = 0x61646170;  // "adap"

/// Everything needed to answer a query: parameters, context policy and label set.
/// Holds non-owning references to the parameters and training set.
struct Predictor {
  const model::Parameters* params = nullptr;
  StrategyKind kind = StrategyKind::icl_only;
  std::size_t k_eval = 0;
  prompt::Template tpl;
  const tasks::Dataset* train = nullptr;
  std::optional<std::vector<std::string>> labels;  // MAP over these when set
  bool resample_context = true;                    // fresh context per query
  int max_new_tokens = 48;

  void validate() const {
    if (!params) throw std::invalid_argument("predictor: no parameters");
    if (kind != StrategyKind::ft_only && k_eval > 0 && (!train || train->empty())) {
      throw std::invalid_argument("predictor: in-context strategies need a non-empty train set when k_eval > 0");
    }
  }
};

struct Prediction {
  std::string text;
  std::size_t n_context = 0;
};

inline std::vector<Tokens> label_tokens(const std::vector<std::string>& labels) {
  std::vector<Tokens> out;
  for (const auto& l : labels) {
    auto t = prompt::tokenize(l);
    t.push_back(prompt::kEos);
    out.push_back(std::move(t));
  }
  return out;
}

/// Answers `x` for already-chosen context examples.
inline std::string answer(const model::Parameters& params, const std::vector<Example>& ctx, std::string_view x,
                          const prompt::Template& tpl, const std::optional<std::vector<std::string>>& labels,
                          int max_new_tokens) {
  const auto max_len = static_cast<std::size_t>(params.config.max_seq_len);
  const Tokens prefix = prompt::build_eval_prompt(ctx, x, tpl, max_len);
  if (labels) {
    const auto scores = model::score_labels(params, prefix, label_tokens(*labels));
    return (*labels)[model::argmax(scores)];
  }
  return prompt::detokenize(model::greedy_continuation(params, prefix, prompt::kEos, max_new_tokens));
}

/// Samples min(k_eval, |train|) context examples (seeded), then MAP over the
/// labels for classification tasks or greedy decoding otherwise.
inline Prediction predict(const Predictor& p, std::string_view x, std::uint64_t seed) {
  p.validate();
  std::vector<Example> ctx;
  if (p.k_eval > 0 && p.train) {
    Rng rng = make_rng(seed, {kTagPredict});
    ctx = tasks::sample_context(p.train->examples, p.k_eval, rng);
  }
  return {answer(*p.params, ctx, x, p.tpl, p.labels, p.max_new_tokens), ctx.size()};
}

struct EvalRecord {
  std::string x;
  std::string y;
  std::string raw;
  std::string parsed;
  bool correct = false;
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<EvalRecord> records;
};

inline bool matches(std::string_view predicted, std::string_view target) {
  return runner::parse_response(predicted) == runner::trim(target);
}

/// Any answering rule: query text and per-query seed in, raw response out.
using Answerer = std::function<std::string(std::string_view x, std::uint64_t seed)>;

/// Query j uses seed derive_seed(seed, {j}) unless `resample_context` is off, in
/// which case every query gets `seed` (and so one shared context).
inline EvalResult evaluate(const Answerer& answer_fn, const tasks::Dataset& test, std::uint64_t seed,
                           bool resample_context = true) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  EvalResult res;
  std::size_t hits = 0;
  for (std::size_t j = 0; j < test.size(); ++j) {
    const auto& ex = test.examples[j];
    const std::uint64_t s = resample_context ? derive_seed(seed, {j}) : seed;
    EvalRecord r{ex.x, ex.y, answer_fn(ex.x, s), "", false};
    r.parsed = runner::parse_response(r.raw);
    r.correct = r.parsed == runner::trim(ex.y);
    hits += r.correct;
    res.records.push_back(std::move(r));
  }
  res.accuracy = static_cast<double>(hits) / static_cast<double>(test.size());
  return res;
}

inline EvalResult evaluate(const Predictor& p, const tasks::Dataset& test, std::uint64_t seed) {
  p.validate();
  return evaluate([&p](std::string_view x, std::uint64_t s) { return predict(p, x, s).text; }, test, seed,
                  p.resample_context);
}

/// Called with the exact (context, target) pair of every gradient step.
using StepObserver = std::function<void(const std::vector<Example>& ctx, const Example& target)>;

/// A model being fine-tuned: parameters plus the optimizer state of one run.
class Trainer {
 public:
  Trainer(model::Parameters params, const HPConfig& hp, std::uint64_t seed) : opt_(hp.optimizer), hp_(hp) {
    hp.validate();
    if (hp.lora_rank) {
      model::LoRAConfig lc;
      lc.rank = *hp.lora_rank;
      params = model::attach_lora(std::move(params), lc, derive_seed(seed, {kTagAdapter})).params;
    }
    params_ = std::move(params);
  }

  /// One gradient step on ctx ⊕ target with loss on every response.
  double step(const std::vector<Example>& ctx, const Example& target, const prompt::Template& tpl) {
    const auto seq = prompt::build_training_sequence(ctx, target, tpl, static_cast<std::size_t>(params_.config.max_seq_len));
    auto lg = model::sequence_nll_and_grad(params_, {seq.tokens, seq.loss_mask});
    opt_.step(params_, lg.grads, hp_.lr);
    if (observer_) observer_(ctx, target);
    return lg.loss;
  }

  void set_observer(StepObserver obs) { observer_ = std::move(obs); }
  const model::Parameters& params() const { return params_; }
  model::Parameters release() && { return std::move(params_); }
  std::int64_t steps() const { return opt_.steps(); }

 private:
  model::Parameters params_;
  optim::Optimizer opt_;
  HPConfig hp_;
  StepObserver observer_;
};

struct IidResult {
  model::Parameters params;
  std::int64_t steps = 0;
};

/// Standard i.i.d. fine-tuning: each epoch visits the shuffled train set once;
/// every target gets min(K, |train|-1) context examples drawn from the rest of
/// the train set (K forced to 0 for FT_ONLY).
inline IidResult train_iid(const model::Parameters& base, const tasks::Dataset& train, const HPConfig& hp,
                           StrategyKind kind, const prompt::Template& tpl, std::uint64_t seed,
                           StepObserver observer = {}) {
  if (train.empty()) throw std::invalid_argument("train_iid: empty train set");
  if (!trains(kind)) throw std::invalid_argument("train_iid: ICL_ONLY has no training mode");
  Trainer trainer(base, hp, seed);
  trainer.set_observer(std::move(observer));
  const std::size_t k = kind == StrategyKind::ft_only ? 0 : static_cast<std::size_t>(hp.k);
  const std::size_t n = train.size();
  for (int e = 0; e < hp.epochs; ++e) {
    const auto order = tasks::seeded_permutation(n, derive_seed(seed, {kTagOrder, static_cast<std::uint64_t>(e)}));
    for (std::size_t pos = 0; pos < n; ++pos) {
      const std::size_t target = order[pos];
      Rng rng = make_rng(seed, {kTagTrain, static_cast<std::uint64_t>(e), pos});
      std::vector<Example> ctx;
      for (auto i : tasks::sample_indices(n - 1, k, rng)) ctx.push_back(train.examples[i < target ? i : i + 1]);
      trainer.step(ctx, train.examples[target], tpl);
    }
  }
  const auto steps = trainer.steps();
  return {std::move(trainer).release(), steps};
}

}  // namespace icft::strategies
