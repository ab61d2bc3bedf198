#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "icft/prequential/run.hpp"
#include "icft/tasks/generators.hpp"
#include "support.hpp"

namespace {

using namespace icft;
using prequential::HPConfig;
using prequential::MetricKind;
using prequential::PrequentialTrace;
using prequential::StepRecord;
using test_support::tiny_config;

const prompt::Template kTpl{"\n", "=", std::nullopt};

model::Parameters base_model(std::uint64_t seed = 2) { return model::init_params(tiny_config(16, 1, 96), seed); }

tasks::Dataset keyed(std::size_t n, std::uint64_t seed = 1) { return tasks::gen_keyed_classification(4, 2, 1, n, seed); }

HPConfig hp(double lr, int epochs, int k) {
  HPConfig h;
  h.lr = lr;
  h.epochs = epochs;
  h.k = k;
  return h;
}

PrequentialTrace trace_of(const std::vector<double>& acc) {
  PrequentialTrace t;
  double cum = 0.0;
  for (std::size_t i = 0; i < acc.size(); ++i) {
    StepRecord r;
    r.step = i + 1;
    r.acc = acc[i];
    r.nll = 1.0 - acc[i];
    cum += acc[i];
    r.cum_acc = cum;
    r.cum_nll = static_cast<double>(i + 1) - cum;
    t.steps.push_back(r);
  }
  return t;
}

TEST(Prequential, NoEpochsKeepsParametersAndFillsTrace) {
  const auto p = base_model();
  const auto t = prequential::run_prequential(p, keyed(6), hp(1e-3, 0, 2), kTpl, 0);
  EXPECT_EQ(t.final_params, p);
  EXPECT_EQ(t.gradient_steps, 0);
  ASSERT_EQ(t.size(), 6u);
  for (const auto& r : t.steps) {
    EXPECT_EQ(r.epoch_steps, 0);
    EXPECT_TRUE(std::isfinite(r.nll));
  }
}

TEST(Prequential, FirstPredictionHasNoContext) {
  const auto t = prequential::run_prequential(base_model(), keyed(1), hp(1e-3, 1, 8), kTpl, 0);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t.steps[0].n_ctx, 0u);
}

TEST(Prequential, ContextGrowsUpToK) {
  const auto t = prequential::run_prequential(base_model(), keyed(8), hp(1e-3, 0, 3), kTpl, 0);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t.steps[i].n_ctx, std::min<std::size_t>(3, i));
}

TEST(Prequential, GradientStepCountIsNTimesE) {
  int observed = 0;
  prequential::RunOptions opts;
  opts.observer = [&](const std::vector<prompt::Example>& ctx, const prompt::Example&) {
    ++observed;
    EXPECT_LE(ctx.size(), 1u);
  };
  const auto t = prequential::run_prequential(base_model(), keyed(3), hp(1e-3, 2, 1), kTpl, 0, opts);
  EXPECT_EQ(t.gradient_steps, 6);
  EXPECT_EQ(observed, 6);
}

TEST(Prequential, CumulativeSumsAreExact) {
  const auto t = prequential::run_prequential(base_model(), keyed(10), hp(3e-3, 1, 2), kTpl, 4);
  double acc = 0.0, nll = 0.0;
  for (const auto& r : t.steps) {
    acc += r.acc;
    nll += r.nll;
    EXPECT_EQ(r.cum_acc, acc);
    EXPECT_EQ(r.cum_nll, nll);
  }
}

TEST(Prequential, FrozenNoContextNllIsPerExampleSequenceNll) {
  const auto p = base_model();
  const auto d = keyed(8);
  const auto t = prequential::run_prequential(p, d, hp(1e-3, 0, 0), kTpl, 0);
  double sum = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto s = prompt::build_training_sequence({}, d.examples[i], kTpl, 96);
    sum += model::sequence_nll(p, {s.tokens, s.loss_mask});
    EXPECT_NEAR(t.steps[i].cum_nll, sum, 1e-10);
  }
}

TEST(Prequential, FutureMutationsLeavePrefixBitIdentical) {
  const auto p = base_model();
  const auto d = keyed(8);
  const auto ref = prequential::run_prequential(p, d, hp(3e-3, 2, 2), kTpl, 9);
  for (std::size_t cut = 1; cut < d.size(); cut += 3) {
    auto m = d;
    for (std::size_t j = cut; j < m.size(); ++j) {
      m.examples[j].x = "zzQQzz";
      m.examples[j].y = m.examples[j].y == "Yes" ? "No" : "Yes";
    }
    const auto t = prequential::run_prequential(p, m, hp(3e-3, 2, 2), kTpl, 9);
    for (std::size_t i = 0; i < cut; ++i) {
      EXPECT_EQ(t.steps[i].acc, ref.steps[i].acc) << i;
      EXPECT_EQ(t.steps[i].nll, ref.steps[i].nll) << i;
      EXPECT_EQ(t.steps[i].cum_nll, ref.steps[i].cum_nll) << i;
    }
  }
}

TEST(Prequential, RunsAreReproducible) {
  const auto p = base_model();
  const auto d = keyed(6);
  const auto a = prequential::run_prequential(p, d, hp(1e-3, 2, 2), kTpl, 3);
  const auto b = prequential::run_prequential(p, d, hp(1e-3, 2, 2), kTpl, 3);
  EXPECT_EQ(a.final_params, b.final_params);
  std::ostringstream sa, sb;
  prequential::write_trace_csv(sa, a);
  prequential::write_trace_csv(sb, b);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(sa.str().substr(0, sa.str().find('\n')), "step,x_id,acc,nll,cum_acc,cum_nll,n_ctx,epoch_steps");
}

TEST(Prequential, Preconditions) {
  EXPECT_THROW(prequential::run_prequential(base_model(), tasks::Dataset{}, hp(1e-3, 1, 0), kTpl, 0),
               std::invalid_argument);
  EXPECT_THROW(prequential::run_prequential(base_model(), keyed(2), hp(-1.0, 1, 0), kTpl, 0), std::invalid_argument);
}

TEST(Average, Examples) {
  EXPECT_EQ(prequential::prequential_average(trace_of({1, 1, 1, 1}), MetricKind::accuracy), 1.0);
  const auto t = trace_of({0, 1, 1});
  EXPECT_DOUBLE_EQ(prequential::prequential_average(t, MetricKind::accuracy), 2.0 / 3.0);
  EXPECT_EQ(prequential::prequential_average(t, MetricKind::accuracy, 2), 1.0);
  EXPECT_EQ(prequential::prequential_average(t, MetricKind::accuracy, 3),
            prequential::prequential_average(t, MetricKind::accuracy));
  EXPECT_DOUBLE_EQ(prequential::prequential_average(t, MetricKind::nll), 1.0 / 3.0);
  EXPECT_THROW(prequential::prequential_average(t, MetricKind::accuracy, 4), std::invalid_argument);
  EXPECT_THROW(prequential::prequential_average(t, MetricKind::accuracy, 0), std::invalid_argument);
  EXPECT_THROW(prequential::prequential_average(PrequentialTrace{}, MetricKind::accuracy), std::invalid_argument);
}

TEST(Select, SingleConfigWins) {
  const auto s = prequential::hp_select(base_model(), keyed(4), {hp(1e-3, 1, 1)}, kTpl, 0, MetricKind::accuracy);
  EXPECT_EQ(s.best, 0u);
  EXPECT_EQ(s.best_hp(), hp(1e-3, 1, 1));
  EXPECT_THROW(prequential::hp_select(base_model(), keyed(4), {}, kTpl, 0, MetricKind::accuracy),
               std::invalid_argument);
}

TEST(Select, DuplicatesKeepTheFirst) {
  const auto s = prequential::hp_select(base_model(), keyed(4), {hp(1e-3, 1, 1), hp(1e-3, 1, 1), hp(1e-3, 1, 1)},
                                        kTpl, 0, MetricKind::nll);
  EXPECT_EQ(s.best, 0u);
  EXPECT_EQ(s.scores[0], s.scores[1]);
  EXPECT_EQ(s.traces.size(), 3u);
}

TEST(Select, PicksBestScoreWithTieBreaks) {
  using prequential::preferred;
  EXPECT_TRUE(preferred(0.8, hp(1e-2, 5, 0), 0.7, hp(1e-4, 1, 0), MetricKind::accuracy));
  EXPECT_TRUE(preferred(0.7, hp(1e-2, 5, 0), 0.8, hp(1e-4, 1, 0), MetricKind::nll));
  EXPECT_TRUE(preferred(0.5, hp(1e-4, 5, 0), 0.5, hp(1e-3, 1, 0), MetricKind::accuracy));
  EXPECT_TRUE(preferred(0.5, hp(1e-3, 1, 0), 0.5, hp(1e-3, 2, 0), MetricKind::accuracy));
  EXPECT_FALSE(preferred(0.5, hp(1e-3, 1, 0), 0.5, hp(1e-3, 1, 0), MetricKind::accuracy));
}

TEST(Select, WinnerMatchesScoresAndKeepsTrainedParameters) {
  const auto p = base_model();
  const auto d = keyed(6);
  const std::vector<HPConfig> grid{hp(1e-4, 1, 1), hp(3e-3, 2, 1), hp(1e-2, 1, 1)};
  const auto s = prequential::hp_select(p, d, grid, kTpl, 5, MetricKind::nll);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    EXPECT_GE(s.scores[g], s.scores[s.best]);
    const auto solo = prequential::run_prequential(p, d, grid[g], kTpl, 5);
    EXPECT_EQ(solo.final_params, s.traces[g].final_params);
  }
  EXPECT_NE(s.winner().final_params, p);
}

TEST(Curve, SinglePermutationEqualsItsTrace) {
  const auto p = base_model();
  const auto d = keyed(6);
  const auto h = hp(1e-3, 1, 2);
  const auto c = prequential::multi_permutation_curve(p, d, h, kTpl, 1, 7);
  const auto order = derive_seed(7, {0x7065726d, 0});
  prequential::RunOptions opts;
  const auto ids = tasks::seeded_permutation(d.size(), order);
  opts.ids = ids;
  const auto t = prequential::run_prequential(p, tasks::permuted(d, order), h, kTpl, derive_seed(7, {0x72756e, 0}), opts);
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(c.mean_acc[i], t.steps[i].acc);
    EXPECT_EQ(c.mean_nll[i], t.steps[i].nll);
    EXPECT_EQ(c.var_acc[i], 0.0);
    EXPECT_EQ(t.steps[i].x_id, ids[i]);
  }
}

TEST(Curve, VarianceIsFiniteAndNonNegative) {
  const auto c = prequential::multi_permutation_curve(base_model(), keyed(5), hp(1e-3, 1, 1), kTpl, 4, 1);
  EXPECT_EQ(c.n_perms, 4u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_GE(c.var_acc[i], 0.0);
    EXPECT_LE(c.var_acc[i], 0.25);
    EXPECT_GE(c.var_nll[i], 0.0);
    EXPECT_TRUE(std::isfinite(c.var_nll[i]));
  }
  EXPECT_THROW(prequential::multi_permutation_curve(base_model(), keyed(5), hp(1e-3, 1, 1), kTpl, 0, 1),
               std::invalid_argument);
}

TEST(Curve, FirstPositionIsZeroShotAccuracy) {
  // Position 1 sees no context and untrained parameters, so its mean is the base
  // model's zero-shot accuracy over the examples that land first.
  const auto p = base_model();
  const auto d = keyed(5);
  const auto c = prequential::multi_permutation_curve(p, d, hp(1e-3, 1, 2), kTpl, 6, 2);
  double expect = 0.0;
  for (std::size_t perm = 0; perm < 6; ++perm) {
    const auto order = tasks::seeded_permutation(d.size(), derive_seed(2, {0x7065726d, perm}));
    const auto& ex = d.examples[order[0]];
    expect += strategies::answer(p, {}, ex.x, kTpl, d.labels, 48) == ex.y ? 1.0 : 0.0;
  }
  EXPECT_DOUBLE_EQ(c.mean_acc[0], expect / 6.0);
}

}  // namespace
