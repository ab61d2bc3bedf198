#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

#include "icft/model/checkpoint.hpp"
#include "icft/model/transformer.hpp"
#include "icft/optim/optimizers.hpp"
#include "support.hpp"

using namespace icft;
using namespace icft::model;
using icft::test_support::random_tokens;
using icft::test_support::tiny_config;

namespace {

/// Residual stream is the constant all-ones vector and token `a` gets the largest logit.
Parameters forcing_model(TokenId a) {
  auto p = init_params(tiny_config(8, 1, 12), 3);
  for (auto& v : p.at("tok_emb").data()) v = 1.0;
  p.at("pos_emb").fill(0.0);
  p.at(layer_name(0, "attn.wo")).fill(0.0);
  p.at(layer_name(0, "mlp.w2")).fill(0.0);
  p.at("unembed").fill(0.0);
  const std::size_t V = p.config.vocab_size;
  for (std::size_t j = 0; j < 8; ++j) p.at("unembed")[j * V + static_cast<std::size_t>(a)] = 1.0;
  return p;
}

}  // namespace

TEST(Init, SameSeedIsBitIdentical) {
  const auto cfg = tiny_config();
  EXPECT_EQ(init_params(cfg, 11), init_params(cfg, 11));
  std::ostringstream a, b;
  write_checkpoint(a, init_params(cfg, 11));
  write_checkpoint(b, init_params(cfg, 11));
  EXPECT_EQ(a.str(), b.str());
}

TEST(Init, DifferentSeedsDiffer) {
  const auto cfg = tiny_config();
  EXPECT_FALSE(init_params(cfg, 1) == init_params(cfg, 2));
}

TEST(Init, ProjectionStdNearInverseSqrtDModel) {
  ModelConfig cfg;
  cfg.d_model = 64;
  const auto p = init_params(cfg, 5);
  double ss = 0.0;
  std::size_t n = 0;
  for (const auto& [name, t] : p.tensors) {
    if (name.find("attn.w") == std::string::npos && name.find("mlp.w") == std::string::npos) continue;
    for (double v : t.data()) ss += v * v;
    n += t.size();
  }
  ASSERT_GE(n, 10000u);
  const double sd = std::sqrt(ss / static_cast<double>(n));
  EXPECT_NEAR(sd, 1.0 / 8.0, 0.2 / 8.0);
  for (int l = 0; l < cfg.n_layers; ++l)
    for (double v : p.at(layer_name(l, "ln1")).data()) EXPECT_EQ(v, 1.0);
}

TEST(Forward, AppendingASuffixLeavesEarlierLogitsUnchanged) {
  Rng rng(2);
  const auto p = init_params(tiny_config(16, 2, 16), 4);
  const auto tokens = random_tokens(9, rng);
  auto longer = tokens;
  longer.push_back(42);
  longer.push_back(7);
  const auto a = forward_logits(p, tokens);
  const auto b = forward_logits(p, longer);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]) << i;
}

TEST(Forward, SingleTokenShape) {
  const auto p = init_params(tiny_config(), 1);
  const Tokens one = {65};
  const auto logits = forward_logits(p, one);
  EXPECT_EQ(logits.shape(), (numerics::Shape{1, 259}));
}

TEST(Forward, RandomInputsGiveFiniteLogits) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = init_params(tiny_config(16, 1, 16), static_cast<std::uint64_t>(trial));
    const auto tokens = random_tokens(1 + trial % 16, rng);
    for (double v : forward_logits(p, tokens).data()) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(Forward, RejectsBadTokens) {
  const auto p = init_params(tiny_config(16, 1, 4), 1);
  EXPECT_THROW(forward_logits(p, Tokens{1, 259}), ModelError);
  EXPECT_THROW(forward_logits(p, Tokens{1, 2, 3, 4, 5}), ModelError);
  EXPECT_THROW(forward_logits(p, Tokens{}), ModelError);
}

TEST(SequenceNll, UniformModelGivesLogV) {
  auto cfg = tiny_config(8, 1, 8);
  cfg.vocab_size = 4;
  auto p = init_params(cfg, 1);
  p.at("unembed").fill(0.0);
  const Tokens t = {0, 1, 2, 3};
  const std::vector<std::uint8_t> m = {0, 1, 1, 1};
  EXPECT_NEAR(sequence_nll(p, {t, m}), std::log(4.0), 1e-12);
}

TEST(SequenceNll, UnmaskedTargetIdentityIsIrrelevant) {
  Rng rng(4);
  const auto p = init_params(tiny_config(), 2);
  const auto inputs = random_tokens(6, rng);
  auto targets = random_tokens(6, rng);
  const std::vector<std::uint8_t> mask = {0, 1, 0, 1, 1, 0};
  const double before = masked_nll(p, inputs, targets, mask);
  targets[0] = 5;
  targets[2] = 250;
  targets[5] = 17;
  EXPECT_EQ(before, masked_nll(p, inputs, targets, mask));
  targets[1] = (targets[1] + 1) % 259;
  EXPECT_NE(before, masked_nll(p, inputs, targets, mask));
}

TEST(SequenceNll, MatchesManualPerTokenComputation) {
  const auto p = init_params(tiny_config(), 6);
  const Tokens t = {72, 105, 61, 89, 101, 257};
  const std::vector<std::uint8_t> m = {0, 0, 0, 1, 1, 1};
  double total = 0.0;
  for (std::size_t i = 3; i < 6; ++i) {
    const auto logits = forward_logits(p, std::span<const TokenId>(t).first(i));
    const std::size_t V = logits.cols();
    const auto row = logits.data().subspan((i - 1) * V, V);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    total += mx + std::log(z) - row[static_cast<std::size_t>(t[i])];
  }
  EXPECT_NEAR(sequence_nll(p, {t, m}), total / 3.0, 1e-12);
}

TEST(SequenceNll, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  const auto p = init_params(tiny_config(8, 1, 8), 9);
  const auto t = random_tokens(7, rng);
  const std::vector<std::uint8_t> m = {0, 0, 1, 1, 0, 1, 1};
  const auto r = test_support::param_fd_check(p, {t, m});
  EXPECT_LT(r.worst, 1e-4) << r.worst_name;
}

TEST(Greedy, ForcedTokenRepeatsMaxNewTimes) {
  const auto p = forcing_model(65);
  const auto out = greedy_continuation(p, Tokens{1, 2}, 257, 5);
  EXPECT_EQ(out, Tokens(5, 65));
}

TEST(Greedy, StopsAtStopToken) {
  const auto p = forcing_model(257);
  EXPECT_TRUE(greedy_continuation(p, Tokens{1}, 257, 5).empty());
}

TEST(Greedy, NearlyFullContextYieldsAtMostOneToken) {
  const auto p = forcing_model(65);
  const Tokens prefix(static_cast<std::size_t>(p.config.max_seq_len - 1), 3);
  EXPECT_LE(greedy_continuation(p, prefix, 257, 10).size(), 1u);
}

TEST(Greedy, Deterministic) {
  Rng rng(8);
  const auto p = init_params(tiny_config(16, 1, 24), 8);
  const auto prefix = random_tokens(5, rng);
  EXPECT_EQ(greedy_continuation(p, prefix, 257, 10), greedy_continuation(p, prefix, 257, 10));
}

TEST(ScoreLabels, SingletonAndTies) {
  const auto p = init_params(tiny_config(), 1);
  const Tokens prefix = {10, 20};
  EXPECT_EQ(argmax(score_labels(p, prefix, {{65, 66}})), 0u);
  const auto s = score_labels(p, prefix, {{70, 71}, {70, 71}});
  EXPECT_EQ(s[0], s[1]);
  EXPECT_EQ(argmax(s), 0u);
  EXPECT_THROW(score_labels(p, prefix, {}), ModelError);
}

TEST(ScoreLabels, AgreesWithTokenByTokenEnumeration) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = init_params(tiny_config(8, 1, 16), static_cast<std::uint64_t>(trial));
    const auto prefix = random_tokens(4, rng);
    std::vector<Tokens> labels;
    for (int l = 0; l < 4; ++l) labels.push_back(random_tokens(1 + (trial + l) % 4, rng));
    std::vector<double> brute;
    for (const auto& label : labels) {
      double lp = 0.0;
      Tokens seq = prefix;
      for (TokenId tok : label) {
        const auto logits = forward_logits(p, seq);
        const std::size_t V = logits.cols();
        lp += numerics::log_softmax(logits.data().subspan((seq.size() - 1) * V, V))[static_cast<std::size_t>(tok)];
        seq.push_back(tok);
      }
      brute.push_back(lp);
    }
    const auto scores = score_labels(p, prefix, labels);
    for (std::size_t i = 0; i < labels.size(); ++i) EXPECT_NEAR(scores[i], brute[i], 1e-10);
    EXPECT_EQ(argmax(scores), argmax(brute));
  }
}

TEST(Lora, AttachAtInitKeepsLogitsBitIdentical) {
  Rng rng(10);
  const auto base = init_params(tiny_config(16, 2, 16), 3);
  LoRAConfig lc;
  lc.rank = 4;
  const auto att = attach_lora(base, lc, 5);
  const auto tokens = random_tokens(10, rng);
  EXPECT_EQ(forward_logits(base, tokens), forward_logits(att.params, tokens));
  EXPECT_EQ(att.trainable.size(), 2u * 4u * 2u);
  EXPECT_EQ(att.params.trainable_names().size(), att.trainable.size());
}

TEST(Lora, OnlyAdaptersChangeAndDeltaRankIsBounded) {
  Rng rng(11);
  const auto base = init_params(tiny_config(16, 1, 16), 3);
  LoRAConfig lc;
  lc.rank = 2;
  auto p = attach_lora(base, lc, 5).params;
  const auto before = p;
  const auto t = random_tokens(8, rng);
  const std::vector<std::uint8_t> m = {0, 1, 1, 1, 1, 1, 1, 1};
  optim::Optimizer opt(optim::OptimizerKind::adam);
  for (int s = 0; s < 3; ++s) {
    const auto lg = sequence_nll_and_grad(p, {t, m});
    for (const auto& [name, g] : lg.grads) EXPECT_TRUE(name.find(".lora_") != std::string::npos) << name;
    opt.step(p, lg.grads, 1e-2);
  }
  bool b_changed = false;
  for (const auto& [name, tensor] : p.tensors) {
    if (name.find(".lora_") == std::string::npos) {
      EXPECT_EQ(tensor, before.at(name)) << name;
    } else if (name.ends_with(".lora_b")) {
      b_changed |= !(tensor == before.at(name));
    }
  }
  EXPECT_TRUE(b_changed);
  for (const auto& target : lora_targets(p.config, lc)) {
    const auto& A = p.at(lora_a_name(target));
    const auto& B = p.at(lora_b_name(target));
    Eigen::MatrixXd a(A.shape()[0], A.shape()[1]), b(B.shape()[0], B.shape()[1]);
    for (std::size_t i = 0; i < A.size(); ++i) a(i / A.cols(), i % A.cols()) = A[i];
    for (std::size_t i = 0; i < B.size(); ++i) b(i / B.cols(), i % B.cols()) = B[i];
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(lc.scaling() * a * b);
    const auto& sv = svd.singularValues();
    int rank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i) rank += sv(i) > 1e-10 * sv(0);
    EXPECT_LE(rank, lc.rank) << target;
  }
}

TEST(Lora, RankMustBeBelowTargetDims) {
  LoRAConfig lc;
  lc.rank = 16;
  EXPECT_THROW(attach_lora(init_params(tiny_config(16), 1), lc, 1), ModelError);
}

TEST(Checkpoint, RoundTripsWithAndWithoutAdapters) {
  const auto p = init_params(tiny_config(), 12);
  std::stringstream ss;
  write_checkpoint(ss, p);
  EXPECT_EQ(read_checkpoint(ss), p);
  LoRAConfig lc;
  lc.rank = 3;
  const auto q = attach_lora(p, lc, 2).params;
  std::stringstream ss2;
  write_checkpoint(ss2, q);
  const auto back = read_checkpoint(ss2);
  EXPECT_EQ(back, q);
  EXPECT_FALSE(back.at("tok_emb").requires_grad());
}

TEST(Checkpoint, RejectsCorruptInput) {
  std::stringstream bad("NOTACKPT");
  EXPECT_THROW(read_checkpoint(bad), CheckpointError);
  std::stringstream ss;
  write_checkpoint(ss, init_params(tiny_config(), 1));
  const auto full = ss.str();
  std::stringstream truncated(full.substr(0, full.size() / 2));
  EXPECT_THROW(read_checkpoint(truncated), std::exception);
}
