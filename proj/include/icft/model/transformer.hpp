#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "icft/model/parameters.hpp"
#include "icft/numerics/graph.hpp"
#include "icft/numerics/ops.hpp"
#include "icft/types.hpp"

namespace icft::model {

using numerics::Graph;
using numerics::Var;

/// Parameter leaves bound into one graph, keyed by parameter name.
using BoundParams = std::map<std::string, Var>;

namespace detail {

inline void check_tokens(const ModelConfig& cfg, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw ModelError("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw ModelError("forward: sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= cfg.vocab_size) {
      throw ModelError("forward: token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                       " outside vocabulary of " + std::to_string(cfg.vocab_size));
    }
  }
}

/// x·W, plus scale·(x·A)·B when an adapter is attached to W.
inline Var project(Graph& g, const Parameters& p, const BoundParams& bound, Var x, const std::string& name) {
  Var y = numerics::matmul(g, x, bound.at(name));
  if (p.lora) {
    auto a = bound.find(lora_a_name(name));
    if (a != bound.end()) {
      Var low = numerics::matmul(g, numerics::matmul(g, x, a->second), bound.at(lora_b_name(name)));
      y = numerics::add(g, y, numerics::scale(g, low, p.lora->scaling()));
    }
  }
  return y;
}

}  // namespace detail

/// Binds every parameter as a graph leaf; trainable tensors receive gradients.
/// `p` must outlive the graph.
inline BoundParams bind(Graph& g, const Parameters& p) {
  BoundParams out;
  for (const auto& [name, t] : p.tensors) out.emplace(name, g.borrow(t));
  return out;
}

/// Pre-norm decoder-only transformer: logits [T x V] where row t predicts token t+1.
inline Var forward_graph(Graph& g, const Parameters& p, const BoundParams& bound, std::span<const TokenId> tokens) {
  const auto& cfg = p.config;
  detail::check_tokens(cfg, tokens);
  std::vector<TokenId> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), 0);

  Var h = numerics::add(g, numerics::embedding(g, bound.at("tok_emb"), tokens),
                        numerics::embedding(g, bound.at("pos_emb"), positions));
  for (int l = 0; l < cfg.n_layers; ++l) {
    Var a = numerics::rms_norm(g, h, bound.at(layer_name(l, "ln1")));
    Var q = detail::project(g, p, bound, a, layer_name(l, "attn.wq"));
    Var k = detail::project(g, p, bound, a, layer_name(l, "attn.wk"));
    Var v = detail::project(g, p, bound, a, layer_name(l, "attn.wv"));
    Var att = numerics::causal_attention(g, q, k, v, static_cast<std::size_t>(cfg.n_heads));
    h = numerics::add(g, h, detail::project(g, p, bound, att, layer_name(l, "attn.wo")));

    Var m = numerics::rms_norm(g, h, bound.at(layer_name(l, "ln2")));
    Var f = numerics::gelu(g, detail::project(g, p, bound, m, layer_name(l, "mlp.w1")));
    h = numerics::add(g, h, detail::project(g, p, bound, f, layer_name(l, "mlp.w2")));
  }
  Var out = numerics::rms_norm(g, h, bound.at("ln_f"));
  return numerics::matmul(g, out, bound.at("unembed"));
}

/// Evaluation-mode forward pass.
inline Tensor forward_logits(const Parameters& p, std::span<const TokenId> tokens) {
  Graph g(false);
  const auto bound = bind(g, p);
  return g.value(forward_graph(g, p, bound, tokens));
}

/// Masked next-token NLL with inputs and targets given separately
/// (row t of `inputs` is scored against targets[t]).
inline double masked_nll(const Parameters& p, std::span<const TokenId> inputs, std::span<const TokenId> targets,
                         std::span<const std::uint8_t> mask) {
  Graph g(false);
  const auto bound = bind(g, p);
  Var logits = forward_graph(g, p, bound, inputs);
  return g.value(numerics::softmax_cross_entropy_masked(g, logits, targets, mask)).item();
}

struct LossAndGrad {
  double loss = 0.0;
  Gradients grads;  // one entry per trainable tensor
};

inline LossAndGrad masked_nll_and_grad(const Parameters& p, std::span<const TokenId> inputs,
                                       std::span<const TokenId> targets, std::span<const std::uint8_t> mask) {
  Graph g(true);
  const auto bound = bind(g, p);
  Var logits = forward_graph(g, p, bound, inputs);
  Var loss = numerics::softmax_cross_entropy_masked(g, logits, targets, mask);
  g.backward(loss);
  LossAndGrad out{g.value(loss).item(), {}};
  for (const auto& [name, t] : p.tensors)
    if (t.requires_grad()) out.grads.emplace(name, g.grad(bound.at(name)));
  return out;
}

/// Token sequence with a per-token loss mask; mask[t] = 1 means token t is a
/// scored target. Position 0 has no predecessor and is never scored.
struct MaskedTokens {
  std::span<const TokenId> tokens;
  std::span<const std::uint8_t> mask;
};

namespace detail {

inline void check_masked(const MaskedTokens& s) {
  if (s.tokens.size() != s.mask.size()) throw ModelError("token and mask lengths differ");
  if (s.tokens.size() < 2) throw ModelError("need at least two tokens to score a prediction");
}

}  // namespace detail

/// Mean masked-token NLL; logits at t score token t+1.
inline double sequence_nll(const Parameters& p, const MaskedTokens& s) {
  detail::check_masked(s);
  return masked_nll(p, s.tokens.first(s.tokens.size() - 1), s.tokens.subspan(1), s.mask.subspan(1));
}

inline LossAndGrad sequence_nll_and_grad(const Parameters& p, const MaskedTokens& s) {
  detail::check_masked(s);
  return masked_nll_and_grad(p, s.tokens.first(s.tokens.size() - 1), s.tokens.subspan(1), s.mask.subspan(1));
}

/// Index of the largest entry, lowest index on ties.
inline std::size_t argmax(std::span<const double> xs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (xs[i] > xs[best]) best = i;
  return best;
}

/// Temperature-0 decoding. Stops after emitting `stop` (which is not returned),
/// after `max_new` tokens, or when the context window is full.
inline Tokens greedy_continuation(const Parameters& p, std::span<const TokenId> prefix, TokenId stop, int max_new) {
  if (prefix.empty()) throw ModelError("greedy_continuation: empty prefix");
  Tokens seq(prefix.begin(), prefix.end());
  Tokens out;
  const auto limit = static_cast<std::size_t>(p.config.max_seq_len);
  for (int n = 0; n < max_new && seq.size() < limit; ++n) {
    const Tensor logits = forward_logits(p, seq);
    const std::size_t V = logits.cols();
    const auto last = logits.data().subspan((logits.rows() - 1) * V, V);
    const auto next = static_cast<TokenId>(argmax(last));
    if (next == stop) break;
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

/// Total log-probability of each label continuation given `prefix`.
inline std::vector<double> score_labels(const Parameters& p, std::span<const TokenId> prefix,
                                        const std::vector<Tokens>& labels) {
  if (labels.empty()) throw ModelError("score_labels: empty label list");
  if (prefix.empty()) throw ModelError("score_labels: empty prefix");
  std::vector<double> scores;
  scores.reserve(labels.size());
  for (const auto& label : labels) {
    if (label.empty()) throw ModelError("score_labels: empty label");
    Tokens seq(prefix.begin(), prefix.end());
    seq.insert(seq.end(), label.begin(), label.end());
    const Tensor logits = forward_logits(p, std::span<const TokenId>(seq).first(seq.size() - 1));
    const std::size_t V = logits.cols();
    double total = 0.0;
    for (std::size_t i = 0; i < label.size(); ++i) {
      const std::size_t row = prefix.size() - 1 + i;
      total += numerics::log_softmax(logits.data().subspan(row * V, V))[static_cast<std::size_t>(label[i])];
    }
    scores.push_back(total);
  }
  return scores;
}

}  // namespace icft::model
