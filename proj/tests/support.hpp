#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "icft/model/transformer.hpp"
#include "icft/numerics/graph.hpp"
#include "icft/numerics/tensor.hpp"
#include "icft/rng.hpp"

namespace icft::test_support {

using numerics::Graph;
using numerics::Tensor;
using numerics::Var;

inline model::ModelConfig tiny_config(int d_model = 16, int n_layers = 1, int max_seq_len = 16, int n_heads = 2) {
  model::ModelConfig c;
  c.d_model = d_model;
  c.n_layers = n_layers;
  c.n_heads = n_heads;
  c.d_ff = 2 * d_model;
  c.max_seq_len = max_seq_len;
  return c;
}

inline Tensor random_tensor(numerics::Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  Tensor t(std::move(shape), 0.0, requires_grad);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

inline Tokens random_tokens(std::size_t n, Rng& rng, int vocab = 259) {
  std::uniform_int_distribution<int> pick(0, vocab - 1);
  Tokens t(n);
  for (auto& v : t) v = pick(rng);
  return t;
}

inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

/// Elementwise relative error with a small absolute floor on the denominator.
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Σ w ⊙ x for a fixed random weight tensor, so a scalar loss probes every output entry.
inline Var weighted_sum(Graph& g, Var x, const Tensor& w) {
  const Tensor& xv = g.value(x);
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * w[i];
  return g.record(Tensor::scalar(s), g.needs_grad(x), [x, w](Graph& gr, std::span<const double> up) {
    auto gx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += up[0] * w[i];
  });
}

using GraphFn = std::function<Var(Graph&, const std::vector<Var>&)>;

/// Largest elementwise relative error between reverse-mode gradients and central
/// differences of the scalar built by `fn` over `inputs`.
inline double max_fd_error(std::vector<Tensor> inputs, const GraphFn& fn, double h = 1e-5, double floor = 1e-6) {
  auto eval = [&](bool grads, std::vector<Tensor>* out) {
    Graph g(grads);
    std::vector<Var> vars;
    for (auto& t : inputs) vars.push_back(g.leaf(t));
    const Var loss = fn(g, vars);
    const double v = g.value(loss).item();
    if (grads) {
      g.backward(loss);
      for (auto& var : vars) out->push_back(g.grad(var));
    }
    return v;
  };
  std::vector<Tensor> analytic;
  eval(true, &analytic);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].requires_grad()) continue;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + h;
      const double up = eval(false, nullptr);
      inputs[k][i] = orig - h;
      const double down = eval(false, nullptr);
      inputs[k][i] = orig;
      worst = std::max(worst, rel_err(analytic[k][i], (up - down) / (2 * h), floor));
    }
  }
  return worst;
}

struct ParamFdReport {
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
};

/// Central-difference check of every entry of every trainable tensor against
/// sequence_nll_and_grad.
inline ParamFdReport param_fd_check(model::Parameters p, const model::MaskedTokens& seq, double h = 1e-5,
                                    double floor = 1e-6) {
  const auto lg = model::sequence_nll_and_grad(p, seq);
  ParamFdReport r;
  for (const auto& [name, grad] : lg.grads) {
    auto& t = p.tensors.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      auto at = [&](double x) {
        t[i] = x;
        return model::sequence_nll(p, seq);
      };
      const double fd = (at(orig + h) - at(orig - h)) / (2 * h);
      t[i] = orig;
      const double e = rel_err(grad[i], fd, floor);
      ++r.checked;
      if (e > r.worst) {
        r.worst = e;
        r.worst_name = name;
      }
    }
  }
  return r;
}

}  // namespace icft::test_support
