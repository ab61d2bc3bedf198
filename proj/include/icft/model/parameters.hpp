#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "icft/numerics/tensor.hpp"
#include "icft/rng.hpp"

namespace icft::model {

using numerics::Shape;
using numerics::Tensor;

class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  int vocab_size = 259;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq_len = 128;

  void validate() const {
    if (vocab_size < 2 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || max_seq_len < 1) {
      throw ModelError("model config: all sizes must be positive (vocab >= 2)");
    }
    if (d_model % n_heads != 0) {
      throw ModelError("model config: d_model=" + std::to_string(d_model) + " not divisible by n_heads=" +
                       std::to_string(n_heads));
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Low-rank adapters on the MLP matrices and the K/V projections.
struct LoRAConfig {
  int rank = 16;
  bool target_mlp = true;
  bool target_kv = true;

  /// alpha / rank with alpha fixed at 16.
  double scaling() const { return 16.0 / static_cast<double>(rank); }

  friend bool operator==(const LoRAConfig&, const LoRAConfig&) = default;
};

inline std::string layer_name(int layer, const char* leaf) {
  return "layers." + std::to_string(layer) + "." + leaf;
}

inline std::string lora_a_name(const std::string& base) { return base + ".lora_a"; }
inline std::string lora_b_name(const std::string& base) { return base + ".lora_b"; }

/// Named model tensors. `requires_grad` on each tensor marks the trainable set.
struct Parameters {
  ModelConfig config;
  std::optional<LoRAConfig> lora;
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ModelError("no parameter named '" + name + "'");
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ModelError("no parameter named '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : tensors)
      if (t.requires_grad()) out.push_back(name);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors) n += t.size();
    return n;
  }

  friend bool operator==(const Parameters& a, const Parameters& b) {
    return a.config == b.config && a.lora == b.lora && a.tensors == b.tensors;
  }
};

using Gradients = std::map<std::string, Tensor>;

/// Names of the matrices adapters attach to under `cfg`.
inline std::vector<std::string> lora_targets(const ModelConfig& mc, const LoRAConfig& cfg) {
  std::vector<std::string> out;
  for (int l = 0; l < mc.n_layers; ++l) {
    if (cfg.target_kv) {
      out.push_back(layer_name(l, "attn.wk"));
      out.push_back(layer_name(l, "attn.wv"));
    }
    if (cfg.target_mlp) {
      out.push_back(layer_name(l, "mlp.w1"));
      out.push_back(layer_name(l, "mlp.w2"));
    }
  }
  return out;
}

namespace detail {

inline Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape), 0.0, true);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace detail

/// Deterministic initialization: every matrix ~ N(0, 1/d_model), norm gains = 1.
inline Parameters init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Parameters p;
  p.config = config;
  const auto V = static_cast<std::size_t>(config.vocab_size);
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto f = static_cast<std::size_t>(config.d_ff);
  const auto S = static_cast<std::size_t>(config.max_seq_len);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  Rng rng = make_rng(seed, {0x696e6974});  // "init"

  p.tensors["tok_emb"] = detail::gaussian({V, d}, stddev, rng);
  p.tensors["pos_emb"] = detail::gaussian({S, d}, stddev, rng);
  for (int l = 0; l < config.n_layers; ++l) {
    p.tensors[layer_name(l, "ln1")] = Tensor({d}, 1.0, true);
    p.tensors[layer_name(l, "attn.wq")] = detail::gaussian({d, d}, stddev, rng);
    p.tensors[layer_name(l, "attn.wk")] = detail::gaussian({d, d}, stddev, rng);
    p.tensors[layer_name(l, "attn.wv")] = detail::gaussian({d, d}, stddev, rng);
    p.tensors[layer_name(l, "attn.wo")] = detail::gaussian({d, d}, stddev, rng);
    p.tensors[layer_name(l, "ln2")] = Tensor({d}, 1.0, true);
    p.tensors[layer_name(l, "mlp.w1")] = detail::gaussian({d, f}, stddev, rng);
    p.tensors[layer_name(l, "mlp.w2")] = detail::gaussian({f, d}, stddev, rng);
  }
  p.tensors["ln_f"] = Tensor({d}, 1.0, true);
  p.tensors["unembed"] = detail::gaussian({d, V}, stddev, rng);
  return p;
}

struct LoRAAttachment {
  Parameters params;
  std::vector<std::string> trainable;
};

/// Adds adapters (A random, B zero) to each target and freezes every base tensor.
inline LoRAAttachment attach_lora(Parameters params, const LoRAConfig& cfg, std::uint64_t seed) {
  if (params.lora) throw ModelError("attach_lora: adapters already attached");
  if (cfg.rank < 1) throw ModelError("attach_lora: rank must be >= 1");
  const auto targets = lora_targets(params.config, cfg);
  for (const auto& name : targets) {
    const auto& w = params.at(name);
    const std::size_t min_dim = std::min(w.shape()[0], w.shape()[1]);
    if (static_cast<std::size_t>(cfg.rank) >= min_dim) {
      throw ModelError("attach_lora: rank " + std::to_string(cfg.rank) + " must be below the smallest dimension (" +
                       std::to_string(min_dim) + ") of " + name);
    }
  }
  for (auto& [name, t] : params.tensors) t.set_requires_grad(false);
  Rng rng = make_rng(seed, {0x6c6f7261});  // "lora"
  std::vector<std::string> trainable;
  const auto r = static_cast<std::size_t>(cfg.rank);
  for (const auto& name : targets) {
    const auto in = params.at(name).shape()[0];
    const auto out = params.at(name).shape()[1];
    params.tensors[lora_a_name(name)] = detail::gaussian({in, r}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    params.tensors[lora_b_name(name)] = Tensor({r, out}, 0.0, true);
    trainable.push_back(lora_a_name(name));
    trainable.push_back(lora_b_name(name));
  }
  params.lora = cfg;
  return {std::move(params), std::move(trainable)};
}

}  // namespace icft::model
