#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Core>

#include "icft/model/checkpoint.hpp"
#include "icft/model/parameters.hpp"

namespace icft::optim {

using model::Gradients;
using model::Parameters;
using numerics::Tensor;

class OptimizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OptimizerKind { adafactor, adam };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "adafactor"; }

inline OptimizerKind optimizer_from_string(std::string_view s) {
  if (s == "adafactor") return OptimizerKind::adafactor;
  if (s == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + std::string(s) + "'");
}

/// Factored second-moment rule without momentum, relative step size or
/// parameter scaling. The learning rate is supplied explicitly.
struct AdafactorOptions {
  double eps = 1e-30;            // added to g^2
  double decay_exponent = 0.8;   // beta2_t = 1 - t^-0.8
  double clip_threshold = 1.0;   // RMS(update) is clipped to this value
};

struct AdafactorState {
  std::int64_t step = 0;
  std::map<std::string, Tensor> row;   // matrices: running row means of g^2
  std::map<std::string, Tensor> col;   // matrices: running column means of g^2
  std::map<std::string, Tensor> full;  // vectors: running g^2
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

namespace detail {

inline void check_step_inputs(const Parameters& params, const Gradients& grads, double lr, std::int64_t next_step) {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw OptimizerError("learning rate must be positive and finite");
  for (const auto& [name, g] : grads) {
    const auto& p = params.at(name);
    if (!p.requires_grad()) throw OptimizerError("gradient supplied for frozen tensor '" + name + "'");
    if (p.shape() != g.shape()) {
      throw OptimizerError("gradient shape " + numerics::to_string(g.shape()) + " differs from parameter '" + name +
                           "' " + numerics::to_string(p.shape()));
    }
    for (double v : g.data()) {
      if (!std::isfinite(v)) {
        throw OptimizerError("non-finite gradient in '" + name + "' at step " + std::to_string(next_step) +
                             "; step aborted");
      }
    }
  }
}

inline bool is_factored(const Tensor& t) { return t.rank() >= 2 && t.rows() > 1 && t.cols() > 1; }

}  // namespace detail

/// V_ij = R_i C_j / mean(R), the rank-1 reconstruction from row and column means.
inline Tensor factored_second_moment(const Tensor& row_means, const Tensor& col_means) {
  double mean_r = 0.0;
  for (double v : row_means.data()) mean_r += v;
  mean_r /= static_cast<double>(row_means.size());
  Tensor out({row_means.size(), col_means.size()});
  for (std::size_t i = 0; i < row_means.size(); ++i)
    for (std::size_t j = 0; j < col_means.size(); ++j) out.at(i, j) = row_means[i] * col_means[j] / mean_r;
  return out;
}

inline void adafactor_step(Parameters& params, const Gradients& grads, double lr, AdafactorState& st,
                           const AdafactorOptions& opt = {}) {
  detail::check_step_inputs(params, grads, lr, st.step + 1);
  ++st.step;
  const double beta = 1.0 - std::pow(static_cast<double>(st.step), -opt.decay_exponent);
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    std::vector<double> update(g.size());
    if (detail::is_factored(g)) {
      const std::size_t R = g.rows(), C = g.cols();
      auto [rit, rnew] = st.row.try_emplace(name, Tensor({R}));
      auto [cit, cnew] = st.col.try_emplace(name, Tensor({C}));
      std::vector<double> rm(R, 0.0), cm(C, 0.0);
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j) {
          const double sq = g[i * C + j] * g[i * C + j] + opt.eps;
          rm[i] += sq;
          cm[j] += sq;
        }
      for (std::size_t i = 0; i < R; ++i) rit->second[i] = beta * rit->second[i] + (1 - beta) * rm[i] / double(C);
      for (std::size_t j = 0; j < C; ++j) cit->second[j] = beta * cit->second[j] + (1 - beta) * cm[j] / double(R);
      double mean_r = 0.0;
      for (double v : rit->second.data()) mean_r += v;
      mean_r /= static_cast<double>(R);
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j) {
          const double v = rit->second[i] * cit->second[j] / mean_r;
          update[i * C + j] = g[i * C + j] / std::sqrt(v);
        }
    } else {
      auto [it, fresh] = st.full.try_emplace(name, Tensor(g.shape()));
      for (std::size_t i = 0; i < g.size(); ++i) {
        it->second[i] = beta * it->second[i] + (1 - beta) * (g[i] * g[i] + opt.eps);
        update[i] = g[i] / std::sqrt(it->second[i]);
      }
    }
    double ms = 0.0;
    for (double u : update) ms += u * u;
    const double rms = std::sqrt(ms / static_cast<double>(update.size()));
    const double denom = std::max(1.0, rms / opt.clip_threshold);
    for (std::size_t i = 0; i < update.size(); ++i) p[i] -= lr * update[i] / denom;
  }
}

inline void adam_step(Parameters& params, const Gradients& grads, double lr, AdamState& st,
                      const AdamOptions& opt = {}) {
  detail::check_step_inputs(params, grads, lr, st.step + 1);
  ++st.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(st.step));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto& m = st.m.try_emplace(name, Tensor(g.shape())).first->second;
    auto& v = st.v.try_emplace(name, Tensor(g.shape())).first->second;
    const auto n = static_cast<Eigen::Index>(g.size());
    Eigen::Map<const Eigen::ArrayXd> ga(g.data().data(), n);
    Eigen::Map<Eigen::ArrayXd> ma(m.data().data(), n), va(v.data().data(), n), pa(p.data().data(), n);
    ma = opt.beta1 * ma + (1 - opt.beta1) * ga;
    va = opt.beta2 * va + (1 - opt.beta2) * ga.square();
    pa -= lr * (ma / c1) / ((va / c2).sqrt() + opt.eps);
  }
}

/// One optimizer of either kind, owned by a single training run.
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind = OptimizerKind::adafactor) : kind_(kind) {}

  OptimizerKind kind() const { return kind_; }
  std::int64_t steps() const { return kind_ == OptimizerKind::adam ? adam_.step : adafactor_.step; }

  void step(Parameters& params, const Gradients& grads, double lr) {
    if (kind_ == OptimizerKind::adam) {
      adam_step(params, grads, lr, adam_);
    } else {
      adafactor_step(params, grads, lr, adafactor_);
    }
  }

  const AdafactorState& adafactor_state() const { return adafactor_; }
  const AdamState& adam_state() const { return adam_; }

  void save(const std::filesystem::path& path) const {
    std::map<std::string, Tensor> table;
    table.emplace("step", Tensor::scalar(static_cast<double>(steps())));
    table.emplace("kind", Tensor::scalar(kind_ == OptimizerKind::adam ? 1.0 : 0.0));
    auto put = [&](const char* prefix, const std::map<std::string, Tensor>& m) {
      for (const auto& [k, t] : m) table.emplace(std::string(prefix) + k, t);
    };
    put("row:", adafactor_.row);
    put("col:", adafactor_.col);
    put("full:", adafactor_.full);
    put("m:", adam_.m);
    put("v:", adam_.v);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw OptimizerError("cannot write optimizer state " + path.string());
    model::write_tensor_table(os, table);
  }

  static Optimizer load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw OptimizerError("cannot open optimizer state " + path.string());
    auto table = model::read_tensor_table(is);
    Optimizer o(table.at("kind").item() == 1.0 ? OptimizerKind::adam : OptimizerKind::adafactor);
    const auto step = static_cast<std::int64_t>(table.at("step").item());
    o.adafactor_.step = o.adam_.step = 0;
    (o.kind_ == OptimizerKind::adam ? o.adam_.step : o.adafactor_.step) = step;
    for (auto& [k, t] : table) {
      const auto colon = k.find(':');
      if (colon == std::string::npos) continue;
      const auto prefix = k.substr(0, colon), name = k.substr(colon + 1);
      if (prefix == "row") o.adafactor_.row.emplace(name, t);
      else if (prefix == "col") o.adafactor_.col.emplace(name, t);
      else if (prefix == "full") o.adafactor_.full.emplace(name, t);
      else if (prefix == "m") o.adam_.m.emplace(name, t);
      else if (prefix == "v") o.adam_.v.emplace(name, t);
    }
    return o;
  }

 private:
  OptimizerKind kind_;
  AdafactorState adafactor_;
  AdamState adam_;
};

}  // namespace icft::optim
