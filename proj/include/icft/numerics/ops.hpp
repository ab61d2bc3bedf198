#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "icft/numerics/graph.hpp"
#include "icft/numerics/tensor.hpp"

namespace icft::numerics {

class InvalidMaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kRmsNormEps = 1e-6;

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;
using Strided = Eigen::OuterStride<>;
using MapStrided = Eigen::Map<RowMat, 0, Strided>;
using MapConstStrided = Eigen::Map<const RowMat, 0, Strided>;

inline MapConstMat view(const Tensor& t) {
  return MapConstMat(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

inline MapMat view(std::span<double> buf, std::size_t rows, std::size_t cols) {
  return MapMat(buf.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline MapConstMat view(std::span<const double> buf, std::size_t rows, std::size_t cols) {
  return MapConstMat(buf.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

inline double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  const double u = c * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

/// C[m×n] = A[m×k] · B[k×n], evaluated in fixed blocks of kRowBlock rows (the
/// last block zero-padded). Every block is a product of identical shape, so the
/// bits of an output row depend only on that row of A and on B, never on m.
inline constexpr std::size_t kRowBlock = 16;

inline void rowwise_product(const double* A, std::size_t m, std::size_t k, const double* B, std::size_t n, double* C) {
  const auto ki = static_cast<Eigen::Index>(k), ni = static_cast<Eigen::Index>(n);
  const auto R = static_cast<Eigen::Index>(kRowBlock);
  MapConstMat Bm(B, ki, ni);
  RowMat pad_in, pad_out;
  for (std::size_t r0 = 0; r0 < m; r0 += kRowBlock) {
    const std::size_t rows = std::min(kRowBlock, m - r0);
    if (rows == kRowBlock) {
      MapMat(C + r0 * n, R, ni).noalias() = MapConstMat(A + r0 * k, R, ki) * Bm;
    } else {
      pad_in.setZero(R, ki);
      std::copy_n(A + r0 * k, rows * k, pad_in.data());
      pad_out.noalias() = pad_in * Bm;
      std::copy_n(pad_out.data(), rows * n, C + r0 * n);
    }
  }
}

}  // namespace detail

/// log-softmax of one row, max-shifted.
inline std::vector<double> log_softmax(std::span<const double> row) {
  const double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  const double lse = m + std::log(s);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] - lse;
  return out;
}

/// a[..×k] · b[k×n] -> [..×n]
inline Var matmul(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (bv.rank() != 2 || av.cols() != bv.shape()[0]) {
    throw DimensionError("matmul: inner dimensions disagree for " + to_string(av.shape()) + " and " +
                         to_string(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Shape out_shape = av.shape();
  out_shape.back() = n;
  Tensor out(out_shape);
  detail::rowwise_product(av.data().data(), m, k, bv.data().data(), n, out.data().data());
  const bool needs = g.needs_grad(a) || g.needs_grad(b);
  return g.record(std::move(out), needs, [a, b, m, k, n](Graph& gr, std::span<const double> go) {
    auto G = detail::view(go, m, n);
    if (gr.needs_grad(a)) {
      detail::view(gr.grad_buffer(a), m, k).noalias() += G * detail::view(gr.value(b)).transpose();
    }
    if (gr.needs_grad(b)) {
      detail::view(gr.grad_buffer(b), k, n).noalias() += detail::view(gr.value(a)).transpose() * G;
    }
  });
}

inline Var add(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  detail::require_same_shape(av, bv, "add");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const bool needs = g.needs_grad(a) || g.needs_grad(b);
  return g.record(std::move(out), needs, [a, b](Graph& gr, std::span<const double> go) {
    for (Var v : {a, b}) {
      if (!gr.needs_grad(v)) continue;
      auto buf = gr.grad_buffer(v);
      for (std::size_t i = 0; i < go.size(); ++i) buf[i] += go[i];
    }
  });
}

/// x[..×d] + bias[d], the only broadcast supported.
inline Var add_bias(Graph& g, Var x, Var bias) {
  const Tensor& xv = g.value(x);
  const Tensor& bv = g.value(bias);
  if (bv.rank() != 1 || bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias " + to_string(bv.shape()) + " does not match " + to_string(xv.shape()));
  }
  const std::size_t rows = xv.rows(), d = xv.cols();
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += bv[c];
  const bool needs = g.needs_grad(x) || g.needs_grad(bias);
  return g.record(std::move(out), needs, [x, bias, rows, d](Graph& gr, std::span<const double> go) {
    if (gr.needs_grad(x)) {
      auto buf = gr.grad_buffer(x);
      for (std::size_t i = 0; i < go.size(); ++i) buf[i] += go[i];
    }
    if (gr.needs_grad(bias)) {
      auto buf = gr.grad_buffer(bias);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < d; ++c) buf[c] += go[r * d + c];
    }
  });
}

inline Var scale(Graph& g, Var x, double s) {
  Tensor out = g.value(x);
  for (auto& v : out.data()) v *= s;
  return g.record(std::move(out), g.needs_grad(x), [x, s](Graph& gr, std::span<const double> go) {
    auto buf = gr.grad_buffer(x);
    for (std::size_t i = 0; i < go.size(); ++i) buf[i] += s * go[i];
  });
}

/// Tanh-approximated GELU.
inline Var gelu(Graph& g, Var x) {
  Tensor out = g.value(x);
  for (auto& v : out.data()) v = detail::gelu(v);
  return g.record(std::move(out), g.needs_grad(x), [x](Graph& gr, std::span<const double> go) {
    const auto in = gr.value(x).data();
    auto buf = gr.grad_buffer(x);
    for (std::size_t i = 0; i < go.size(); ++i) buf[i] += go[i] * detail::gelu_grad(in[i]);
  });
}

/// Sum of all entries, shape [1].
inline Var sum(Graph& g, Var x) {
  double s = 0.0;
  for (double v : g.value(x).data()) s += v;
  return g.record(Tensor::scalar(s), g.needs_grad(x), [x](Graph& gr, std::span<const double> go) {
    auto buf = gr.grad_buffer(x);
    for (auto& v : buf) v += go[0];
  });
}

/// x / sqrt(mean(x^2) + eps) * gain, normalized over the trailing dimension.
inline Var rms_norm(Graph& g, Var x, Var gain) {
  const Tensor& xv = g.value(x);
  const Tensor& gv = g.value(gain);
  if (gv.rank() != 1 || gv.size() != xv.cols()) {
    throw DimensionError("rms_norm: gain " + to_string(gv.shape()) + " does not match " + to_string(xv.shape()));
  }
  const std::size_t rows = xv.rows(), d = xv.cols();
  std::vector<double> inv(rows);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data().data() + r * d;
    double ms = 0.0;
    for (std::size_t c = 0; c < d; ++c) ms += xr[c] * xr[c];
    ms /= static_cast<double>(d);
    inv[r] = 1.0 / std::sqrt(ms + kRmsNormEps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xr[c] * inv[r] * gv[c];
  }
  const bool needs = g.needs_grad(x) || g.needs_grad(gain);
  return g.record(std::move(out), needs,
                  [x, gain, rows, d, inv = std::move(inv)](Graph& gr, std::span<const double> go) {
                    const auto xs = gr.value(x).data();
                    const auto gs = gr.value(gain).data();
                    const bool gx = gr.needs_grad(x), gg = gr.needs_grad(gain);
                    std::span<double> bx, bg;
                    if (gx) bx = gr.grad_buffer(x);
                    if (gg) bg = gr.grad_buffer(gain);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const double* xr = xs.data() + r * d;
                      const double* gor = go.data() + r * d;
                      const double ir = inv[r];
                      if (gg) {
                        for (std::size_t c = 0; c < d; ++c) bg[c] += gor[c] * xr[c] * ir;
                      }
                      if (gx) {
                        double dot = 0.0;
                        for (std::size_t c = 0; c < d; ++c) dot += gor[c] * gs[c] * xr[c];
                        const double k = ir * ir * ir * dot / static_cast<double>(d);
                        for (std::size_t c = 0; c < d; ++c) bx[r * d + c] += ir * gor[c] * gs[c] - k * xr[c];
                      }
                    }
                  });
}

/// Gathers rows of table[V×d] -> [T×d].
inline Var embedding(Graph& g, Var table, std::span<const std::int32_t> ids) {
  const Tensor& tv = g.value(table);
  if (tv.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + to_string(tv.shape()));
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  const std::size_t V = tv.shape()[0], d = tv.cols(), T = ids.size();
  Tensor out({T, d});
  for (std::size_t t = 0; t < T; ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= V) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[t]) + " outside table of " +
                              std::to_string(V) + " rows");
    }
    std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(ids[t] * d), d,
                out.data().begin() + static_cast<std::ptrdiff_t>(t * d));
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return g.record(std::move(out), g.needs_grad(table),
                  [table, d, saved = std::move(saved)](Graph& gr, std::span<const double> go) {
                    auto buf = gr.grad_buffer(table);
                    for (std::size_t t = 0; t < saved.size(); ++t) {
                      double* dst = buf.data() + static_cast<std::size_t>(saved[t]) * d;
                      for (std::size_t c = 0; c < d; ++c) dst[c] += go[t * d + c];
                    }
                  });
}

/// Multi-head causal self-attention on pre-projected q, k, v of shape [T×d].
/// Position t attends to positions 0..t only.
inline Var causal_attention(Graph& g, Var q, Var k, Var v, std::size_t n_heads) {
  const Tensor& qv = g.value(q);
  detail::require_same_shape(qv, g.value(k), "causal_attention");
  detail::require_same_shape(qv, g.value(v), "causal_attention");
  if (qv.rank() != 2) throw DimensionError("causal_attention: expected [T x d], got " + to_string(qv.shape()));
  const std::size_t T = qv.shape()[0], d = qv.shape()[1];
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("causal_attention: d=" + std::to_string(d) + " not divisible by heads=" +
                         std::to_string(n_heads));
  }
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // Forward loops keep a fixed summation order per output row, so a row's
  // result never depends on how many later positions exist.
  std::vector<double, AlignedAllocator<double>> probs(n_heads * T * T, 0.0);
  std::vector<double> kt(dh * T);
  Tensor out({T, d});
  const double* qs = qv.data().data();
  const double* ks = g.value(k).data().data();
  const double* vs = g.value(v).data().data();
  double* os = out.data().data();
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (std::size_t j = 0; j < T; ++j)
      for (std::size_t c = 0; c < dh; ++c) kt[c * T + j] = ks[j * d + h * dh + c];
    for (std::size_t i = 0; i < T; ++i) {
      double* row = probs.data() + h * T * T + i * T;
      const double* qi = qs + i * d + h * dh;
      for (std::size_t c = 0; c < dh; ++c) {
        const double qc = qi[c];
        const double* kc = kt.data() + c * T;
        for (std::size_t j = 0; j <= i; ++j) row[j] += qc * kc[j];
      }
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        row[j] *= inv_sqrt;
        m = std::max(m, row[j]);
      }
      double s = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        row[j] = std::exp(row[j] - m);
        s += row[j];
      }
      for (std::size_t j = 0; j <= i; ++j) row[j] /= s;
      double* oi = os + i * d + h * dh;
      for (std::size_t j = 0; j <= i; ++j) {
        const double p = row[j];
        const double* vj = vs + j * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
      }
    }
  }
  const bool needs = g.needs_grad(q) || g.needs_grad(k) || g.needs_grad(v);
  return g.record(
      std::move(out), needs,
      [q, k, v, T, d, dh, n_heads, inv_sqrt, probs = std::move(probs)](Graph& gr, std::span<const double> go) {
        const auto Ti = static_cast<Eigen::Index>(T), dhi = static_cast<Eigen::Index>(dh);
        const detail::Strided stride(static_cast<Eigen::Index>(d));
        double* gq = gr.needs_grad(q) ? gr.grad_buffer(q).data() : nullptr;
        double* gk = gr.needs_grad(k) ? gr.grad_buffer(k).data() : nullptr;
        double* gv = gr.needs_grad(v) ? gr.grad_buffer(v).data() : nullptr;
        detail::RowMat dP(Ti, Ti), dS(Ti, Ti);
        for (std::size_t h = 0; h < n_heads; ++h) {
          detail::MapConstStrided Q(gr.value(q).data().data() + h * dh, Ti, dhi, stride);
          detail::MapConstStrided K(gr.value(k).data().data() + h * dh, Ti, dhi, stride);
          detail::MapConstStrided Vh(gr.value(v).data().data() + h * dh, Ti, dhi, stride);
          detail::MapConstStrided dO(go.data() + h * dh, Ti, dhi, stride);
          detail::MapConstMat P(probs.data() + h * T * T, Ti, Ti);
          if (gv) {
            detail::MapStrided dV(gv + h * dh, Ti, dhi, stride);
            dV.noalias() += P.transpose() * dO;
          }
          if (!gq && !gk) continue;
          dP.noalias() = dO * Vh.transpose();
          for (std::size_t i = 0; i < T; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
            for (std::size_t j = 0; j < T; ++j) dS(i, j) = j <= i ? P(i, j) * (dP(i, j) - dot) * inv_sqrt : 0.0;
          }
          if (gq) {
            detail::MapStrided dQ(gq + h * dh, Ti, dhi, stride);
            dQ.noalias() += dS * K;
          }
          if (gk) {
            detail::MapStrided dK(gk + h * dh, Ti, dhi, stride);
            dK.noalias() += dS.transpose() * Q;
          }
        }
      });
}

/// Mean negative log-likelihood over rows whose mask is 1.
///
/// Rows with mask 0 are skipped entirely: their targets are never read and
/// their logits receive exactly zero gradient.
inline Var softmax_cross_entropy_masked(Graph& g, Var logits, std::span<const std::int32_t> targets,
                                        std::span<const std::uint8_t> mask) {
  const Tensor& lv = g.value(logits);
  if (lv.rank() != 2) throw DimensionError("cross entropy: logits must be [T x V], got " + to_string(lv.shape()));
  const std::size_t T = lv.shape()[0], V = lv.shape()[1];
  if (targets.size() != T || mask.size() != T) {
    throw DimensionError("cross entropy: " + std::to_string(T) + " logit rows but " +
                         std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
                         " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t t = 0; t < T; ++t) {
    if (mask[t] > 1) throw InvalidMaskError("cross entropy: mask entries must be 0 or 1");
    if (!mask[t]) continue;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= V) {
      throw std::out_of_range("cross entropy: target " + std::to_string(targets[t]) + " at row " +
                              std::to_string(t) + " outside vocabulary of " + std::to_string(V));
    }
    ++count;
  }
  if (count == 0) throw InvalidMaskError("cross entropy: mask selects no rows");

  std::vector<std::size_t> rows;
  std::vector<double> lse;
  rows.reserve(count);
  lse.reserve(count);
  double total = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    const double* row = lv.data().data() + t * V;
    const double m = *std::max_element(row, row + V);
    double s = 0.0;
    for (std::size_t j = 0; j < V; ++j) s += std::exp(row[j] - m);
    const double l = m + std::log(s);
    rows.push_back(t);
    lse.push_back(l);
    total += l - row[targets[t]];
  }
  const double n = static_cast<double>(count);
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  return g.record(Tensor::scalar(total / n), g.needs_grad(logits),
                  [logits, V, n, rows = std::move(rows), lse = std::move(lse), tg = std::move(tg)](
                      Graph& gr, std::span<const double> go) {
                    const auto lvals = gr.value(logits).data();
                    auto buf = gr.grad_buffer(logits);
                    const double w = go[0] / n;
                    for (std::size_t r = 0; r < rows.size(); ++r) {
                      const std::size_t t = rows[r];
                      const double* row = lvals.data() + t * V;
                      double* dst = buf.data() + t * V;
                      for (std::size_t j = 0; j < V; ++j) dst[j] += w * std::exp(row[j] - lse[r]);
                      dst[tg[t]] -= w;
                    }
                  });
}

}  // namespace icft::numerics
