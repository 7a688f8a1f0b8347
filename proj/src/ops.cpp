// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include "shardtrain/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <vector>

#include "shardtrain/error.hpp"
#include "shardtrain/tape.hpp"
#include "shardtrain/work_counter.hpp"

namespace shardtrain {
namespace {

Tensor finish(std::string_view op, std::initializer_list<Tensor> inputs, Tensor out, BackwardFn fn) {
  Tape* tape = Tape::current();
  if (tape == nullptr) return out;
  std::vector<Tensor> in(inputs);
  return tape->record(op, in, std::move(out), std::move(fn));
}

void require_2d(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " expects a 2-D tensor, got " + shape_to_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

// C[m×n] += A[m×k]·B[k×n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// C[m×k] += A[m×n]·B[k×n]ᵀ
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// C[k×n] += A[m×k]ᵀ·B[m×n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Strided single-head attention. Rows of Q/K/V/O are `stride` apart.
struct HeadView {
  const double* q;
  const double* k;
  const double* v;
  std::size_t stride;
  std::size_t seq_len;
  std::size_t d_k;
  std::size_t d_v;
};

// Writes O and the T×T probability matrix (upper triangle left zero).
void attention_forward(const HeadView& h, double* out, std::size_t out_stride, double* probs) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(h.d_k));
  for (std::size_t t = 0; t < h.seq_len; ++t) {
    double* p = probs + t * h.seq_len;
    const double* qt = h.q + t * h.stride;
    double max_score = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j <= t; ++j) {
      const double* kj = h.k + j * h.stride;
      double s = 0.0;
      for (std::size_t c = 0; c < h.d_k; ++c) s += qt[c] * kj[c];
      p[j] = s * inv_sqrt;
      max_score = std::max(max_score, p[j]);
    }
    double denom = 0.0;
    for (std::size_t j = 0; j <= t; ++j) {
      p[j] = std::exp(p[j] - max_score);
      denom += p[j];
    }
    double* ot = out + t * out_stride;
    for (std::size_t c = 0; c < h.d_v; ++c) ot[c] = 0.0;
    for (std::size_t j = 0; j <= t; ++j) {
      p[j] /= denom;
      const double* vj = h.v + j * h.stride;
      for (std::size_t c = 0; c < h.d_v; ++c) ot[c] += p[j] * vj[c];
    }
  }
}

struct HeadGrads {
  double* dq;
  double* dk;
  double* dv;  // each may be null when not needed
  std::size_t stride;
};

void attention_backward(const HeadView& h, const double* probs, const double* dout, std::size_t dout_stride,
                        const HeadGrads& g) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(h.d_k));
  std::vector<double> ds(h.seq_len);
  for (std::size_t t = 0; t < h.seq_len; ++t) {
    const double* p = probs + t * h.seq_len;
    const double* dot = dout + t * dout_stride;
    double weighted = 0.0;
    for (std::size_t j = 0; j <= t; ++j) {
      const double* vj = h.v + j * h.stride;
      double dp = 0.0;
      for (std::size_t c = 0; c < h.d_v; ++c) dp += dot[c] * vj[c];
      ds[j] = dp;
      weighted += dp * p[j];
      if (g.dv != nullptr) {
        double* dvj = g.dv + j * g.stride;
        for (std::size_t c = 0; c < h.d_v; ++c) dvj[c] += p[j] * dot[c];
      }
    }
    const double* qt = h.q + t * h.stride;
    for (std::size_t j = 0; j <= t; ++j) {
      const double dscore = p[j] * (ds[j] - weighted) * inv_sqrt;
      if (g.dq != nullptr) {
        const double* kj = h.k + j * h.stride;
        double* dqt = g.dq + t * g.stride;
        for (std::size_t c = 0; c < h.d_k; ++c) dqt[c] += dscore * kj[c];
      }
      if (g.dk != nullptr) {
        double* dkj = g.dk + j * g.stride;
        for (std::size_t c = 0; c < h.d_k; ++c) dkj[c] += dscore * qt[c];
      }
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  gemm_nn(a.values().data(), b.values().data(), out.mutable_values().data(), m, k, n);
  count_flops(2 * m * k * n);
  return finish("matmul", {a, b}, out, [a, b, m, k, n](std::span<const double> g, BackwardContext& ctx) {
    if (ctx.needs(0)) gemm_nt(g.data(), b.values().data(), ctx.grad(0).data(), m, n, k);
    if (ctx.needs(1)) gemm_tn(a.values().data(), g.data(), ctx.grad(1).data(), m, k, n);
    count_flops(4 * m * k * n);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  count_flops(out.size());
  return finish("add", {a, b}, Tensor::from(a.shape(), std::move(out)),
                [](std::span<const double> g, BackwardContext& ctx) {
                  for (std::size_t slot = 0; slot < 2; ++slot) {
                    if (!ctx.needs(slot)) continue;
                    auto d = ctx.grad(slot);
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                  }
                });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: bias " + shape_to_string(bias.shape()) + " does not match last axis of " +
                         shape_to_string(x.shape()));
  }
  const std::size_t d = bias.dim(0);
  auto xv = x.values();
  auto bv = bias.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + bv[i % d];
  count_flops(out.size());
  return finish("add_bias", {x, bias}, Tensor::from(x.shape(), std::move(out)),
                [d](std::span<const double> g, BackwardContext& ctx) {
                  if (ctx.needs(0)) {
                    auto dx = ctx.grad(0);
                    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
                  }
                  if (ctx.needs(1)) {
                    auto db = ctx.grad(1);
                    for (std::size_t i = 0; i < g.size(); ++i) db[i % d] += g[i];
                  }
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  count_flops(out.size());
  return finish("mul", {a, b}, Tensor::from(a.shape(), std::move(out)),
                [a, b](std::span<const double> g, BackwardContext& ctx) {
                  if (ctx.needs(0)) {
                    auto d = ctx.grad(0);
                    auto bv = b.values();
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
                  }
                  if (ctx.needs(1)) {
                    auto d = ctx.grad(1);
                    auto av = a.values();
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
                  }
                });
}

Tensor scale(const Tensor& x, double factor) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  count_flops(out.size());
  return finish("scale", {x}, Tensor::from(x.shape(), std::move(out)),
                [factor](std::span<const double> g, BackwardContext& ctx) {
                  auto d = ctx.grad(0);
                  for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * factor;
                });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  count_flops(x.numel());
  return finish("sum", {x}, Tensor::scalar(total), [](std::span<const double> g, BackwardContext& ctx) {
    auto d = ctx.grad(0);
    for (double& v : d) v += g[0];
  });
}

Tensor softmax_rows(const Tensor& x) {
  require_2d(x, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  auto xv = x.values();
  auto probs = std::make_shared<std::vector<double>>(xv.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double* out = probs->data() + i * n;
    const double max_v = *std::max_element(row, row + n);
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = std::exp(row[j] - max_v);
      denom += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= denom;
  }
  count_flops(4 * xv.size());
  return finish("softmax_rows", {x}, Tensor::from(x.shape(), *probs),
                [probs, m, n](std::span<const double> g, BackwardContext& ctx) {
                  auto d = ctx.grad(0);
                  const auto& y = *probs;
                  for (std::size_t i = 0; i < m; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                    for (std::size_t j = 0; j < n; ++j) d[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                  }
                });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw DimensionError("layer_norm: gain/bias must have shape [" + std::to_string(d) + "], got " +
                         shape_to_string(gain.shape()) + " and " + shape_to_string(bias.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  count_flops(8 * xv.size());
  return finish(
      "layer_norm", {x, gain, bias}, Tensor::from(x.shape(), std::move(out)),
      [gain, xhat, inv_std, rows, d](std::span<const double> g, BackwardContext& ctx) {
        const auto& h = *xhat;
        if (ctx.needs(1)) {
          auto dg = ctx.grad(1);
          for (std::size_t i = 0; i < g.size(); ++i) dg[i % d] += g[i] * h[i];
        }
        if (ctx.needs(2)) {
          auto db = ctx.grad(2);
          for (std::size_t i = 0; i < g.size(); ++i) db[i % d] += g[i];
        }
        if (ctx.needs(0)) {
          auto dx = ctx.grad(0);
          auto gv = gain.values();
          std::vector<double> dh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0;
            double mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dh[j] = g[r * d + j] * gv[j];
              mean_dh += dh[j];
              mean_dh_h += dh[j] * h[r * d + j];
            }
            mean_dh /= static_cast<double>(d);
            mean_dh_h /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              dx[r * d + j] += (*inv_std)[r] * (dh[j] - mean_dh - h[r * d + j] * mean_dh_h);
            }
          }
        }
      });
}

Tensor gelu(const Tensor& x) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * normal_cdf(xv[i]);
  count_flops(10 * xv.size());
  return finish("gelu", {x}, Tensor::from(x.shape(), std::move(out)),
                [x](std::span<const double> g, BackwardContext& ctx) {
                  auto d = ctx.grad(0);
                  auto xv = x.values();
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    d[i] += g[i] * (normal_cdf(xv[i]) + xv[i] * normal_pdf(xv[i]));
                  }
                });
}

Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
  require_2d(table, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw ValidationError("embedding: empty id sequence");
  auto tv = table.values();
  std::vector<double> out(ids.size() * d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] >= vocab) {
      throw ValidationError("embedding: id " + std::to_string(ids[t]) + " out of range for table of " +
                            std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data() + ids[t] * d, d, out.data() + t * d);
  }
  std::vector<TokenId> saved(ids.begin(), ids.end());
  return finish("embedding", {table}, Tensor::from({ids.size(), d}, std::move(out)),
                [saved = std::move(saved), d](std::span<const double> g, BackwardContext& ctx) {
                  auto dt = ctx.grad(0);
                  for (std::size_t t = 0; t < saved.size(); ++t) {
                    double* row = dt.data() + saved[t] * d;
                    for (std::size_t j = 0; j < d; ++j) row[j] += g[t * d + j];
                  }
                });
}

Tensor dropout(const Tensor& x, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw ValidationError("dropout rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  auto xv = x.values();
  auto mask = std::make_shared<std::vector<double>>(xv.size());
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double u = static_cast<double>(splitmix64(seed ^ (i * 0xd1342543de82ef95ULL)) >> 11) * 0x1.0p-53;
    (*mask)[i] = u >= rate ? keep_scale : 0.0;
    out[i] = xv[i] * (*mask)[i];
  }
  return finish("dropout", {x}, Tensor::from(x.shape(), std::move(out)),
                [mask](std::span<const double> g, BackwardContext& ctx) {
                  auto d = ctx.grad(0);
                  for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (*mask)[i];
                });
}

CrossEntropy cross_entropy_next_token(const Tensor& logits, std::span<const TokenId> targets) {
  require_2d(logits, "cross_entropy_next_token");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows) {
    throw ValidationError("cross_entropy_next_token: " + std::to_string(targets.size()) + " targets for " +
                          std::to_string(rows) + " logit rows");
  }
  for (TokenId t : targets) {
    if (t >= vocab) {
      throw ValidationError("cross_entropy_next_token: target id " + std::to_string(t) +
                            " out of range for vocabulary of " + std::to_string(vocab));
    }
  }
  auto lv = logits.values();
  auto probs = std::make_shared<std::vector<double>>(lv.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = lv.data() + r * vocab;
    double* p = probs->data() + r * vocab;
    const double max_v = *std::max_element(row, row + vocab);
    double denom = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      p[j] = std::exp(row[j] - max_v);
      denom += p[j];
    }
    for (std::size_t j = 0; j < vocab; ++j) p[j] /= denom;
    total += std::log(denom) + max_v - row[targets[r]];
  }
  count_flops(4 * lv.size());
  std::vector<TokenId> saved(targets.begin(), targets.end());
  Tensor loss = finish("cross_entropy", {logits}, Tensor::scalar(total),
                       [probs, saved = std::move(saved), vocab](std::span<const double> g, BackwardContext& ctx) {
                         auto d = ctx.grad(0);
                         const auto& p = *probs;
                         for (std::size_t i = 0; i < p.size(); ++i) d[i] += g[0] * p[i];
                         for (std::size_t r = 0; r < saved.size(); ++r) d[r * vocab + saved[r]] -= g[0];
                       });
  return {loss, rows};
}

Tensor causal_attention(const AttentionInputs& in) {
  require_2d(in.q, "causal_attention");
  require_2d(in.k, "causal_attention");
  require_2d(in.v, "causal_attention");
  const std::size_t T = in.q.dim(0), dk = in.q.dim(1), dv = in.v.dim(1);
  if (in.k.dim(0) != T || in.v.dim(0) != T || in.k.dim(1) != dk || dv != dk) {
    throw DimensionError("causal_attention: inconsistent Q/K/V shapes " + shape_to_string(in.q.shape()) + ", " +
                         shape_to_string(in.k.shape()) + ", " + shape_to_string(in.v.shape()));
  }
  HeadView h{in.q.values().data(), in.k.values().data(), in.v.values().data(), dk, T, dk, dv};
  auto probs = std::make_shared<std::vector<double>>(T * T, 0.0);
  Tensor out = Tensor::zeros({T, dv});
  attention_forward(h, out.mutable_values().data(), dv, probs->data());
  count_flops(2 * T * T * (dk + dv));
  Tensor q = in.q, k = in.k, v = in.v;
  return finish("causal_attention", {q, k, v}, out,
                [q, k, v, probs, T, dk, dv](std::span<const double> g, BackwardContext& ctx) {
                  HeadView h{q.values().data(), k.values().data(), v.values().data(), dk, T, dk, dv};
                  HeadGrads hg{ctx.needs(0) ? ctx.grad(0).data() : nullptr,
                               ctx.needs(1) ? ctx.grad(1).data() : nullptr,
                               ctx.needs(2) ? ctx.grad(2).data() : nullptr, dk};
                  attention_backward(h, probs->data(), g.data(), dv, hg);
                  count_flops(4 * T * T * (dk + dv));
                });
}

Tensor multi_head_causal_attention(const Tensor& qkv, std::size_t batch, std::size_t seq_len,
                                   std::size_t n_heads) {
  require_2d(qkv, "multi_head_causal_attention");
  if (qkv.dim(0) != batch * seq_len || qkv.dim(1) % (3 * n_heads) != 0) {
    throw DimensionError("multi_head_causal_attention: projection " + shape_to_string(qkv.shape()) +
                         " incompatible with batch " + std::to_string(batch) + ", seq_len " +
                         std::to_string(seq_len) + ", heads " + std::to_string(n_heads));
  }
  const std::size_t width = qkv.dim(1);
  const std::size_t d = width / 3;
  const std::size_t dh = d / n_heads;
  const std::size_t per_head = seq_len * seq_len;
  auto probs = std::make_shared<std::vector<double>>(batch * n_heads * per_head, 0.0);
  Tensor out = Tensor::zeros({batch * seq_len, d});
  const double* base = qkv.values().data();
  double* o = out.mutable_values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t head = 0; head < n_heads; ++head) {
      const double* row0 = base + b * seq_len * width + head * dh;
      HeadView h{row0, row0 + d, row0 + 2 * d, width, seq_len, dh, dh};
      attention_forward(h, o + b * seq_len * d + head * dh, d, probs->data() + (b * n_heads + head) * per_head);
    }
  }
  count_flops(4 * batch * n_heads * per_head * dh);
  return finish("multi_head_causal_attention", {qkv}, out,
                [qkv, probs, batch, seq_len, n_heads, width, d, dh, per_head](std::span<const double> g,
                                                                              BackwardContext& ctx) {
                  const double* base = qkv.values().data();
                  double* dbase = ctx.grad(0).data();
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t head = 0; head < n_heads; ++head) {
                      const std::size_t off = b * seq_len * width + head * dh;
                      HeadView h{base + off, base + off + d, base + off + 2 * d, width, seq_len, dh, dh};
                      HeadGrads hg{dbase + off, dbase + off + d, dbase + off + 2 * d, width};
                      attention_backward(h, probs->data() + (b * n_heads + head) * per_head,
                                         g.data() + b * seq_len * d + head * dh, d, hg);
                    }
                  }
                  count_flops(8 * batch * n_heads * per_head * dh);
                });
}

Tensor with_backward_hook(const Tensor& x, std::function<void()> before_backward) {
  auto xv = x.values();
  Tensor out = Tensor::from(x.shape(), std::vector<double>(xv.begin(), xv.end()));
  return finish("backward_hook", {x}, out,
                [fn = std::move(before_backward)](std::span<const double> g, BackwardContext& ctx) {
                  fn();
                  auto d = ctx.grad(0);
                  for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                });
}

}  // namespace shardtrain
