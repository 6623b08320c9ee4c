// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayattn/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "relayattn/errors.hpp"

namespace relayattn {
namespace {

struct HeadLayout {
  std::size_t heads;
  std::size_t dim;
};

HeadLayout layout_of(const Tensor& t, std::string_view what) {
  if (t.rank() < 2) {
    throw DimensionError(std::string(what) + ": rank too small, " + shape_string(t.shape()));
  }
  return {t.dim(t.rank() - 2), t.dim(t.rank() - 1)};
}

void require_same_heads(const Tensor& a, const Tensor& b, std::string_view what) {
  const auto la = layout_of(a, what);
  const auto lb = layout_of(b, what);
  if (la.heads != lb.heads || la.dim != lb.dim) {
    throw DimensionError(std::string(what) + ": head layout " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

// Attends one query vector against keys [0, limit) of a [n x h x d] block
// starting at `kv_base`. Writes the weighted value sum into `out` and
// returns the log-sum-exp of the scaled logits.
double attend_row(std::span<const double> query, const Tensor& k, const Tensor& v,
                  std::size_t kv_base, std::size_t head, std::size_t limit, double scale,
                  Precision precision, std::vector<double>& logits, std::span<double> out) {
  const std::size_t heads = k.dim(k.rank() - 2);
  const std::size_t d = query.size();
  logits.resize(limit);
  double peak = -INFINITY;
  for (std::size_t j = 0; j < limit; ++j) {
    const std::size_t off = kv_base + (j * heads + head) * d;
    const double x = round_to(
        precision, dot(query, k.data().subspan(off, d), precision) * scale);
    logits[j] = x;
    peak = std::max(peak, x);
  }
  double sum = 0.0;
  for (std::size_t j = 0; j < limit; ++j) sum += std::exp(logits[j] - peak);
  const double lse = round_to(precision, peak + std::log(sum));

  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t j = 0; j < limit; ++j) {
    const double w = round_to(precision, std::exp(logits[j] - lse));
    const std::size_t off = kv_base + (j * heads + head) * d;
    for (std::size_t c = 0; c < d; ++c) out[c] = round_to(precision, out[c] + w * v[off + c]);
  }
  return lse;
}

}  // namespace

Tensor naive_causal_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  require_rank(q, 3, "naive_causal_attention q");
  require_rank(k, 3, "naive_causal_attention k");
  require_rank(v, 3, "naive_causal_attention v");
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("naive_causal_attention: q/k/v shapes " + shape_string(q.shape()) +
                         ", " + shape_string(k.shape()) + ", " + shape_string(v.shape()));
  }
  const std::size_t l = q.dim(0);
  const std::size_t h = q.dim(1);
  const std::size_t d = q.dim(2);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor out(q.shape());
  std::vector<double> weights;
  for (std::size_t t = 0; t < l; ++t) {
    for (std::size_t head = 0; head < h; ++head) {
      const auto qt = q.data().subspan((t * h + head) * d, d);
      weights.assign(t + 1, 0.0);
      double peak = -INFINITY;
      for (std::size_t j = 0; j <= t; ++j) {
        double s = 0.0;
        const auto kj = k.data().subspan((j * h + head) * d, d);
        for (std::size_t c = 0; c < d; ++c) s += qt[c] * kj[c];
        weights[j] = s * scale;
        peak = std::max(peak, weights[j]);
      }
      double denom = 0.0;
      for (double& w : weights) {
        w = std::exp(w - peak);
        denom += w;
      }
      auto o = out.data().subspan((t * h + head) * d, d);
      for (std::size_t j = 0; j <= t; ++j) {
        const double p = weights[j] / denom;
        const auto vj = v.data().subspan((j * h + head) * d, d);
        for (std::size_t c = 0; c < d; ++c) o[c] += p * vj[c];
      }
    }
  }
  return out;
}

LseAttentionOutput attention_with_lse(const Tensor& q, const Tensor& k, const Tensor& v,
                                      bool causal, const AttentionOptions& options) {
  require_rank(q, 4, "attention_with_lse q");
  require_rank(k, 4, "attention_with_lse k");
  require_rank(v, 4, "attention_with_lse v");
  if (k.shape() != v.shape()) {
    throw DimensionError("attention_with_lse: k " + shape_string(k.shape()) + " vs v " +
                         shape_string(v.shape()));
  }
  require_same_heads(q, k, "attention_with_lse");
  const std::size_t b = q.dim(0);
  const std::size_t m = q.dim(1);
  const std::size_t h = q.dim(2);
  const std::size_t d = q.dim(3);
  const std::size_t n = k.dim(1);
  if (k.dim(0) != b) {
    throw DimensionError("attention_with_lse: batch " + std::to_string(b) + " vs keys " +
                         shape_string(k.shape()));
  }
  if (m > 0 && n == 0) throw ContractError("attention_with_lse: empty key set");
  if (causal && n < m) {
    throw ContractError("attention_with_lse: causal attention needs at least as many keys (" +
                        std::to_string(n) + ") as queries (" + std::to_string(m) + ")");
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  LseAttentionOutput result{Tensor(q.shape()), Tensor({b, m, h})};
  std::vector<double> logits;
  for (std::size_t bi = 0; bi < b; ++bi) {
    const std::size_t kv_base = bi * n * h * d;
    for (std::size_t t = 0; t < m; ++t) {
      const std::size_t limit = causal ? n - m + t + 1 : n;
      for (std::size_t head = 0; head < h; ++head) {
        const std::size_t qoff = ((bi * m + t) * h + head) * d;
        result.lse[(bi * m + t) * h + head] =
            attend_row(q.data().subspan(qoff, d), k, v, kv_base, head, limit, scale,
                       options.precision, logits, result.output.data().subspan(qoff, d));
      }
    }
  }

  if (options.counter != nullptr) {
    options.counter->elements_read += b * m * h * d + b * n * h * d;
    options.counter->elements_written += b * m * h * d;
    options.counter->lse_elements += b * m * h;
  }
  return result;
}

double relay_alpha_sys(double lse_sys, double lse_ctx) noexcept {
  return 1.0 / (1.0 + std::exp(lse_ctx - lse_sys));
}

Tensor relay_fusion(const Tensor& o_sys, const Tensor& lse_sys, const Tensor& o_ctx,
                    const Tensor& lse_ctx, TrafficCounter* counter) {
  if (o_sys.shape() != o_ctx.shape() || lse_sys.shape() != lse_ctx.shape()) {
    throw DimensionError("relay_fusion: mismatched partial outputs " +
                         shape_string(o_sys.shape()) + " / " + shape_string(o_ctx.shape()));
  }
  if (o_sys.rank() != lse_sys.rank() + 1 ||
      !std::equal(lse_sys.shape().begin(), lse_sys.shape().end(), o_sys.shape().begin())) {
    throw DimensionError("relay_fusion: lse " + shape_string(lse_sys.shape()) +
                         " does not index output " + shape_string(o_sys.shape()));
  }
  const std::size_t d = o_sys.rank() == 0 ? 0 : o_sys.dim(o_sys.rank() - 1);
  Tensor out(o_sys.shape());
  for (std::size_t r = 0; r < lse_sys.size(); ++r) {
    const double alpha_sys = relay_alpha_sys(lse_sys[r], lse_ctx[r]);
    const double alpha_ctx = 1.0 - alpha_sys;
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t i = r * d + c;
      out[i] = o_ctx[i] * alpha_ctx + o_sys[i] * alpha_sys;
    }
  }
  if (counter != nullptr) {
    counter->elements_read += 2 * o_sys.size();
    counter->elements_written += o_sys.size();
    counter->lse_elements += 2 * lse_sys.size();
  }
  return out;
}

std::vector<Tensor> relay_attention_ragged(std::span<const Tensor> queries,
                                           const Tensor& sys_k, const Tensor& sys_v,
                                           std::span<const ContextKv> contexts,
                                           const RelayOptions& options) {
  require_rank(sys_k, 3, "relay_attention system keys");
  if (sys_k.shape() != sys_v.shape()) {
    throw DimensionError("relay_attention: system k/v shapes differ");
  }
  if (sys_k.dim(0) == 0) {
    throw ContractError("relay_attention: empty system prompt; use the context-only path");
  }
  if (queries.size() != contexts.size()) {
    throw DimensionError("relay_attention: " + std::to_string(queries.size()) +
                         " query groups for " + std::to_string(contexts.size()) + " contexts");
  }
  const std::size_t h = sys_k.dim(1);
  const std::size_t d = sys_k.dim(2);
  std::size_t total_queries = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    require_rank(queries[i], 3, "relay_attention queries");
    require_same_heads(queries[i], sys_k, "relay_attention");
    require_rank(contexts[i].keys, 3, "relay_attention context keys");
    if (contexts[i].keys.shape() != contexts[i].values.shape()) {
      throw DimensionError("relay_attention: context k/v shapes differ");
    }
    require_same_heads(contexts[i].keys, sys_k, "relay_attention");
    total_queries += queries[i].dim(0);
  }
  const AttentionOptions attn_options{options.precision, options.counter};

  // Context step: per request, causal over its own cache.
  Tensor o_ctx({1, total_queries, h, d});
  Tensor lse_ctx({1, total_queries, h});
  auto context_step = [&] {
    std::size_t row = 0;
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const std::size_t m = queries[i].dim(0);
      const std::size_t c = contexts[i].keys.dim(0);
      const auto part = attention_with_lse(queries[i].reshaped({1, m, h, d}),
                                           contexts[i].keys.reshaped({1, c, h, d}),
                                           contexts[i].values.reshaped({1, c, h, d}),
                                           /*causal=*/true, attn_options);
      std::copy(part.output.data().begin(), part.output.data().end(),
                o_ctx.data().begin() + static_cast<std::ptrdiff_t>(row * h * d));
      std::copy(part.lse.data().begin(), part.lse.data().end(),
                lse_ctx.data().begin() + static_cast<std::ptrdiff_t>(row * h));
      row += m;
    }
  };

  // System step: every query of the batch against the shared prefix at once.
  LseAttentionOutput sys;
  auto system_step = [&] {
    Tensor flat({1, total_queries, h, d});
    std::size_t row = 0;
    for (const Tensor& q : queries) {
      std::copy(q.data().begin(), q.data().end(),
                flat.data().begin() + static_cast<std::ptrdiff_t>(row * h * d));
      row += q.dim(0);
    }
    const std::size_t s = sys_k.dim(0);
    sys = attention_with_lse(flat, sys_k.reshaped({1, s, h, d}), sys_v.reshaped({1, s, h, d}),
                             /*causal=*/false, attn_options);
  };

  if (options.order == SegmentOrder::kSystemFirst) {
    system_step();
    context_step();
  } else {
    context_step();
    system_step();
  }

  const Tensor fused = relay_fusion(sys.output, sys.lse, o_ctx, lse_ctx, options.counter);

  std::vector<Tensor> out;
  out.reserve(queries.size());
  std::size_t row = 0;
  for (const Tensor& q : queries) {
    const std::size_t m = q.dim(0);
    const auto slice = fused.data().subspan(row * h * d, m * h * d);
    out.emplace_back(Shape{m, h, d}, std::vector<double>(slice.begin(), slice.end()));
    row += m;
  }
  return out;
}

Tensor relay_attention(const Tensor& q, const Tensor& sys_k, const Tensor& sys_v,
                       std::span<const ContextKv> contexts, const RelayOptions& options) {
  require_rank(q, 4, "relay_attention q");
  const std::size_t b = q.dim(0);
  const std::size_t m = q.dim(1);
  const std::size_t h = q.dim(2);
  const std::size_t d = q.dim(3);
  std::vector<Tensor> groups;
  groups.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto slice = q.rows(i, 1);
    groups.emplace_back(Shape{m, h, d}, std::vector<double>(slice.begin(), slice.end()));
  }
  const auto parts = relay_attention_ragged(groups, sys_k, sys_v, contexts, options);
  Tensor out(q.shape());
  for (std::size_t i = 0; i < b; ++i) {
    std::copy(parts[i].data().begin(), parts[i].data().end(), out.rows(i, 1).begin());
  }
  return out;
}

Tensor baseline_attention(const Tensor& q, const Tensor& sys_k, const Tensor& sys_v,
                          std::span<const ContextKv> contexts, const AttentionOptions& options) {
  require_rank(q, 4, "baseline_attention q");
  const std::size_t b = q.dim(0);
  const std::size_t m = q.dim(1);
  const std::size_t h = q.dim(2);
  const std::size_t d = q.dim(3);
  if (contexts.size() != b) {
    throw DimensionError("baseline_attention: " + std::to_string(b) + " requests, " +
                         std::to_string(contexts.size()) + " contexts");
  }
  Tensor out(q.shape());
  for (std::size_t i = 0; i < b; ++i) {
    const Tensor keys = concat_rows(sys_k, contexts[i].keys);
    const Tensor values = concat_rows(sys_v, contexts[i].values);
    const std::size_t n = keys.dim(0);
    const auto slice = q.rows(i, 1);
    const Tensor qi(Shape{1, m, h, d}, std::vector<double>(slice.begin(), slice.end()));
    const auto part = attention_with_lse(qi, keys.reshaped({1, n, h, d}),
                                         values.reshaped({1, n, h, d}), /*causal=*/true, options);
    std::copy(part.output.data().begin(), part.output.data().end(), out.rows(i, 1).begin());
  }
  return out;
}

}  // namespace relayattn
