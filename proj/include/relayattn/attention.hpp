// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "relayattn/numerics.hpp"
#include "relayattn/tensor.hpp"

namespace relayattn {

/// Element-access counts for one attention step.
///
/// Units follow the DRAM<->SRAM accounting of the memory-traffic model: a
/// query or output vector of one token costs h*d elements, and the cached
/// key/value pair of one token also costs h*d elements. `transferred()` is
/// the quantity the closed-form traffic counts predict. Log-sum-exp scalars
/// are tallied separately in `lse_elements` and never enter `transferred()`.
struct TrafficCounter {
  std::uint64_t elements_read = 0;
  std::uint64_t elements_written = 0;
  std::uint64_t lse_elements = 0;

  std::uint64_t transferred() const noexcept { return elements_read + elements_written; }
  void reset() noexcept { *this = TrafficCounter{}; }

  TrafficCounter& operator+=(const TrafficCounter& other) noexcept {
    elements_read += other.elements_read;
    elements_written += other.elements_written;
    lse_elements += other.lse_elements;
    return *this;
  }
  friend bool operator==(const TrafficCounter&, const TrafficCounter&) = default;
};

/// Attention output together with one log-sum-exp per (batch, query, head).
struct LseAttentionOutput {
  Tensor output;  ///< [b x m x h x d]
  Tensor lse;     ///< [b x m x h]
};

struct AttentionOptions {
  Precision precision = Precision::kFloat64;
  TrafficCounter* counter = nullptr;
};

/// Reference causal attention over a single sequence, q/k/v [l x h x d].
/// Uses softmax weights exp(x - max) / sum directly; no caching, no counters.
Tensor naive_causal_attention(const Tensor& q, const Tensor& k, const Tensor& v);

/// Scaled dot-product attention returning the log-sum-exp of the logits.
///
/// q is [b x m x h x d], k and v are [b x n x h x d]. With `causal` the m
/// queries are the last m positions of the n-long sequence, so query t
/// (0-based) attends keys 0..n-m+t. Without it every query sees all n keys.
/// Throws ContractError if a query would attend to no key.
LseAttentionOutput attention_with_lse(const Tensor& q, const Tensor& k, const Tensor& v,
                                      bool causal, const AttentionOptions& options = {});

/// Coefficient of the system term: 1 / (1 + exp(lse_ctx - lse_sys)).
double relay_alpha_sys(double lse_sys, double lse_ctx) noexcept;

/// Convex combination of two partial attention outputs weighted by their
/// log-sum-exps. Always evaluated in double precision.
Tensor relay_fusion(const Tensor& o_sys, const Tensor& lse_sys, const Tensor& o_ctx,
                    const Tensor& lse_ctx, TrafficCounter* counter = nullptr);

/// Per-request context keys/values [c x h x d], including the current tokens.
struct ContextKv {
  Tensor keys;
  Tensor values;
};

/// Which partial attention is computed first. Results do not depend on it.
enum class SegmentOrder { kSystemFirst, kContextFirst };

struct RelayOptions {
  Precision precision = Precision::kFloat64;
  TrafficCounter* counter = nullptr;
  SegmentOrder order = SegmentOrder::kSystemFirst;
};

/// Exact causal attention over [system || context] for a batch of requests,
/// reading the shared system KVs once per batch.
///
/// q is [b x m x h x d]; sys_k/sys_v are [s x h x d] with s >= 1; contexts
/// holds one entry per request whose last m rows are the current tokens.
Tensor relay_attention(const Tensor& q, const Tensor& sys_k, const Tensor& sys_v,
                       std::span<const ContextKv> contexts, const RelayOptions& options = {});

/// Ragged form: request i contributes queries [m_i x h x d]. The system step
/// flattens all sum(m_i) queries into a single batch.
std::vector<Tensor> relay_attention_ragged(std::span<const Tensor> queries,
                                           const Tensor& sys_k, const Tensor& sys_v,
                                           std::span<const ContextKv> contexts,
                                           const RelayOptions& options = {});

/// Conventional path: each request attends causally over its own copy of
/// [system || context]. s may be zero here.
Tensor baseline_attention(const Tensor& q, const Tensor& sys_k, const Tensor& sys_v,
                          std::span<const ContextKv> contexts,
                          const AttentionOptions& options = {});

}  // namespace relayattn
