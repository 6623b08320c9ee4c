// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayattn/verification.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "relayattn/model.hpp"

namespace relayattn {
namespace {

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double x : t.data()) m = std::max(m, std::abs(x));
  return m;
}

// Absolute error in f64; error relative to the output scale in f32.
double scaled_diff(const Tensor& got, const Tensor& want, Precision precision) {
  const double diff = max_abs_diff(got, want);
  return precision == Precision::kFloat32 ? diff / std::max(1.0, max_abs(want)) : diff;
}

}  // namespace

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  Tensor t(shape);
  for (double& x : t.data()) x = dist(rng);
  return t;
}

AttentionCase make_attention_case(std::mt19937_64& rng, bool prompt_phase) {
  static constexpr std::size_t kHeads[] = {1, 2, 4};
  static constexpr std::size_t kDims[] = {4, 8, 16};
  AttentionCase c;
  c.batch = pick(rng, 1, 8);
  c.heads = kHeads[pick(rng, 0, 2)];
  c.head_dim = kDims[pick(rng, 0, 2)];
  c.system_len = pick(rng, 1, 64);
  c.queries = prompt_phase ? pick(rng, 1, 16) : 1;
  const std::size_t h = c.heads;
  const std::size_t d = c.head_dim;
  c.sys_k = random_tensor({c.system_len, h, d}, rng);
  c.sys_v = random_tensor({c.system_len, h, d}, rng);
  c.q = Tensor({c.batch, c.queries, h, d});
  for (std::size_t i = 0; i < c.batch; ++i) {
    const std::size_t ctx = pick(rng, c.queries, 64);
    ContextKv kv{random_tensor({ctx, h, d}, rng), random_tensor({ctx, h, d}, rng)};
    Tensor full_q = random_tensor({c.system_len + ctx, h, d}, rng);
    const auto tail = full_q.rows(c.system_len + ctx - c.queries, c.queries);
    std::copy(tail.begin(), tail.end(), c.q.rows(i, 1).begin());
    c.contexts.push_back(std::move(kv));
    c.full_queries.push_back(std::move(full_q));
  }
  return c;
}

Tensor oracle_attention(const AttentionCase& c) {
  Tensor out(c.q.shape());
  for (std::size_t i = 0; i < c.batch; ++i) {
    const Tensor k = concat_rows(c.sys_k, c.contexts[i].keys);
    const Tensor v = concat_rows(c.sys_v, c.contexts[i].values);
    const Tensor full = naive_causal_attention(c.full_queries[i], k, v);
    const auto tail = full.rows(full.dim(0) - c.queries, c.queries);
    std::copy(tail.begin(), tail.end(), out.rows(i, 1).begin());
  }
  return out;
}

std::vector<CheckResult> run_verification(const VerifyOptions& options) {
  std::mt19937_64 rng(options.seed);
  const bool f32 = options.precision == Precision::kFloat32;
  const double attn_tol = f32 ? 1e-3 : 1e-10;

  CheckResult relay{"relay_vs_oracle", 0, 0.0, attn_tol, 0, true};
  CheckResult baseline{"baseline_vs_oracle", 0, 0.0, attn_tol, 0, true};
  CheckResult order{"segment_order_bitwise", 0, 0.0, 0.0, 0, true};
  for (std::size_t n = 0; n < options.attention_cases; ++n) {
    const AttentionCase c = make_attention_case(rng, n % 2 == 1);
    const Tensor want = oracle_attention(c);
    const Tensor got = relay_attention(c.q, c.sys_k, c.sys_v, c.contexts,
                                       {options.precision, nullptr, SegmentOrder::kSystemFirst});
    const Tensor swapped = relay_attention(c.q, c.sys_k, c.sys_v, c.contexts,
                                           {options.precision, nullptr, SegmentOrder::kContextFirst});
    const Tensor base =
        baseline_attention(c.q, c.sys_k, c.sys_v, c.contexts, {options.precision, nullptr});
    const double dr = scaled_diff(got, want, options.precision);
    const double db = scaled_diff(base, want, options.precision);
    relay.max_abs_diff = std::max(relay.max_abs_diff, dr);
    baseline.max_abs_diff = std::max(baseline.max_abs_diff, db);
    relay.mismatches += dr >= attn_tol;
    baseline.mismatches += db >= attn_tol;
    const bool same = got == swapped;
    order.max_abs_diff = std::max(order.max_abs_diff, max_abs_diff(got, swapped));
    order.mismatches += !same;
    ++relay.cases;
    ++baseline.cases;
    ++order.cases;
  }

  const double logit_tol = f32 ? 1e-3 : 1e-8;
  CheckResult logits{"model_logits_baseline_vs_relay", 0, 0.0, logit_tol, 0, true};
  CheckResult tokens{"model_tokens_baseline_vs_relay", 0, 0.0, 0.0, 0, true};
  for (std::size_t n = 0; n < options.model_cases; ++n) {
    ModelConfig cfg;
    cfg.layers = pick(rng, 1, 4);
    cfg.heads = pick(rng, 1, 4);
    cfg.head_dim = 2 * pick(rng, 1, 8);
    cfg.ffn_dim = pick(rng, 8, 64);
    cfg.vocab_size = pick(rng, 16, 256);
    cfg.precision = options.precision;
    cfg.seed = rng();
    auto model = std::make_shared<const DecoderModel>(cfg);
    auto token = [&] { return static_cast<TokenId>(pick(rng, 0, cfg.vocab_size - 1)); };
    std::vector<TokenId> system(pick(rng, 1, 64));
    for (auto& t : system) t = token();
    std::vector<std::vector<TokenId>> prompts(pick(rng, 1, 6));
    for (auto& p : prompts) {
      p.resize(pick(rng, 1, 16));
      for (auto& t : p) t = token();
    }
    const std::size_t max_new = pick(rng, 4, 16);

    std::vector<std::vector<std::vector<double>>> base_logits;
    InferenceEngine base(model, {ExecutionMode::kBaseline, 256, kDefaultBlockSize});
    base.set_system_prompt(system);
    const auto base_tokens = generate(base, prompts, max_new, [&](std::size_t, const StepOutput& o) {
      base_logits.push_back(o.logits);
    });
    std::size_t step = 0;
    double worst = 0.0;
    InferenceEngine relay_engine(model, {ExecutionMode::kRelay, 256, kDefaultBlockSize});
    relay_engine.set_system_prompt(system);
    const auto relay_tokens =
        generate(relay_engine, prompts, max_new, [&](std::size_t, const StepOutput& o) {
          if (step < base_logits.size() && base_logits[step].size() == o.logits.size()) {
            for (std::size_t i = 0; i < o.logits.size(); ++i) {
              for (std::size_t v = 0; v < o.logits[i].size(); ++v) {
                worst = std::max(worst, std::abs(o.logits[i][v] - base_logits[step][i][v]));
              }
            }
          } else {
            worst = INFINITY;
          }
          ++step;
        });
    if (step != base_logits.size()) worst = INFINITY;
    logits.max_abs_diff = std::max(logits.max_abs_diff, worst);
    logits.mismatches += worst >= logit_tol;
    tokens.mismatches += base_tokens != relay_tokens;
    ++logits.cases;
    ++tokens.cases;
  }

  std::vector<CheckResult> results{relay, baseline, order, logits, tokens};
  for (auto& r : results) r.passed = r.mismatches == 0;
  return results;
}

void print_check_table(std::ostream& out, std::span<const CheckResult> results) {
  char line[160];
  std::snprintf(line, sizeof(line), "%-32s %7s %14s %11s %10s %s\n", "check", "cases",
                "max_abs_diff", "tolerance", "mismatch", "status");
  out << line;
  for (const auto& r : results) {
    std::snprintf(line, sizeof(line), "%-32s %7zu %14.3e %11.1e %10zu %s\n", r.name.c_str(), r.cases,
                  r.max_abs_diff, r.tolerance, r.mismatches, r.passed ? "PASS" : "FAIL");
    out << line;
  }
}

}  // namespace relayattn
