#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "relayattn/attention.hpp"
#include "relayattn/costmodel.hpp"
#include "relayattn/errors.hpp"
#include "relayattn/verification.hpp"

namespace relayattn {
namespace {

// Second oracle built from softmax_lse + matmul, one head at a time.
Tensor oracle_via_softmax(const Tensor& q, const Tensor& k, const Tensor& v) {
  const std::size_t l = q.dim(0), h = q.dim(1), d = q.dim(2);
  Tensor out({l, h, d});
  for (std::size_t head = 0; head < h; ++head) {
    Tensor qh({l, d}), kh({l, d}), vt({d, l});
    for (std::size_t t = 0; t < l; ++t) {
      for (std::size_t x = 0; x < d; ++x) {
        qh[t * d + x] = q[(t * h + head) * d + x];
        kh[t * d + x] = k[(t * h + head) * d + x];
        vt[x * l + t] = v[(t * h + head) * d + x];
      }
    }
    Tensor logits = matmul(qh, kh);
    for (std::size_t t = 0; t < l; ++t) {
      for (std::size_t j = 0; j < l; ++j) {
        logits[t * l + j] = j <= t ? logits[t * l + j] / std::sqrt(double(d)) : -INFINITY;
      }
    }
    const Tensor o = matmul(softmax_lse(logits).probs, vt);
    for (std::size_t t = 0; t < l; ++t) {
      for (std::size_t x = 0; x < d; ++x) out[(t * h + head) * d + x] = o[t * d + x];
    }
  }
  return out;
}

TEST(NaiveAttention, SingleTokenReturnsValue) {
  const Tensor q({1, 1, 2}, {0.3, 0.4}), k({1, 1, 2}, {1, -1}), v({1, 1, 2}, {7, -3});
  EXPECT_EQ(naive_causal_attention(q, k, v), v);
}

TEST(NaiveAttention, UniformWeightsAverage) {
  const Tensor q({2, 1, 1}, {0, 0}), k({2, 1, 1}, {1, 5}), v({2, 1, 1}, {1, 3});
  const Tensor o = naive_causal_attention(q, k, v);
  EXPECT_DOUBLE_EQ(o[0], 1.0);
  EXPECT_DOUBLE_EQ(o[1], 2.0);
}

TEST(NaiveAttention, MatchesSecondOracle) {
  std::mt19937_64 rng(5);
  const Tensor q = random_tensor({5, 2, 4}, rng), k = random_tensor({5, 2, 4}, rng),
               v = random_tensor({5, 2, 4}, rng);
  EXPECT_LT(max_abs_diff(naive_causal_attention(q, k, v), oracle_via_softmax(q, k, v)), 1e-12);
}

TEST(NaiveAttention, ShapeMismatchThrows) {
  EXPECT_THROW(naive_causal_attention(Tensor({2, 1, 2}), Tensor({3, 1, 2}), Tensor({3, 1, 2})),
               DimensionError);
}

TEST(AttentionWithLse, SingleKey) {
  const Tensor q({1, 1, 1, 2}, {0.5, 1.0}), k({1, 1, 1, 2}, {2.0, -1.0}), v({1, 1, 1, 2}, {3, 4});
  const auto r = attention_with_lse(q, k, v, true);
  EXPECT_EQ(r.output, v);
  EXPECT_NEAR(r.lse[0], (0.5 * 2.0 - 1.0) / std::sqrt(2.0), 1e-15);
}

TEST(AttentionWithLse, IdenticalKeysClosedForm) {
  const std::size_t n = 6;
  Tensor k({1, n, 1, 2}), v({1, n, 1, 2});
  for (std::size_t j = 0; j < n; ++j) {
    k[2 * j] = 0.7;
    k[2 * j + 1] = -0.2;
    v[2 * j] = 1.5;
    v[2 * j + 1] = -2.5;
  }
  const Tensor q({1, 1, 1, 2}, {1.0, 2.0});
  const auto r = attention_with_lse(q, k, v, false);
  EXPECT_NEAR(r.output[0], 1.5, 1e-15);
  EXPECT_NEAR(r.output[1], -2.5, 1e-15);
  EXPECT_NEAR(r.lse[0], std::log(double(n)) + (0.7 - 0.4) / std::sqrt(2.0), 1e-14);
}

TEST(AttentionWithLse, CausalMatchesNaive) {
  std::mt19937_64 rng(11);
  const Tensor q = random_tensor({7, 3, 4}, rng), k = random_tensor({7, 3, 4}, rng),
               v = random_tensor({7, 3, 4}, rng);
  const auto r = attention_with_lse(q.reshaped({1, 7, 3, 4}), k.reshaped({1, 7, 3, 4}),
                                    v.reshaped({1, 7, 3, 4}), true);
  EXPECT_LT(max_abs_diff(r.output.reshaped({7, 3, 4}), naive_causal_attention(q, k, v)), 1e-12);
}

TEST(AttentionWithLse, ContractErrors) {
  EXPECT_THROW(attention_with_lse(Tensor({1, 3, 1, 2}), Tensor({1, 2, 1, 2}), Tensor({1, 2, 1, 2}), true),
               ContractError);
  EXPECT_THROW(attention_with_lse(Tensor({1, 1, 1, 2}), Tensor({1, 0, 1, 2}), Tensor({1, 0, 1, 2}), false),
               ContractError);
}

TEST(RelayFusion, EqualLseGivesMidpoint) {
  EXPECT_DOUBLE_EQ(relay_alpha_sys(1.3, 1.3), 0.5);
  const Tensor o = relay_fusion(Tensor({1, 1, 1, 2}, {2, 4}), Tensor({1, 1, 1}, {0.7}),
                                Tensor({1, 1, 1, 2}, {6, 0}), Tensor({1, 1, 1}, {0.7}));
  EXPECT_DOUBLE_EQ(o[0], 4.0);
  EXPECT_DOUBLE_EQ(o[1], 2.0);
}

TEST(RelayFusion, LnThreeGap) {
  EXPECT_NEAR(relay_alpha_sys(0.0, std::log(3.0)), 0.25, 1e-15);
}

TEST(RelayFusion, SaturatesAtLargeGap) {
  EXPECT_NEAR(relay_alpha_sys(50.0, 0.0), 1.0, 1e-12);
  const Tensor o = relay_fusion(Tensor({1, 1, 1, 1}, {3}), Tensor({1, 1, 1}, {50.0}),
                                Tensor({1, 1, 1, 1}, {-9}), Tensor({1, 1, 1}, {0.0}));
  EXPECT_NEAR(o[0], 3.0, 1e-12);
  EXPECT_NEAR(relay_alpha_sys(-800.0, 800.0), 0.0, 1e-300);
  EXPECT_TRUE(std::isfinite(relay_alpha_sys(800.0, -800.0)));
}

TEST(RelayAttention, BatchOneEqualsBaseline) {
  std::mt19937_64 rng(3);
  const Tensor q = random_tensor({1, 1, 2, 4}, rng);
  const Tensor sk = random_tensor({5, 2, 4}, rng), sv = random_tensor({5, 2, 4}, rng);
  const std::vector<ContextKv> ctx{{random_tensor({3, 2, 4}, rng), random_tensor({3, 2, 4}, rng)}};
  EXPECT_LT(max_abs_diff(relay_attention(q, sk, sv, ctx), baseline_attention(q, sk, sv, ctx)), 1e-14);
}

TEST(RelayAttention, RaggedContextsMatchOracle) {
  std::mt19937_64 rng(17);
  AttentionCase c;
  c.batch = 4;
  c.heads = 2;
  c.head_dim = 4;
  c.system_len = 8;
  c.queries = 1;
  c.sys_k = random_tensor({8, 2, 4}, rng);
  c.sys_v = random_tensor({8, 2, 4}, rng);
  c.q = Tensor({4, 1, 2, 4});
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t ctx = 2 * i + 1;
    c.contexts.push_back({random_tensor({ctx, 2, 4}, rng), random_tensor({ctx, 2, 4}, rng)});
    c.full_queries.push_back(random_tensor({8 + ctx, 2, 4}, rng));
    const auto last = c.full_queries.back().rows(8 + ctx - 1, 1);
    std::copy(last.begin(), last.end(), c.q.rows(i, 1).begin());
  }
  EXPECT_LT(max_abs_diff(relay_attention(c.q, c.sys_k, c.sys_v, c.contexts), oracle_attention(c)), 1e-10);
}

TEST(RelayAttention, PromptPhaseSeesWholeSystemPrompt) {
  // Block mask oracle: 6 queries, 4 system keys (all visible), causal inside context.
  std::mt19937_64 rng(23);
  const std::size_t b = 2, m = 6, s = 4, h = 1, d = 4;
  const Tensor q = random_tensor({b, m, h, d}, rng);
  const Tensor sk = random_tensor({s, h, d}, rng), sv = random_tensor({s, h, d}, rng);
  std::vector<ContextKv> ctx;
  for (std::size_t i = 0; i < b; ++i) ctx.push_back({random_tensor({m, h, d}, rng), random_tensor({m, h, d}, rng)});
  const Tensor got = relay_attention(q, sk, sv, ctx);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t t = 0; t < m; ++t) {
      std::vector<double> w;
      std::vector<const double*> vals;
      auto add = [&](const Tensor& keys, const Tensor& values, std::size_t row) {
        double z = 0;
        for (std::size_t x = 0; x < d; ++x) z += q[((i * m + t) * h) * d + x] * keys[row * d + x];
        w.push_back(std::exp(z / 2.0));
        vals.push_back(values.data().data() + row * d);
      };
      for (std::size_t j = 0; j < s; ++j) add(sk, sv, j);
      for (std::size_t j = 0; j <= t; ++j) add(ctx[i].keys, ctx[i].values, j);
      double denom = 0;
      for (double x : w) denom += x;
      for (std::size_t x = 0; x < d; ++x) {
        double want = 0;
        for (std::size_t j = 0; j < w.size(); ++j) want += w[j] / denom * vals[j][x];
        EXPECT_NEAR(got[((i * m + t) * h) * d + x], want, 1e-12);
      }
    }
  }
}

TEST(RelayAttention, EmptySystemPromptIsContractError) {
  const std::vector<ContextKv> ctx{{Tensor({1, 1, 2}), Tensor({1, 1, 2})}};
  EXPECT_THROW(relay_attention(Tensor({1, 1, 1, 2}), Tensor({0, 1, 2}), Tensor({0, 1, 2}), ctx), ContractError);
}

TEST(RelayAttention, SegmentOrderIsBitwiseIrrelevant) {
  std::mt19937_64 rng(29);
  for (int n = 0; n < 20; ++n) {
    const AttentionCase c = make_attention_case(rng, n % 2 == 0);
    const Tensor a = relay_attention(c.q, c.sys_k, c.sys_v, c.contexts,
                                     {Precision::kFloat64, nullptr, SegmentOrder::kSystemFirst});
    const Tensor b = relay_attention(c.q, c.sys_k, c.sys_v, c.contexts,
                                     {Precision::kFloat64, nullptr, SegmentOrder::kContextFirst});
    EXPECT_EQ(a, b);
  }
}

TEST(Traffic, DecodeCountsMatchClosedForms) {
  std::mt19937_64 rng(31);
  const std::size_t b = 3, s = 5, c = 4, h = 2, hd = 3;
  const Tensor q = random_tensor({b, 1, h, hd}, rng);
  const Tensor sk = random_tensor({s, h, hd}, rng), sv = random_tensor({s, h, hd}, rng);
  std::vector<ContextKv> ctx;
  for (std::size_t i = 0; i < b; ++i) ctx.push_back({random_tensor({c, h, hd}, rng), random_tensor({c, h, hd}, rng)});
  TrafficCounter base, relay;
  baseline_attention(q, sk, sv, ctx, {Precision::kFloat64, &base});
  relay_attention(q, sk, sv, ctx, {Precision::kFloat64, &relay});
  const std::uint64_t d = h * hd;
  EXPECT_EQ(base.transferred(), b * d * (s + c + 2));
  EXPECT_EQ(relay.transferred(), d * (s + b * c + 7 * b));
  EXPECT_EQ(relay.elements_written, 3 * b * d);
  EXPECT_EQ(base.transferred(), traffic_baseline(b, s, c, d));
  EXPECT_EQ(relay.transferred(), traffic_relay(b, s, c, d));
}

TEST(Traffic, CounterReset) {
  TrafficCounter t{1, 2, 3};
  t.reset();
  EXPECT_EQ(t, TrafficCounter{});
}

}  // namespace
}  // namespace relayattn
