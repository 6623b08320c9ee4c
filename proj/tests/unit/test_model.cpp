#include <filesystem>
#include <memory>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "relayattn/errors.hpp"
#include "relayattn/model.hpp"

namespace relayattn {
namespace {

ModelConfig small_config(std::uint64_t seed = 7) {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.head_dim = 4;
  c.ffn_dim = 16;
  c.vocab_size = 32;
  c.seed = seed;
  return c;
}

std::shared_ptr<const DecoderModel> small_model(std::uint64_t seed = 7) {
  return std::make_shared<const DecoderModel>(small_config(seed));
}

TEST(ModelConfig, DefaultsAreDeskScale) {
  const ModelConfig c;
  EXPECT_EQ(c.layers, 4u);
  EXPECT_EQ(c.heads, 4u);
  EXPECT_EQ(c.head_dim, 16u);
  EXPECT_EQ(c.vocab_size, 256u);
  EXPECT_EQ(c.model_dim(), 64u);
}

TEST(ModelConfig, KeyValueRoundTrip) {
  ModelConfig c = small_config(99);
  c.precision = Precision::kFloat32;
  EXPECT_EQ(ModelConfig::from_key_values(c.to_key_values()).to_key_values(), c.to_key_values());
}

TEST(ModelConfig, RejectsBadValues) {
  ModelConfig odd = small_config();
  odd.head_dim = 3;
  EXPECT_THROW(odd.validate(), ConfigError);
  EXPECT_THROW(ModelConfig::from_key_values({{"layers", "2"}, {"colour", "red"}}), ConfigError);
  EXPECT_THROW(ModelConfig::from_key_values({{"heads", "2"}, {"head_dim", "4"}, {"model_dim", "9"}}),
               ConfigError);
  EXPECT_THROW(ModelConfig::from_key_values({{"layers", "two"}}), ConfigError);
}

TEST(Weights, DeterministicForSeed) {
  EXPECT_EQ(init_weights(small_config(1)), init_weights(small_config(1)));
  EXPECT_NE(init_weights(small_config(1)), init_weights(small_config(2)));
}

TEST(Weights, ScaleIsSmall) {
  const auto w = init_weights(small_config());
  double sq = 0;
  for (double x : w.layers[0].wq.data()) sq += x * x;
  const double sd = std::sqrt(sq / static_cast<double>(w.layers[0].wq.size()));
  EXPECT_NEAR(sd, 0.02, 0.006);
  for (double g : w.final_norm.data()) EXPECT_EQ(g, 1.0);
}

TEST(Weights, SaveLoadRoundTrip) {
  std::filesystem::create_directories(RELAYATTN_TEST_TMPDIR);
  const auto path = std::filesystem::path(RELAYATTN_TEST_TMPDIR) / "w.rawt";
  const auto w = init_weights(small_config());
  w.save(path);
  EXPECT_EQ(DecoderWeights::load(path, small_config()), w);
  ModelConfig other = small_config();
  other.vocab_size = 64;
  EXPECT_THROW(DecoderWeights::load(path, other), ConfigError);
}

TEST(Model, EmbedRejectsOutOfVocabulary) {
  const auto m = small_model();
  const std::vector<TokenId> bad{40};
  EXPECT_THROW(m->embed(bad), ContractError);
}

TEST(Model, ArgmaxTiesGoToLowestId) {
  const std::vector<double> logits{0.1, 0.5, 0.5, -2};
  EXPECT_EQ(argmax_token(logits), 1);
}

TEST(SystemCache, PrefillIsDeterministic) {
  const auto m = small_model();
  const std::vector<TokenId> sys{3, 4, 5, 6, 7};
  const SystemKvCache a = prefill_system_cache(*m, sys);
  const SystemKvCache b = prefill_system_cache(*m, sys);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.system_len(), sys.size());
}

TEST(SystemCache, LayerZeroKeysAreRotatedProjections) {
  const auto m = small_model();
  const std::vector<TokenId> sys{3, 4, 5};
  const SystemKvCache cache = prefill_system_cache(*m, sys);
  const Tensor x = m->embed(sys);
  const Tensor normed = rms_norm(x, m->weights().layers[0].attn_norm);
  const Tensor k = matmul(normed, m->weights().layers[0].wk);
  const std::size_t h = 2, d = 4;
  for (std::size_t t = 0; t < sys.size(); ++t) {
    for (std::size_t head = 0; head < h; ++head) {
      Tensor row({d});
      for (std::size_t i = 0; i < d; ++i) row[i] = k[t * h * d + head * d + i];
      const Tensor rotated = rope_apply(row, t);
      for (std::size_t i = 0; i < d; ++i) {
        EXPECT_NEAR(cache.keys(0)[(t * h + head) * d + i], rotated[i], 1e-14);
      }
    }
  }
}

TEST(SystemCache, EmptyPromptIsContractError) {
  EXPECT_THROW(prefill_system_cache(*small_model(), std::vector<TokenId>{}), ContractError);
}

TEST(Engine, RelayWithoutCacheIsConfigError) {
  InferenceEngine e(small_model(), {ExecutionMode::kRelay, 64, 4});
  const RequestId id = e.add_request({1, 2});
  EXPECT_THROW(e.forward_prompt_phase(std::span<const RequestId>(&id, 1)), ConfigError);
}

TEST(Engine, EmptyUserPromptIsContractError) {
  InferenceEngine e(small_model(), {ExecutionMode::kBaseline, 64, 4});
  EXPECT_THROW(e.add_request({}), ContractError);
}

TEST(Engine, CrossModeLogitsAndTokens) {
  const auto m = small_model(3);
  const std::vector<TokenId> sys{5, 9, 11, 2, 30, 17, 8};
  const std::vector<std::vector<TokenId>> prompts{{1, 2, 3}, {4}, {7, 7, 7, 7, 7}};
  std::vector<StepOutput> base_steps, relay_steps;
  InferenceEngine base(m, {ExecutionMode::kBaseline, 128, 4});
  base.set_system_prompt(sys);
  InferenceEngine relay(m, {ExecutionMode::kRelay, 128, 4});
  relay.set_system_prompt(sys);
  const auto tb = generate(base, prompts, 6, [&](std::size_t, const StepOutput& o) { base_steps.push_back(o); });
  const auto tr = generate(relay, prompts, 6, [&](std::size_t, const StepOutput& o) { relay_steps.push_back(o); });
  EXPECT_EQ(tb, tr);
  ASSERT_EQ(base_steps.size(), relay_steps.size());
  for (std::size_t s = 0; s < base_steps.size(); ++s) {
    ASSERT_EQ(base_steps[s].logits.size(), relay_steps[s].logits.size());
    for (std::size_t i = 0; i < base_steps[s].logits.size(); ++i) {
      for (std::size_t v = 0; v < base_steps[s].logits[i].size(); ++v) {
        EXPECT_NEAR(base_steps[s].logits[i][v], relay_steps[s].logits[i][v], 1e-8);
      }
    }
  }
}

TEST(Engine, CacheLengthBookkeeping) {
  const auto m = small_model();
  const std::vector<TokenId> sys{1, 2, 3, 4, 5, 6};
  const std::vector<TokenId> user{7, 8, 9};
  for (const ExecutionMode mode : {ExecutionMode::kBaseline, ExecutionMode::kRelay}) {
    InferenceEngine e(m, {mode, 128, 4});
    e.set_system_prompt(sys);
    const std::vector<RequestId> ids{e.add_request(user), e.add_request(user)};
    e.forward_prompt_phase(ids);
    EXPECT_EQ(e.state(ids[0]).phase, Phase::kAutoregressive);
    const std::size_t steps = 4;
    for (std::size_t t = 0; t < steps; ++t) e.forward_decode_step(ids);
    // The prompt phase caches the user prompt; each decode step caches the
    // token it consumes.
    const std::size_t expected = user.size() + steps + (mode == ExecutionMode::kBaseline ? sys.size() : 0);
    EXPECT_EQ(e.context_length(ids[0]), expected) << to_string(mode);
    EXPECT_EQ(e.system_prompt_copies(), mode == ExecutionMode::kBaseline ? 2u : 1u);
  }
}

TEST(Engine, AttachedCacheMatchesSetPrompt) {
  const auto m = small_model(4);
  const std::vector<TokenId> sys{2, 4, 6, 8};
  InferenceEngine a(m, {ExecutionMode::kRelay, 64, 4});
  a.set_system_prompt(sys);
  InferenceEngine b(m, {ExecutionMode::kRelay, 64, 4});
  b.attach_system_cache(std::make_shared<const SystemKvCache>(prefill_system_cache(*m, sys)));
  EXPECT_EQ(generate(a, {{1, 3}}, 5), generate(b, {{1, 3}}, 5));
}

TEST(Engine, PoolExhaustionIsCapacityError) {
  InferenceEngine e(small_model(), {ExecutionMode::kBaseline, 2, 4});
  e.set_system_prompt({1, 2, 3, 4, 5, 6});
  const RequestId id = e.add_request({1, 2, 3});
  EXPECT_THROW(e.forward_prompt_phase(std::span<const RequestId>(&id, 1)), CapacityError);
  EXPECT_EQ(e.kv_cache().allocated_blocks(), 0u);
}

TEST(Engine, RelayTrafficMatchesClosedFormPerLayer) {
  const auto m = small_model();
  const std::vector<TokenId> sys{1, 2, 3, 4, 5};
  InferenceEngine e(m, {ExecutionMode::kRelay, 128, 4});
  e.set_system_prompt(sys);
  const std::vector<RequestId> ids{e.add_request({3, 4}), e.add_request({5, 6})};
  e.forward_prompt_phase(ids);
  e.traffic().reset();
  e.forward_decode_step(ids);
  // Context holds 3 tokens after appending the new one.
  const std::uint64_t d = 8, b = 2, s = 5, c = 3;
  EXPECT_EQ(e.traffic().transferred(), m->config().layers * d * (s + b * c + 7 * b));
}

TEST(Generate, StopsAtEndToken) {
  // Find a model and prompt whose greedy continuation hits token 0.
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    ModelConfig c = small_config(seed);
    c.vocab_size = 2;
    auto m = std::make_shared<const DecoderModel>(c);
    InferenceEngine e(m, {ExecutionMode::kBaseline, 64, 4});
    const auto out = generate(e, {{1}}, 8);
    if (!out[0].empty() && out[0].back() == kEndToken && out[0].size() < 8) {
      EXPECT_EQ(std::count(out[0].begin(), out[0].end(), kEndToken), 1);
      EXPECT_EQ(e.kv_cache().num_sequences(), 0u);
      return;
    }
  }
  GTEST_SKIP() << "no seed produced an early end token";
}

}  // namespace
}  // namespace relayattn
