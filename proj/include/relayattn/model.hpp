// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "relayattn/attention.hpp"
#include "relayattn/config_file.hpp"
#include "relayattn/costmodel.hpp"
#include "relayattn/kvcache.hpp"
#include "relayattn/mode.hpp"
#include "relayattn/numerics.hpp"

namespace relayattn {

using TokenId = std::int32_t;
inline constexpr TokenId kEndToken = 0;

/// Hyper-parameters of the toy decoder. Config files use these field names
/// as keys; `model_dim` may be given but must equal heads * head_dim.
struct ModelConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t head_dim = 16;
  std::size_t ffn_dim = 128;
  std::size_t vocab_size = 256;
  Precision precision = Precision::kFloat64;
  std::uint64_t seed = 0;

  std::size_t model_dim() const noexcept { return heads * head_dim; }
  KvLayout kv_layout() const noexcept { return {layers, heads, head_dim}; }
  ModelShape shape() const noexcept { return {layers, model_dim(), ffn_dim, vocab_size}; }

  /// Throws ConfigError on zero sizes or an odd head_dim.
  void validate() const;

  static ModelConfig from_key_values(const KeyValues& kv);
  static ModelConfig load(const std::filesystem::path& path);
  KeyValues to_key_values() const;
};

struct LayerWeights {
  Tensor attn_norm;  ///< [D]
  Tensor wq, wk, wv, wo;  ///< [D x D], stored output-major
  Tensor mlp_norm;   ///< [D]
  Tensor w_up;       ///< [F x D]
  Tensor w_down;     ///< [D x F]

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct DecoderWeights {
  Tensor embedding;  ///< [V x D]
  std::vector<LayerWeights> layers;
  Tensor final_norm;  ///< [D]
  Tensor lm_head;     ///< [V x D]

  /// Binary container in the style of the system cache file ("RAWT").
  void save(const std::filesystem::path& path) const;
  static DecoderWeights load(const std::filesystem::path& path, const ModelConfig& config);
  friend bool operator==(const DecoderWeights&, const DecoderWeights&) = default;
};

/// Normal(0, 0.02) projections drawn from a seeded mt19937_64 in a fixed
/// order; norm gains are 1.
DecoderWeights init_weights(const ModelConfig& config);

/// Pre-norm decoder: x += Wo·Attn(RMSNorm(x)); x += Wdown·SiLU(Wup·RMSNorm(x)).
/// Rotary positions on q and k. Attention itself is supplied by the caller,
/// which is what lets the baseline and relay paths share every other op.
class DecoderModel {
 public:
  explicit DecoderModel(ModelConfig config);
  DecoderModel(ModelConfig config, DecoderWeights weights);

  const ModelConfig& config() const noexcept { return config_; }
  const DecoderWeights& weights() const noexcept { return weights_; }

  /// [m x D] embeddings. Throws ContractError for out-of-vocabulary ids.
  Tensor embed(std::span<const TokenId> tokens) const;

  struct Qkv {
    Tensor q, k, v;  ///< [m x h x d], q and k rotated
  };
  /// Projections of hidden [m x D] whose rows sit at positions
  /// first_position, first_position + 1, ...
  Qkv project_qkv(std::size_t layer, const Tensor& hidden, std::size_t first_position) const;

  /// Output projection, residual add and MLP block, in place on hidden.
  void finish_layer(std::size_t layer, Tensor& hidden, const Tensor& attention) const;

  /// Vocabulary logits for the last row of hidden.
  std::vector<double> logits(const Tensor& hidden) const;

 private:
  ModelConfig config_;
  DecoderWeights weights_;
};

/// Greedy choice; ties go to the lowest id.
TokenId argmax_token(std::span<const double> logits);

/// Runs the prompt phase on the system prompt alone (positions 0..s-1) and
/// keeps every layer's keys and values.
SystemKvCache prefill_system_cache(const DecoderModel& model, std::span<const TokenId> system_tokens,
                                   std::string prompt_id = "default");

enum class Phase { kPrompt, kAutoregressive };

struct GenerationRequestState {
  RequestId id = 0;
  std::vector<TokenId> prompt;     ///< user tokens
  std::vector<TokenId> generated;  ///< emitted tokens
  Phase phase = Phase::kPrompt;
};

struct StepOutput {
  std::vector<RequestId> ids;
  std::vector<TokenId> tokens;
  std::vector<std::vector<double>> logits;
};

struct EngineOptions {
  ExecutionMode mode = ExecutionMode::kBaseline;
  std::size_t num_blocks = 4096;
  std::size_t block_size = kDefaultBlockSize;
};

/// Runs batches of requests through the model in either execution mode.
///
/// Baseline: every request's paged cache holds [system || user || generated]
/// and attention is plain causal. Relay: paged caches hold only
/// request-specific tokens at positions offset by s, and the system KVs come
/// from a shared SystemKvCache.
class InferenceEngine {
 public:
  InferenceEngine(std::shared_ptr<const DecoderModel> model, EngineOptions options);

  /// Baseline keeps the tokens for replication; relay prefills the shared cache.
  void set_system_prompt(std::vector<TokenId> tokens, std::string prompt_id = "default");
  /// Relay only: install an already prefilled cache.
  void attach_system_cache(std::shared_ptr<const SystemKvCache> cache);

  ExecutionMode mode() const noexcept { return options_.mode; }
  std::size_t system_len() const noexcept;
  const DecoderModel& model() const noexcept { return *model_; }

  /// Throws ContractError for an empty prompt.
  RequestId add_request(std::vector<TokenId> user_tokens);
  const GenerationRequestState& state(RequestId id) const;

  /// First token for each request; fills the caches. Throws ConfigError in
  /// relay mode when no system cache is present.
  StepOutput forward_prompt_phase(std::span<const RequestId> ids);
  /// One greedy token per request; every cache grows by one token.
  StepOutput forward_decode_step(std::span<const RequestId> ids);

  /// Tokens cached for the request (layer 0), system copy included in baseline.
  std::size_t context_length(RequestId id) const;
  std::size_t release(RequestId id);

  const PagedKvCache& kv_cache() const noexcept { return cache_; }
  /// Number of full system-prompt copies held: one per live request in
  /// baseline, one shared copy in relay.
  std::size_t system_prompt_copies() const;
  TrafficCounter& traffic() noexcept { return traffic_; }

 private:
  StepOutput run(std::span<const RequestId> ids, bool prompt);

  std::shared_ptr<const DecoderModel> model_;
  EngineOptions options_;
  PagedKvCache cache_;
  std::vector<TokenId> system_tokens_;
  std::shared_ptr<const SystemKvCache> system_cache_;
  std::map<RequestId, GenerationRequestState> requests_;
  RequestId next_id_ = 1;
  TrafficCounter traffic_;
};

using StepObserver = std::function<void(std::size_t step, const StepOutput& output)>;

/// Prompt phase, then greedy decode steps until each request has
/// max_new_tokens tokens or emits kEndToken (which is kept). The observer
/// sees every step, step 0 being the prompt phase.
std::vector<std::vector<TokenId>> generate(InferenceEngine& engine,
                                           const std::vector<std::vector<TokenId>>& prompts,
                                           std::size_t max_new_tokens,
                                           const StepObserver& observer = {});

}  // namespace relayattn
