// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>

#include "relayattn/errors.hpp"
#include "relayattn/model.hpp"

namespace relayattn {

InferenceEngine::InferenceEngine(std::shared_ptr<const DecoderModel> model, EngineOptions options)
    : model_(std::move(model)),
      options_(options),
      cache_(model_ ? model_->config().kv_layout() : KvLayout{}, options.num_blocks,
             options.block_size) {
  if (!model_) throw ConfigError("engine needs a model");
}

void InferenceEngine::set_system_prompt(std::vector<TokenId> tokens, std::string prompt_id) {
  if (!requests_.empty()) throw ContractError("system prompt must be set before adding requests");
  if (options_.mode == ExecutionMode::kRelay) {
    system_cache_ = std::make_shared<const SystemKvCache>(
        prefill_system_cache(*model_, tokens, std::move(prompt_id)));
  }
  system_tokens_ = std::move(tokens);
}

void InferenceEngine::attach_system_cache(std::shared_ptr<const SystemKvCache> cache) {
  if (options_.mode != ExecutionMode::kRelay) {
    throw ConfigError("a shared system cache is only used in relay mode");
  }
  if (!cache || !(cache->layout() == model_->config().kv_layout())) {
    throw ConfigError("system cache layout does not match the model");
  }
  if (!requests_.empty()) throw ContractError("system cache must be attached before adding requests");
  system_cache_ = std::move(cache);
}

std::size_t InferenceEngine::system_len() const noexcept {
  if (options_.mode == ExecutionMode::kRelay) return system_cache_ ? system_cache_->system_len() : 0;
  return system_tokens_.size();
}

RequestId InferenceEngine::add_request(std::vector<TokenId> user_tokens) {
  if (user_tokens.empty()) throw ContractError("empty user prompt");
  const RequestId id = next_id_++;
  requests_.emplace(id, GenerationRequestState{id, std::move(user_tokens), {}, Phase::kPrompt});
  cache_.add_sequence(id);
  return id;
}

const GenerationRequestState& InferenceEngine::state(RequestId id) const {
  const auto it = requests_.find(id);
  if (it == requests_.end()) throw ContractError("unknown request " + std::to_string(id));
  return it->second;
}

std::size_t InferenceEngine::context_length(RequestId id) const { return cache_.length(id, 0); }

std::size_t InferenceEngine::release(RequestId id) {
  requests_.erase(id);
  return cache_.release(id);
}

std::size_t InferenceEngine::system_prompt_copies() const {
  if (options_.mode == ExecutionMode::kRelay) return system_cache_ ? 1 : 0;
  if (system_tokens_.empty()) return 0;
  std::size_t copies = 0;
  for (const auto& [id, st] : requests_) {
    if (cache_.length(id, 0) >= system_tokens_.size()) ++copies;
  }
  return copies;
}

StepOutput InferenceEngine::forward_prompt_phase(std::span<const RequestId> ids) {
  return run(ids, /*prompt=*/true);
}

StepOutput InferenceEngine::forward_decode_step(std::span<const RequestId> ids) {
  return run(ids, /*prompt=*/false);
}

StepOutput InferenceEngine::run(std::span<const RequestId> ids, bool prompt) {
  const ModelConfig& cfg = model_->config();
  const bool relay = options_.mode == ExecutionMode::kRelay;
  if (relay && !system_cache_) {
    throw ConfigError("relay mode needs a prefilled system cache (set_system_prompt)");
  }
  const std::size_t s = system_len();
  const std::size_t b = ids.size();

  std::vector<Tensor> hidden;
  std::vector<std::size_t> first_position;
  hidden.reserve(b);
  for (const RequestId id : ids) {
    const auto& st = state(id);
    if (prompt) {
      if (st.phase != Phase::kPrompt) {
        throw ContractError("request " + std::to_string(id) + " already finished its prompt phase");
      }
      std::vector<TokenId> tokens;
      if (!relay) tokens = system_tokens_;
      tokens.insert(tokens.end(), st.prompt.begin(), st.prompt.end());
      hidden.push_back(model_->embed(tokens));
      first_position.push_back(relay ? context_position(0, s) : 0);
    } else {
      if (st.phase != Phase::kAutoregressive || st.generated.empty()) {
        throw ContractError("request " + std::to_string(id) + " has not finished its prompt phase");
      }
      const TokenId last = st.generated.back();
      hidden.push_back(model_->embed(std::span<const TokenId>(&last, 1)));
      first_position.push_back(context_position(cache_.length(id, 0), relay ? s : 0));
    }
  }

  // Reserve blocks for every layer up front so a capacity failure leaves
  // the caches consistent across layers.
  std::size_t extra_blocks = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t len = cache_.length(ids[i], 0);
    extra_blocks += cache_.blocks_for_tokens(len + hidden[i].dim(0)) -
                    cache_.block_table(ids[i]).size();
  }
  if (extra_blocks > cache_.free_blocks()) {
    throw CapacityError("KV pool exhausted: step needs " + std::to_string(extra_blocks) +
                        " blocks, " + std::to_string(cache_.free_blocks()) + " free");
  }

  const AttentionOptions attn_opts{cfg.precision, &traffic_};
  const RelayOptions relay_opts{cfg.precision, &traffic_, SegmentOrder::kSystemFirst};
  for (std::size_t layer = 0; layer < cfg.layers; ++layer) {
    std::vector<Tensor> queries;
    std::vector<ContextKv> contexts;
    queries.reserve(b);
    contexts.reserve(b);
    for (std::size_t i = 0; i < b; ++i) {
      auto qkv = model_->project_qkv(layer, hidden[i], first_position[i]);
      cache_.append(ids[i], layer, qkv.k, qkv.v);
      auto kv = cache_.gather(ids[i], layer);
      queries.push_back(std::move(qkv.q));
      contexts.push_back(ContextKv{std::move(kv.keys), std::move(kv.values)});
    }
    std::vector<Tensor> attended;
    if (relay) {
      attended = relay_attention_ragged(queries, system_cache_->keys(layer),
                                        system_cache_->values(layer), contexts, relay_opts);
    } else {
      attended.reserve(b);
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t m = queries[i].dim(0);
        const std::size_t n = contexts[i].keys.dim(0);
        auto part = attention_with_lse(queries[i].reshaped({1, m, cfg.heads, cfg.head_dim}),
                                       contexts[i].keys.reshaped({1, n, cfg.heads, cfg.head_dim}),
                                       contexts[i].values.reshaped({1, n, cfg.heads, cfg.head_dim}),
                                       /*causal=*/true, attn_opts);
        attended.push_back(std::move(part.output));
      }
    }
    for (std::size_t i = 0; i < b; ++i) model_->finish_layer(layer, hidden[i], attended[i]);
  }

  StepOutput out;
  out.ids.assign(ids.begin(), ids.end());
  for (std::size_t i = 0; i < b; ++i) {
    auto logits = model_->logits(hidden[i]);
    const TokenId token = argmax_token(logits);
    auto& st = requests_.at(ids[i]);
    st.generated.push_back(token);
    st.phase = Phase::kAutoregressive;
    out.tokens.push_back(token);
    out.logits.push_back(std::move(logits));
  }
  return out;
}

std::vector<std::vector<TokenId>> generate(InferenceEngine& engine,
                                           const std::vector<std::vector<TokenId>>& prompts,
                                           std::size_t max_new_tokens,
                                           const StepObserver& observer) {
  std::vector<RequestId> ids;
  ids.reserve(prompts.size());
  for (const auto& p : prompts) ids.push_back(engine.add_request(p));

  std::vector<std::vector<TokenId>> result(prompts.size());
  if (max_new_tokens == 0 || ids.empty()) {
    for (const RequestId id : ids) engine.release(id);
    return result;
  }

  auto done = [&](RequestId id) {
    const auto& gen = engine.state(id).generated;
    return gen.size() >= max_new_tokens || (!gen.empty() && gen.back() == kEndToken);
  };

  std::size_t step = 0;
  auto out = engine.forward_prompt_phase(ids);
  if (observer) observer(step, out);
  std::vector<RequestId> active;
  for (const RequestId id : ids) {
    if (!done(id)) active.push_back(id);
  }
  while (!active.empty()) {
    out = engine.forward_decode_step(active);
    if (observer) observer(++step, out);
    std::erase_if(active, done);
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    result[i] = engine.state(ids[i]).generated;
    engine.release(ids[i]);
  }
  return result;
}

}  // namespace relayattn
