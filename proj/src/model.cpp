// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayattn/model.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <random>

#include "binary_io.hpp"
#include "relayattn/errors.hpp"

namespace relayattn {
namespace {

constexpr char kWeightsMagic[5] = "RAWT";
constexpr std::uint32_t kWeightsVersion = 1;
constexpr double kInitScale = 0.02;

std::uint64_t parse_unsigned(const KeyValues& kv, const std::string& key, std::uint64_t fallback) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  std::uint64_t value = 0;
  const auto& text = it->second;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError("model config: '" + key + "' must be a non-negative integer, got '" + text + "'");
  }
  return value;
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, Precision precision) {
  std::normal_distribution<double> dist(0.0, kInitScale);
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = round_to(precision, dist(rng));
  return t;
}

Tensor ones(std::size_t n) {
  Tensor t({n});
  std::fill(t.data().begin(), t.data().end(), 1.0);
  return t;
}

template <typename Weights, typename Fn>
void for_each_tensor(Weights& w, Fn&& fn) {
  fn(w.embedding);
  for (auto& layer : w.layers) {
    for (auto* t : {&layer.attn_norm, &layer.wq, &layer.wk, &layer.wv, &layer.wo,
                      &layer.mlp_norm, &layer.w_up, &layer.w_down}) {
      fn(*t);
    }
  }
  fn(w.final_norm);
  fn(w.lm_head);
}

DecoderWeights empty_weights(const ModelConfig& c) {
  const std::size_t d = c.model_dim();
  DecoderWeights w;
  w.embedding = Tensor({c.vocab_size, d});
  for (std::size_t l = 0; l < c.layers; ++l) {
    w.layers.push_back(LayerWeights{Tensor({d}), Tensor({d, d}), Tensor({d, d}), Tensor({d, d}),
                                    Tensor({d, d}), Tensor({d}), Tensor({c.ffn_dim, d}),
                                    Tensor({d, c.ffn_dim})});
  }
  w.final_norm = Tensor({d});
  w.lm_head = Tensor({c.vocab_size, d});
  return w;
}

}  // namespace

void ModelConfig::validate() const {
  if (layers == 0 || heads == 0 || head_dim == 0 || ffn_dim == 0 || vocab_size == 0) {
    throw ConfigError("model config: all dimensions must be >= 1");
  }
  if (head_dim % 2 != 0) {
    throw ConfigError("model config: head_dim must be even for rotary positions, got " +
                      std::to_string(head_dim));
  }
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv) {
  static const char* const kKnown[] = {"layers",     "heads",     "head_dim", "model_dim",
                                       "ffn_dim",    "vocab_size", "precision", "seed"};
  for (const auto& [key, value] : kv) {
    if (std::find(std::begin(kKnown), std::end(kKnown), key) == std::end(kKnown)) {
      throw ConfigError("model config: unknown key '" + key + "'");
    }
  }
  ModelConfig c;
  c.layers = parse_unsigned(kv, "layers", c.layers);
  c.heads = parse_unsigned(kv, "heads", c.heads);
  c.head_dim = parse_unsigned(kv, "head_dim", c.head_dim);
  c.ffn_dim = parse_unsigned(kv, "ffn_dim", c.ffn_dim);
  c.vocab_size = parse_unsigned(kv, "vocab_size", c.vocab_size);
  c.seed = parse_unsigned(kv, "seed", c.seed);
  if (const auto it = kv.find("precision"); it != kv.end()) c.precision = parse_precision(it->second);
  if (kv.count("model_dim") != 0 && parse_unsigned(kv, "model_dim", 0) != c.model_dim()) {
    throw ConfigError("model config: model_dim must equal heads * head_dim (" +
                      std::to_string(c.model_dim()) + ")");
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
  return from_key_values(read_key_value_file(path));
}

KeyValues ModelConfig::to_key_values() const {
  return {{"layers", std::to_string(layers)},
          {"heads", std::to_string(heads)},
          {"head_dim", std::to_string(head_dim)},
          {"model_dim", std::to_string(model_dim())},
          {"ffn_dim", std::to_string(ffn_dim)},
          {"vocab_size", std::to_string(vocab_size)},
          {"precision", std::string(to_string(precision))},
          {"seed", std::to_string(seed)}};
}

DecoderWeights init_weights(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const std::size_t d = config.model_dim();
  const Precision p = config.precision;
  DecoderWeights w;
  w.embedding = random_tensor({config.vocab_size, d}, rng, p);
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerWeights layer;
    layer.attn_norm = ones(d);
    layer.wq = random_tensor({d, d}, rng, p);
    layer.wk = random_tensor({d, d}, rng, p);
    layer.wv = random_tensor({d, d}, rng, p);
    layer.wo = random_tensor({d, d}, rng, p);
    layer.mlp_norm = ones(d);
    layer.w_up = random_tensor({config.ffn_dim, d}, rng, p);
    layer.w_down = random_tensor({d, config.ffn_dim}, rng, p);
    w.layers.push_back(std::move(layer));
  }
  w.final_norm = ones(d);
  w.lm_head = random_tensor({config.vocab_size, d}, rng, p);
  return w;
}

void DecoderWeights::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open " + path.string() + " for writing");
  const std::size_t d = embedding.dim(1);
  detail::write_magic(out, kWeightsMagic);
  detail::write_le<std::uint32_t>(out, kWeightsVersion);
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(layers.size()));
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(layers.empty() ? 0 : layers[0].w_up.dim(0)));
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(embedding.dim(0)));
  detail::write_le<std::uint32_t>(out, detail::precision_code(Precision::kFloat64));
  for_each_tensor(*this, [&](const Tensor& t) { detail::write_values(out, t.data(), Precision::kFloat64); });
  if (!out) throw ConfigError("write failed for " + path.string());
}

DecoderWeights DecoderWeights::load(const std::filesystem::path& path, const ModelConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  detail::expect_magic(in, kWeightsMagic);
  if (detail::read_le<std::uint32_t>(in, "version") != kWeightsVersion) {
    throw ParseError("unsupported weights version");
  }
  const std::size_t layers = detail::read_le<std::uint32_t>(in, "layers");
  const std::size_t d = detail::read_le<std::uint32_t>(in, "model_dim");
  const std::size_t ffn = detail::read_le<std::uint32_t>(in, "ffn_dim");
  const std::size_t vocab = detail::read_le<std::uint32_t>(in, "vocab_size");
  const Precision precision =
      detail::precision_from_code(detail::read_le<std::uint32_t>(in, "precision"));
  if (layers != config.layers || d != config.model_dim() || ffn != config.ffn_dim ||
      vocab != config.vocab_size) {
    throw ConfigError("weights file " + path.string() + " does not match the model config");
  }
  DecoderWeights w = empty_weights(config);
  for_each_tensor(w, [&](Tensor& t) { detail::read_values(in, t.data(), precision); });
  return w;
}

DecoderModel::DecoderModel(ModelConfig config) : DecoderModel(config, init_weights(config)) {}

DecoderModel::DecoderModel(ModelConfig config, DecoderWeights weights)
    : config_(config), weights_(std::move(weights)) {
  config_.validate();
  if (weights_.layers.size() != config_.layers ||
      weights_.embedding.shape() != Shape{config_.vocab_size, config_.model_dim()}) {
    throw ConfigError("weights do not match the model config");
  }
}

Tensor DecoderModel::embed(std::span<const TokenId> tokens) const {
  const std::size_t d = config_.model_dim();
  Tensor out({tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const TokenId t = tokens[i];
    if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
      throw ContractError("token id " + std::to_string(t) + " outside vocabulary of " +
                          std::to_string(config_.vocab_size));
    }
    const auto row = weights_.embedding.rows(static_cast<std::size_t>(t), 1);
    std::copy(row.begin(), row.end(), out.rows(i, 1).begin());
  }
  return out;
}

DecoderModel::Qkv DecoderModel::project_qkv(std::size_t layer, const Tensor& hidden,
                                            std::size_t first_position) const {
  const LayerWeights& w = weights_.layers.at(layer);
  const Precision p = config_.precision;
  const std::size_t m = hidden.dim(0);
  const std::size_t h = config_.heads;
  const std::size_t d = config_.head_dim;
  const Tensor normed = rms_norm(hidden, w.attn_norm, 1e-6, p);
  Qkv out{matmul(normed, w.wq, p).reshaped({m, h, d}), matmul(normed, w.wk, p).reshaped({m, h, d}),
          matmul(normed, w.wv, p).reshaped({m, h, d})};
  for (std::size_t t = 0; t < m; ++t) {
    for (std::size_t head = 0; head < h; ++head) {
      const std::size_t off = (t * h + head) * d;
      rope_rotate(out.q.data().subspan(off, d), first_position + t);
      rope_rotate(out.k.data().subspan(off, d), first_position + t);
    }
  }
  round_tensor(out.q, p);
  round_tensor(out.k, p);
  return out;
}

void DecoderModel::finish_layer(std::size_t layer, Tensor& hidden, const Tensor& attention) const {
  const LayerWeights& w = weights_.layers.at(layer);
  const Precision p = config_.precision;
  const std::size_t m = hidden.dim(0);
  Tensor attn = attention.reshaped({m, config_.model_dim()});
  round_tensor(attn, p);
  add_inplace(hidden, matmul(attn, w.wo, p), p);
  const Tensor normed = rms_norm(hidden, w.mlp_norm, 1e-6, p);
  Tensor up = matmul(normed, w.w_up, p);
  silu_inplace(up, p);
  add_inplace(hidden, matmul(up, w.w_down, p), p);
}

std::vector<double> DecoderModel::logits(const Tensor& hidden) const {
  const std::size_t m = hidden.dim(0);
  if (m == 0) throw ContractError("logits: empty hidden state");
  const auto last = hidden.rows(m - 1, 1);
  const Tensor row({1, config_.model_dim()}, std::vector<double>(last.begin(), last.end()));
  const Tensor normed = rms_norm(row, weights_.final_norm, 1e-6, config_.precision);
  const Tensor out = matmul(normed, weights_.lm_head, config_.precision);
  out.require_finite("logits");
  return out.values();
}

TokenId argmax_token(std::span<const double> logits) {
  if (logits.empty()) throw ContractError("argmax of empty logits");
  return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

SystemKvCache prefill_system_cache(const DecoderModel& model, std::span<const TokenId> system_tokens,
                                   std::string prompt_id) {
  if (system_tokens.empty()) throw ContractError("prefill_system_cache: empty system prompt");
  const ModelConfig& c = model.config();
  const std::size_t s = system_tokens.size();
  Tensor hidden = model.embed(system_tokens);
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
  for (std::size_t layer = 0; layer < c.layers; ++layer) {
    auto qkv = model.project_qkv(layer, hidden, 0);
    const Shape batched{1, s, c.heads, c.head_dim};
    const auto attn = attention_with_lse(qkv.q.reshaped(batched), qkv.k.reshaped(batched),
                                         qkv.v.reshaped(batched), /*causal=*/true,
                                         {c.precision, nullptr});
    model.finish_layer(layer, hidden, attn.output);
    keys.push_back(std::move(qkv.k));
    values.push_back(std::move(qkv.v));
  }
  return SystemKvCache(std::move(prompt_id), c.kv_layout(), std::move(keys), std::move(values));
}

}  // namespace relayattn
