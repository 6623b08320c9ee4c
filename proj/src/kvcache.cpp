// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayattn/kvcache.hpp"

#include <algorithm>
#include <fstream>

#include "binary_io.hpp"
#include "relayattn/errors.hpp"

namespace relayattn {
namespace {

constexpr char kSystemCacheMagic[5] = "RAKV";
constexpr std::uint32_t kSystemCacheVersion = 1;

void check_token_tensor(const Tensor& t, const KvLayout& layout, std::string_view what) {
  require_rank(t, 3, what);
  if (t.dim(1) != layout.heads || t.dim(2) != layout.head_dim) {
    throw DimensionError(std::string(what) + ": " + shape_string(t.shape()) +
                         " does not match heads=" + std::to_string(layout.heads) +
                         " head_dim=" + std::to_string(layout.head_dim));
  }
}

}  // namespace

SystemKvCache::SystemKvCache(std::string prompt_id, KvLayout layout, std::vector<Tensor> keys,
                             std::vector<Tensor> values)
    : prompt_id_(std::move(prompt_id)),
      layout_(layout),
      keys_(std::move(keys)),
      values_(std::move(values)) {
  if (keys_.size() != layout_.layers || values_.size() != layout_.layers) {
    throw DimensionError("system cache: expected " + std::to_string(layout_.layers) +
                         " layers of keys and values");
  }
  if (keys_.empty()) throw ContractError("system cache: no layers");
  check_token_tensor(keys_[0], layout_, "system cache keys");
  system_len_ = keys_[0].dim(0);
  if (system_len_ == 0) throw ContractError("system cache: empty system prompt");
  for (std::size_t l = 0; l < layout_.layers; ++l) {
    check_token_tensor(keys_[l], layout_, "system cache keys");
    check_token_tensor(values_[l], layout_, "system cache values");
    if (keys_[l].dim(0) != system_len_ || values_[l].dim(0) != system_len_) {
      throw DimensionError("system cache: layer " + std::to_string(l) + " has a different length");
    }
  }
}

void SystemKvCache::save(const std::filesystem::path& path, Precision precision) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open " + path.string() + " for writing");
  detail::write_magic(out, kSystemCacheMagic);
  detail::write_le<std::uint32_t>(out, kSystemCacheVersion);
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(layout_.layers));
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(system_len_));
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(layout_.heads));
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(layout_.head_dim));
  detail::write_le<std::uint32_t>(out, detail::precision_code(precision));
  for (std::size_t l = 0; l < layout_.layers; ++l) {
    detail::write_values(out, keys_[l].data(), precision);
    detail::write_values(out, values_[l].data(), precision);
  }
  if (!out) throw ConfigError("write failed for " + path.string());
}

SystemKvCache SystemKvCache::load(const std::filesystem::path& path, std::string prompt_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  detail::expect_magic(in, kSystemCacheMagic);
  const auto version = detail::read_le<std::uint32_t>(in, "version");
  if (version != kSystemCacheVersion) {
    throw ParseError("unsupported system cache version " + std::to_string(version));
  }
  KvLayout layout;
  layout.layers = detail::read_le<std::uint32_t>(in, "layers");
  const std::size_t s = detail::read_le<std::uint32_t>(in, "system_len");
  layout.heads = detail::read_le<std::uint32_t>(in, "heads");
  layout.head_dim = detail::read_le<std::uint32_t>(in, "head_dim");
  const Precision precision =
      detail::precision_from_code(detail::read_le<std::uint32_t>(in, "precision"));
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
  for (std::size_t l = 0; l < layout.layers; ++l) {
    Tensor k({s, layout.heads, layout.head_dim});
    Tensor v({s, layout.heads, layout.head_dim});
    detail::read_values(in, k.data(), precision);
    detail::read_values(in, v.data(), precision);
    keys.push_back(std::move(k));
    values.push_back(std::move(v));
  }
  return SystemKvCache(std::move(prompt_id), layout, std::move(keys), std::move(values));
}

PagedKvCache::PagedKvCache(KvLayout layout, std::size_t num_blocks, std::size_t block_size)
    : layout_(layout), block_size_(block_size), pool_(num_blocks) {
  if (block_size_ == 0) throw ConfigError("block_size must be positive");
  if (layout_.layers == 0 || layout_.heads == 0 || layout_.head_dim == 0) {
    throw ConfigError("KV layout dimensions must be positive");
  }
  free_list_.reserve(num_blocks);
  for (std::size_t i = num_blocks; i-- > 0;) free_list_.push_back(i);
}

void PagedKvCache::add_sequence(RequestId id) {
  sequences_.try_emplace(id, Sequence{{}, std::vector<std::size_t>(layout_.layers, 0)});
}

const PagedKvCache::Sequence& PagedKvCache::sequence(RequestId id) const {
  const auto it = sequences_.find(id);
  if (it == sequences_.end()) {
    throw ContractError("unknown request " + std::to_string(id) + " in KV cache");
  }
  return it->second;
}

std::size_t PagedKvCache::append(RequestId id, std::size_t layer, const Tensor& k,
                                 const Tensor& v) {
  if (layer >= layout_.layers) {
    throw DimensionError("layer " + std::to_string(layer) + " out of range");
  }
  check_token_tensor(k, layout_, "append keys");
  if (k.shape() != v.shape()) throw DimensionError("append: k/v shapes differ");

  add_sequence(id);
  Sequence& seq = sequences_.at(id);
  const std::size_t m = k.dim(0);
  const std::size_t old_len = seq.lengths[layer];
  const std::size_t new_len = old_len + m;
  const std::size_t needed = blocks_for_tokens(new_len);
  if (needed > seq.blocks.size()) {
    const std::size_t extra = needed - seq.blocks.size();
    if (extra > free_list_.size()) {
      throw CapacityError("KV pool exhausted: request " + std::to_string(id) + " needs " +
                          std::to_string(extra) + " more blocks, " +
                          std::to_string(free_list_.size()) + " free");
    }
    for (std::size_t i = 0; i < extra; ++i) {
      const std::size_t index = free_list_.back();
      free_list_.pop_back();
      KvBlock& block = pool_[index];
      if (block.keys.empty()) {
        const Shape shape{layout_.layers, block_size_, layout_.heads, layout_.head_dim};
        block.keys = Tensor(shape);
        block.values = Tensor(shape);
      }
      block.fill = 0;
      seq.blocks.push_back(index);
    }
  }

  const std::size_t token = layout_.token_elements();
  const std::size_t layer_stride = block_size_ * token;
  for (std::size_t t = 0; t < m; ++t) {
    const std::size_t pos = old_len + t;
    KvBlock& block = pool_[seq.blocks[pos / block_size_]];
    const std::size_t slot = pos % block_size_;
    const auto src_k = k.rows(t, 1);
    const auto src_v = v.rows(t, 1);
    std::copy(src_k.begin(), src_k.end(),
              block.keys.data().begin() + static_cast<std::ptrdiff_t>(layer * layer_stride + slot * token));
    std::copy(src_v.begin(), src_v.end(),
              block.values.data().begin() + static_cast<std::ptrdiff_t>(layer * layer_stride + slot * token));
    block.fill = std::max(block.fill, slot + 1);
  }
  seq.lengths[layer] = new_len;
  return new_len;
}

KvPair PagedKvCache::gather(RequestId id, std::size_t layer, TrafficCounter* counter) const {
  if (layer >= layout_.layers) {
    throw DimensionError("layer " + std::to_string(layer) + " out of range");
  }
  const Sequence& seq = sequence(id);
  const std::size_t c = seq.lengths[layer];
  const std::size_t token = layout_.token_elements();
  const std::size_t layer_stride = block_size_ * token;
  KvPair out{Tensor({c, layout_.heads, layout_.head_dim}),
             Tensor({c, layout_.heads, layout_.head_dim})};
  std::size_t pos = 0;
  for (std::size_t b = 0; pos < c; ++b) {
    const KvBlock& block = pool_[seq.blocks[b]];
    const std::size_t n = std::min(block_size_, c - pos);
    const auto begin = static_cast<std::ptrdiff_t>(layer * layer_stride);
    const auto count = static_cast<std::ptrdiff_t>(n * token);
    std::copy_n(block.keys.data().begin() + begin, count,
                out.keys.data().begin() + static_cast<std::ptrdiff_t>(pos * token));
    std::copy_n(block.values.data().begin() + begin, count,
                out.values.data().begin() + static_cast<std::ptrdiff_t>(pos * token));
    pos += n;
  }
  if (counter != nullptr) counter->elements_read += c * token;
  return out;
}

std::size_t PagedKvCache::length(RequestId id, std::size_t layer) const {
  return sequence(id).lengths.at(layer);
}

const std::vector<std::size_t>& PagedKvCache::block_table(RequestId id) const {
  return sequence(id).blocks;
}

std::size_t PagedKvCache::release(RequestId id) {
  const auto it = sequences_.find(id);
  if (it == sequences_.end()) return 0;
  const std::size_t freed = it->second.blocks.size();
  for (auto b = it->second.blocks.rbegin(); b != it->second.blocks.rend(); ++b) {
    pool_[*b].fill = 0;
    free_list_.push_back(*b);
  }
  sequences_.erase(it);
  return freed;
}

}  // namespace relayattn
