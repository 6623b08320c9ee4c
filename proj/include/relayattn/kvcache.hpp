// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "relayattn/attention.hpp"
#include "relayattn/numerics.hpp"
#include "relayattn/tensor.hpp"

namespace relayattn {

using RequestId = std::uint64_t;

inline constexpr std::size_t kDefaultBlockSize = 16;

/// Per-token KV geometry shared by every cache in an engine.
struct KvLayout {
  std::size_t layers = 1;
  std::size_t heads = 1;
  std::size_t head_dim = 1;

  std::size_t token_elements() const noexcept { return heads * head_dim; }
  friend bool operator==(const KvLayout&, const KvLayout&) = default;
};

/// Absolute position of a request-specific token that follows a system
/// prompt of length `system_len`.
constexpr std::size_t context_position(std::size_t token_index, std::size_t system_len) noexcept {
  return token_index + system_len;
}

/// Immutable keys/values of the shared system prompt, one [s x h x d] pair
/// per layer. Built once (see prefill_system_cache) and shared read-only.
class SystemKvCache {
 public:
  SystemKvCache(std::string prompt_id, KvLayout layout, std::vector<Tensor> keys,
                std::vector<Tensor> values);

  const std::string& prompt_id() const noexcept { return prompt_id_; }
  const KvLayout& layout() const noexcept { return layout_; }
  std::size_t system_len() const noexcept { return system_len_; }
  const Tensor& keys(std::size_t layer) const { return keys_.at(layer); }
  const Tensor& values(std::size_t layer) const { return values_.at(layer); }

  /// Flat little-endian container:
  ///   "RAKV" | u32 version | u32 layers | u32 s | u32 h | u32 d | u32 precision
  ///   then for each layer: K[s*h*d] followed by V[s*h*d], row-major.
  /// Precision 0 stores f64 values, 1 stores f32.
  void save(const std::filesystem::path& path, Precision precision = Precision::kFloat64) const;
  static SystemKvCache load(const std::filesystem::path& path, std::string prompt_id);

  friend bool operator==(const SystemKvCache&, const SystemKvCache&) = default;

 private:
  std::string prompt_id_;
  KvLayout layout_;
  std::size_t system_len_ = 0;
  std::vector<Tensor> keys_;
  std::vector<Tensor> values_;
};

/// One fixed-size slab of the pool. Storage covers all layers:
/// keys/values are [layers x block_size x h x d]. Allocated lazily.
struct KvBlock {
  Tensor keys;
  Tensor values;
  std::size_t fill = 0;  ///< tokens in use (max over layers)
};

struct KvPair {
  Tensor keys;    ///< [c x h x d]
  Tensor values;  ///< [c x h x d]
};

/// Block-paged context KV storage for a set of requests.
///
/// Each request owns a block table; blocks are never shared between
/// requests. Layers of a request advance independently (the model appends
/// layer by layer), and blocks are allocated for the longest layer.
class PagedKvCache {
 public:
  PagedKvCache(KvLayout layout, std::size_t num_blocks,
               std::size_t block_size = kDefaultBlockSize);

  /// Registers an empty sequence. Appending to an unknown id registers it too.
  void add_sequence(RequestId id);
  bool contains(RequestId id) const { return sequences_.count(id) != 0; }

  /// Appends m tokens (k, v are [m x h x d]) to `layer`; returns the new
  /// length of that layer. Throws CapacityError, leaving the cache
  /// untouched, when the pool cannot supply the extra blocks.
  std::size_t append(RequestId id, std::size_t layer, const Tensor& k, const Tensor& v);

  /// Contiguous copy of the cached tokens in append order. When a counter
  /// is given it is charged c*h*d elements (one unit per cached KV pair).
  KvPair gather(RequestId id, std::size_t layer, TrafficCounter* counter = nullptr) const;

  std::size_t length(RequestId id, std::size_t layer) const;
  const std::vector<std::size_t>& block_table(RequestId id) const;

  /// Frees every block of `id`; returns how many were freed.
  std::size_t release(RequestId id);

  std::size_t blocks_for_tokens(std::size_t tokens) const noexcept {
    return (tokens + block_size_ - 1) / block_size_;
  }
  std::size_t capacity() const noexcept { return pool_.size(); }
  std::size_t free_blocks() const noexcept { return free_list_.size(); }
  std::size_t allocated_blocks() const noexcept { return pool_.size() - free_list_.size(); }
  std::size_t block_size() const noexcept { return block_size_; }
  std::size_t num_sequences() const noexcept { return sequences_.size(); }
  const KvLayout& layout() const noexcept { return layout_; }
  const KvBlock& block(std::size_t index) const { return pool_.at(index); }

 private:
  struct Sequence {
    std::vector<std::size_t> blocks;
    std::vector<std::size_t> lengths;  // per layer
  };

  const Sequence& sequence(RequestId id) const;

  KvLayout layout_;
  std::size_t block_size_;
  std::vector<KvBlock> pool_;
  std::vector<std::size_t> free_list_;  // stack; lowest index handed out first
  std::map<RequestId, Sequence> sequences_;
};

}  // namespace relayattn
