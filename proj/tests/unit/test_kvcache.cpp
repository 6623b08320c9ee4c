#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "relayattn/errors.hpp"
#include "relayattn/kvcache.hpp"
#include "relayattn/verification.hpp"

namespace relayattn {
namespace {

std::filesystem::path tmp_path(const std::string& name) {
  std::filesystem::create_directories(RELAYATTN_TEST_TMPDIR);
  return std::filesystem::path(RELAYATTN_TEST_TMPDIR) / name;
}

TEST(ContextPosition, OffsetBySystemLength) {
  EXPECT_EQ(context_position(0, 5), 5u);
  EXPECT_EQ(context_position(3, 0), 3u);
  static_assert(context_position(2, 7) == 9);
}

TEST(PagedKvCache, AppendOneThenGather) {
  PagedKvCache cache({1, 2, 2}, 4, 16);
  const Tensor k({1, 2, 2}, {1, 2, 3, 4}), v({1, 2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(cache.append(7, 0, k, v), 1u);
  const auto kv = cache.gather(7, 0);
  EXPECT_EQ(kv.keys, k);
  EXPECT_EQ(kv.values, v);
}

TEST(PagedKvCache, TwentyTokensSpanTwoBlocks) {
  std::mt19937_64 rng(1);
  PagedKvCache cache({2, 1, 4}, 8, 16);
  const Tensor k = random_tensor({20, 1, 4}, rng), v = random_tensor({20, 1, 4}, rng);
  cache.append(1, 0, k.reshaped({20, 1, 4}), v);
  EXPECT_EQ(cache.block_table(1).size(), 2u);
  EXPECT_EQ(cache.length(1, 0), 20u);
  EXPECT_EQ(cache.length(1, 1), 0u);
  const auto kv = cache.gather(1, 0);
  EXPECT_EQ(kv.keys, k);
  EXPECT_EQ(kv.values, v);
  EXPECT_EQ(cache.block(cache.block_table(1)[0]).fill, 16u);
  EXPECT_EQ(cache.block(cache.block_table(1)[1]).fill, 4u);
}

TEST(PagedKvCache, IncrementalAppendsAcrossBoundary) {
  std::mt19937_64 rng(2);
  PagedKvCache cache({1, 1, 2}, 8, 4);
  const Tensor k = random_tensor({11, 1, 2}, rng), v = random_tensor({11, 1, 2}, rng);
  std::size_t at = 0;
  for (const std::size_t n : {3u, 1u, 5u, 2u}) {
    Tensor kc({n, 1, 2}), vc({n, 1, 2});
    std::copy_n(k.rows(at, n).begin(), n * 2, kc.data().begin());
    std::copy_n(v.rows(at, n).begin(), n * 2, vc.data().begin());
    at += n;
    EXPECT_EQ(cache.append(4, 0, kc, vc), at);
  }
  EXPECT_EQ(cache.gather(4, 0).keys, k);
  EXPECT_EQ(cache.gather(4, 0).values, v);
}

TEST(PagedKvCache, GatherAfterZeroAppends) {
  PagedKvCache cache({1, 2, 2}, 2, 4);
  cache.add_sequence(9);
  const auto kv = cache.gather(9, 0);
  EXPECT_EQ(kv.keys.dim(0), 0u);
  EXPECT_EQ(kv.values.size(), 0u);
  EXPECT_EQ(cache.length(9, 0), 0u);
}

TEST(PagedKvCache, UnknownRequestIsContractError) {
  PagedKvCache cache({1, 1, 2}, 2, 4);
  EXPECT_THROW(cache.gather(3, 0), ContractError);
}

TEST(PagedKvCache, ExhaustionThrowsWithoutStateChange) {
  PagedKvCache cache({1, 1, 2}, 2, 4);
  cache.append(1, 0, Tensor({6, 1, 2}), Tensor({6, 1, 2}));
  EXPECT_EQ(cache.free_blocks(), 0u);
  EXPECT_THROW(cache.append(1, 0, Tensor({3, 1, 2}), Tensor({3, 1, 2})), CapacityError);
  EXPECT_EQ(cache.length(1, 0), 6u);
  EXPECT_THROW(cache.append(2, 0, Tensor({1, 1, 2}), Tensor({1, 1, 2})), CapacityError);
  EXPECT_EQ(cache.release(1), 2u);
  EXPECT_EQ(cache.free_blocks(), 2u);
}

TEST(PagedKvCache, ReleaseRecyclesBlocks) {
  PagedKvCache cache({1, 1, 2}, 4, 4);
  cache.append(1, 0, Tensor({8, 1, 2}), Tensor({8, 1, 2}));
  cache.append(2, 0, Tensor({4, 1, 2}), Tensor({4, 1, 2}));
  EXPECT_EQ(cache.allocated_blocks(), 3u);
  cache.release(1);
  EXPECT_FALSE(cache.contains(1));
  cache.append(3, 0, Tensor({8, 1, 2}), Tensor({8, 1, 2}));
  EXPECT_EQ(cache.allocated_blocks(), 3u);
  EXPECT_EQ(cache.free_blocks() + cache.allocated_blocks(), cache.capacity());
}

TEST(PagedKvCache, GatherChargesTokenElements) {
  PagedKvCache cache({1, 2, 3}, 4, 4);
  cache.append(1, 0, Tensor({5, 2, 3}), Tensor({5, 2, 3}));
  TrafficCounter t;
  cache.gather(1, 0, &t);
  EXPECT_EQ(t.elements_read, 5u * 2 * 3);
}

TEST(SystemKvCache, SaveLoadRoundTrip) {
  std::mt19937_64 rng(3);
  const KvLayout layout{2, 2, 4};
  std::vector<Tensor> ks, vs;
  for (int l = 0; l < 2; ++l) {
    ks.push_back(random_tensor({5, 2, 4}, rng));
    vs.push_back(random_tensor({5, 2, 4}, rng));
  }
  const SystemKvCache cache("sys", layout, ks, vs);
  const auto path = tmp_path("sys.rakv");
  cache.save(path);
  EXPECT_EQ(SystemKvCache::load(path, "sys"), cache);

  cache.save(path, Precision::kFloat32);
  const SystemKvCache f32 = SystemKvCache::load(path, "sys");
  EXPECT_EQ(f32.system_len(), 5u);
  EXPECT_LT(max_abs_diff(f32.keys(1), cache.keys(1)), 1e-7);
}

TEST(SystemKvCache, RejectsBadFiles) {
  const auto path = tmp_path("bad.rakv");
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE";
  }
  EXPECT_THROW(SystemKvCache::load(path, "x"), ParseError);
  {
    std::ofstream out(path, std::ios::binary);
    out << "RAKV";
    const char partial[3] = {1, 0, 0};
    out.write(partial, 3);
  }
  EXPECT_THROW(SystemKvCache::load(path, "x"), ParseError);
}

TEST(SystemKvCache, EmptyIsContractError) {
  EXPECT_THROW(SystemKvCache("x", {1, 1, 2}, {Tensor({0, 1, 2})}, {Tensor({0, 1, 2})}), ContractError);
}

}  // namespace
}  // namespace relayattn
