#include <doctest.h>

#include <algorithm>
#include <chrono>

#include "utaca/kv_cache.hpp"

using namespace utaca;

namespace {

KvEntry entry(std::mt19937_64& rng, std::size_t dim, std::size_t pos) {
  return KvEntry{random_normal(rng, dim, 1.0), random_normal(rng, dim, 1.0), pos};
}

BlockedKvCache filled(std::size_t n, std::size_t dim = 4, std::size_t block = 16, std::uint64_t seed = 1) {
  auto rng = seeded_engine({seed});
  BlockedKvCache c(dim, block, 4);
  for (std::size_t i = 0; i < n; ++i) c.append(entry(rng, dim, i));
  return c;
}

// Scores every block with a plain loop and keeps the k best (lower id on ties).
std::vector<BlockId> brute_force_topk(const BlockedKvCache& cache, const Vec& q, std::size_t k) {
  std::vector<std::pair<double, BlockId>> scored;
  for (const Block& b : cache.blocks()) {
    double total = 0.0;
    for (const Vec& rep : b.representatives) {
      double d = 0.0;
      for (std::size_t i = 0; i < q.size(); ++i) d += q[i] * rep[i];
      total += d;
    }
    scored.emplace_back(total / static_cast<double>(b.representatives.size()), b.id);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<BlockId> ids;
  for (std::size_t i = 0; i < std::min(k, scored.size()); ++i) ids.push_back(scored[i].second);
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace

TEST_CASE("append partitions into blocks and tail") {
  const auto c35 = filled(35);
  CHECK(c35.block_count() == 2);
  CHECK(c35.blocks()[0].entries.size() == 16);
  CHECK(c35.blocks()[1].entries.size() == 16);
  CHECK(c35.tail().size() == 3);

  const auto c16 = filled(16);
  CHECK(c16.block_count() == 1);
  CHECK(c16.tail().empty());

  const auto c0 = filled(0);
  CHECK(c0.block_count() == 0);
  CHECK(c0.tail().empty());
}

TEST_CASE("append rejects out-of-order positions") {
  auto rng = seeded_engine({2});
  BlockedKvCache c(4, 16);
  c.append(entry(rng, 4, 0));
  CHECK_THROWS_AS(c.append(entry(rng, 4, 5)), CacheError);
  CHECK_THROWS_AS(c.append(entry(rng, 4, 0)), CacheError);
  CHECK_THROWS(c.append(KvEntry{Vec(3), Vec(3), 1}));
}

TEST_CASE("partition invariant over random lengths") {
  for (std::size_t n = 0; n < 200; n += 7) {
    for (std::size_t bs : {1u, 3u, 16u}) {
      const auto c = filled(n, 3, bs, n);
      std::size_t total = c.tail().size();
      std::size_t expect_pos = 0;
      for (const Block& b : c.blocks()) {
        CHECK(b.entries.size() == bs);
        for (const KvEntry& e : b.entries) CHECK(e.position == expect_pos++);
        total += b.entries.size();
      }
      for (const KvEntry& e : c.tail()) CHECK(e.position == expect_pos++);
      CHECK(total == n);
      CHECK(c.tail().size() < bs);
    }
  }
}

TEST_CASE("representative indices follow the spacing formula") {
  CHECK(representative_indices(16, 4) == std::vector<std::size_t>{2, 6, 10, 14});
  CHECK(representative_indices(1, 4) == std::vector<std::size_t>{0});
  for (std::size_t len : {1u, 5u, 16u, 33u}) {
    CHECK(representative_indices(len, 1) == std::vector<std::size_t>{len / 2});
  }
  // 3 entries, r=4: floor(j*3/4 + 3/8) = 0,1,1,2 -> deduplicated.
  CHECK(representative_indices(3, 4) == std::vector<std::size_t>{0, 1, 2});

  auto rng = seeded_engine({5});
  std::vector<KvEntry> es;
  for (std::size_t i = 0; i < 16; ++i) es.push_back(entry(rng, 2, i));
  const auto reps = select_representatives(es, 4);
  REQUIRE(reps.size() == 4);
  CHECK(reps[0] == es[2].key);
  CHECK(reps[3] == es[14].key);
  CHECK(select_representatives(std::span(es).first(1), 4) == std::vector<Vec>{es[0].key});
}

TEST_CASE("retrieve_blocks worked example with a tie") {
  // One-dimensional keys make each block's representative mean its score.
  BlockedKvCache c(1, 2, 1);
  const double scores[] = {1.0, 3.0, 2.0, 3.0};
  std::size_t pos = 0;
  for (double s : scores) {
    for (int i = 0; i < 2; ++i) c.append(KvEntry{Vec{s}, Vec{0.0}, pos++});
  }
  CHECK(c.retrieve_blocks(Vec{1.0}, 2) == std::vector<BlockId>{1, 3});
  CHECK(c.retrieve_blocks(Vec{1.0}, 1) == std::vector<BlockId>{1});
  CHECK(c.retrieve_blocks(Vec{1.0}, 9) == std::vector<BlockId>{0, 1, 2, 3});

  BlockedKvCache one(1, 2, 1);
  one.append(KvEntry{Vec{1}, Vec{1}, 0});
  one.append(KvEntry{Vec{1}, Vec{1}, 1});
  CHECK(one.retrieve_blocks(Vec{-5.0}, 3) == std::vector<BlockId>{0});
}

TEST_CASE("retrieve_blocks matches brute force on 1000 random caches") {
  const auto t0 = std::chrono::steady_clock::now();
  auto rng = seeded_engine({42});
  std::uniform_int_distribution<std::size_t> blocks(1, 64), dims(1, 32), ks(1, 70), tail(0, 15);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = dims(rng);
    BlockedKvCache c(d, 16, 1 + trial % 5);
    const std::size_t n = blocks(rng) * 16 + tail(rng);
    for (std::size_t i = 0; i < n; ++i) c.append(entry(rng, d, i));
    const Vec q = random_normal(rng, d, 1.0);
    const std::size_t k = ks(rng);
    REQUIRE(c.retrieve_blocks(q, k) == brute_force_topk(c, q, k));
  }
  CHECK(std::chrono::steady_clock::now() - t0 < std::chrono::seconds(10));
}

TEST_CASE("window_entries examples") {
  const auto c = filled(35);
  const auto tail_only = c.window_entries({}, true);
  REQUIRE(tail_only.size() == 3);
  CHECK(tail_only[0]->position == 32);

  const std::vector<BlockId> both{0, 1};
  const auto w = c.window_entries(both, false);
  REQUIRE(w.size() == 32);
  for (std::size_t i = 0; i < 32; ++i) CHECK(w[i]->position == i);

  const std::vector<BlockId> second{1};
  const auto b1 = c.window_entries(second, false);
  REQUIRE(b1.size() == 16);
  CHECK(b1.front()->position == 16);

  const std::vector<BlockId> bad{7};
  CHECK_THROWS_AS(c.window_entries(bad, true), CacheError);
  CHECK(c.window_size(both, true) == 35);
}

TEST_CASE("window entries come out in position order") {
  const auto c = filled(100);
  const std::vector<BlockId> ids{4, 0, 2};
  const auto w = c.window_entries(ids, true);
  CHECK(w.size() == 3 * 16 + 4);
  for (std::size_t i = 1; i < w.size(); ++i) CHECK(w[i - 1]->position < w[i]->position);
  const auto recent = c.recent_entries(20);
  REQUIRE(recent.size() == 20);
  CHECK(recent.front()->position == 80);
  CHECK(recent.back()->position == 99);
}

TEST_CASE("snapshot and restore") {
  auto rng = seeded_engine({9});
  BlockedKvCache c(4, 16);
  for (std::size_t i = 0; i < 20; ++i) c.append(entry(rng, 4, i));

  SUBCASE("append one then restore") {
    const BlockedKvCache before = c;
    const auto s = c.snapshot();
    c.append(entry(rng, 4, 20));
    c.restore(s);
    CHECK(c.same_content(before));
  }
  SUBCASE("restore unseals a block") {
    for (std::size_t i = 20; i < 31; ++i) c.append(entry(rng, 4, i));
    REQUIRE(c.tail().size() == 15);
    const BlockedKvCache before = c;
    const auto s = c.snapshot();
    c.append(entry(rng, 4, 31));
    CHECK(c.block_count() == 2);
    c.restore(s);
    CHECK(c.block_count() == 1);
    CHECK(c.tail().size() == 15);
    CHECK(c.same_content(before));
  }
  SUBCASE("immediate restore is a no-op") {
    const BlockedKvCache before = c;
    c.restore(c.snapshot());
    CHECK(c.same_content(before));
  }
  SUBCASE("foreign snapshot is rejected") {
    BlockedKvCache other(4, 16);
    CHECK_THROWS_AS(c.restore(other.snapshot()), CacheError);
  }
}

TEST_CASE("random append/restore interleavings round-trip exactly") {
  auto rng = seeded_engine({10});
  std::uniform_int_distribution<int> grow(0, 40);
  for (int trial = 0; trial < 200; ++trial) {
    BlockedKvCache c(3, 1 + trial % 17, 1 + trial % 4);
    std::size_t n = 0;
    for (int round = 0; round < 4; ++round) {
      for (int i = grow(rng); i > 0; --i) c.append(entry(rng, 3, n++));
      const BlockedKvCache at_snapshot = c;
      const auto s = c.snapshot();
      const std::size_t extra = 1 + static_cast<std::size_t>(grow(rng));
      for (std::size_t i = 0; i < extra; ++i) c.append(entry(rng, 3, n + i));
      c.restore(s);
      REQUIRE(c.same_content(at_snapshot));
    }
  }
}
