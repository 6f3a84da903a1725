#include "utaca/kv_cache.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>
#include <string>

namespace utaca {

namespace {

std::uint64_t next_owner_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace

std::vector<std::size_t> representative_indices(std::size_t len, std::size_t r) {
  std::vector<std::size_t> out;
  if (len == 0 || r == 0) return out;
  out.reserve(r);
  for (std::size_t j = 0; j < r; ++j) {
    // floor(j*len/r + len/(2r)) == floor((2*j*len + len) / (2r)) in exact integers.
    std::size_t idx = (2 * j * len + len) / (2 * r);
    idx = std::min(idx, len - 1);
    if (out.empty() || out.back() != idx) out.push_back(idx);
  }
  return out;
}

std::vector<Vec> select_representatives(std::span<const KvEntry> entries, std::size_t r) {
  if (entries.empty()) throw CacheError("select_representatives: no entries");
  if (r == 0) throw CacheError("select_representatives: r must be positive");
  std::vector<Vec> reps;
  for (std::size_t idx : representative_indices(entries.size(), r)) {
    reps.push_back(entries[idx].key);
  }
  return reps;
}

double block_score(std::span<const double> q, const Block& block) {
  double s = 0.0;
  for (const Vec& rep : block.representatives) s += dot(q, rep);
  return s / static_cast<double>(block.representatives.size());
}

BlockedKvCache::BlockedKvCache(std::size_t dim, std::size_t block_size, std::size_t rep_count)
    : owner_(next_owner_id()), dim_(dim), block_size_(block_size), rep_count_(rep_count) {
  if (dim == 0) throw CacheError("BlockedKvCache: dim must be positive");
  if (block_size == 0) throw CacheError("BlockedKvCache: block_size must be positive");
  if (rep_count == 0) throw CacheError("BlockedKvCache: rep_count must be positive");
  tail_.reserve(block_size_);
}

// Copies get their own identity so a snapshot cannot be applied across them.
BlockedKvCache::BlockedKvCache(const BlockedKvCache& other)
    : owner_(next_owner_id()),
      dim_(other.dim_),
      block_size_(other.block_size_),
      rep_count_(other.rep_count_),
      entry_count_(other.entry_count_),
      blocks_(other.blocks_),
      tail_(other.tail_) {}

BlockedKvCache& BlockedKvCache::operator=(const BlockedKvCache& other) {
  if (this != &other) {
    owner_ = next_owner_id();
    dim_ = other.dim_;
    block_size_ = other.block_size_;
    rep_count_ = other.rep_count_;
    entry_count_ = other.entry_count_;
    blocks_ = other.blocks_;
    tail_ = other.tail_;
  }
  return *this;
}

void BlockedKvCache::append(KvEntry entry) {
  if (entry.position != entry_count_) {
    throw CacheError("append: expected position " + std::to_string(entry_count_) + ", got " +
                     std::to_string(entry.position));
  }
  if (entry.key.size() != dim_ || entry.value.size() != dim_) {
    throw CacheError("append: key/value length does not match cache dim");
  }
  tail_.push_back(std::move(entry));
  ++entry_count_;
  if (tail_.size() == block_size_) seal_tail();
}

void BlockedKvCache::seal_tail() {
  Block block;
  block.id = blocks_.size();
  block.representatives = select_representatives(tail_, rep_count_);
  block.entries = std::move(tail_);
  blocks_.push_back(std::move(block));
  tail_ = {};
  tail_.reserve(block_size_);
}

std::vector<BlockId> BlockedKvCache::retrieve_blocks(std::span<const double> q, std::size_t k) const {
  if (q.size() != dim_) throw CacheError("retrieve_blocks: query length does not match cache dim");
  const std::size_t n = blocks_.size();
  k = std::min(k, n);
  std::vector<BlockId> ids(n);
  std::iota(ids.begin(), ids.end(), BlockId{0});
  if (k == n) return ids;
  if (k == 0) return {};

  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) scores[i] = block_score(q, blocks_[i]);
  auto better = [&](BlockId a, BlockId b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), better);
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<const KvEntry*> BlockedKvCache::window_entries(std::span<const BlockId> ids,
                                                           bool include_tail) const {
  std::vector<BlockId> sorted(ids.begin(), ids.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<const KvEntry*> out;
  out.reserve(window_size(sorted, include_tail));
  for (BlockId id : sorted) {
    if (id >= blocks_.size()) throw CacheError("window_entries: unknown block id " + std::to_string(id));
    for (const KvEntry& e : blocks_[id].entries) out.push_back(&e);
  }
  if (include_tail) {
    for (const KvEntry& e : tail_) out.push_back(&e);
  }
  return out;
}

std::vector<const KvEntry*> BlockedKvCache::recent_entries(std::size_t count) const {
  count = std::min(count, entry_count_);
  std::vector<const KvEntry*> out(count);
  std::size_t remaining = count;
  for (auto it = tail_.rbegin(); it != tail_.rend() && remaining > 0; ++it) out[--remaining] = &*it;
  for (auto b = blocks_.rbegin(); b != blocks_.rend() && remaining > 0; ++b) {
    for (auto it = b->entries.rbegin(); it != b->entries.rend() && remaining > 0; ++it) out[--remaining] = &*it;
  }
  return out;
}

std::size_t BlockedKvCache::window_size(std::span<const BlockId> ids, bool include_tail) const {
  std::size_t n = include_tail ? tail_.size() : 0;
  for (BlockId id : ids) {
    if (id >= blocks_.size()) throw CacheError("window_size: unknown block id " + std::to_string(id));
    n += blocks_[id].entries.size();
  }
  return n;
}

CacheSnapshot BlockedKvCache::snapshot() const {
  CacheSnapshot snap;
  snap.owner_ = owner_;
  snap.entry_count_ = entry_count_;
  snap.block_count_ = blocks_.size();
  snap.tail_size_ = tail_.size();
  return snap;
}

void BlockedKvCache::restore(const CacheSnapshot& snap) {
  if (snap.owner_ != owner_) throw CacheError("restore: snapshot belongs to a different cache");
  if (snap.entry_count_ > entry_count_) {
    throw CacheError("restore: snapshot is newer than the cache contents");
  }
  // Unseal blocks created after the snapshot back into the tail.
  while (blocks_.size() > snap.block_count_) {
    Block last = std::move(blocks_.back());
    blocks_.pop_back();
    std::vector<KvEntry> merged = std::move(last.entries);
    for (KvEntry& e : tail_) merged.push_back(std::move(e));
    tail_ = std::move(merged);
  }
  if (blocks_.size() != snap.block_count_) {
    throw CacheError("restore: cache has fewer blocks than the snapshot");
  }
  tail_.resize(snap.tail_size_);
  entry_count_ = snap.entry_count_;
}

bool BlockedKvCache::same_content(const BlockedKvCache& other) const {
  return dim_ == other.dim_ && block_size_ == other.block_size_ && rep_count_ == other.rep_count_ &&
         entry_count_ == other.entry_count_ && blocks_ == other.blocks_ && tail_ == other.tail_;
}

}  // namespace utaca
