#pragma once

// Block-partitioned key/value cache.
//
// Entries are appended one token at a time into an open tail. When the tail
// reaches `block_size` entries it is sealed into a Block and a handful of
// representative keys are picked for relevance scoring. Decoding retrieves the
// top-k blocks for a query and attends to those blocks plus the tail.
//
// The cache is append-only between snapshots, so a snapshot only needs the
// entry count; restore truncates and, if needed, unseals the last block.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "utaca/numerics.hpp"

namespace utaca {

using BlockId = std::size_t;

struct KvEntry {
  Vec key;
  Vec value;
  std::size_t position = 0;

  bool operator==(const KvEntry&) const = default;
};

struct Block {
  BlockId id = 0;
  std::vector<KvEntry> entries;
  std::vector<Vec> representatives;

  std::size_t first_position() const { return entries.front().position; }
  std::size_t last_position() const { return entries.back().position; }

  bool operator==(const Block&) const = default;
};

class CacheError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Keys at evenly spaced indices floor(j*len/r + len/(2r)), deduplicated.
std::vector<Vec> select_representatives(std::span<const KvEntry> entries, std::size_t r);

/// Indices used by select_representatives, exposed for testing.
std::vector<std::size_t> representative_indices(std::size_t len, std::size_t r);

/// Mean dot product of `q` with each representative key.
double block_score(std::span<const double> q, const Block& block);

class CacheSnapshot {
 public:
  std::size_t entry_count() const { return entry_count_; }
  std::size_t block_count() const { return block_count_; }
  std::size_t tail_size() const { return tail_size_; }

 private:
  friend class BlockedKvCache;
  std::uint64_t owner_ = 0;
  std::size_t entry_count_ = 0;
  std::size_t block_count_ = 0;
  std::size_t tail_size_ = 0;
};

class BlockedKvCache {
 public:
  BlockedKvCache(std::size_t dim, std::size_t block_size, std::size_t rep_count = 4);

  BlockedKvCache(const BlockedKvCache& other);
  BlockedKvCache& operator=(const BlockedKvCache& other);
  BlockedKvCache(BlockedKvCache&&) noexcept = default;
  BlockedKvCache& operator=(BlockedKvCache&&) noexcept = default;

  void append(KvEntry entry);

  /// The k highest-scoring sealed blocks, ordered by id. Ties go to the lower id.
  std::vector<BlockId> retrieve_blocks(std::span<const double> q, std::size_t k) const;

  /// Selected blocks' entries in position order, then the tail if requested.
  std::vector<const KvEntry*> window_entries(std::span<const BlockId> ids, bool include_tail) const;

  /// The last `count` entries in position order (all of them if fewer exist).
  std::vector<const KvEntry*> recent_entries(std::size_t count) const;

  /// Number of entries window_entries would return.
  std::size_t window_size(std::span<const BlockId> ids, bool include_tail) const;

  CacheSnapshot snapshot() const;
  void restore(const CacheSnapshot& snap);

  std::size_t dim() const { return dim_; }
  std::size_t block_size() const { return block_size_; }
  std::size_t rep_count() const { return rep_count_; }
  std::size_t entry_count() const { return entry_count_; }
  std::size_t block_count() const { return blocks_.size(); }
  const std::vector<Block>& blocks() const { return blocks_; }
  const std::vector<KvEntry>& tail() const { return tail_; }

  /// Structural and float-exact equality (owner identity ignored).
  bool same_content(const BlockedKvCache& other) const;

 private:
  void seal_tail();

  std::uint64_t owner_;
  std::size_t dim_;
  std::size_t block_size_;
  std::size_t rep_count_;
  std::size_t entry_count_ = 0;
  std::vector<Block> blocks_;
  std::vector<KvEntry> tail_;
};

}  // namespace utaca
