#pragma once

// Autoregressive decoders that attend to a selected subset of a blocked KV
// cache. Two implementations share the interface:
//
//  * ScriptedDecoder: a deterministic stand-in for an LLM whose output depends
//    on whether the gold evidence of a BiographyRecord is inside the window.
//  * MicroTransformer: a small fixed-weight transformer exercising the real
//    windowed-attention numerics.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "utaca/datagen.hpp"
#include "utaca/kv_cache.hpp"
#include "utaca/numerics.hpp"
#include "utaca/vocabulary.hpp"

namespace utaca {

enum class DecoderKind { Scripted, MicroTransformer };

std::string to_string(DecoderKind k);
DecoderKind decoder_kind_from_string(const std::string& s);

struct DecoderConfig {
  DecoderKind kind = DecoderKind::Scripted;
  std::size_t vocab_size = 512;
  std::size_t model_dim = 32;
  std::uint64_t seed = 11;

  std::size_t block_size = 16;
  std::size_t rep_count = 4;
  bool attend_tail = true;
  /// Sliding-window width used while prefilling the prompt.
  std::size_t prefill_window = 64;

  // Micro-transformer shape.
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;

  // Scripted decoder behaviour.
  /// Probability that an evidence miss abstains (UNK lexicon) instead of
  /// emitting a distractor.
  double unk_prob = 0.5;
  double margin_hi = 4.0;
  double margin_lo = 0.5;
  /// Std-dev of the background logits.
  double noise_temperature = 0.3;
  double query_gain = 1.0;
  double query_noise = 1.0;
  /// Weight of the record topic inside the keys of summary tokens.
  double topic_weight = 1.0;
  double embedding_noise = 0.25;

  void validate() const;
};

struct StepOutput {
  Vec logits;
  /// Post-attention residual vector of the final layer (emb_t).
  Vec embedding;
  /// Entry appended for the consumed token (first layer for multi-layer models).
  KvEntry kv_entry;
  /// Tokens attended per layer.
  std::size_t window_size = 0;
  /// Blocks selected in the first layer.
  std::vector<BlockId> selected;
  /// Scripted decoder only: was any evidence position inside the window.
  std::optional<bool> evidence_in_window;
};

struct TopK {
  std::size_t k = 1;
};
struct ExplicitBlocks {
  std::vector<BlockId> ids;
};
struct AllBlocks {};

/// How a step picks its window: retrieval under a budget, a fixed set of
/// blocks, or every sealed block.
using WindowSelector = std::variant<TopK, ExplicitBlocks, AllBlocks>;

struct DecoderSnapshot {
  std::vector<CacheSnapshot> caches;
  std::size_t steps = 0;
};

class DecoderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Decoder {
 public:
  virtual ~Decoder() = default;

  virtual const DecoderConfig& config() const = 0;

  /// Encodes the prompt with a sliding local window, filling the cache.
  /// Returns the output at the last prompt token.
  virtual StepOutput prefill(std::span<const TokenId> prompt) = 0;

  /// Consumes `token`, attending to the selected window, and appends its entry.
  virtual StepOutput step(TokenId token, const WindowSelector& window) = 0;

  virtual DecoderSnapshot snapshot() const = 0;
  virtual void restore(const DecoderSnapshot& snap) = 0;

  /// Cache of the given layer (the scripted decoder has one).
  virtual const BlockedKvCache& cache(std::size_t layer = 0) const = 0;
  virtual std::size_t layer_count() const = 0;

  /// Number of generation steps taken since prefill.
  virtual std::size_t steps_taken() const = 0;
};

// ---------------------------------------------------------------------------

/// Seeded per-token vectors shared by every scripted decoder with the same
/// (seed, vocab_size, model_dim).
struct TokenTable {
  std::vector<Vec> token;
  Vec grounded_direction;
  Vec offset_direction;

  static std::shared_ptr<const TokenTable> make(const DecoderConfig& config);
};

class ScriptedDecoder final : public Decoder {
 public:
  ScriptedDecoder(const BiographyRecord& record, const Vocabulary& vocab, const DecoderConfig& config,
                  std::shared_ptr<const TokenTable> table = nullptr);

  const DecoderConfig& config() const override { return config_; }
  StepOutput prefill(std::span<const TokenId> prompt) override;
  StepOutput step(TokenId token, const WindowSelector& window) override;
  DecoderSnapshot snapshot() const override;
  void restore(const DecoderSnapshot& snap) override;
  const BlockedKvCache& cache(std::size_t layer = 0) const override;
  std::size_t layer_count() const override { return 1; }
  std::size_t steps_taken() const override { return steps_; }

  /// Sealed blocks that overlap the evidence span.
  std::vector<BlockId> evidence_blocks() const;

  /// Retrieval query for generation step `step`.
  Vec query(std::size_t step) const;
  const BiographyRecord& record() const { return record_; }

 private:
  KvEntry entry_for(TokenId token, std::size_t position) const;
  bool window_has_evidence(std::span<const BlockId> ids) const;

  BiographyRecord record_;
  DecoderConfig config_;
  std::shared_ptr<const TokenTable> table_;
  std::vector<TokenId> unknown_lexicon_;
  std::vector<std::vector<TokenId>> distractors_;  // per gold position in the answer span
  Vec topic_;
  BlockedKvCache cache_;
  std::size_t steps_ = 0;
};

std::unique_ptr<ScriptedDecoder> make_scripted(const BiographyRecord& record, const Vocabulary& vocab,
                                               const DecoderConfig& config,
                                               std::shared_ptr<const TokenTable> table = nullptr);

// ---------------------------------------------------------------------------

struct TransformerLayerWeights {
  Vec ln1_gamma, ln1_beta;
  Mat wq, wk, wv, wo;
  Vec ln2_gamma, ln2_beta;
  Mat w1;
  Vec b1;
  Mat w2;
  Vec b2;
};

struct TransformerWeights {
  Mat token_embedding;  // vocab x d
  std::vector<TransformerLayerWeights> layers;
  Vec final_gamma, final_beta;
  Mat unembedding;  // vocab x d

  static TransformerWeights random(const DecoderConfig& config);
};

/// Sinusoidal position code of length `dim`.
Vec position_encoding(std::size_t position, std::size_t dim);

/// Multi-head scaled dot-product attention of `q` over `entries`.
Vec windowed_attention(std::span<const double> q, std::span<const KvEntry* const> entries, std::size_t heads);

class MicroTransformer final : public Decoder {
 public:
  explicit MicroTransformer(const DecoderConfig& config);
  MicroTransformer(const DecoderConfig& config, std::shared_ptr<const TransformerWeights> weights);

  const DecoderConfig& config() const override { return config_; }
  StepOutput prefill(std::span<const TokenId> prompt) override;
  StepOutput step(TokenId token, const WindowSelector& window) override;
  DecoderSnapshot snapshot() const override;
  void restore(const DecoderSnapshot& snap) override;
  const BlockedKvCache& cache(std::size_t layer = 0) const override;
  std::size_t layer_count() const override { return caches_.size(); }
  std::size_t steps_taken() const override { return steps_; }

  const TransformerWeights& weights() const { return *weights_; }
  std::shared_ptr<const TransformerWeights> shared_weights() const { return weights_; }

 private:
  struct WindowRequest {
    const WindowSelector* selector = nullptr;  // null: sliding prefill window
  };
  StepOutput forward(TokenId token, WindowRequest request, bool require_context);

  DecoderConfig config_;
  std::shared_ptr<const TransformerWeights> weights_;
  std::vector<BlockedKvCache> caches_;
  std::size_t steps_ = 0;
};

/// Builds the decoder named by `config.kind`. The record is needed only by
/// the scripted decoder.
std::unique_ptr<Decoder> make_decoder(const DecoderConfig& config, const BiographyRecord* record,
                                      const Vocabulary& vocab,
                                      std::shared_ptr<const TokenTable> table = nullptr,
                                      std::shared_ptr<const TransformerWeights> weights = nullptr);

}  // namespace utaca
