#include "utaca/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

namespace utaca {

std::string to_string(DecoderKind k) {
  return k == DecoderKind::Scripted ? "scripted" : "micro_transformer";
}

DecoderKind decoder_kind_from_string(const std::string& s) {
  if (s == "scripted") return DecoderKind::Scripted;
  if (s == "micro_transformer" || s == "micro") return DecoderKind::MicroTransformer;
  throw std::invalid_argument("unknown decoder kind '" + s + "'");
}

void DecoderConfig::validate() const {
  if (vocab_size < 4) throw std::invalid_argument("DecoderConfig: vocab_size must be at least 4");
  if (model_dim < 8) throw std::invalid_argument("DecoderConfig: model_dim must be at least 8");
  if (block_size == 0 || rep_count == 0) throw std::invalid_argument("DecoderConfig: block_size/rep_count must be positive");
  if (prefill_window == 0) throw std::invalid_argument("DecoderConfig: prefill_window must be positive");
  if (kind == DecoderKind::MicroTransformer) {
    if (layers == 0 || heads == 0 || ffn_mult == 0) throw std::invalid_argument("DecoderConfig: empty transformer");
    if (model_dim % heads != 0) throw std::invalid_argument("DecoderConfig: model_dim must be divisible by heads");
  }
  if (unk_prob < 0.0 || unk_prob > 1.0) throw std::invalid_argument("DecoderConfig: unk_prob must be in [0,1]");
  if (!(margin_hi > margin_lo) || margin_lo < 0.0) {
    throw std::invalid_argument("DecoderConfig: need margin_hi > margin_lo >= 0");
  }
}

namespace {

std::vector<BlockId> resolve_window(const BlockedKvCache& cache, std::span<const double> query,
                                    const WindowSelector& window) {
  return std::visit(
      [&](const auto& w) -> std::vector<BlockId> {
        using T = std::decay_t<decltype(w)>;
        if constexpr (std::is_same_v<T, TopK>) {
          return cache.retrieve_blocks(query, w.k);
        } else if constexpr (std::is_same_v<T, ExplicitBlocks>) {
          std::vector<BlockId> ids = w.ids;
          std::sort(ids.begin(), ids.end());
          ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
          for (BlockId id : ids) {
            if (id >= cache.block_count()) throw DecoderError("step: unknown block id " + std::to_string(id));
          }
          return ids;
        } else {
          std::vector<BlockId> ids(cache.block_count());
          for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
          return ids;
        }
      },
      window);
}

// Logit level of the top candidate; everything else sits near zero.
constexpr double kPeakLogit = 6.0;
constexpr double kGroundedWeight = 0.6;
constexpr double kOffsetWeight = 0.3;

}  // namespace

// ---------------------------------------------------------------------------
// Scripted decoder

std::shared_ptr<const TokenTable> TokenTable::make(const DecoderConfig& config) {
  static std::mutex mu;
  static std::map<std::tuple<std::uint64_t, std::size_t, std::size_t>, std::weak_ptr<const TokenTable>> cache;
  const auto key = std::make_tuple(config.seed, config.vocab_size, config.model_dim);
  std::lock_guard lock(mu);
  if (auto hit = cache[key].lock()) return hit;
  auto table = std::make_shared<TokenTable>();
  auto rng = seeded_engine({config.seed, 0x70cbULL});
  table->token.reserve(config.vocab_size);
  for (std::size_t i = 0; i < config.vocab_size; ++i) table->token.push_back(random_unit(rng, config.model_dim));
  table->grounded_direction = random_unit(rng, config.model_dim);
  table->offset_direction = random_unit(rng, config.model_dim);
  cache[key] = table;
  return table;
}

ScriptedDecoder::ScriptedDecoder(const BiographyRecord& record, const Vocabulary& vocab,
                                 const DecoderConfig& config, std::shared_ptr<const TokenTable> table)
    : record_(record),
      config_(config),
      table_(table ? std::move(table) : TokenTable::make(config)),
      cache_(config.model_dim, config.block_size, config.rep_count) {
  config_.validate();
  if (vocab.size() != config_.vocab_size) {
    throw std::invalid_argument("ScriptedDecoder: vocabulary size does not match decoder config");
  }
  if (record_.answer_end <= record_.answer_start || record_.answer_end > record_.gold_output.size()) {
    throw std::invalid_argument("ScriptedDecoder: record has no gold answer span");
  }
  const auto lex = vocab.unknown_lexicon();
  unknown_lexicon_.assign(lex.begin(), lex.end());
  for (std::size_t p = record_.answer_start; p < record_.answer_end; ++p) {
    distractors_.push_back(distractor_pool(record_, p, vocab));
  }
  auto rng = seeded_engine({config_.seed, 0x7091cULL, record_.id});
  topic_ = random_unit(rng, config_.model_dim);
}

Vec ScriptedDecoder::query(std::size_t step) const {
  auto rng = seeded_engine({config_.seed, 0x9e7aULL, record_.id, step});
  const double d = static_cast<double>(config_.model_dim);
  Vec q = random_normal(rng, config_.model_dim, config_.query_noise / std::sqrt(d));
  for (std::size_t i = 0; i < q.size(); ++i) q[i] += config_.query_gain * topic_[i];
  return q;
}

KvEntry ScriptedDecoder::entry_for(TokenId token, std::size_t position) const {
  KvEntry e;
  e.position = position;
  e.value = table_->token.at(token);
  e.key = e.value;
  const std::size_t summary_len = record_.gold_output.size() - 1;
  if (position >= record_.summary_offset && position < record_.summary_offset + summary_len &&
      position < record_.biography.size()) {
    for (std::size_t i = 0; i < e.key.size(); ++i) e.key[i] += config_.topic_weight * topic_[i];
  }
  return e;
}

std::vector<BlockId> ScriptedDecoder::evidence_blocks() const {
  std::vector<BlockId> out;
  for (const Block& b : cache_.blocks()) {
    if (b.first_position() < record_.evidence_end() && b.last_position() >= record_.evidence_start()) {
      out.push_back(b.id);
    }
  }
  return out;
}

bool ScriptedDecoder::window_has_evidence(std::span<const BlockId> ids) const {
  const std::size_t lo = record_.evidence_start();
  const std::size_t hi = record_.evidence_end();
  auto overlaps = [&](std::size_t first, std::size_t last) { return first < hi && last >= lo; };
  for (BlockId id : ids) {
    const Block& b = cache_.blocks()[id];
    if (overlaps(b.first_position(), b.last_position())) return true;
  }
  if (config_.attend_tail && !cache_.tail().empty()) {
    if (overlaps(cache_.tail().front().position, cache_.tail().back().position)) return true;
  }
  return false;
}

StepOutput ScriptedDecoder::prefill(std::span<const TokenId> prompt) {
  if (prompt.empty()) throw DecoderError("prefill: empty prompt");
  if (cache_.entry_count() != 0) throw DecoderError("prefill: cache is not empty");
  for (TokenId t : prompt) {
    if (t >= config_.vocab_size) throw DecoderError("prefill: token out of vocabulary");
    cache_.append(entry_for(t, cache_.entry_count()));
  }
  // The scripted model makes no prediction during prefill.
  StepOutput out;
  out.logits.assign(config_.vocab_size, 0.0);
  out.embedding.assign(config_.model_dim, 0.0);
  out.kv_entry = cache_.tail().empty() ? cache_.blocks().back().entries.back() : cache_.tail().back();
  out.window_size = std::min(config_.prefill_window, cache_.entry_count() - 1);
  return out;
}

StepOutput ScriptedDecoder::step(TokenId token, const WindowSelector& window) {
  if (token >= config_.vocab_size) throw DecoderError("step: token out of vocabulary");
  const std::size_t s = steps_;
  const Vec q = query(s);
  StepOutput out;
  out.selected = resolve_window(cache_, q, window);
  out.window_size = cache_.window_size(out.selected, config_.attend_tail);
  if (out.window_size == 0) throw DecoderError("no context");

  const bool in_answer = s >= record_.answer_start && s < record_.answer_end;
  const TokenId gold = s < record_.gold_output.size() ? record_.gold_output[s] : Vocabulary::kEos;
  const bool hit = window_has_evidence(out.selected);
  out.evidence_in_window = hit;
  const bool grounded = !in_answer || hit;

  auto rng = seeded_engine({config_.seed, 0x5ee9ULL, record_.id, s});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  out.logits = random_normal(rng, config_.vocab_size, config_.noise_temperature);

  auto pick_from = [&](const std::vector<TokenId>& pool) {
    std::uniform_int_distribution<std::size_t> d(0, pool.size() - 1);
    return pool[d(rng)];
  };
  const std::vector<TokenId>* distractors = in_answer ? &distractors_[s - record_.answer_start] : nullptr;

  TokenId emitted = gold;
  if (grounded) {
    TokenId runner = distractors ? pick_from(*distractors)
                                 : static_cast<TokenId>(std::uniform_int_distribution<std::size_t>(
                                       0, config_.vocab_size - 1)(rng));
    if (runner == gold) runner = Vocabulary::kUnk;
    out.logits[runner] = kPeakLogit;
    out.logits[gold] = kPeakLogit + config_.margin_hi + 2.0 * unit(rng);
  } else {
    const bool abstain = unit(rng) < config_.unk_prob;
    const TokenId unk = pick_from(unknown_lexicon_);
    const TokenId wrong = pick_from(*distractors);
    emitted = abstain ? unk : wrong;
    const TokenId runner = abstain ? wrong : unk;
    const double margin = config_.margin_lo * unit(rng);
    out.logits[emitted] = kPeakLogit;
    out.logits[runner] = kPeakLogit - margin;
    // The gold token stays a plausible third candidate.
    out.logits[gold] = kPeakLogit - config_.margin_lo - 0.5 - 1.5 * unit(rng);
  }

  out.embedding = table_->token[emitted];
  const double sign = grounded ? 1.0 : -1.0;
  const double offset = in_answer ? static_cast<double>(s - record_.answer_start + 1) / 8.0 : 0.0;
  const Vec noise = random_normal(rng, config_.model_dim, config_.embedding_noise);
  for (std::size_t i = 0; i < out.embedding.size(); ++i) {
    out.embedding[i] += kGroundedWeight * sign * table_->grounded_direction[i] +
                        kOffsetWeight * offset * table_->offset_direction[i] + noise[i];
  }

  out.kv_entry = entry_for(token, cache_.entry_count());
  cache_.append(out.kv_entry);
  ++steps_;
  return out;
}

DecoderSnapshot ScriptedDecoder::snapshot() const { return DecoderSnapshot{{cache_.snapshot()}, steps_}; }

void ScriptedDecoder::restore(const DecoderSnapshot& snap) {
  if (snap.caches.size() != 1) throw DecoderError("restore: snapshot layer count mismatch");
  cache_.restore(snap.caches[0]);
  steps_ = snap.steps;
}

const BlockedKvCache& ScriptedDecoder::cache(std::size_t layer) const {
  if (layer != 0) throw std::out_of_range("ScriptedDecoder has a single cache");
  return cache_;
}

std::unique_ptr<ScriptedDecoder> make_scripted(const BiographyRecord& record, const Vocabulary& vocab,
                                               const DecoderConfig& config, std::shared_ptr<const TokenTable> table) {
  return std::make_unique<ScriptedDecoder>(record, vocab, config, std::move(table));
}

// ---------------------------------------------------------------------------
// Micro-transformer

TransformerWeights TransformerWeights::random(const DecoderConfig& config) {
  config.validate();
  const std::size_t d = config.model_dim;
  const std::size_t f = d * config.ffn_mult;
  auto rng = seeded_engine({config.seed, 0x7f0ddULL});
  auto normal_mat = [&](std::size_t r, std::size_t c, double stddev) {
    Mat m(r, c);
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& x : m.values()) x = dist(rng);
    return m;
  };
  const double proj = 1.0 / std::sqrt(static_cast<double>(d));
  TransformerWeights w;
  w.token_embedding = normal_mat(config.vocab_size, d, 1.0);
  for (std::size_t l = 0; l < config.layers; ++l) {
    TransformerLayerWeights lw;
    lw.ln1_gamma.assign(d, 1.0);
    lw.ln1_beta.assign(d, 0.0);
    lw.wq = normal_mat(d, d, proj);
    lw.wk = normal_mat(d, d, proj);
    lw.wv = normal_mat(d, d, proj);
    lw.wo = normal_mat(d, d, proj);
    lw.ln2_gamma.assign(d, 1.0);
    lw.ln2_beta.assign(d, 0.0);
    lw.w1 = normal_mat(f, d, proj);
    lw.b1.assign(f, 0.0);
    lw.w2 = normal_mat(d, f, 1.0 / std::sqrt(static_cast<double>(f)));
    lw.b2.assign(d, 0.0);
    w.layers.push_back(std::move(lw));
  }
  w.final_gamma.assign(d, 1.0);
  w.final_beta.assign(d, 0.0);
  w.unembedding = normal_mat(config.vocab_size, d, proj * 4.0);
  return w;
}

Vec position_encoding(std::size_t position, std::size_t dim) {
  Vec pe(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
    const double angle = static_cast<double>(position) * rate;
    pe[i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
  return pe;
}

Vec windowed_attention(std::span<const double> q, std::span<const KvEntry* const> entries, std::size_t heads) {
  const std::size_t d = q.size();
  Vec out(d, 0.0);
  if (entries.empty()) return out;
  if (heads == 0 || d % heads != 0) throw DimensionError("windowed_attention: bad head count");
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> scores(entries.size());
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < entries.size(); ++j) {
      const double* k = entries[j]->key.data() + off;
      double s = 0.0;
      for (std::size_t i = 0; i < dh; ++i) s += q[off + i] * k[i];
      scores[j] = s * scale;
      mx = std::max(mx, scores[j]);
    }
    double sum = 0.0;
    for (double& s : scores) {
      s = std::exp(s - mx);
      sum += s;
    }
    for (std::size_t j = 0; j < entries.size(); ++j) {
      const double p = scores[j] / sum;
      const double* v = entries[j]->value.data() + off;
      for (std::size_t i = 0; i < dh; ++i) out[off + i] += p * v[i];
    }
  }
  return out;
}

MicroTransformer::MicroTransformer(const DecoderConfig& config)
    : MicroTransformer(config, std::make_shared<const TransformerWeights>(TransformerWeights::random(config))) {}

MicroTransformer::MicroTransformer(const DecoderConfig& config, std::shared_ptr<const TransformerWeights> weights)
    : config_(config), weights_(std::move(weights)) {
  config_.validate();
  if (!weights_ || weights_->layers.size() != config_.layers ||
      weights_->token_embedding.rows() != config_.vocab_size || weights_->token_embedding.cols() != config_.model_dim) {
    throw std::invalid_argument("MicroTransformer: weights do not match config");
  }
  for (std::size_t l = 0; l < config_.layers; ++l) {
    caches_.emplace_back(config_.model_dim, config_.block_size, config_.rep_count);
  }
}

StepOutput MicroTransformer::forward(TokenId token, WindowRequest request, bool require_context) {
  if (token >= config_.vocab_size) throw DecoderError("step: token out of vocabulary");
  const std::size_t d = config_.model_dim;
  const std::size_t position = caches_[0].entry_count();
  const TransformerWeights& w = *weights_;

  Vec x(w.token_embedding.row(token).begin(), w.token_embedding.row(token).end());
  add_inplace(x, position_encoding(position, d));

  StepOutput out;
  std::vector<KvEntry> new_entries;
  new_entries.reserve(caches_.size());
  for (std::size_t l = 0; l < caches_.size(); ++l) {
    const TransformerLayerWeights& lw = w.layers[l];
    const BlockedKvCache& cache = caches_[l];
    const Vec h = layer_norm(x, lw.ln1_gamma, lw.ln1_beta);
    const Vec q = matvec(lw.wq, h);

    std::vector<const KvEntry*> window;
    if (request.selector) {
      std::vector<BlockId> ids = resolve_window(cache, q, *request.selector);
      window = cache.window_entries(ids, config_.attend_tail);
      if (l == 0) out.selected = std::move(ids);
    } else {
      window = cache.recent_entries(config_.prefill_window);
    }
    if (l == 0) out.window_size = window.size();
    if (window.empty() && require_context) throw DecoderError("no context");

    const Vec attn = windowed_attention(q, window, config_.heads);
    add_inplace(x, matvec(lw.wo, attn));
    if (l + 1 == caches_.size()) out.embedding = x;

    const Vec h2 = layer_norm(x, lw.ln2_gamma, lw.ln2_beta);
    Vec inner = affine(lw.w1, h2, lw.b1);
    for (double& v : inner) v = gelu(v);
    add_inplace(x, affine(lw.w2, inner, lw.b2));

    new_entries.push_back(KvEntry{matvec(lw.wk, h), matvec(lw.wv, h), position});
  }
  const Vec final_h = layer_norm(x, w.final_gamma, w.final_beta);
  out.logits = matvec(w.unembedding, final_h);
  out.kv_entry = new_entries.front();
  for (std::size_t l = 0; l < caches_.size(); ++l) caches_[l].append(std::move(new_entries[l]));
  return out;
}

StepOutput MicroTransformer::prefill(std::span<const TokenId> prompt) {
  if (prompt.empty()) throw DecoderError("prefill: empty prompt");
  if (caches_[0].entry_count() != 0) throw DecoderError("prefill: cache is not empty");
  StepOutput out;
  for (TokenId t : prompt) out = forward(t, WindowRequest{}, false);
  return out;
}

StepOutput MicroTransformer::step(TokenId token, const WindowSelector& window) {
  StepOutput out = forward(token, WindowRequest{&window}, true);
  ++steps_;
  return out;
}

DecoderSnapshot MicroTransformer::snapshot() const {
  DecoderSnapshot snap;
  for (const BlockedKvCache& c : caches_) snap.caches.push_back(c.snapshot());
  snap.steps = steps_;
  return snap;
}

void MicroTransformer::restore(const DecoderSnapshot& snap) {
  if (snap.caches.size() != caches_.size()) throw DecoderError("restore: snapshot layer count mismatch");
  for (std::size_t l = 0; l < caches_.size(); ++l) caches_[l].restore(snap.caches[l]);
  steps_ = snap.steps;
}

const BlockedKvCache& MicroTransformer::cache(std::size_t layer) const { return caches_.at(layer); }

std::unique_ptr<Decoder> make_decoder(const DecoderConfig& config, const BiographyRecord* record,
                                      const Vocabulary& vocab, std::shared_ptr<const TokenTable> table,
                                      std::shared_ptr<const TransformerWeights> weights) {
  if (config.kind == DecoderKind::Scripted) {
    if (!record) throw std::invalid_argument("make_decoder: scripted decoder needs a record");
    return make_scripted(*record, vocab, config, std::move(table));
  }
  if (weights) return std::make_unique<MicroTransformer>(config, std::move(weights));
  return std::make_unique<MicroTransformer>(config);
}

}  // namespace utaca
