#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "support.hpp"
#include "utaca/checkpoint.hpp"
#include "utaca/decoder.hpp"
#include "utaca/detector.hpp"

using namespace utaca;
using utaca::testing::evidence_in_block;

namespace {

DecoderConfig micro_config(std::size_t prefill_window = 64) {
  DecoderConfig c;
  c.kind = DecoderKind::MicroTransformer;
  c.vocab_size = 64;
  c.model_dim = 16;
  c.heads = 4;
  c.layers = 2;
  c.block_size = 8;
  c.prefill_window = prefill_window;
  c.seed = 3;
  return c;
}

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  auto rng = seeded_engine({seed});
  std::uniform_int_distribution<TokenId> d(0, static_cast<TokenId>(vocab - 1));
  std::vector<TokenId> out(n);
  for (auto& t : out) t = d(rng);
  return out;
}

long double ln_ref(const Vec& x, const Vec& g, const Vec& b, std::size_t i) {
  long double mean = 0, var = 0;
  for (double v : x) mean += v;
  mean /= x.size();
  for (double v : x) var += (v - mean) * (v - mean);
  var /= x.size();
  return (x[i] - mean) / std::sqrt(var + static_cast<long double>(kLayerNormEps)) * g[i] + b[i];
}

Vec ln_vec(const Vec& x, const Vec& g, const Vec& b) {
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<double>(ln_ref(x, g, b, i));
  return y;
}

Vec mv(const Mat& m, const Vec& x) {
  Vec y(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    long double s = 0;
    for (std::size_t c = 0; c < m.cols(); ++c) s += static_cast<long double>(m(r, c)) * x[c];
    y[r] = static_cast<double>(s);
  }
  return y;
}

double gelu_ref(double x) {
  const long double c = std::sqrt(2.0L / 3.14159265358979323846264338327950288L);
  return static_cast<double>(0.5L * x * (1.0L + std::tanh(c * (x + 0.044715L * x * x * x))));
}

// Dense causal transformer written from the weights alone: every position
// attends to all strictly earlier positions in every layer (a token's own
// entry is appended after its attention). Returns last-position logits.
Vec dense_causal_logits(const TransformerWeights& w, const DecoderConfig& c, const std::vector<TokenId>& tokens) {
  const std::size_t d = c.model_dim, n = tokens.size(), dh = d / c.heads;
  std::vector<Vec> x(n);
  for (std::size_t p = 0; p < n; ++p) {
    x[p] = Vec(w.token_embedding.row(tokens[p]).begin(), w.token_embedding.row(tokens[p]).end());
    const Vec pe = position_encoding(p, d);
    for (std::size_t i = 0; i < d; ++i) x[p][i] += pe[i];
  }
  for (const auto& lw : w.layers) {
    std::vector<Vec> q(n), k(n), v(n);
    for (std::size_t p = 0; p < n; ++p) {
      const Vec h = ln_vec(x[p], lw.ln1_gamma, lw.ln1_beta);
      q[p] = mv(lw.wq, h);
      k[p] = mv(lw.wk, h);
      v[p] = mv(lw.wv, h);
    }
    for (std::size_t p = 0; p < n; ++p) {
      Vec attn(d, 0.0);
      for (std::size_t hd = 0; hd < c.heads && p > 0; ++hd) {
        std::vector<long double> s(p);
        long double mx = -1e300L;
        for (std::size_t j = 0; j < p; ++j) {
          long double dotp = 0;
          for (std::size_t i = 0; i < dh; ++i) dotp += static_cast<long double>(q[p][hd * dh + i]) * k[j][hd * dh + i];
          s[j] = dotp / std::sqrt(static_cast<long double>(dh));
          mx = std::max(mx, s[j]);
        }
        long double z = 0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j < p; ++j) {
          for (std::size_t i = 0; i < dh; ++i) attn[hd * dh + i] += static_cast<double>(s[j] / z * v[j][hd * dh + i]);
        }
      }
      const Vec o = mv(lw.wo, attn);
      for (std::size_t i = 0; i < d; ++i) x[p][i] += o[i];
      const Vec h2 = ln_vec(x[p], lw.ln2_gamma, lw.ln2_beta);
      Vec inner = mv(lw.w1, h2);
      for (std::size_t i = 0; i < inner.size(); ++i) inner[i] = gelu_ref(inner[i] + lw.b1[i]);
      const Vec f = mv(lw.w2, inner);
      for (std::size_t i = 0; i < d; ++i) x[p][i] += f[i] + lw.b2[i];
    }
  }
  return mv(w.unembedding, ln_vec(x[n - 1], w.final_gamma, w.final_beta));
}

// Masked dense attention: scores over every cached entry, then entries outside
// the window are masked out before normalization.
Vec masked_attention(const Vec& q, const BlockedKvCache& cache, const std::vector<bool>& in_window,
                     std::size_t heads) {
  std::vector<const KvEntry*> all;
  for (const Block& b : cache.blocks()) {
    for (const KvEntry& e : b.entries) all.push_back(&e);
  }
  for (const KvEntry& e : cache.tail()) all.push_back(&e);
  const std::size_t d = q.size(), dh = d / heads;
  Vec out(d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<long double> w(all.size(), 0.0L);
    long double mx = -1e300L;
    for (std::size_t j = 0; j < all.size(); ++j) {
      if (!in_window[all[j]->position]) continue;
      long double s = 0;
      for (std::size_t i = 0; i < dh; ++i) s += static_cast<long double>(q[h * dh + i]) * all[j]->key[h * dh + i];
      w[j] = s / std::sqrt(static_cast<long double>(dh));
      mx = std::max(mx, w[j]);
    }
    long double z = 0;
    for (std::size_t j = 0; j < all.size(); ++j) {
      w[j] = in_window[all[j]->position] ? std::exp(w[j] - mx) : 0.0L;
      z += w[j];
    }
    for (std::size_t j = 0; j < all.size(); ++j) {
      for (std::size_t i = 0; i < dh; ++i) out[h * dh + i] += static_cast<double>(w[j] / z * all[j]->value[h * dh + i]);
    }
  }
  return out;
}

struct Prepared {
  BiographyRecord record;
  std::unique_ptr<ScriptedDecoder> decoder;
  TokenId next_input;
};

Prepared scripted_at_answer(const Vocabulary& vocab, const DecoderConfig& cfg, std::size_t id = 0) {
  Prepared p{evidence_in_block(vocab, 5, 8, id), nullptr, 0};
  p.decoder = make_scripted(p.record, vocab, cfg);
  const auto prompt = p.record.prompt();
  p.decoder->prefill(std::span(prompt).first(prompt.size() - 1));
  p.next_input = prompt.back();
  return p;
}

}  // namespace

TEST_CASE("config validation") {
  DecoderConfig c;
  c.vocab_size = 3;
  CHECK_THROWS(c.validate());
  c = DecoderConfig{};
  c.model_dim = 4;
  CHECK_THROWS(c.validate());
  CHECK_NOTHROW(DecoderConfig{}.validate());
}

TEST_CASE("windowed attention equals masked dense attention") {
  const DecoderConfig c = micro_config();
  auto rng = seeded_engine({21});
  for (int trial = 0; trial < 30; ++trial) {
    BlockedKvCache cache(c.model_dim, 8, 2);
    const std::size_t n = 9 + static_cast<std::size_t>(trial) * 5;
    for (std::size_t i = 0; i < n; ++i) {
      cache.append(KvEntry{random_normal(rng, c.model_dim, 1.0), random_normal(rng, c.model_dim, 1.0), i});
    }
    std::vector<BlockId> ids;
    for (BlockId b = 0; b < cache.block_count(); ++b) {
      if ((b + static_cast<std::size_t>(trial)) % 3 != 0) ids.push_back(b);
    }
    const auto window = cache.window_entries(ids, true);
    std::vector<bool> mask(n, false);
    for (const KvEntry* e : window) mask[e->position] = true;
    const Vec q = random_normal(rng, c.model_dim, 1.0);
    const Vec got = windowed_attention(q, window, c.heads);
    const Vec want = masked_attention(q, cache, mask, c.heads);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-9);
  }
}

TEST_CASE("micro-transformer step equals dense causal attention over the same entries") {
  const DecoderConfig c = micro_config(1000);
  const auto tokens = random_tokens(37, c.vocab_size, 5);
  const auto weights = std::make_shared<const TransformerWeights>(TransformerWeights::random(c));

  SUBCASE("prefill with a window covering the prompt") {
    MicroTransformer m(c, weights);
    const StepOutput out = m.prefill(tokens);
    const Vec want = dense_causal_logits(*weights, c, tokens);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(out.logits[i] - want[i]) < 1e-9);
  }
  SUBCASE("step over every block plus the tail") {
    MicroTransformer m(c, weights);
    m.prefill(std::span(tokens).first(tokens.size() - 1));
    const StepOutput out = m.step(tokens.back(), AllBlocks{});
    CHECK(out.window_size == tokens.size() - 1);
    const Vec want = dense_causal_logits(*weights, c, tokens);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(out.logits[i] - want[i]) < 1e-9);
  }
}

TEST_CASE("micro-transformer: same entry set through different selectors is bit-identical") {
  const DecoderConfig c = micro_config();
  const auto tokens = random_tokens(50, c.vocab_size, 6);
  MicroTransformer a(c), b(c), k(c);
  a.prefill(std::span(tokens).first(49));
  b.prefill(std::span(tokens).first(49));
  k.prefill(std::span(tokens).first(49));
  const std::size_t blocks = a.cache().block_count();
  std::vector<BlockId> all(blocks);
  for (std::size_t i = 0; i < blocks; ++i) all[i] = i;
  const StepOutput x = a.step(tokens.back(), AllBlocks{});
  const StepOutput y = b.step(tokens.back(), ExplicitBlocks{all});
  const StepOutput z = k.step(tokens.back(), TopK{blocks});
  CHECK(x.logits == y.logits);
  CHECK(x.logits == z.logits);
  CHECK(x.embedding == y.embedding);
}

TEST_CASE("prefill partitions the prompt") {
  const DecoderConfig c = micro_config();
  MicroTransformer m(c);
  DecoderConfig c16 = c;
  c16.block_size = 16;
  MicroTransformer m16(c16);
  const auto tokens = random_tokens(35, c.vocab_size, 8);
  m16.prefill(tokens);
  for (std::size_t l = 0; l < m16.layer_count(); ++l) {
    CHECK(m16.cache(l).block_count() == 2);
    CHECK(m16.cache(l).tail().size() == 3);
  }
  CHECK_THROWS_AS(m.prefill({}), DecoderError);
  m.prefill(tokens);
  CHECK_THROWS_AS(m.prefill(tokens), DecoderError);
}

TEST_CASE("step needs context") {
  const Vocabulary vocab = Vocabulary::standard();
  const BiographyRecord r = evidence_in_block(vocab, 1, 2);
  DecoderConfig c;
  auto s = make_scripted(r, vocab, c);
  CHECK_THROWS_WITH_AS(s->step(Vocabulary::kSummary, TopK{1}), "no context", DecoderError);
  MicroTransformer m(micro_config());
  CHECK_THROWS_WITH_AS(m.step(3, TopK{1}), "no context", DecoderError);
}

TEST_CASE("scripted decoder records evidence blocks at prefill") {
  const Vocabulary vocab = Vocabulary::standard();
  DecoderConfig c;
  auto p = scripted_at_answer(vocab, c);
  CHECK(p.record.evidence_start() / 16 == 5);
  CHECK((p.record.evidence_end() - 1) / 16 == 5);
  CHECK(p.decoder->evidence_blocks() == std::vector<BlockId>{5});
  CHECK(p.decoder->cache().block_count() == 8);
}

TEST_CASE("scripted decoder: evidence inside vs outside the window") {
  const Vocabulary vocab = Vocabulary::standard();
  DecoderConfig c;
  for (std::size_t id = 0; id < 20; ++id) {
    auto hit = scripted_at_answer(vocab, c, id);
    auto miss = scripted_at_answer(vocab, c, id);
    TokenId input = hit.next_input;
    for (std::size_t s = 0; s < hit.record.answer_end; ++s) {
      const StepOutput a = hit.decoder->step(input, ExplicitBlocks{{5}});
      const StepOutput b = miss.decoder->step(input, ExplicitBlocks{{0}});
      const TokenId gold = hit.record.gold_output[s];
      if (s >= hit.record.answer_start) {
        CHECK(argmax(a.logits) == gold);
        CHECK(logit_margin(a.logits) >= c.margin_hi);
        CHECK(*a.evidence_in_window);
        CHECK_FALSE(*b.evidence_in_window);
        CHECK(logit_margin(b.logits) <= c.margin_lo);
        const TokenId top = static_cast<TokenId>(argmax(b.logits));
        const auto pool = distractor_pool(miss.record, s, vocab);
        CHECK((vocab.is_unknown(top) || std::find(pool.begin(), pool.end(), top) != pool.end()));
      }
      input = gold;
    }
  }
}

TEST_CASE("scripted decoder: unknown probability extremes") {
  const Vocabulary vocab = Vocabulary::standard();
  for (double u : {0.0, 1.0}) {
    DecoderConfig c;
    c.unk_prob = u;
    for (std::size_t id = 0; id < 10; ++id) {
      auto p = scripted_at_answer(vocab, c, id);
      TokenId input = p.next_input;
      for (std::size_t s = 0; s < p.record.answer_end; ++s) {
        const StepOutput o = p.decoder->step(input, ExplicitBlocks{{1}});
        const TokenId top = static_cast<TokenId>(argmax(o.logits));
        if (s >= p.record.answer_start) {
          if (u == 1.0) {
            CHECK(vocab.is_unknown(top));
          } else {
            CHECK_FALSE(vocab.is_unknown(top));
            CHECK(top != p.record.gold_output[s]);
          }
        }
        input = top;
      }
    }
  }
}

TEST_CASE("scripted decoder: full window reproduces the gold output") {
  const Vocabulary vocab = Vocabulary::standard();
  DatagenConfig dg;
  dg.train_count = 0;
  dg.val_count = 30;
  dg.test_count = 0;
  const Corpus corpus = gen_records(dg, vocab);
  DecoderConfig c;
  for (const BiographyRecord& r : corpus.val) {
    auto d = make_scripted(r, vocab, c);
    const auto prompt = r.prompt();
    d->prefill(std::span(prompt).first(prompt.size() - 1));
    TokenId input = prompt.back();
    std::vector<TokenId> out;
    while (out.size() < r.gold_output.size() + 2) {
      input = static_cast<TokenId>(argmax(d->step(input, AllBlocks{}).logits));
      out.push_back(input);
      if (input == Vocabulary::kEos) break;
    }
    CHECK(out == r.gold_output);
  }
}

TEST_CASE("scripted decoder: hit and miss margins never overlap") {
  const Vocabulary vocab = Vocabulary::standard();
  double min_hit = 1e300, max_miss = -1e300;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    DecoderConfig c;
    c.seed = seed;
    for (std::size_t id = 0; id < 5; ++id) {
      auto hit = scripted_at_answer(vocab, c, id);
      auto miss = scripted_at_answer(vocab, c, id);
      TokenId input = hit.next_input;
      for (std::size_t s = 0; s < hit.record.answer_end; ++s) {
        const StepOutput a = hit.decoder->step(input, AllBlocks{});
        const StepOutput b = miss.decoder->step(input, ExplicitBlocks{{2}});
        if (s >= hit.record.answer_start) {
          min_hit = std::min(min_hit, logit_margin(a.logits));
          max_miss = std::max(max_miss, logit_margin(b.logits));
        }
        input = hit.record.gold_output[s];
      }
    }
  }
  CHECK(min_hit > max_miss);
}

TEST_CASE("decoders are deterministic") {
  const Vocabulary vocab = Vocabulary::standard();
  auto run = [&](Decoder& d, const std::vector<TokenId>& prompt) {
    d.prefill(std::span(prompt).first(prompt.size() - 1));
    TokenId input = prompt.back();
    std::vector<TokenId> out;
    std::vector<Vec> logits;
    for (std::size_t s = 0; s < 20; ++s) {
      const StepOutput o = d.step(input, TopK{1 + s % 3});
      input = static_cast<TokenId>(argmax(o.logits));
      out.push_back(input);
      logits.push_back(o.logits);
    }
    return std::make_pair(out, logits);
  };
  const BiographyRecord r = evidence_in_block(vocab, 3, 6);
  DecoderConfig c;
  auto a = make_scripted(r, vocab, c);
  auto b = make_scripted(r, vocab, c);
  CHECK(run(*a, r.prompt()) == run(*b, r.prompt()));

  const DecoderConfig mc = micro_config();
  const auto tokens = random_tokens(60, mc.vocab_size, 9);
  MicroTransformer m1(mc), m2(mc);
  CHECK(run(m1, tokens) == run(m2, tokens));
}

TEST_CASE("step never touches earlier cache entries") {
  const DecoderConfig mc = micro_config();
  const auto tokens = random_tokens(45, mc.vocab_size, 10);
  MicroTransformer m(mc);
  m.prefill(tokens);
  auto checksum = [](const BlockedKvCache& c, std::size_t upto) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](double v) {
      h ^= std::bit_cast<std::uint64_t>(v);
      h *= 1099511628211ULL;
    };
    std::size_t seen = 0;
    auto visit = [&](const KvEntry& e) {
      if (seen++ >= upto) return;
      for (double v : e.key) mix(v);
      for (double v : e.value) mix(v);
    };
    for (const Block& b : c.blocks()) {
      for (const KvEntry& e : b.entries) visit(e);
    }
    for (const KvEntry& e : c.tail()) visit(e);
    return h;
  };
  for (std::size_t s = 0; s < 10; ++s) {
    const std::size_t n = m.cache(0).entry_count();
    std::vector<std::uint64_t> before;
    for (std::size_t l = 0; l < m.layer_count(); ++l) before.push_back(checksum(m.cache(l), n));
    m.step(static_cast<TokenId>(s), TopK{2});
    for (std::size_t l = 0; l < m.layer_count(); ++l) CHECK(checksum(m.cache(l), n) == before[l]);
    CHECK(m.cache(0).entry_count() == n + 1);
  }
}

TEST_CASE("decoder snapshot and restore") {
  const DecoderConfig mc = micro_config();
  const auto tokens = random_tokens(30, mc.vocab_size, 11);
  MicroTransformer m(mc);
  m.prefill(tokens);
  const auto snap = m.snapshot();
  const StepOutput first = m.step(4, TopK{1});
  m.restore(snap);
  CHECK(m.steps_taken() == 0);
  const StepOutput again = m.step(4, TopK{1});
  CHECK(first.logits == again.logits);
  CHECK(first.kv_entry == again.kv_entry);
}

TEST_CASE("transformer weights round-trip through the container") {
  const DecoderConfig mc = micro_config();
  const TransformerWeights w = TransformerWeights::random(mc);
  std::stringstream buf;
  write_container(buf, transformer_container(mc, w));
  const TransformerWeights back = transformer_from_container(read_container(buf), mc);
  CHECK(back.token_embedding == w.token_embedding);
  CHECK(back.unembedding == w.unembedding);
  REQUIRE(back.layers.size() == w.layers.size());
  CHECK(back.layers[1].w2 == w.layers[1].w2);
  CHECK(back.final_gamma == w.final_gamma);
}

TEST_CASE("make_decoder dispatches on kind") {
  const Vocabulary vocab = Vocabulary::standard();
  const BiographyRecord r = evidence_in_block(vocab, 1, 3);
  DecoderConfig c;
  CHECK(dynamic_cast<ScriptedDecoder*>(make_decoder(c, &r, vocab).get()) != nullptr);
  CHECK_THROWS(make_decoder(c, nullptr, vocab));
  c = micro_config();
  CHECK(dynamic_cast<MicroTransformer*>(make_decoder(c, nullptr, vocab).get()) != nullptr);
  CHECK(decoder_kind_from_string(to_string(DecoderKind::MicroTransformer)) == DecoderKind::MicroTransformer);
}
