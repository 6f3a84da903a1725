#include "utaca/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "utaca/controller.hpp"
#include "utaca/datagen.hpp"
#include "utaca/decoder.hpp"
#include "utaca/detector.hpp"
#include "utaca/kv_cache.hpp"

namespace utaca {

namespace {

template <typename F>
CheckResult check(std::string name, F&& body) {
  CheckResult r{std::move(name), false, {}};
  try {
    r.detail = body();
    r.passed = r.detail.empty();
  } catch (const std::exception& e) {
    r.detail = std::string("exception: ") + e.what();
  }
  return r;
}

BlockedKvCache random_cache(std::mt19937_64& rng, std::size_t dim, std::size_t entries) {
  BlockedKvCache cache(dim, 16, 4);
  for (std::size_t i = 0; i < entries; ++i) {
    cache.append(KvEntry{random_normal(rng, dim, 1.0), random_normal(rng, dim, 1.0), i});
  }
  return cache;
}

std::string retrieval_oracle() {
  auto rng = seeded_engine({1, 2, 3});
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t dim = 2 + trial % 15;
    const BlockedKvCache cache = random_cache(rng, dim, 16 * (1 + trial % 20) + trial % 7);
    const Vec q = random_normal(rng, dim, 1.0);
    const std::size_t k = 1 + trial % 6;
    std::vector<std::pair<double, BlockId>> scored;
    for (const Block& b : cache.blocks()) {
      double s = 0.0;
      for (const Vec& rep : b.representatives) {
        double d = 0.0;
        for (std::size_t i = 0; i < dim; ++i) d += q[i] * rep[i];
        s += d;
      }
      scored.push_back({-s / static_cast<double>(b.representatives.size()), b.id});
    }
    std::sort(scored.begin(), scored.end());
    std::vector<BlockId> want;
    for (std::size_t i = 0; i < std::min(k, scored.size()); ++i) want.push_back(scored[i].second);
    std::sort(want.begin(), want.end());
    if (cache.retrieve_blocks(q, k) != want) return "mismatch on trial " + std::to_string(trial);
  }
  return {};
}

std::string snapshot_roundtrip() {
  auto rng = seeded_engine({4});
  BlockedKvCache cache = random_cache(rng, 8, 15);
  const BlockedKvCache before = cache;
  const CacheSnapshot snap = cache.snapshot();
  cache.append(KvEntry{random_normal(rng, 8, 1.0), random_normal(rng, 8, 1.0), 15});
  if (cache.block_count() != 1) return "append did not seal";
  cache.restore(snap);
  if (!cache.same_content(before)) return "restore is not exact";
  return {};
}

std::string trigger_grid() {
  for (int a = 0; a <= 100; ++a) {
    for (int b = 0; a + b <= 100; ++b) {
      const int c = 100 - a - b;
      const GdmVector p{a / 100.0, b / 100.0, c / 100.0};
      if (should_expand(p) != (p.p_unk + p.p_hal > p.p_cor)) return "grid point disagrees";
    }
  }
  if (should_expand({0.5, 0.3, 0.2})) return "boundary expanded";
  return {};
}

std::string gradient_check() {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    DetectorConfig c;
    c.input_dim = 4;
    c.d_model = 5;
    c.mlp_dim = 3;
    c.seed = seed;
    c.use_lstm = seed != 1;
    auto rng = seeded_engine({seed, 77});
    std::vector<SignalSequence> sample(2);
    for (auto& seq : sample) {
      for (int t = 0; t < 3; ++t) {
        TokenSignal s{random_normal(rng, 4, 1.0), 1.0 + t, static_cast<TokenLabel>(t % 3)};
        seq.push_back(s);
      }
    }
    const double err = grad_check(c, DetectorParams::init(c), sample);
    if (!(err < 1e-4)) return "relative error " + std::to_string(err);
  }
  return {};
}

std::string softmax_law() {
  auto rng = seeded_engine({9});
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int trial = 0; trial < 50; ++trial) {
    Vec x(1 + trial * 13);
    for (double& v : x) v = u(rng);
    const Vec p = softmax(x);
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    if (std::abs(s - 1.0) > 1e-12) return "sum off by " + std::to_string(s - 1.0);
  }
  return {};
}

std::string stub_equivalence() {
  const Vocabulary vocab = Vocabulary::standard();
  DatagenConfig dc;
  dc.train_count = 0;
  dc.val_count = 6;
  dc.test_count = 0;
  const Corpus corpus = gen_records(dc, vocab);
  DecoderConfig cfg;
  ControllerConfig cc;
  const ConstantDetector always = ConstantDetector::always_expand();
  for (const BiographyRecord& r : corpus.val) {
    const auto prompt = r.prompt();
    auto a = make_scripted(r, vocab, cfg);
    auto b = make_scripted(r, vocab, cfg);
    if (decode(*a, always, prompt, cc).tokens != decode_fixed(*b, prompt, cc.k_max, cc).tokens) {
      return "always-expand differs from fixed K_max on record " + std::to_string(r.id);
    }
  }
  return {};
}

std::string datagen_determinism() {
  const Vocabulary vocab = Vocabulary::standard();
  DatagenConfig dc;
  dc.train_count = 40;
  dc.val_count = 12;
  dc.test_count = 2;
  dc.test_filler = {64, 128};
  const Corpus a = gen_records(dc, vocab);
  const Corpus b = gen_records(dc, vocab);
  if (a.train != b.train || a.val != b.val || a.test != b.test) return "corpora differ";
  std::set<std::string> seen;
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    for (const BiographyRecord& r : a.split(s)) {
      if (!seen.insert(r.person).second) return "name reused: " + r.person;
    }
  }
  return {};
}

}  // namespace

std::vector<CheckResult> run_selftest() {
  return {check("retrieval matches brute force", retrieval_oracle),
          check("snapshot round trip", snapshot_roundtrip),
          check("trigger inequality on simplex grid", trigger_grid),
          check("BPTT gradient check", gradient_check),
          check("softmax normalization", softmax_law),
          check("always-expand equals fixed K_max", stub_equivalence),
          check("datagen determinism and unique names", datagen_determinism)};
}

}  // namespace utaca
