#include <doctest.h>

#include <sstream>

#include "support.hpp"
#include "utaca/eval.hpp"

using namespace utaca;
using utaca::testing::evidence_in_block;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::standard();
  return v;
}

const std::vector<BiographyRecord>& val_records() {
  static const std::vector<BiographyRecord> rs = [] {
    DatagenConfig c;
    c.seed = 33;
    c.train_count = 0;
    c.val_count = 40;
    c.test_count = 0;
    return gen_records(c, vocab()).val;
  }();
  return rs;
}

constexpr TokenLabel C = TokenLabel::Correct;
constexpr TokenLabel U = TokenLabel::Unknown;
constexpr TokenLabel H = TokenLabel::Hallucinated;

// Per-class precision/recall F1 from label pairs, averaged over classes that
// appear on either side.
double macro_f1_oracle(const std::vector<TokenLabel>& pred, const std::vector<TokenLabel>& gold) {
  double sum = 0.0;
  int present = 0;
  for (TokenLabel c : {C, U, H}) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      if (pred[i] == c && gold[i] == c) ++tp;
      if (pred[i] == c && gold[i] != c) ++fp;
      if (pred[i] != c && gold[i] == c) ++fn;
    }
    if (tp + fp + fn == 0) continue;
    ++present;
    const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    sum += precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  }
  return sum / present;
}

StepTrace step_with(TokenId token, std::size_t window, bool expanded = false, std::size_t tentative = 0) {
  StepTrace s;
  s.accepted_token = s.tentative_token = token;
  s.window_tokens_final = window;
  s.window_tokens_tentative = expanded ? tentative : window;
  s.expanded = expanded;
  s.timings.generation = 100;
  s.timings.detection = 20;
  s.timings.lstm_forward = 10;
  s.timings.rollback_regen = expanded ? 50 : 0;
  s.timings.wall = 130 + s.timings.rollback_regen;
  return s;
}

}  // namespace

TEST_CASE("detector_metrics fixtures") {
  SUBCASE("all correct") {
    const std::vector<TokenLabel> y{C, U, H, C, U};
    const auto m = detector_metrics(y, y);
    CHECK(m.m_acc == 1.0);
    CHECK(m.recall_n == 1.0);
    CHECK(m.recall_p == 1.0);
    CHECK(m.f1 == doctest::Approx(1.0));
    CHECK(m.count == 5);
  }
  SUBCASE("constant Correct on a balanced set") {
    std::vector<TokenLabel> gold, pred;
    for (int i = 0; i < 50; ++i) {
      gold.push_back(C);
      gold.push_back(i % 2 ? U : H);
    }
    pred.assign(gold.size(), C);
    const auto m = detector_metrics(pred, gold);
    CHECK(m.recall_n == 0.0);
    CHECK(m.recall_p == 1.0);
    CHECK(m.m_acc == doctest::Approx(0.5));
    CHECK(m.f1 == doctest::Approx(macro_f1_oracle(pred, gold)));
  }
  SUBCASE("confusing Unknown with Hallucinated still counts toward Recall_N") {
    const std::vector<TokenLabel> gold{U, H, U, H};
    const std::vector<TokenLabel> pred{H, U, H, U};
    const auto m = detector_metrics(pred, gold);
    CHECK(m.recall_n == 1.0);
    CHECK(m.m_acc == 0.0);
    const auto merged = detector_metrics(pred, gold, true);
    CHECK(merged.m_acc == 1.0);
    CHECK(merged.f1 == doctest::Approx(1.0));
  }
  SUBCASE("errors") {
    const std::vector<TokenLabel> none;
    CHECK_THROWS(detector_metrics(none, none));
    const std::vector<TokenLabel> a{C}, b{C, U};
    CHECK_THROWS(detector_metrics(a, b));
  }
}

TEST_CASE("detector_metrics agrees with a counting oracle") {
  auto rng = seeded_engine({77});
  std::uniform_int_distribution<int> cls(0, 2), len(1, 300);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = len(rng);
    std::vector<TokenLabel> gold, pred;
    for (int i = 0; i < n; ++i) {
      gold.push_back(static_cast<TokenLabel>(cls(rng)));
      pred.push_back(trial % 5 == 0 ? gold.back() : static_cast<TokenLabel>(cls(rng)));
    }
    const auto m = detector_metrics(pred, gold);
    double hits = 0, pos = 0, pos_hit = 0, neg = 0, neg_hit = 0;
    for (int i = 0; i < n; ++i) {
      hits += pred[i] == gold[i];
      if (gold[i] == C) {
        ++pos;
        pos_hit += pred[i] == C;
      } else {
        ++neg;
        neg_hit += pred[i] != C;
      }
    }
    CHECK(m.m_acc == doctest::Approx(hits / n).epsilon(1e-12));
    CHECK(m.recall_p == doctest::Approx(pos > 0 ? pos_hit / pos : 0.0).epsilon(1e-12));
    CHECK(m.recall_n == doctest::Approx(neg > 0 ? neg_hit / neg : 0.0).epsilon(1e-12));
    CHECK(m.f1 == doctest::Approx(macro_f1_oracle(pred, gold)).epsilon(1e-12));
    std::size_t total = 0;
    for (const auto& row : m.confusion) {
      for (std::size_t v : row) total += v;
    }
    CHECK(total == static_cast<std::size_t>(n));
    CHECK(m.m_acc >= 0.0);
    CHECK(m.m_acc <= 1.0);
  }
}

TEST_CASE("answer accuracy") {
  const BiographyRecord r = evidence_in_block(vocab(), 2, 4);
  std::vector<TokenId> out = r.gold_output;
  CHECK(answer_accuracy(out, r, vocab()) == 1.0);
  CHECK(answer_span(out, r) ==
        std::vector<TokenId>(r.gold_output.begin() + static_cast<std::ptrdiff_t>(r.answer_start),
                             r.gold_output.begin() + static_cast<std::ptrdiff_t>(r.answer_end)));

  std::vector<TokenId> unk = out;
  unk[r.answer_start] = Vocabulary::kUnk;
  CHECK(answer_accuracy(unk, r, vocab()) == 0.0);

  std::vector<TokenId> wrong = out;
  wrong[r.answer_start] = distractor_pool(r, r.answer_start, vocab()).front();
  CHECK(answer_accuracy(wrong, r, vocab()) == 0.0);

  // A prefix that drifts falls back to the gold answer positions.
  std::vector<TokenId> drifted = out;
  drifted[0] = vocab().id("Maria");
  CHECK(answer_accuracy(drifted, r, vocab()) == 1.0);

  const std::vector<TokenId> cut(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(r.answer_start));
  CHECK(answer_accuracy(cut, r, vocab()) == 0.0);

  CHECK(normalize_answer("March 22, 1985") == "march221985");
  CHECK(normalize_answer(" March  22 ,19 85. ") == "march221985");
}

TEST_CASE("run_metrics on hand-built traces") {
  const BiographyRecord r = evidence_in_block(vocab(), 1, 3, 9);
  RecordTrace tr{9, {}};
  for (std::size_t i = 0; i < r.gold_output.size(); ++i) {
    tr.steps.push_back(step_with(r.gold_output[i], i == 2 ? 48 : 16, i == 2, 16));
  }
  const RunMetrics m = run_metrics({tr}, {r}, vocab());
  const double n = static_cast<double>(r.gold_output.size());
  CHECK(m.records == 1);
  CHECK(m.tokens == r.gold_output.size());
  CHECK(m.accuracy == 1.0);
  CHECK(m.m_tokens == doctest::Approx((16.0 * (n - 1) + 48.0) / n));
  CHECK(m.m_tokens_total == doctest::Approx((16.0 * (n - 1) + 48.0 + 16.0) / n));
  CHECK(m.expansion_rate == doctest::Approx(1.0 / n));
  CHECK(m.m_time_tok == doctest::Approx((130.0 * n + 50.0) / n * 1e-9));
  CHECK(m.accuracy_by_attribute.at("birth date") == 1.0);

  CHECK_THROWS(run_metrics({}, {r}, vocab()));
  CHECK_THROWS(run_metrics({RecordTrace{1234, tr.steps}}, {r}, vocab()));
}

TEST_CASE("latency_report") {
  RecordTrace one{0, {step_with(7, 16)}};
  const auto rows = latency_report({{3, {one}}});
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].k_max == 3);
  CHECK(rows[0].steps == 1);
  CHECK(rows[0].means_ns.generation == 100.0);
  CHECK(rows[0].means_ns.detection == 20.0);
  CHECK(rows[0].means_ns.wall == 130.0);
  CHECK(rows[0].detection_below_generation);

  // A never-expanding run spends nothing on rollback.
  RunSetup setup;
  setup.controller.k_max = 3;
  const ConstantDetector never = ConstantDetector::never_expand();
  setup.detector = &never;
  const std::vector<BiographyRecord> some(val_records().begin(), val_records().begin() + 5);
  const auto traces = run_corpus(some, vocab(), setup);
  const auto stub_rows = latency_report({{3, traces}});
  CHECK(stub_rows[0].means_ns.rollback_regen == 0.0);
  CHECK(stub_rows[0].means_ns.generation > 0.0);

  CHECK_THROWS(latency_report({}));
  CHECK_THROWS(latency_report({{3, {RecordTrace{0, {}}}}}));

  std::ostringstream csv;
  write_latency_csv(csv, rows);
  CHECK(csv.str().rfind("k_max,steps,generation_ns,detection_ns,lstm_forward_ns,rollback_regen_ns,wall_ns", 0) == 0);
}

TEST_CASE("token_rank") {
  const Vec logits{0.5, 2.0, 2.0, -1.0};
  CHECK(token_rank(logits, 1) == 1);
  CHECK(token_rank(logits, 2) == 1);
  CHECK(token_rank(logits, 0) == 3);
  CHECK(token_rank(logits, 3) == 4);
  CHECK_THROWS(token_rank(logits, 4));
}

TEST_CASE("expansion probe") {
  DecoderConfig dc;
  dc.unk_prob = 1.0;
  SUBCASE("evidence outside the small window") {
    for (std::size_t id = 0; id < 20; ++id) {
      const BiographyRecord r = evidence_in_block(vocab(), 5, 8, id);
      const ProbeResult p = expansion_probe(r, vocab(), dc, ExplicitBlocks{{0}}, AllBlocks{});
      CHECK(p.step >= r.answer_start);
      CHECK(p.step < r.answer_end);
      CHECK(p.rank_small > 1);
      CHECK(p.rank_large == 1);
      CHECK(p.logprob_large > p.logprob_small);
      CHECK(p.window_large > p.window_small);
    }
  }
  SUBCASE("evidence inside both windows") {
    const BiographyRecord r = evidence_in_block(vocab(), 5, 8, 3);
    const ProbeResult p = expansion_probe(r, vocab(), dc, ExplicitBlocks{{5}}, AllBlocks{});
    CHECK(p.rank_small == 1);
    CHECK(p.rank_large == 1);
  }
  SUBCASE("identical windows give identical results") {
    const BiographyRecord r = evidence_in_block(vocab(), 2, 6, 4);
    const ProbeResult p = expansion_probe(r, vocab(), dc, TopK{2}, TopK{2});
    CHECK(p.logprob_small == p.logprob_large);
    CHECK(p.rank_small == p.rank_large);
  }
}

TEST_CASE("corpus runs and comparison rows") {
  const std::vector<BiographyRecord>& rs = val_records();
  RunSetup fixed;
  fixed.controller.k_max = 3;
  fixed.fixed_k = 3;
  const auto fixed_traces = run_corpus(rs, vocab(), fixed);
  REQUIRE(fixed_traces.size() == rs.size());
  for (std::size_t i = 0; i < rs.size(); ++i) CHECK(fixed_traces[i].record_id == rs[i].id);

  RunSetup expand = fixed;
  const ConstantDetector always = ConstantDetector::always_expand();
  expand.detector = &always;
  const auto expand_traces = run_corpus(rs, vocab(), expand);
  const RunMetrics a = run_metrics(fixed_traces, rs, vocab());
  const RunMetrics b = run_metrics(expand_traces, rs, vocab());
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.m_tokens == b.m_tokens);
  CHECK(b.expansion_rate == 1.0);
  CHECK(b.m_tokens_total > b.m_tokens);

  // Reproducible, and independent of the worker count.
  RunSetup threaded = fixed;
  threaded.jobs = 4;
  const auto again = run_corpus(rs, vocab(), threaded);
  for (std::size_t i = 0; i < rs.size(); ++i) CHECK(accepted_tokens(again[i]) == accepted_tokens(fixed_traces[i]));
  CHECK(run_metrics(again, rs, vocab()).accuracy == a.accuracy);

  std::ostringstream csv, jsonl;
  const std::vector<CompareRow> rows{{"fixed", "K=3", a}, {"utaca", "Kmax=3,always", b}};
  write_compare_csv(csv, rows);
  write_compare_jsonl(jsonl, rows);
  CHECK(csv.str().rfind("method,setting,records,mTokens,mTokens_total,mTime_tok,accuracy,expansion_rate\n", 0) == 0);
  std::size_t lines = 0;
  for (char ch : jsonl.str()) lines += ch == '\n';
  CHECK(lines == 2);
}
