#pragma once

// Generation metrics, corpus runners, latency tables and the expansion probe.

#include <cstddef>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "utaca/controller.hpp"
#include "utaca/datagen.hpp"
#include "utaca/decoder.hpp"
#include "utaca/detector.hpp"
#include "utaca/metrics.hpp"

namespace utaca {

/// Lowercase, then drop punctuation and whitespace.
std::string normalize_answer(const std::string& s);

/// The generated answer tokens. If the output reproduces the gold prefix the
/// answer runs from there to the gold terminator (or EOS); otherwise the gold
/// answer positions are used.
std::vector<TokenId> answer_span(const std::vector<TokenId>& output, const BiographyRecord& record);

/// 1 when the normalized generated answer equals the normalized value, else 0.
double answer_accuracy(const std::vector<TokenId>& output, const BiographyRecord& record, const Vocabulary& vocab);

/// Output tokens of a run, reassembled from its steps.
std::vector<TokenId> accepted_tokens(const RecordTrace& trace);

struct LatencyMeans {
  double generation = 0.0;
  double detection = 0.0;
  double lstm_forward = 0.0;
  double rollback_regen = 0.0;
  double wall = 0.0;
};

struct RunMetrics {
  std::size_t records = 0;
  std::size_t tokens = 0;
  double accuracy = 0.0;
  std::map<std::string, double> accuracy_by_attribute;
  /// Mean window of the accepted pass per emitted token.
  double m_tokens = 0.0;
  /// Mean tokens attended per emitted token, rejected tentative passes included.
  double m_tokens_total = 0.0;
  double m_time_tok = 0.0;  // seconds
  double expansion_rate = 0.0;
  LatencyMeans latency_ns;
};

/// Pairs traces with their records by id. Throws if a record is missing.
RunMetrics run_metrics(const std::vector<RecordTrace>& traces, const std::vector<BiographyRecord>& records,
                       const Vocabulary& vocab);

/// Everything needed to decode a corpus.
struct RunSetup {
  DecoderConfig decoder;
  ControllerConfig controller;
  /// Null: fixed budget run with `fixed_k`.
  const UncertaintyDetector* detector = nullptr;
  std::size_t fixed_k = 1;
  /// Worker threads; results are ordered by record regardless.
  std::size_t jobs = 1;
};

/// Decodes every record and returns one trace per record, in record order.
std::vector<RecordTrace> run_corpus(const std::vector<BiographyRecord>& records, const Vocabulary& vocab,
                                    const RunSetup& setup);

struct LatencyRow {
  std::size_t k_max = 0;
  std::size_t steps = 0;
  LatencyMeans means_ns;
  /// Detection mean below generation mean (flagged, not enforced).
  bool detection_below_generation = false;
};

/// Per-budget component means. Throws on an empty trace set.
std::vector<LatencyRow> latency_report(const std::map<std::size_t, std::vector<RecordTrace>>& traces_by_kmax);
void write_latency_csv(std::ostream& out, const std::vector<LatencyRow>& rows);

struct ProbeResult {
  std::size_t step = 0;  // index into the gold output
  TokenId gold = 0;
  double logprob_small = 0.0;
  std::size_t rank_small = 0;
  double logprob_large = 0.0;
  std::size_t rank_large = 0;
  std::size_t window_small = 0;
  std::size_t window_large = 0;
};

/// Rank of `token` under `logits`: 1 + number of strictly larger logits.
std::size_t token_rank(std::span<const double> logits, TokenId token);

/// Teacher-forced decode of the gold output under two windows. Reports the
/// answer step with the lowest gold log-probability under the small window.
ProbeResult expansion_probe(const BiographyRecord& record, const Vocabulary& vocab, const DecoderConfig& decoder,
                            const WindowSelector& small, const WindowSelector& large);

struct CompareRow {
  std::string method;   // "fixed" or "utaca"
  std::string setting;  // e.g. "K=3" or "Kmax=3,sub1"
  RunMetrics metrics;
};

void write_compare_csv(std::ostream& out, const std::vector<CompareRow>& rows);
void write_compare_jsonl(std::ostream& out, const std::vector<CompareRow>& rows);

void write_detector_metrics_csv(std::ostream& out, const DetectorMetrics& m);

}  // namespace utaca
