#include "utaca/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_map>

#include <json.hpp>

namespace utaca {

using json = nlohmann::json;

std::string normalize_answer(const std::string& s) {
  std::string out;
  for (unsigned char ch : s) {
    if (std::isspace(ch) || std::ispunct(ch)) continue;
    out += static_cast<char>(std::tolower(ch));
  }
  return out;
}

std::vector<TokenId> answer_span(const std::vector<TokenId>& output, const BiographyRecord& record) {
  const auto prefix_end = static_cast<std::ptrdiff_t>(record.answer_start);
  const bool has_prefix = output.size() >= record.answer_start &&
                          std::equal(record.gold_output.begin(), record.gold_output.begin() + prefix_end,
                                     output.begin());
  if (!has_prefix) {
    const std::size_t lo = std::min(record.answer_start, output.size());
    const std::size_t hi = std::min(record.answer_end, output.size());
    return {output.begin() + static_cast<std::ptrdiff_t>(lo), output.begin() + static_cast<std::ptrdiff_t>(hi)};
  }
  const TokenId terminator =
      record.answer_end < record.gold_output.size() ? record.gold_output[record.answer_end] : Vocabulary::kEos;
  std::vector<TokenId> span;
  for (std::size_t i = record.answer_start; i < output.size(); ++i) {
    if (output[i] == terminator || output[i] == Vocabulary::kEos) break;
    span.push_back(output[i]);
  }
  return span;
}

double answer_accuracy(const std::vector<TokenId>& output, const BiographyRecord& record, const Vocabulary& vocab) {
  const std::vector<TokenId> span = answer_span(output, record);
  if (std::any_of(span.begin(), span.end(), [&](TokenId t) { return vocab.is_unknown(t); })) return 0.0;
  const std::string got = normalize_answer(vocab.decode(span));
  return !got.empty() && got == normalize_answer(record.value) ? 1.0 : 0.0;
}

std::vector<TokenId> accepted_tokens(const RecordTrace& trace) {
  std::vector<TokenId> out;
  out.reserve(trace.steps.size());
  for (const StepTrace& s : trace.steps) out.push_back(s.accepted_token);
  return out;
}

RunMetrics run_metrics(const std::vector<RecordTrace>& traces, const std::vector<BiographyRecord>& records,
                       const Vocabulary& vocab) {
  if (traces.empty()) throw std::invalid_argument("run_metrics: no traces");
  std::unordered_map<std::size_t, const BiographyRecord*> by_id;
  for (const BiographyRecord& r : records) by_id[r.id] = &r;

  RunMetrics m;
  std::map<std::string, std::pair<double, std::size_t>> per_attr;
  double window_final = 0.0, window_total = 0.0, wall = 0.0, acc = 0.0;
  std::size_t expansions = 0;
  for (const RecordTrace& tr : traces) {
    auto it = by_id.find(tr.record_id);
    if (it == by_id.end()) throw std::invalid_argument("run_metrics: no record with id " + std::to_string(tr.record_id));
    const double a = answer_accuracy(accepted_tokens(tr), *it->second, vocab);
    acc += a;
    auto& slot = per_attr[it->second->attribute];
    slot.first += a;
    ++slot.second;
    for (const StepTrace& s : tr.steps) {
      window_final += static_cast<double>(s.window_tokens_final);
      window_total += static_cast<double>(s.window_tokens_final + (s.expanded ? s.window_tokens_tentative : 0));
      expansions += s.expanded;
      wall += static_cast<double>(s.timings.wall);
      m.latency_ns.generation += static_cast<double>(s.timings.generation);
      m.latency_ns.detection += static_cast<double>(s.timings.detection);
      m.latency_ns.lstm_forward += static_cast<double>(s.timings.lstm_forward);
      m.latency_ns.rollback_regen += static_cast<double>(s.timings.rollback_regen);
      ++m.tokens;
    }
  }
  m.records = traces.size();
  m.accuracy = acc / static_cast<double>(m.records);
  for (const auto& [attr, v] : per_attr) m.accuracy_by_attribute[attr] = v.first / static_cast<double>(v.second);
  if (m.tokens > 0) {
    const double n = static_cast<double>(m.tokens);
    m.m_tokens = window_final / n;
    m.m_tokens_total = window_total / n;
    m.m_time_tok = wall / n * 1e-9;
    m.expansion_rate = static_cast<double>(expansions) / n;
    m.latency_ns.generation /= n;
    m.latency_ns.detection /= n;
    m.latency_ns.lstm_forward /= n;
    m.latency_ns.rollback_regen /= n;
    m.latency_ns.wall = wall / n;
  }
  return m;
}

std::vector<RecordTrace> run_corpus(const std::vector<BiographyRecord>& records, const Vocabulary& vocab,
                                    const RunSetup& setup) {
  std::vector<RecordTrace> out(records.size());
  auto table = setup.decoder.kind == DecoderKind::Scripted ? TokenTable::make(setup.decoder) : nullptr;
  auto weights = setup.decoder.kind == DecoderKind::MicroTransformer
                     ? std::make_shared<const TransformerWeights>(TransformerWeights::random(setup.decoder))
                     : nullptr;
  auto one = [&](std::size_t i) {
    const BiographyRecord& r = records[i];
    auto dec = make_decoder(setup.decoder, &r, vocab, table, weights);
    const std::vector<TokenId> prompt = r.prompt();
    DecodeResult res = setup.detector ? decode(*dec, *setup.detector, prompt, setup.controller)
                                      : decode_fixed(*dec, prompt, setup.fixed_k, setup.controller);
    out[i] = RecordTrace{r.id, std::move(res.steps)};
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(setup.jobs, records.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < records.size(); ++i) one(i);
    return out;
  }
  std::vector<std::exception_ptr> errors(jobs);
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < records.size(); i += jobs) one(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

std::vector<LatencyRow> latency_report(const std::map<std::size_t, std::vector<RecordTrace>>& traces_by_kmax) {
  std::vector<LatencyRow> rows;
  for (const auto& [k_max, traces] : traces_by_kmax) {
    LatencyRow row;
    row.k_max = k_max;
    for (const RecordTrace& tr : traces) {
      for (const StepTrace& s : tr.steps) {
        row.means_ns.generation += static_cast<double>(s.timings.generation);
        row.means_ns.detection += static_cast<double>(s.timings.detection);
        row.means_ns.lstm_forward += static_cast<double>(s.timings.lstm_forward);
        row.means_ns.rollback_regen += static_cast<double>(s.timings.rollback_regen);
        row.means_ns.wall += static_cast<double>(s.timings.wall);
        ++row.steps;
      }
    }
    if (row.steps == 0) continue;
    const double n = static_cast<double>(row.steps);
    row.means_ns.generation /= n;
    row.means_ns.detection /= n;
    row.means_ns.lstm_forward /= n;
    row.means_ns.rollback_regen /= n;
    row.means_ns.wall /= n;
    row.detection_below_generation = row.means_ns.detection < row.means_ns.generation;
    rows.push_back(row);
  }
  if (rows.empty()) throw std::invalid_argument("latency_report: no steps in traces");
  return rows;
}

void write_latency_csv(std::ostream& out, const std::vector<LatencyRow>& rows) {
  out << "k_max,steps,generation_ns,detection_ns,lstm_forward_ns,rollback_regen_ns,wall_ns,detection_below_generation\n";
  out << std::fixed << std::setprecision(1);
  for (const LatencyRow& r : rows) {
    out << r.k_max << ',' << r.steps << ',' << r.means_ns.generation << ',' << r.means_ns.detection << ','
        << r.means_ns.lstm_forward << ',' << r.means_ns.rollback_regen << ',' << r.means_ns.wall << ','
        << (r.detection_below_generation ? "true" : "false") << '\n';
  }
  out.unsetf(std::ios::fixed);
}

std::size_t token_rank(std::span<const double> logits, TokenId token) {
  if (token >= logits.size()) throw std::out_of_range("token_rank: token outside logits");
  const double v = logits[token];
  return 1 + static_cast<std::size_t>(std::count_if(logits.begin(), logits.end(), [v](double x) { return x > v; }));
}

ProbeResult expansion_probe(const BiographyRecord& record, const Vocabulary& vocab, const DecoderConfig& decoder,
                            const WindowSelector& small, const WindowSelector& large) {
  const std::vector<TokenId> prompt = record.prompt();
  struct Pass {
    std::vector<double> logprob;
    std::vector<std::size_t> rank;
    std::vector<std::size_t> window;
  };
  auto run = [&](const WindowSelector& window) {
    auto dec = make_decoder(decoder, &record, vocab);
    dec->prefill(std::span(prompt).first(prompt.size() - 1));
    Pass p;
    TokenId input = prompt.back();
    for (std::size_t s = 0; s < record.answer_end; ++s) {
      const StepOutput out = dec->step(input, window);
      const TokenId gold = record.gold_output[s];
      p.logprob.push_back(log_softmax(out.logits)[gold]);
      p.rank.push_back(token_rank(out.logits, gold));
      p.window.push_back(out.window_size);
      input = gold;  // teacher forcing
    }
    return p;
  };
  const Pass a = run(small);
  const Pass b = run(large);
  std::size_t hardest = record.answer_start;
  for (std::size_t s = record.answer_start; s < record.answer_end; ++s) {
    if (a.logprob[s] < a.logprob[hardest]) hardest = s;
  }
  return ProbeResult{hardest,           record.gold_output[hardest], a.logprob[hardest], a.rank[hardest],
                     b.logprob[hardest], b.rank[hardest],           a.window[hardest],  b.window[hardest]};
}

namespace {

std::string num(double v) {
  std::ostringstream o;
  o << std::setprecision(10) << v;
  return o.str();
}

}  // namespace

void write_compare_csv(std::ostream& out, const std::vector<CompareRow>& rows) {
  out << "method,setting,records,mTokens,mTokens_total,mTime_tok,accuracy,expansion_rate\n";
  for (const CompareRow& r : rows) {
    const RunMetrics& m = r.metrics;
    out << r.method << ',' << r.setting << ',' << m.records << ',' << num(m.m_tokens) << ','
        << num(m.m_tokens_total) << ',' << num(m.m_time_tok) << ',' << num(m.accuracy) << ','
        << num(m.expansion_rate) << '\n';
  }
}

void write_compare_jsonl(std::ostream& out, const std::vector<CompareRow>& rows) {
  for (const CompareRow& r : rows) {
    const RunMetrics& m = r.metrics;
    json j = {{"method", r.method},
              {"setting", r.setting},
              {"records", m.records},
              {"mTokens", m.m_tokens},
              {"mTokens_total", m.m_tokens_total},
              {"mTime_tok", m.m_time_tok},
              {"accuracy", m.accuracy},
              {"accuracy_by_attribute", m.accuracy_by_attribute},
              {"expansion_rate", m.expansion_rate}};
    out << j.dump() << '\n';
  }
}

void write_detector_metrics_csv(std::ostream& out, const DetectorMetrics& m) {
  out << "count,mAcc,recall_n,recall_p,f1\n";
  out << m.count << ',' << num(m.m_acc) << ',' << num(m.recall_n) << ',' << num(m.recall_p) << ',' << num(m.f1)
      << '\n';
}

}  // namespace utaca
