#include "utaca/signals.hpp"

#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

namespace utaca {

using json = nlohmann::json;

std::vector<LabeledTokenRecord> collect_signals(const std::vector<BiographyRecord>& records, const Vocabulary& vocab,
                                                const DecoderConfig& decoder, const WindowSelector& window,
                                                const CollectOptions& options) {
  std::vector<LabeledTokenRecord> out;
  auto table = decoder.kind == DecoderKind::Scripted ? TokenTable::make(decoder) : nullptr;
  auto weights = decoder.kind == DecoderKind::MicroTransformer
                     ? std::make_shared<const TransformerWeights>(TransformerWeights::random(decoder))
                     : nullptr;
  for (const BiographyRecord& r : records) {
    auto dec = make_decoder(decoder, &r, vocab, table, weights);
    const std::vector<TokenId> prompt = r.prompt();
    dec->prefill(std::span(prompt).first(prompt.size() - 1));
    TokenId input = prompt.back();
    const std::size_t limit = r.gold_output.size() + options.extra_steps;
    for (std::size_t s = 0; s < limit; ++s) {
      const StepOutput o = dec->step(input, window);
      LabeledTokenRecord t;
      t.record_id = r.id;
      t.step = s;
      t.emitted = static_cast<TokenId>(argmax(o.logits));
      t.signal.embedding = o.embedding;
      t.signal.margin = logit_margin(o.logits);
      t.in_answer = s >= r.answer_start && s < r.answer_end;
      t.label = t.in_answer ? label_answer_token(r, s, t.emitted, vocab) : TokenLabel::Correct;
      out.push_back(std::move(t));
      if (out.back().emitted == Vocabulary::kEos) break;
      input = out.back().emitted;
    }
  }
  return out;
}

std::vector<SignalSequence> to_sequences(const std::vector<LabeledTokenRecord>& tokens, bool answer_only) {
  std::vector<SignalSequence> seqs;
  std::map<std::size_t, std::size_t> index;
  for (const LabeledTokenRecord& t : tokens) {
    auto [it, fresh] = index.try_emplace(t.record_id, seqs.size());
    if (fresh) seqs.emplace_back();
    TokenSignal s = t.signal;
    if (t.in_answer || !answer_only) s.label = t.label;
    seqs[it->second].push_back(std::move(s));
  }
  return seqs;
}

void write_signals(std::ostream& out, const std::vector<LabeledTokenRecord>& tokens, Split split,
                   std::uint64_t seed) {
  json header = {{"schema", "utaca.signals"},
                 {"version", kSignalSchemaVersion},
                 {"seed", seed},
                 {"split", to_string(split)},
                 {"count", tokens.size()}};
  out << header.dump() << '\n';
  for (const LabeledTokenRecord& t : tokens) {
    json j = {{"record", t.record_id},
              {"step", t.step},
              {"margin", t.signal.margin},
              {"embedding", t.signal.embedding},
              {"emitted", t.emitted},
              {"label", to_string(t.label)},
              {"in_answer", t.in_answer}};
    out << j.dump() << '\n';
  }
}

SignalFile read_signals(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("read_signals: missing header line");
  const json header = json::parse(line);
  if (header.value("schema", "") != "utaca.signals") throw std::runtime_error("read_signals: not a signal file");
  if (header.at("version").get<int>() != kSignalSchemaVersion) {
    throw std::runtime_error("read_signals: unsupported schema version");
  }
  SignalFile file;
  file.seed = header.at("seed").get<std::uint64_t>();
  file.split = split_from_string(header.at("split").get<std::string>());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    LabeledTokenRecord t;
    t.record_id = j.at("record").get<std::size_t>();
    t.step = j.at("step").get<std::size_t>();
    t.signal.margin = j.at("margin").get<double>();
    t.signal.embedding = j.at("embedding").get<Vec>();
    t.emitted = j.at("emitted").get<TokenId>();
    t.label = label_from_string(j.at("label").get<std::string>());
    t.in_answer = j.at("in_answer").get<bool>();
    file.tokens.push_back(std::move(t));
  }
  if (file.tokens.size() != header.at("count").get<std::size_t>()) {
    throw std::runtime_error("read_signals: token count does not match header");
  }
  return file;
}

}  // namespace utaca
