#include "utaca/controller.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

namespace utaca {

using json = nlohmann::json;

UpdatePolicy UpdatePolicy::parse(const std::string& s) {
  std::string v;
  for (char ch : s) v += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  v.erase(std::remove(v.begin(), v.end(), '.'), v.end());
  if (v == "set1") return {Kind::Set1, 1};
  if (v.size() > 3 && v.compare(0, 3, "sub") == 0) {
    const std::string digits = v.substr(3);
    if (std::all_of(digits.begin(), digits.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
      const std::size_t n = std::stoull(digits);
      if (n >= 1) return {Kind::SubN, n};
    }
  }
  throw std::invalid_argument("unknown update policy '" + s + "' (expected set1 or subN with N >= 1)");
}

std::string UpdatePolicy::to_string() const {
  return kind == Kind::Set1 ? std::string("set1") : "sub" + std::to_string(n);
}

std::size_t update_policy(std::size_t k, const UpdatePolicy& policy, std::size_t k_max) {
  if (k < 1 || k > k_max) throw std::invalid_argument("update_policy: k out of [1, k_max]");
  if (policy.kind == UpdatePolicy::Kind::Set1) return 1;
  if (policy.n < 1) throw std::invalid_argument("update_policy: SubN needs n >= 1");
  return k > policy.n ? k - policy.n : 1;
}

void ControllerConfig::validate() const {
  if (k_max < 1) throw std::invalid_argument("ControllerConfig: k_max must be at least 1");
  if (policy.kind == UpdatePolicy::Kind::SubN && policy.n < 1) {
    throw std::invalid_argument("ControllerConfig: SubN needs n >= 1");
  }
  if (max_steps < 1) throw std::invalid_argument("ControllerConfig: max_steps must be at least 1");
  if (temperature < 0.0 || !std::isfinite(temperature)) {
    throw std::invalid_argument("ControllerConfig: temperature must be >= 0");
  }
}

TokenId pick_token(std::span<const double> logits, double temperature, std::mt19937_64& rng) {
  if (temperature <= 0.0) return static_cast<TokenId>(argmax(logits));
  Vec scaled(logits.begin(), logits.end());
  scale_inplace(scaled, 1.0 / temperature);
  const Vec p = softmax(scaled);
  std::discrete_distribution<std::size_t> dist(p.begin(), p.end());
  return static_cast<TokenId>(dist(rng));
}

namespace {

using Clock = std::chrono::steady_clock;

// Contiguous timing brackets: each lap() charges the time since the previous
// lap to one component.
class Laps {
 public:
  Laps() : start_(Clock::now()), last_(start_) {}
  void lap(std::int64_t& into) {
    const auto now = Clock::now();
    into += std::chrono::duration_cast<std::chrono::nanoseconds>(now - last_).count();
    last_ = now;
  }
  std::int64_t wall() const {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(last_ - start_).count();
  }

 private:
  Clock::time_point start_;
  Clock::time_point last_;
};

TokenId prefill_prompt(Decoder& decoder, std::span<const TokenId> prompt) {
  if (prompt.size() < 2) throw ControllerError("decode: prompt needs at least two tokens");
  if (decoder.cache().entry_count() != 0 || decoder.steps_taken() != 0) {
    throw ControllerError("decode: decoder is not fresh");
  }
  decoder.prefill(prompt.first(prompt.size() - 1));
  return prompt.back();
}

TokenSignal signal_of(const StepOutput& out) { return TokenSignal{out.embedding, logit_margin(out.logits), {}}; }

}  // namespace

DecodeResult decode(Decoder& decoder, const UncertaintyDetector& detector, std::span<const TokenId> prompt,
                    const ControllerConfig& config) {
  config.validate();
  if (detector.input_dim() != 0 && detector.input_dim() != decoder.config().model_dim) {
    throw ControllerError("decode: detector expects embeddings of length " + std::to_string(detector.input_dim()) +
                          " but the decoder produces " + std::to_string(decoder.config().model_dim));
  }
  TokenId input = prefill_prompt(decoder, prompt);

  DecodeState state;
  state.k = config.k_max;
  state.detector = detector.initial_state();
  state.rng = seeded_engine({config.seed, 0x5a3dULL});

  DecodeResult result;
  while (state.t < config.max_steps) {
    StepTrace tr;
    tr.step = state.t;
    Laps laps;

    const DecoderSnapshot snap = decoder.snapshot();
    const std::mt19937_64 rng_saved = state.rng;
    tr.k_used_tentative = state.k;
    StepOutput out = decoder.step(input, TopK{state.k});
    tr.tentative_token = pick_token(out.logits, config.temperature, state.rng);
    tr.window_tokens_tentative = out.window_size;
    laps.lap(tr.timings.generation);

    const Vec z = detector.encode(signal_of(out));
    laps.lap(tr.timings.detection);
    DetectorState next = detector.advance(z, state.detector);
    laps.lap(tr.timings.lstm_forward);
    tr.gdm = detector.classify(next.h);
    tr.expanded = should_expand(tr.gdm);
    laps.lap(tr.timings.detection);

    if (tr.expanded) {
      decoder.restore(snap);
      state.rng = rng_saved;
      out = decoder.step(input, TopK{config.k_max});
      tr.accepted_token = pick_token(out.logits, config.temperature, state.rng);
      tr.k_used_final = config.k_max;
      tr.window_tokens_final = out.window_size;
      laps.lap(tr.timings.rollback_regen);
      if (config.restore_detector_state) {
        const Vec z2 = detector.encode(signal_of(out));
        laps.lap(tr.timings.detection);
        next = detector.advance(z2, state.detector);
        laps.lap(tr.timings.lstm_forward);
        if (config.recheck) tr.recheck_gdm = detector.classify(next.h);
        laps.lap(tr.timings.detection);
      }
      state.k = config.k_max;
    } else {
      tr.accepted_token = tr.tentative_token;
      tr.k_used_final = state.k;
      tr.window_tokens_final = tr.window_tokens_tentative;
      state.k = update_policy(state.k, config.policy, config.k_max);
    }
    state.detector = std::move(next);
    tr.timings.wall = laps.wall();

    if (config.capture_logits) result.accepted_logits.push_back(out.logits);
    state.emitted.push_back(tr.accepted_token);
    input = tr.accepted_token;
    ++state.t;
    result.steps.push_back(std::move(tr));
    if (input == Vocabulary::kEos) break;
  }
  result.tokens = state.emitted;
  result.truncated = result.tokens.empty() || result.tokens.back() != Vocabulary::kEos;
  if (result.truncated && !result.steps.empty()) result.steps.back().truncated = true;
  return result;
}

DecodeResult decode_schedule(Decoder& decoder, std::span<const TokenId> prompt, const WindowSchedule& schedule,
                             const ControllerConfig& config) {
  config.validate();
  TokenId input = prefill_prompt(decoder, prompt);
  auto rng = seeded_engine({config.seed, 0x5a3dULL});
  DecodeResult result;
  for (std::size_t t = 0; t < config.max_steps; ++t) {
    StepTrace tr;
    tr.step = t;
    tr.gdm = GdmVector{};
    Laps laps;
    const WindowSelector window = schedule(t);
    const std::size_t k = std::visit(
        [&](const auto& w) -> std::size_t {
          using T = std::decay_t<decltype(w)>;
          if constexpr (std::is_same_v<T, TopK>) {
            return w.k;
          } else if constexpr (std::is_same_v<T, ExplicitBlocks>) {
            return w.ids.size();
          } else {
            return decoder.cache().block_count();
          }
        },
        window);
    const StepOutput out = decoder.step(input, window);
    tr.tentative_token = tr.accepted_token = pick_token(out.logits, config.temperature, rng);
    tr.k_used_tentative = tr.k_used_final = k;
    tr.window_tokens_tentative = tr.window_tokens_final = out.window_size;
    laps.lap(tr.timings.generation);
    tr.timings.wall = laps.wall();
    if (config.capture_logits) result.accepted_logits.push_back(out.logits);
    result.tokens.push_back(tr.accepted_token);
    input = tr.accepted_token;
    result.steps.push_back(std::move(tr));
    if (input == Vocabulary::kEos) break;
  }
  result.truncated = result.tokens.empty() || result.tokens.back() != Vocabulary::kEos;
  if (result.truncated && !result.steps.empty()) result.steps.back().truncated = true;
  return result;
}

DecodeResult decode_fixed(Decoder& decoder, std::span<const TokenId> prompt, std::size_t k,
                          const ControllerConfig& config) {
  if (k < 1) throw std::invalid_argument("decode_fixed: k must be at least 1");
  return decode_schedule(decoder, prompt, [k](std::size_t) -> WindowSelector { return TopK{k}; }, config);
}

// ---------------------------------------------------------------------------
// Trace files

namespace {

json gdm_json(const GdmVector& g) { return json::array({g.p_cor, g.p_unk, g.p_hal}); }

GdmVector gdm_from_json(const json& j) {
  return GdmVector{j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

}  // namespace

void write_trace(std::ostream& out, const std::map<std::string, std::string>& config,
                 const std::vector<RecordTrace>& records, bool include_timings) {
  std::size_t steps = 0;
  for (const auto& r : records) steps += r.steps.size();
  json header = {{"schema", "utaca.trace"},
                 {"version", kTraceSchemaVersion},
                 {"config", config},
                 {"records", records.size()},
                 {"steps", steps}};
  out << header.dump() << '\n';
  for (const RecordTrace& r : records) {
    for (const StepTrace& s : r.steps) {
      json j = {{"record", r.record_id},
                {"step", s.step},
                {"tentative_token", s.tentative_token},
                {"accepted_token", s.accepted_token},
                {"k_used_tentative", s.k_used_tentative},
                {"k_used_final", s.k_used_final},
                {"expanded", s.expanded},
                {"gdm", gdm_json(s.gdm)},
                {"window_tokens_tentative", s.window_tokens_tentative},
                {"window_tokens_final", s.window_tokens_final},
                {"truncated", s.truncated}};
      if (s.recheck_gdm) j["recheck_gdm"] = gdm_json(*s.recheck_gdm);
      if (include_timings) {
        j["timings"] = {{"generation", s.timings.generation},
                        {"detection", s.timings.detection},
                        {"lstm_forward", s.timings.lstm_forward},
                        {"rollback_regen", s.timings.rollback_regen},
                        {"wall", s.timings.wall}};
      }
      out << j.dump() << '\n';
    }
  }
}

TraceFile read_trace(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.empty()) throw std::runtime_error("read_trace: empty trace file");
  const json header = json::parse(line);
  if (header.value("schema", "") != "utaca.trace") throw std::runtime_error("read_trace: not a trace file");
  if (header.at("version").get<int>() != kTraceSchemaVersion) {
    throw std::runtime_error("read_trace: unsupported schema version");
  }
  TraceFile file;
  file.config = header.at("config").get<std::map<std::string, std::string>>();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    const auto id = j.at("record").get<std::size_t>();
    if (file.records.empty() || file.records.back().record_id != id) file.records.push_back({id, {}});
    StepTrace s;
    s.step = j.at("step").get<std::size_t>();
    s.tentative_token = j.at("tentative_token").get<TokenId>();
    s.accepted_token = j.at("accepted_token").get<TokenId>();
    s.k_used_tentative = j.at("k_used_tentative").get<std::size_t>();
    s.k_used_final = j.at("k_used_final").get<std::size_t>();
    s.expanded = j.at("expanded").get<bool>();
    s.gdm = gdm_from_json(j.at("gdm"));
    s.window_tokens_tentative = j.at("window_tokens_tentative").get<std::size_t>();
    s.window_tokens_final = j.at("window_tokens_final").get<std::size_t>();
    s.truncated = j.value("truncated", false);
    if (j.contains("recheck_gdm")) s.recheck_gdm = gdm_from_json(j.at("recheck_gdm"));
    if (j.contains("timings")) {
      const json& t = j.at("timings");
      s.timings.generation = t.at("generation").get<std::int64_t>();
      s.timings.detection = t.at("detection").get<std::int64_t>();
      s.timings.lstm_forward = t.at("lstm_forward").get<std::int64_t>();
      s.timings.rollback_regen = t.at("rollback_regen").get<std::int64_t>();
      s.timings.wall = t.at("wall").get<std::int64_t>();
    }
    file.records.back().steps.push_back(std::move(s));
  }
  return file;
}

}  // namespace utaca
