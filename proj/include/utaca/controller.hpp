#pragma once

// Uncertainty-triggered decoding loop.
//
// Each step generates a tentative token under the current block budget k and
// asks the detector for a GDM. If the detector flags the token, the decoder
// (and detector state) are rolled back, the budget jumps to K_max and the step
// is regenerated and accepted. Otherwise the token is accepted and k shrinks
// according to the update policy.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "utaca/decoder.hpp"
#include "utaca/detector.hpp"

namespace utaca {

struct UpdatePolicy {
  enum class Kind { Set1, SubN };
  Kind kind = Kind::SubN;
  std::size_t n = 1;

  /// "set1", "sub1", "sub16", ...
  static UpdatePolicy parse(const std::string& s);
  std::string to_string() const;
  bool operator==(const UpdatePolicy&) const = default;
};

/// Set1 -> 1; SubN -> max(1, k - n). Requires 1 <= k <= k_max.
std::size_t update_policy(std::size_t k, const UpdatePolicy& policy, std::size_t k_max);

struct ControllerConfig {
  std::size_t k_max = 3;
  UpdatePolicy policy{};
  std::size_t max_steps = 64;
  /// Roll the detector's (h, c) back together with the cache. When false the
  /// tentative token's detector update is kept and the regenerated token is
  /// not fed to the detector.
  bool restore_detector_state = true;
  /// Run the detector on the regenerated token too. The result is recorded
  /// but never changes the accepted token.
  bool recheck = false;
  /// 0 means greedy decoding; otherwise sample at this temperature.
  double temperature = 0.0;
  std::uint64_t seed = 13;
  /// Keep the logits of every accepted pass in DecodeResult.
  bool capture_logits = false;

  void validate() const;
};

struct StepTimings {
  // Nanoseconds, monotonic clock. The four components are contiguous
  // brackets inside the step; wall covers the whole step.
  std::int64_t generation = 0;
  std::int64_t detection = 0;
  std::int64_t lstm_forward = 0;
  std::int64_t rollback_regen = 0;
  std::int64_t wall = 0;
};

struct StepTrace {
  std::size_t step = 0;
  TokenId tentative_token = 0;
  TokenId accepted_token = 0;
  std::size_t k_used_tentative = 0;
  std::size_t k_used_final = 0;
  bool expanded = false;
  GdmVector gdm;
  std::optional<GdmVector> recheck_gdm;
  std::size_t window_tokens_tentative = 0;
  std::size_t window_tokens_final = 0;
  StepTimings timings;
  /// Set on the last step when max_steps ran out before EOS.
  bool truncated = false;
};

/// State carried between steps (x_{<t}, budget, detector memory, sampler).
struct DecodeState {
  std::vector<TokenId> emitted;
  std::size_t k = 1;
  DetectorState detector;
  std::mt19937_64 rng;
  std::size_t t = 0;
};

struct DecodeResult {
  std::vector<TokenId> tokens;
  std::vector<StepTrace> steps;
  bool truncated = false;
  /// Logits of the accepted pass per step (only with capture_logits).
  std::vector<Vec> accepted_logits;
};

class ControllerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Picks the emitted token: argmax, or a seeded sample when temperature > 0.
TokenId pick_token(std::span<const double> logits, double temperature, std::mt19937_64& rng);

/// Prefills the prompt (all but its last token) and runs the adaptive loop.
/// The decoder must be fresh. Throws ControllerError when the detector's
/// input dimension does not match the decoder's.
DecodeResult decode(Decoder& decoder, const UncertaintyDetector& detector, std::span<const TokenId> prompt,
                    const ControllerConfig& config);

using WindowSchedule = std::function<WindowSelector(std::size_t step)>;

/// Detector-free loop with a caller-chosen window per step. Uses max_steps,
/// temperature, seed and capture_logits from `config`.
DecodeResult decode_schedule(Decoder& decoder, std::span<const TokenId> prompt, const WindowSchedule& schedule,
                             const ControllerConfig& config);

/// Constant budget k at every step.
DecodeResult decode_fixed(Decoder& decoder, std::span<const TokenId> prompt, std::size_t k,
                          const ControllerConfig& config);

/// Detector stub returning the same GDM for every token.
class ConstantDetector final : public UncertaintyDetector {
 public:
  explicit ConstantDetector(GdmVector p) : p_(p) {}
  Vec encode(const TokenSignal&) const override { return {}; }
  DetectorState advance(std::span<const double>, const DetectorState& state) const override { return state; }
  GdmVector classify(std::span<const double>) const override { return p_; }
  DetectorState initial_state() const override { return {}; }
  std::size_t input_dim() const override { return 0; }

  static ConstantDetector always_expand() { return ConstantDetector({0.0, 0.5, 0.5}); }
  static ConstantDetector never_expand() { return ConstantDetector({1.0, 0.0, 0.0}); }

 private:
  GdmVector p_;
};

// Run traces: one header line with the resolved config, then one StepTrace
// per line tagged with its record id.
inline constexpr int kTraceSchemaVersion = 1;

struct RecordTrace {
  std::size_t record_id = 0;
  std::vector<StepTrace> steps;
};

struct TraceFile {
  std::map<std::string, std::string> config;
  std::vector<RecordTrace> records;
};

void write_trace(std::ostream& out, const std::map<std::string, std::string>& config,
                 const std::vector<RecordTrace>& records, bool include_timings = true);
TraceFile read_trace(std::istream& in);

}  // namespace utaca
