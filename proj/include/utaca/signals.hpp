#pragma once

// Labeled detector-training signals collected by decoding corpus records
// under a deliberately small window.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "utaca/datagen.hpp"
#include "utaca/decoder.hpp"
#include "utaca/detector.hpp"

namespace utaca {

struct LabeledTokenRecord {
  std::size_t record_id = 0;
  std::size_t step = 0;
  TokenSignal signal;  // signal.label is left empty here; see `label`
  TokenId emitted = 0;
  TokenLabel label = TokenLabel::Correct;
  bool in_answer = false;

  bool operator==(const LabeledTokenRecord& o) const {
    return record_id == o.record_id && step == o.step && signal.embedding == o.signal.embedding &&
           signal.margin == o.signal.margin && emitted == o.emitted && label == o.label && in_answer == o.in_answer;
  }
};

struct CollectOptions {
  /// Greedy steps allowed past the gold output length.
  std::size_t extra_steps = 4;
};

/// Greedy decode of every record with a constant window selector. Answer
/// tokens are labeled with label_answer_token, everything else Correct.
std::vector<LabeledTokenRecord> collect_signals(const std::vector<BiographyRecord>& records, const Vocabulary& vocab,
                                                const DecoderConfig& decoder, const WindowSelector& window,
                                                const CollectOptions& options = {});

/// Groups tokens by record into detector sequences. Labels are attached to
/// answer tokens only unless `answer_only` is false.
std::vector<SignalSequence> to_sequences(const std::vector<LabeledTokenRecord>& tokens, bool answer_only = true);

inline constexpr int kSignalSchemaVersion = 1;

void write_signals(std::ostream& out, const std::vector<LabeledTokenRecord>& tokens, Split split,
                   std::uint64_t seed);

struct SignalFile {
  std::uint64_t seed = 0;
  Split split = Split::Train;
  std::vector<LabeledTokenRecord> tokens;
};

SignalFile read_signals(std::istream& in);

}  // namespace utaca
