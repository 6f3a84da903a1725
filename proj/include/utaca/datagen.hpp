#pragma once

// Synthetic biography benchmark.
//
// Every record carries one "The {attribute} of {name} is {value}." summary
// hidden inside filler text. A decoder is prompted with the biography and must
// reproduce the summary; the value tokens are the answer span.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "utaca/numerics.hpp"
#include "utaca/vocabulary.hpp"

namespace utaca {

enum class Split { Train, Val, Test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

enum class TokenLabel : int { Correct = 0, Unknown = 1, Hallucinated = 2 };

std::string to_string(TokenLabel l);
TokenLabel label_from_string(const std::string& s);

struct AttributeSpec {
  std::string name;
  /// Produces a value string; all of its tokens are in `vocabulary_words`.
  std::function<std::string(std::mt19937_64&)> generate;
  /// Words the generator can emit, used for vocabulary and distractors.
  std::vector<std::string> vocabulary_words;
};

/// All attributes known to the generator, train ones first.
const std::vector<AttributeSpec>& attribute_catalog();
const AttributeSpec& find_attribute(const std::string& name);

std::vector<std::string> default_train_attributes();
std::vector<std::string> default_eval_attributes();

/// Name pool words (first and last names).
const std::vector<std::string>& first_names();
const std::vector<std::string>& last_names();

inline constexpr const char* kFillerSentence = "The sky is really blue.";

std::string make_summary(const std::string& attribute, const std::string& person,
                         const std::string& value);

struct BiographyRecord {
  std::size_t id = 0;
  Split split = Split::Train;
  std::string person;
  std::string attribute;
  std::string value;
  std::string summary;
  std::vector<TokenId> biography;
  /// Summary tokens followed by EOS.
  std::vector<TokenId> gold_output;
  /// Value tokens inside gold_output, [answer_start, answer_end).
  std::size_t answer_start = 0;
  std::size_t answer_end = 0;
  /// Where the summary starts inside the biography.
  std::size_t summary_offset = 0;

  /// Biography positions of the value tokens, [start, end).
  std::size_t evidence_start() const { return summary_offset + answer_start; }
  std::size_t evidence_end() const { return summary_offset + answer_end; }
  /// Biography followed by the instruction suffix.
  std::vector<TokenId> prompt() const;

  bool operator==(const BiographyRecord&) const = default;
};

struct LengthRange {
  std::size_t min = 0;
  std::size_t max = 0;
};

struct DatagenConfig {
  std::uint64_t seed = 7;
  std::size_t train_count = 3200;
  std::size_t val_count = 240;
  std::size_t test_count = 12;
  std::vector<std::string> train_attributes = default_train_attributes();
  std::vector<std::string> eval_attributes = default_eval_attributes();
  /// Filler token counts added around the summary.
  LengthRange train_filler{96, 240};
  LengthRange val_filler{96, 240};
  LengthRange test_filler{2048, 16384};
  std::size_t vocab_size = 512;
};

struct Corpus {
  std::vector<BiographyRecord> train;
  std::vector<BiographyRecord> val;
  std::vector<BiographyRecord> test;

  const std::vector<BiographyRecord>& split(Split s) const;
};

/// Deterministic in (config). Throws if train and eval attribute sets overlap.
Corpus gen_records(const DatagenConfig& config, const Vocabulary& vocab);

/// Correct if emitted == gold, Unknown if emitted is in the unknown lexicon,
/// otherwise Hallucinated.
TokenLabel label_token(TokenId emitted, TokenId gold, const Vocabulary& vocab);

/// Label for position `pos` of an output; throws outside the answer region.
TokenLabel label_answer_token(const BiographyRecord& record, std::size_t pos, TokenId emitted,
                              const Vocabulary& vocab);

/// Tokens a decoder may emit in place of the gold token at `pos` (same
/// attribute pool, gold excluded).
std::vector<TokenId> distractor_pool(const BiographyRecord& record, std::size_t pos,
                                     const Vocabulary& vocab);

// Corpus files: line-delimited JSON with a header line.
inline constexpr int kCorpusSchemaVersion = 1;

void write_corpus(std::ostream& out, const std::vector<BiographyRecord>& records, Split split,
                  std::uint64_t seed, const Vocabulary& vocab);

struct CorpusFile {
  std::uint64_t seed = 0;
  Split split = Split::Train;
  std::vector<BiographyRecord> records;
};

CorpusFile read_corpus(std::istream& in, const Vocabulary& vocab);

}  // namespace utaca
