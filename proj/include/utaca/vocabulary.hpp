#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace utaca {

using TokenId = std::uint32_t;

/// Closed token set for the synthetic biography benchmark.
///
/// Ids 0..6 are fixed: pad, UNK, EOS, the two abstention words, and the
/// two-token instruction suffix appended to every prompt.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnknownWord = 3;
  static constexpr TokenId kUnspecifiedWord = 4;
  static constexpr TokenId kSummary = 5;
  static constexpr TokenId kColon = 6;

  /// Builds the standard benchmark vocabulary padded to `size` ids.
  /// Throws if the word list does not fit.
  static Vocabulary standard(std::size_t size = 512);

  std::size_t size() const { return words_.size(); }
  /// Number of ids that correspond to real words (the rest is reserved padding).
  std::size_t word_count() const { return word_count_; }

  TokenId id(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::string& word(TokenId id) const;

  /// UNK plus surface forms that express abstention.
  std::span<const TokenId> unknown_lexicon() const { return unknown_lexicon_; }
  bool is_unknown(TokenId id) const;

  /// Splits text into letter runs, two-digit chunks of digit runs, and single
  /// punctuation characters. Whitespace separates tokens and is dropped.
  std::vector<std::string> split(std::string_view text) const;
  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  /// Stable fingerprint of the word list, stored in corpus headers.
  std::uint64_t fingerprint() const;

 private:
  void add(std::string word);

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
  std::vector<TokenId> unknown_lexicon_;
  std::size_t word_count_ = 0;
};

}  // namespace utaca
