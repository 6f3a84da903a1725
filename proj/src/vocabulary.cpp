#include "utaca/vocabulary.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

#include "utaca/datagen.hpp"

namespace utaca {

namespace {

bool is_letter(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }
bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }
bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

constexpr const char* kPunctuation[] = {".", ",", "-", "/", "@", "(", ")", ";", ":"};

}  // namespace

void Vocabulary::add(std::string word) {
  if (index_.contains(word)) return;
  index_.emplace(word, static_cast<TokenId>(words_.size()));
  words_.push_back(std::move(word));
}

Vocabulary Vocabulary::standard(std::size_t size) {
  Vocabulary v;
  for (const char* w : {"<pad>", "<unk>", "<eos>", "unknown", "unspecified", "Summary", ":"}) v.add(w);
  for (const std::string& w : v.split(kFillerSentence)) v.add(w);
  for (const char* w : {"The", "of", "is"}) v.add(w);
  for (const char* p : kPunctuation) v.add(p);
  for (const AttributeSpec& a : attribute_catalog()) {
    for (const std::string& w : v.split(a.name)) v.add(w);
  }
  for (const std::string& n : first_names()) v.add(n);
  for (const std::string& n : last_names()) v.add(n);
  for (int d = 0; d < 10; ++d) v.add(std::to_string(d));
  for (int d = 0; d < 100; ++d) v.add((d < 10 ? "0" : "") + std::to_string(d));
  for (const AttributeSpec& a : attribute_catalog()) {
    for (const std::string& w : a.vocabulary_words) v.add(w);
  }
  v.word_count_ = v.words_.size();
  if (v.word_count_ > size) {
    throw std::invalid_argument("Vocabulary: " + std::to_string(v.word_count_) +
                                " words do not fit in vocab_size " + std::to_string(size));
  }
  for (std::size_t i = v.word_count_; i < size; ++i) v.add("<reserved" + std::to_string(i) + ">");
  v.unknown_lexicon_ = {kUnk, kUnknownWord, kUnspecifiedWord};
  return v;
}

TokenId Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) throw std::out_of_range("Vocabulary: unknown word '" + std::string(word) + "'");
  return it->second;
}

bool Vocabulary::contains(std::string_view word) const { return index_.contains(std::string(word)); }

const std::string& Vocabulary::word(TokenId id) const {
  if (id >= words_.size()) throw std::out_of_range("Vocabulary: id out of range");
  return words_[id];
}

bool Vocabulary::is_unknown(TokenId id) const {
  return std::find(unknown_lexicon_.begin(), unknown_lexicon_.end(), id) != unknown_lexicon_.end();
}

std::vector<std::string> Vocabulary::split(std::string_view text) const {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (is_space(c)) {
      ++i;
    } else if (is_letter(c)) {
      std::size_t j = i;
      while (j < text.size() && is_letter(text[j])) ++j;
      out.emplace_back(text.substr(i, j - i));
      i = j;
    } else if (is_digit(c)) {
      std::size_t j = i;
      while (j < text.size() && is_digit(text[j])) ++j;
      for (std::size_t k = i; k < j; k += 2) out.emplace_back(text.substr(k, std::min<std::size_t>(2, j - k)));
      i = j;
    } else {
      out.emplace_back(1, c);
      ++i;
    }
  }
  return out;
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const std::string& w : split(text)) ids.push_back(id(w));
  return ids;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId t : ids) {
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

std::uint64_t Vocabulary::fingerprint() const {
  // FNV-1a over the words and separators.
  std::uint64_t h = 1469598103934665603ULL;
  for (const std::string& w : words_) {
    for (unsigned char c : w) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    h ^= 0xff;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace utaca
