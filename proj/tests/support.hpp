#pragma once

// Helpers shared by the unit tests: hand-built records and scratch directories.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>

#include "utaca/datagen.hpp"
#include "utaca/vocabulary.hpp"

namespace utaca::testing {

/// A record laid out by hand: `before` filler tokens, the summary, then
/// `after` filler tokens. Filler cycles through the filler sentence.
inline BiographyRecord hand_record(const Vocabulary& vocab, const std::string& attribute, const std::string& person,
                                   const std::string& value, std::size_t before, std::size_t after,
                                   std::size_t id = 0) {
  BiographyRecord r;
  r.id = id;
  r.split = Split::Val;
  r.person = person;
  r.attribute = attribute;
  r.value = value;
  r.summary = "The " + attribute + " of " + person + " is " + value + ".";
  const auto summary = vocab.encode(r.summary);
  r.answer_start = vocab.encode("The " + attribute + " of " + person + " is").size();
  r.answer_end = r.answer_start + vocab.encode(value).size();
  r.gold_output = summary;
  r.gold_output.push_back(Vocabulary::kEos);
  const auto filler = vocab.encode(kFillerSentence);
  for (std::size_t i = 0; i < before; ++i) r.biography.push_back(filler[i % filler.size()]);
  r.summary_offset = r.biography.size();
  r.biography.insert(r.biography.end(), summary.begin(), summary.end());
  for (std::size_t i = 0; i < after; ++i) r.biography.push_back(filler[i % filler.size()]);
  return r;
}

/// Olivia Garcia's birth date with the value tokens inside block `block` of a
/// biography of `blocks` full blocks (block size 16).
inline BiographyRecord evidence_in_block(const Vocabulary& vocab, std::size_t block, std::size_t blocks,
                                         std::size_t id = 0) {
  // Summary: 13 tokens, value tokens at summary offsets 7..11.
  const std::size_t value_start = block * 16 + 5;
  const std::size_t before = value_start - 7;
  const std::size_t after = blocks * 16 - before - 13;
  return hand_record(vocab, "birth date", "Olivia Garcia", "March 22, 1985", before, after, id);
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("utaca_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace utaca::testing
