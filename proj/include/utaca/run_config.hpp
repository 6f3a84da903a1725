#pragma once

// Flat "section.key" configuration shared by every CLI command.
//
// Precedence: built-in defaults < INI file < ATACA_SEED < command-line flags.
// Unknown keys are rejected so typos do not silently fall back to defaults.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "utaca/controller.hpp"
#include "utaca/datagen.hpp"
#include "utaca/decoder.hpp"
#include "utaca/detector.hpp"

namespace utaca {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RunConfig {
 public:
  RunConfig();

  /// Merges an INI file ([section] / key = value). Throws ConfigError.
  void load_ini(const std::filesystem::path& path);
  /// Applies ATACA_SEED if set.
  void apply_env();
  void set(const std::string& key, const std::string& value);
  bool is_set_explicitly(const std::string& key) const { return explicit_.count(key) != 0; }

  const std::string& get(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::size_t> get_size_list(const std::string& key) const;

  std::uint64_t seed() const { return get_u64("general.seed"); }
  std::filesystem::path data_dir() const { return get("general.data_dir"); }
  std::filesystem::path out_dir() const { return get("general.out_dir"); }

  // Module configs; module seeds are derived from general.seed.
  DatagenConfig datagen() const;
  DecoderConfig decoder() const;
  DetectorConfig detector() const;
  ControllerConfig controller() const;

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Resolved config as INI, sections and keys sorted.
  void write_ini(std::ostream& out) const;

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> explicit_;
};

}  // namespace utaca
