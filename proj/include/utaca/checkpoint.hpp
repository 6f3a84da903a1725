#pragma once

// "ATACA1" binary container shared by detector checkpoints and
// micro-transformer weights.
//
// Layout (all integers little-endian):
//   magic "ATACA1"
//   string kind
//   u32 config entry count, then (string key, string value) pairs
//   u32 tensor count, then per tensor:
//     string name, u32 rank, u64 dims[rank], f64 data[prod(dims)]
// where string = u32 byte length followed by the bytes.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "utaca/decoder.hpp"
#include "utaca/detector.hpp"

namespace utaca {

inline constexpr char kCheckpointMagic[] = "ATACA1";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StoredTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

struct Container {
  std::string kind;
  std::map<std::string, std::string> config;
  std::vector<StoredTensor> tensors;
};

void write_container(std::ostream& out, const Container& c);
Container read_container(std::istream& in);

Container detector_container(const DetectorConfig& config, DetectorParams params);
/// Rebuilds config and params; throws CheckpointError on any shape mismatch.
std::pair<DetectorConfig, DetectorParams> detector_from_container(const Container& c);

void save_detector(const std::filesystem::path& path, const DetectorConfig& config, const DetectorParams& params);
std::pair<DetectorConfig, DetectorParams> load_detector(const std::filesystem::path& path);

Container transformer_container(const DecoderConfig& config, const TransformerWeights& weights);
TransformerWeights transformer_from_container(const Container& c, const DecoderConfig& config);

/// Training report as CSV: epoch,loss,val_f1.
void write_training_report(std::ostream& out, const std::vector<EpochReport>& report);

}  // namespace utaca
