#include "utaca/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

namespace utaca {

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void need(std::istream& in, const char* what) {
  if (!in) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
}

std::uint64_t get_uint(std::istream& in, int bytes, const char* what) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), bytes);
  need(in, what);
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::string get_string(std::istream& in, const char* what) {
  const auto n = get_uint(in, 4, what);
  if (n > (1u << 20)) throw CheckpointError(std::string("implausible string length in ") + what);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  need(in, what);
  return s;
}

std::string fmt(double v) {
  std::ostringstream o;
  o << std::setprecision(17) << v;
  return o.str();
}

const std::string& lookup(const Container& c, const std::string& key) {
  auto it = c.config.find(key);
  if (it == c.config.end()) throw CheckpointError("checkpoint config lacks '" + key + "'");
  return it->second;
}

std::size_t lookup_size(const Container& c, const std::string& key) { return std::stoull(lookup(c, key)); }

// Copies stored tensors into views, requiring identical names and shapes.
void fill(const std::vector<StoredTensor>& stored, std::vector<TensorView> views) {
  if (stored.size() != views.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(stored.size()) + " tensors, expected " +
                          std::to_string(views.size()));
  }
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (stored[i].name != views[i].name || stored[i].shape != views[i].shape) {
      throw CheckpointError("checkpoint tensor '" + stored[i].name + "' does not match expected '" + views[i].name +
                            "'");
    }
    std::copy(stored[i].data.begin(), stored[i].data.end(), views[i].data.begin());
  }
}

}  // namespace

void write_container(std::ostream& out, const Container& c) {
  out.write(kCheckpointMagic, 6);
  put_string(out, c.kind);
  put_u32(out, static_cast<std::uint32_t>(c.config.size()));
  for (const auto& [k, v] : c.config) {
    put_string(out, k);
    put_string(out, v);
  }
  put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const StoredTensor& t : c.tensors) {
    std::size_t n = 1;
    for (std::size_t d : t.shape) n *= d;
    if (n != t.data.size()) throw CheckpointError("tensor '" + t.name + "' data does not match its shape");
    put_string(out, t.name);
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) put_u64(out, d);
    for (double v : t.data) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw CheckpointError("failed writing checkpoint");
}

Container read_container(std::istream& in) {
  char magic[6];
  in.read(magic, 6);
  if (!in || std::memcmp(magic, kCheckpointMagic, 6) != 0) throw CheckpointError("not an ATACA1 checkpoint");
  Container c;
  c.kind = get_string(in, "kind");
  const auto entries = get_uint(in, 4, "config count");
  for (std::uint64_t i = 0; i < entries; ++i) {
    std::string k = get_string(in, "config key");
    c.config[k] = get_string(in, "config value");
  }
  const auto count = get_uint(in, 4, "tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = get_string(in, "tensor name");
    const auto rank = get_uint(in, 4, "tensor rank");
    if (rank > 8) throw CheckpointError("implausible rank for tensor '" + t.name + "'");
    std::size_t n = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      t.shape.push_back(get_uint(in, 8, "tensor dims"));
      n *= t.shape.back();
    }
    if (n > (std::size_t{1} << 28)) throw CheckpointError("implausible size for tensor '" + t.name + "'");
    t.data.resize(n);
    for (double& v : t.data) v = std::bit_cast<double>(get_uint(in, 8, "tensor data"));
    c.tensors.push_back(std::move(t));
  }
  return c;
}

Container detector_container(const DetectorConfig& config, DetectorParams params) {
  Container c;
  c.kind = "detector";
  c.config = {{"use_logm", config.use_logm ? "1" : "0"},
              {"use_se", config.use_se ? "1" : "0"},
              {"use_lstm", config.use_lstm ? "1" : "0"},
              {"head", to_string(config.head)},
              {"input_dim", std::to_string(config.input_dim)},
              {"d_model", std::to_string(config.d_model)},
              {"mlp_dim", std::to_string(config.mlp_dim)},
              {"head_blocks", std::to_string(config.head_blocks)},
              {"head_expansion", std::to_string(config.head_expansion)},
              {"dropout_vec", fmt(config.dropout_vec)},
              {"dropout_mlp", fmt(config.dropout_mlp)},
              {"dropout_head", fmt(config.dropout_head)},
              {"seed", std::to_string(config.seed)}};
  for (const TensorView& v : params.tensors(config)) {
    c.tensors.push_back({v.name, v.shape, std::vector<double>(v.data.begin(), v.data.end())});
  }
  return c;
}

std::pair<DetectorConfig, DetectorParams> detector_from_container(const Container& c) {
  if (c.kind != "detector") throw CheckpointError("checkpoint holds '" + c.kind + "', not a detector");
  DetectorConfig config;
  try {
    config.use_logm = lookup(c, "use_logm") == "1";
    config.use_se = lookup(c, "use_se") == "1";
    config.use_lstm = lookup(c, "use_lstm") == "1";
    config.head = head_mode_from_string(lookup(c, "head"));
    config.input_dim = lookup_size(c, "input_dim");
    config.d_model = lookup_size(c, "d_model");
    config.mlp_dim = lookup_size(c, "mlp_dim");
    config.head_blocks = lookup_size(c, "head_blocks");
    config.head_expansion = lookup_size(c, "head_expansion");
    config.dropout_vec = std::stod(lookup(c, "dropout_vec"));
    config.dropout_mlp = std::stod(lookup(c, "dropout_mlp"));
    config.dropout_head = std::stod(lookup(c, "dropout_head"));
    config.seed = std::stoull(lookup(c, "seed"));
    config.validate();
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("bad detector config in checkpoint: ") + e.what());
  }
  DetectorParams params = DetectorParams::zeros(config);
  fill(c.tensors, params.tensors(config));
  return {config, std::move(params)};
}

void save_detector(const std::filesystem::path& path, const DetectorConfig& config, const DetectorParams& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  write_container(out, detector_container(config, params));
}

std::pair<DetectorConfig, DetectorParams> load_detector(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return detector_from_container(read_container(in));
}

namespace {

std::vector<TensorView> transformer_views(TransformerWeights& w) {
  std::vector<TensorView> out;
  auto mat = [&](std::string name, Mat& m) {
    out.push_back({std::move(name), {m.rows(), m.cols()}, std::span<double>(m.values())});
  };
  auto vec = [&](std::string name, Vec& v) { out.push_back({std::move(name), {v.size()}, std::span<double>(v)}); };
  mat("tok_emb", w.token_embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& lw = w.layers[l];
    const std::string p = "layer." + std::to_string(l) + ".";
    vec(p + "ln1.gamma", lw.ln1_gamma);
    vec(p + "ln1.beta", lw.ln1_beta);
    mat(p + "wq", lw.wq);
    mat(p + "wk", lw.wk);
    mat(p + "wv", lw.wv);
    mat(p + "wo", lw.wo);
    vec(p + "ln2.gamma", lw.ln2_gamma);
    vec(p + "ln2.beta", lw.ln2_beta);
    mat(p + "fc1.weight", lw.w1);
    vec(p + "fc1.bias", lw.b1);
    mat(p + "fc2.weight", lw.w2);
    vec(p + "fc2.bias", lw.b2);
  }
  vec("final.gamma", w.final_gamma);
  vec("final.beta", w.final_beta);
  mat("unembed", w.unembedding);
  return out;
}

}  // namespace

Container transformer_container(const DecoderConfig& config, const TransformerWeights& weights) {
  Container c;
  c.kind = "micro_transformer";
  c.config = {{"vocab_size", std::to_string(config.vocab_size)},
              {"model_dim", std::to_string(config.model_dim)},
              {"layers", std::to_string(config.layers)},
              {"heads", std::to_string(config.heads)},
              {"ffn_mult", std::to_string(config.ffn_mult)},
              {"seed", std::to_string(config.seed)}};
  TransformerWeights copy = weights;
  for (const TensorView& v : transformer_views(copy)) {
    c.tensors.push_back({v.name, v.shape, std::vector<double>(v.data.begin(), v.data.end())});
  }
  return c;
}

TransformerWeights transformer_from_container(const Container& c, const DecoderConfig& config) {
  if (c.kind != "micro_transformer") throw CheckpointError("checkpoint holds '" + c.kind + "', not transformer weights");
  if (lookup_size(c, "vocab_size") != config.vocab_size || lookup_size(c, "model_dim") != config.model_dim ||
      lookup_size(c, "layers") != config.layers) {
    throw CheckpointError("transformer checkpoint shape does not match decoder config");
  }
  // Shapes come from the config; values from the file.
  TransformerWeights w = TransformerWeights::random(config);
  fill(c.tensors, transformer_views(w));
  return w;
}

void write_training_report(std::ostream& out, const std::vector<EpochReport>& report) {
  out << "epoch,loss,val_f1\n";
  for (const EpochReport& r : report) out << r.epoch << ',' << fmt(r.loss) << ',' << fmt(r.val_f1) << '\n';
}

}  // namespace utaca
