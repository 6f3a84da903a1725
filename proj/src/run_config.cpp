#include "utaca/run_config.hpp"

#include <cstdlib>
#include <ostream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace utaca {

namespace {

std::string fmt(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

}  // namespace

RunConfig::RunConfig() {
  const DatagenConfig dg;
  const DecoderConfig dc;
  const DetectorConfig det;
  const ControllerConfig cc;
  values_ = {
      {"general.seed", "7"},
      {"general.data_dir", "data"},
      {"general.out_dir", "out"},
      {"general.jobs", "1"},

      {"data.train_count", std::to_string(dg.train_count)},
      {"data.val_count", std::to_string(dg.val_count)},
      {"data.test_count", std::to_string(dg.test_count)},
      {"data.train_filler_min", std::to_string(dg.train_filler.min)},
      {"data.train_filler_max", std::to_string(dg.train_filler.max)},
      {"data.val_filler_min", std::to_string(dg.val_filler.min)},
      {"data.val_filler_max", std::to_string(dg.val_filler.max)},
      {"data.test_filler_min", std::to_string(dg.test_filler.min)},
      {"data.test_filler_max", std::to_string(dg.test_filler.max)},
      {"data.vocab_size", std::to_string(dg.vocab_size)},
      {"data.collect_k", "1"},

      {"decoder.kind", to_string(dc.kind)},
      {"decoder.model_dim", std::to_string(dc.model_dim)},
      {"decoder.block_size", std::to_string(dc.block_size)},
      {"decoder.rep_count", std::to_string(dc.rep_count)},
      {"decoder.attend_tail", fmt_bool(dc.attend_tail)},
      {"decoder.prefill_window", std::to_string(dc.prefill_window)},
      {"decoder.layers", std::to_string(dc.layers)},
      {"decoder.heads", std::to_string(dc.heads)},
      {"decoder.ffn_mult", std::to_string(dc.ffn_mult)},
      {"decoder.unk_prob", fmt(dc.unk_prob)},
      {"decoder.margin_hi", fmt(dc.margin_hi)},
      {"decoder.margin_lo", fmt(dc.margin_lo)},
      {"decoder.noise_temperature", fmt(dc.noise_temperature)},
      {"decoder.query_gain", fmt(dc.query_gain)},
      {"decoder.query_noise", fmt(dc.query_noise)},
      {"decoder.topic_weight", fmt(dc.topic_weight)},
      {"decoder.embedding_noise", fmt(dc.embedding_noise)},

      {"detector.use_logm", fmt_bool(det.use_logm)},
      {"detector.use_se", fmt_bool(det.use_se)},
      {"detector.use_lstm", fmt_bool(det.use_lstm)},
      {"detector.head", to_string(det.head)},
      {"detector.d_model", std::to_string(det.d_model)},
      {"detector.mlp_dim", std::to_string(det.mlp_dim)},
      {"detector.learning_rate", fmt(det.learning_rate)},
      {"detector.momentum", fmt(det.momentum)},
      {"detector.epochs", std::to_string(det.epochs)},
      {"detector.batch_size", std::to_string(det.batch_size)},
      {"detector.eval_every", std::to_string(det.eval_every)},
      {"detector.answer_only", "true"},
      {"detector.checkpoint", "detector.ataca"},

      {"controller.policy", "utaca"},
      {"controller.k", "3"},
      {"controller.k_max", std::to_string(cc.k_max)},
      {"controller.update", cc.policy.to_string()},
      {"controller.max_steps", std::to_string(cc.max_steps)},
      {"controller.restore_detector_state", fmt_bool(cc.restore_detector_state)},
      {"controller.recheck", fmt_bool(cc.recheck)},
      {"controller.temperature", fmt(cc.temperature)},
      {"controller.split", "val"},

      {"bench.kmax_list", "32,64,128"},
      {"bench.update", "sub16"},
      {"bench.records", "2"},
      {"bench.prompt_tokens", "4096"},
      {"bench.model_dim", "64"},
      {"bench.max_steps", "24"},
  };
}

void RunConfig::load_ini(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.message());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config key '" + section + "' must be inside a [section]");
    for (const auto& [key, value] : body) set(section + "." + key, value.get_value<std::string>());
  }
}

void RunConfig::apply_env() {
  if (const char* s = std::getenv("ATACA_SEED"); s && *s) set("general.seed", s);
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
  explicit_[key] = true;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::size_t RunConfig::get_size(const std::string& key) const { return static_cast<std::size_t>(get_u64(key)); }

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  std::size_t used = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    const auto x = std::stoull(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "' needs a non-negative integer, got '" + v + "'");
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  std::size_t used = 0;
  try {
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "' needs a number, got '" + v + "'");
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "' needs a boolean, got '" + v + "'");
}

std::vector<std::size_t> RunConfig::get_size_list(const std::string& key) const {
  std::vector<std::size_t> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' needs a comma-separated integer list");
    }
  }
  if (out.empty()) throw ConfigError("config key '" + key + "' is empty");
  return out;
}

DatagenConfig RunConfig::datagen() const {
  DatagenConfig c;
  c.seed = seed();
  c.train_count = get_size("data.train_count");
  c.val_count = get_size("data.val_count");
  c.test_count = get_size("data.test_count");
  c.train_filler = {get_size("data.train_filler_min"), get_size("data.train_filler_max")};
  c.val_filler = {get_size("data.val_filler_min"), get_size("data.val_filler_max")};
  c.test_filler = {get_size("data.test_filler_min"), get_size("data.test_filler_max")};
  c.vocab_size = get_size("data.vocab_size");
  return c;
}

DecoderConfig RunConfig::decoder() const {
  DecoderConfig c;
  try {
    c.kind = decoder_kind_from_string(get("decoder.kind"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.vocab_size = get_size("data.vocab_size");
  c.model_dim = get_size("decoder.model_dim");
  c.seed = seed() + 1;
  c.block_size = get_size("decoder.block_size");
  c.rep_count = get_size("decoder.rep_count");
  c.attend_tail = get_bool("decoder.attend_tail");
  c.prefill_window = get_size("decoder.prefill_window");
  c.layers = get_size("decoder.layers");
  c.heads = get_size("decoder.heads");
  c.ffn_mult = get_size("decoder.ffn_mult");
  c.unk_prob = get_double("decoder.unk_prob");
  c.margin_hi = get_double("decoder.margin_hi");
  c.margin_lo = get_double("decoder.margin_lo");
  c.noise_temperature = get_double("decoder.noise_temperature");
  c.query_gain = get_double("decoder.query_gain");
  c.query_noise = get_double("decoder.query_noise");
  c.topic_weight = get_double("decoder.topic_weight");
  c.embedding_noise = get_double("decoder.embedding_noise");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

DetectorConfig RunConfig::detector() const {
  DetectorConfig c;
  c.use_logm = get_bool("detector.use_logm");
  c.use_se = get_bool("detector.use_se");
  c.use_lstm = get_bool("detector.use_lstm");
  try {
    c.head = head_mode_from_string(get("detector.head"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.input_dim = get_size("decoder.model_dim");
  c.d_model = get_size("detector.d_model");
  c.mlp_dim = get_size("detector.mlp_dim");
  c.seed = seed() + 2;
  c.learning_rate = get_double("detector.learning_rate");
  c.momentum = get_double("detector.momentum");
  c.epochs = get_size("detector.epochs");
  c.batch_size = get_size("detector.batch_size");
  c.eval_every = get_size("detector.eval_every");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

ControllerConfig RunConfig::controller() const {
  ControllerConfig c;
  c.k_max = get_size("controller.k_max");
  try {
    c.policy = UpdatePolicy::parse(get("controller.update"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.max_steps = get_size("controller.max_steps");
  c.restore_detector_state = get_bool("controller.restore_detector_state");
  c.recheck = get_bool("controller.recheck");
  c.temperature = get_double("controller.temperature");
  c.seed = seed() + 3;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

void RunConfig::write_ini(std::ostream& out) const {
  std::string section;
  for (const auto& [key, value] : values_) {
    const auto dot = key.find('.');
    const std::string s = key.substr(0, dot);
    if (s != section) {
      if (!section.empty()) out << '\n';
      out << '[' << s << "]\n";
      section = s;
    }
    out << key.substr(dot + 1) << " = " << value << '\n';
  }
}

}  // namespace utaca
