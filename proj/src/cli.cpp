#include "utaca/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "utaca/checkpoint.hpp"
#include "utaca/eval.hpp"
#include "utaca/run_config.hpp"
#include "utaca/selftest.hpp"
#include "utaca/signals.hpp"

namespace utaca::cli {

namespace fs = std::filesystem;

namespace {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvariantFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Options shared by every command.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string data_dir;
  std::string out_dir;
  std::vector<std::string> overrides;  // key=value
  bool force = false;
  std::size_t jobs = 0;
};

void add_common(CLI::App& app, Common& c) {
  app.add_option("-c,--config", c.config_path, "INI config file");
  app.add_option("--seed", c.seed, "Global seed (overrides ATACA_SEED and the config file)");
  app.add_option("--data-dir", c.data_dir, "Corpus and signal directory");
  app.add_option("--out-dir", c.out_dir, "Output directory");
  app.add_option("--set", c.overrides, "Override a config key: section.key=value");
  app.add_option("-j,--jobs", c.jobs, "Worker threads for corpus runs");
  app.add_flag("--force", c.force, "Overwrite existing outputs");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config_path.empty()) cfg.load_ini(c.config_path);
  cfg.apply_env();
  if (c.seed) cfg.set("general.seed", std::to_string(*c.seed));
  if (!c.data_dir.empty()) cfg.set("general.data_dir", c.data_dir);
  if (!c.out_dir.empty()) cfg.set("general.out_dir", c.out_dir);
  if (c.jobs) cfg.set("general.jobs", std::to_string(c.jobs));
  for (const std::string& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void refuse_overwrite(const std::vector<fs::path>& paths, bool force) {
  if (force) return;
  for (const fs::path& p : paths) {
    if (fs::exists(p)) throw IoError("refusing to overwrite " + p.string() + " (pass --force)");
  }
}

std::ofstream open_out(const fs::path& p, bool binary = false) {
  std::ofstream out(p, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
  if (!out) throw IoError("cannot open " + p.string() + " for writing");
  return out;
}

std::ifstream open_in(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("missing input file " + p.string());
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return in;
}

void echo_config(const RunConfig& cfg, const fs::path& path) {
  auto out = open_out(path);
  cfg.write_ini(out);
}

fs::path corpus_path(const RunConfig& cfg, Split s) { return cfg.data_dir() / ("corpus_" + to_string(s) + ".jsonl"); }
fs::path signals_path(const RunConfig& cfg, Split s) { return cfg.data_dir() / ("signals_" + to_string(s) + ".jsonl"); }

fs::path checkpoint_path(const RunConfig& cfg) {
  const fs::path p = cfg.get("detector.checkpoint");
  return p.is_absolute() ? p : cfg.out_dir() / p;
}

std::vector<BiographyRecord> load_corpus(const fs::path& p, const Vocabulary& vocab) {
  auto in = open_in(p);
  try {
    return read_corpus(in, vocab).records;
  } catch (const std::exception& e) {
    throw IoError(p.string() + ": " + e.what());
  }
}

std::vector<LabeledTokenRecord> load_signals(const fs::path& p) {
  auto in = open_in(p);
  try {
    return read_signals(in).tokens;
  } catch (const std::exception& e) {
    throw IoError(p.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

int cmd_datagen(const RunConfig& cfg, bool force, std::ostream& out) {
  const DatagenConfig dg = cfg.datagen();
  const Vocabulary vocab = Vocabulary::standard(dg.vocab_size);
  ensure_dir(cfg.data_dir());
  const std::vector<fs::path> targets = {corpus_path(cfg, Split::Train), corpus_path(cfg, Split::Val),
                                         corpus_path(cfg, Split::Test),  signals_path(cfg, Split::Train),
                                         signals_path(cfg, Split::Val),  cfg.data_dir() / "config.resolved.ini"};
  refuse_overwrite(targets, force);

  const Corpus corpus = gen_records(dg, vocab);
  std::set<std::string> names;
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    for (const BiographyRecord& r : corpus.split(s)) {
      if (!names.insert(r.person).second) throw InvariantFailure("name appears twice: " + r.person);
    }
  }
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    auto f = open_out(corpus_path(cfg, s));
    write_corpus(f, corpus.split(s), s, dg.seed, vocab);
  }
  const DecoderConfig dc = cfg.decoder();
  const WindowSelector window = TopK{cfg.get_size("data.collect_k")};
  for (Split s : {Split::Train, Split::Val}) {
    const auto tokens = collect_signals(corpus.split(s), vocab, dc, window);
    auto f = open_out(signals_path(cfg, s));
    write_signals(f, tokens, s, dg.seed);
    std::size_t counts[3] = {0, 0, 0};
    std::size_t answer = 0;
    for (const auto& t : tokens) {
      if (!t.in_answer) continue;
      ++answer;
      ++counts[static_cast<int>(t.label)];
    }
    out << "signals " << to_string(s) << ": " << tokens.size() << " tokens, " << answer << " labeled (correct "
        << counts[0] << ", unknown " << counts[1] << ", hallucinated " << counts[2] << ")\n";
  }
  echo_config(cfg, cfg.data_dir() / "config.resolved.ini");
  out << "corpus: train " << corpus.train.size() << ", val " << corpus.val.size() << ", test "
      << corpus.test.size() << " records in " << cfg.data_dir().string() << '\n';
  return kOk;
}

int cmd_train(const RunConfig& cfg, bool force, std::ostream& out) {
  const DetectorConfig dc = cfg.detector();
  const bool answer_only = cfg.get_bool("detector.answer_only");
  const auto train_tokens = load_signals(signals_path(cfg, Split::Train));
  const auto val_tokens = load_signals(signals_path(cfg, Split::Val));
  for (const auto* set : {&train_tokens, &val_tokens}) {
    if (!set->empty() && set->front().signal.embedding.size() != dc.input_dim) {
      throw ConfigError("signal embeddings have length " + std::to_string(set->front().signal.embedding.size()) +
                        " but decoder.model_dim is " + std::to_string(dc.input_dim));
    }
  }
  const auto train_set = to_sequences(train_tokens, answer_only);
  const auto val_set = to_sequences(val_tokens, answer_only);

  ensure_dir(cfg.out_dir());
  const fs::path ckpt = checkpoint_path(cfg);
  const fs::path report_path = cfg.out_dir() / "train_report.csv";
  refuse_overwrite({ckpt, report_path}, force);

  const TrainingResult res = train(dc, train_set, val_set, [&](const EpochReport& r) {
    out << "epoch " << r.epoch << " loss " << std::setprecision(6) << r.loss << " val_f1 " << r.val_f1 << '\n';
  });
  save_detector(ckpt, dc, res.params);
  {
    auto f = open_out(report_path);
    write_training_report(f, res.report);
  }
  std::vector<TokenLabel> pred, gold;
  for (const auto& seq : val_set) {
    const auto probs = predict_sequence(res.params, seq, dc);
    for (std::size_t t = 0; t < seq.size(); ++t) {
      if (!seq[t].label) continue;
      pred.push_back(predicted_label(probs[t], dc.head));
      gold.push_back(*seq[t].label);
    }
  }
  const DetectorMetrics m = detector_metrics(pred, gold, dc.head == HeadMode::TwoWayMerged);
  {
    auto f = open_out(cfg.out_dir() / "detector_metrics.csv");
    write_detector_metrics_csv(f, m);
  }
  echo_config(cfg, cfg.out_dir() / "train.config.ini");
  out << "best epoch " << res.best_epoch << ": val F1 " << m.f1 << ", mAcc " << m.m_acc << ", Recall_N "
      << m.recall_n << ", Recall_P " << m.recall_p << "\ncheckpoint " << ckpt.string() << '\n';
  return kOk;
}

std::string run_name(const RunConfig& cfg) {
  if (cfg.get("controller.policy") == "fixed") return "fixed_k" + cfg.get("controller.k");
  return "utaca_kmax" + cfg.get("controller.k_max") + "_" + cfg.get("controller.update");
}

int cmd_run(RunConfig cfg, bool force, const std::string& name_opt, std::ostream& out) {
  const std::string policy = cfg.get("controller.policy");
  if (policy != "fixed" && policy != "utaca") throw UsageError("--policy must be fixed or utaca");
  if (policy == "fixed" && cfg.is_set_explicitly("controller.update")) {
    throw UsageError("--update only applies to --policy utaca");
  }
  if (policy == "utaca" && cfg.is_set_explicitly("controller.k")) {
    throw UsageError("--k only applies to --policy fixed (use --kmax)");
  }
  const Split split = split_from_string(cfg.get("controller.split"));
  const Vocabulary vocab = Vocabulary::standard(cfg.get_size("data.vocab_size"));
  const auto records = load_corpus(corpus_path(cfg, split), vocab);

  RunSetup setup;
  setup.decoder = cfg.decoder();
  setup.controller = cfg.controller();
  setup.fixed_k = cfg.get_size("controller.k");
  setup.jobs = cfg.get_size("general.jobs");
  if (setup.fixed_k < 1) throw UsageError("--k must be at least 1");
  std::optional<Detector> detector;
  if (policy == "utaca") {
    auto [dc, params] = load_detector(checkpoint_path(cfg));
    if (dc.input_dim != setup.decoder.model_dim) {
      throw ConfigError("detector checkpoint expects embeddings of length " + std::to_string(dc.input_dim) +
                        " but decoder.model_dim is " + std::to_string(setup.decoder.model_dim));
    }
    detector.emplace(dc, std::move(params));
    setup.detector = &*detector;
  }

  ensure_dir(cfg.out_dir());
  const std::string name = name_opt.empty() ? run_name(cfg) : name_opt;
  const fs::path trace_path = cfg.out_dir() / ("trace_" + name + ".jsonl");
  refuse_overwrite({trace_path}, force);

  const auto traces = run_corpus(records, vocab, setup);
  {
    auto f = open_out(trace_path);
    write_trace(f, cfg.values(), traces);
  }
  echo_config(cfg, cfg.out_dir() / ("trace_" + name + ".config.ini"));
  const RunMetrics m = run_metrics(traces, records, vocab);
  out << name << ": " << m.records << " records, accuracy " << m.accuracy << ", mTokens " << m.m_tokens
      << ", mTokens_total " << m.m_tokens_total << ", expansion rate " << m.expansion_rate << "\ntrace "
      << trace_path.string() << '\n';
  return kOk;
}

std::string setting_of(const std::map<std::string, std::string>& c) {
  auto get = [&](const std::string& k) {
    auto it = c.find(k);
    return it == c.end() ? std::string("?") : it->second;
  };
  if (get("controller.policy") == "fixed") return "K=" + get("controller.k");
  return "Kmax=" + get("controller.k_max") + " " + get("controller.update");
}

int cmd_eval(const RunConfig& cfg, const std::vector<std::string>& trace_files, const std::string& corpus_opt,
             bool force, std::ostream& out) {
  if (trace_files.empty()) throw UsageError("eval needs at least one --trace file");
  const Vocabulary vocab = Vocabulary::standard(cfg.get_size("data.vocab_size"));
  const fs::path corpus_file =
      corpus_opt.empty() ? corpus_path(cfg, split_from_string(cfg.get("controller.split"))) : fs::path(corpus_opt);
  const auto records = load_corpus(corpus_file, vocab);

  std::vector<CompareRow> rows;
  std::vector<std::string> violations;
  for (const std::string& tf : trace_files) {
    auto in = open_in(tf);
    TraceFile trace;
    try {
      trace = read_trace(in);
    } catch (const std::exception& e) {
      throw IoError(tf + ": " + e.what());
    }
    std::size_t steps = 0;
    for (const auto& r : trace.records) steps += r.steps.size();
    if (steps == 0) throw IoError(tf + ": trace has no steps");

    CompareRow row;
    row.method = trace.config.count("controller.policy") ? trace.config.at("controller.policy") : "unknown";
    row.setting = setting_of(trace.config);
    row.metrics = run_metrics(trace.records, records, vocab);

    const std::size_t block = std::stoull(trace.config.at("decoder.block_size"));
    const std::size_t budget =
        std::stoull(trace.config.at(row.method == "fixed" ? "controller.k" : "controller.k_max"));
    const double bound = static_cast<double>(block * budget + block - 1);
    if (row.metrics.m_tokens > bound) violations.push_back(tf + ": mTokens above block_size*K + tail bound");
    if (row.metrics.m_tokens > row.metrics.m_tokens_total) violations.push_back(tf + ": mTokens > mTokens_total");
    rows.push_back(std::move(row));
  }

  ensure_dir(cfg.out_dir());
  const fs::path csv = cfg.out_dir() / "compare.csv";
  const fs::path jsonl = cfg.out_dir() / "compare.jsonl";
  refuse_overwrite({csv, jsonl}, force);
  {
    auto f = open_out(csv);
    write_compare_csv(f, rows);
  }
  {
    auto f = open_out(jsonl);
    write_compare_jsonl(f, rows);
  }
  echo_config(cfg, cfg.out_dir() / "compare.config.ini");
  write_compare_csv(out, rows);
  if (!violations.empty()) {
    std::string msg;
    for (const auto& v : violations) msg += v + "\n";
    throw InvariantFailure(msg);
  }
  return kOk;
}

// Test-split records with prompts cut to `tokens` (biography head + suffix).
std::vector<BiographyRecord> bench_records(const RunConfig& cfg, const Vocabulary& vocab) {
  std::vector<BiographyRecord> records;
  const fs::path p = corpus_path(cfg, Split::Test);
  if (fs::exists(p)) {
    records = load_corpus(p, vocab);
  } else {
    DatagenConfig dg = cfg.datagen();
    dg.train_count = 0;
    dg.val_count = 0;
    dg.test_count = cfg.get_size("bench.records");
    records = gen_records(dg, vocab).test;
  }
  const std::size_t want = cfg.get_size("bench.records");
  if (records.size() > want) records.resize(want);
  if (records.empty()) throw IoError("bench: no test records");
  const std::size_t tokens = cfg.get_size("bench.prompt_tokens");
  for (BiographyRecord& r : records) {
    if (r.biography.size() + 2 > tokens && tokens > 2) {
      r.biography.resize(tokens - 2);
      r.summary_offset = std::min(r.summary_offset, r.biography.size());
    }
  }
  return records;
}

int cmd_bench(RunConfig cfg, bool force, std::ostream& out) {
  cfg.set("decoder.kind", "micro_transformer");
  cfg.set("decoder.model_dim", cfg.get("bench.model_dim"));
  cfg.set("controller.update", cfg.get("bench.update"));
  cfg.set("controller.max_steps", cfg.get("bench.max_steps"));
  const Vocabulary vocab = Vocabulary::standard(cfg.get_size("data.vocab_size"));
  const auto records = bench_records(cfg, vocab);

  DetectorConfig dc = cfg.detector();
  const Detector detector(dc, DetectorParams::init(dc));

  ensure_dir(cfg.out_dir());
  const fs::path csv = cfg.out_dir() / "latency.csv";
  refuse_overwrite({csv}, force);

  std::map<std::size_t, std::vector<RecordTrace>> by_kmax;
  for (std::size_t k_max : cfg.get_size_list("bench.kmax_list")) {
    RunSetup setup;
    setup.decoder = cfg.decoder();
    setup.controller = cfg.controller();
    setup.controller.k_max = k_max;
    setup.detector = &detector;
    by_kmax[k_max] = run_corpus(records, vocab, setup);
    out << "bench K_max=" << k_max << " done\n";
  }
  const auto rows = latency_report(by_kmax);
  {
    auto f = open_out(csv);
    write_latency_csv(f, rows);
  }
  echo_config(cfg, cfg.out_dir() / "latency.config.ini");
  write_latency_csv(out, rows);
  for (const LatencyRow& r : rows) {
    if (!r.detection_below_generation) out << "note: detection not below generation at K_max=" << r.k_max << '\n';
  }
  return kOk;
}

int cmd_selftest(std::ostream& out) {
  bool ok = true;
  for (const CheckResult& r : run_selftest()) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name;
    if (!r.passed) out << ": " << r.detail;
    out << '\n';
    ok = ok && r.passed;
  }
  return ok ? kOk : kInvariant;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Uncertainty-triggered adaptive context allocation"};
  app.require_subcommand(1);

  Common common;
  auto* datagen = app.add_subcommand("datagen", "Generate corpora and detector training signals");
  add_common(*datagen, common);

  auto* train_cmd = app.add_subcommand("train", "Train the uncertainty detector");
  add_common(*train_cmd, common);

  auto* run_cmd = app.add_subcommand("run", "Decode a corpus split and write a trace");
  add_common(*run_cmd, common);
  std::string policy, update, split, name;
  std::optional<std::size_t> k, kmax;
  run_cmd->add_option("--policy", policy, "fixed or utaca");
  run_cmd->add_option("--k", k, "Budget for --policy fixed");
  run_cmd->add_option("--kmax", kmax, "K_max for --policy utaca");
  run_cmd->add_option("--update", update, "set1 or subN (utaca only)");
  run_cmd->add_option("--split", split, "train, val or test");
  run_cmd->add_option("--name", name, "Trace name (default derived from the settings)");

  auto* eval_cmd = app.add_subcommand("eval", "Compare runs from their traces");
  add_common(*eval_cmd, common);
  std::vector<std::string> traces;
  std::string corpus;
  eval_cmd->add_option("--trace", traces, "Trace files")->required();
  eval_cmd->add_option("--corpus", corpus, "Corpus file the traces were decoded from");

  auto* bench_cmd = app.add_subcommand("bench", "Latency breakdown over K_max values");
  add_common(*bench_cmd, common);
  std::string kmax_list;
  bench_cmd->add_option("--kmax", kmax_list, "Comma-separated K_max list");

  auto* selftest = app.add_subcommand("selftest", "Run the invariant suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (selftest->parsed()) return cmd_selftest(out);
    RunConfig cfg = resolve(common);
    if (datagen->parsed()) return cmd_datagen(cfg, common.force, out);
    if (train_cmd->parsed()) return cmd_train(cfg, common.force, out);
    if (run_cmd->parsed()) {
      if (!policy.empty()) cfg.set("controller.policy", policy);
      if (k) cfg.set("controller.k", std::to_string(*k));
      if (kmax) cfg.set("controller.k_max", std::to_string(*kmax));
      if (!update.empty()) cfg.set("controller.update", update);
      if (!split.empty()) cfg.set("controller.split", split);
      return cmd_run(cfg, common.force, name, out);
    }
    if (eval_cmd->parsed()) return cmd_eval(cfg, traces, corpus, common.force, out);
    if (bench_cmd->parsed()) {
      if (!kmax_list.empty()) cfg.set("bench.kmax_list", kmax_list);
      return cmd_bench(cfg, common.force, out);
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const InvariantFailure& e) {
    err << "invariant failure: " << e.what() << '\n';
    return kInvariant;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const CheckpointError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kInvariant;
  }
  return kUsage;
}

}  // namespace utaca::cli
