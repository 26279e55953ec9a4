#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <omp.h>

#include "CLI11.hpp"
#include "star/binary_io.hpp"
#include "star/data.hpp"
#include "star/engine.hpp"
#include "star/metrics.hpp"
#include "star/trainer.hpp"

namespace fs = std::filesystem;
using namespace star;

namespace {

constexpr int kUsageError = 2;

// Usage problems found after CLI11 parsing (bad values, unknown keys).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Global {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

train::TrainConfig resolve_config(const Global& g) {
  try {
    train::TrainConfig cfg;
    if (!g.config_path.empty()) cfg = train::load_config(g.config_path);
    for (const auto& kv : g.overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw train::ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
      train::set_option(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (g.seed) cfg.seed = *g.seed;
    if (!g.out.empty()) cfg.out_dir = g.out;
    cfg.validate();
    if (cfg.threads > 0) omp_set_num_threads(static_cast<int>(cfg.threads));
    return cfg;
  } catch (const train::ConfigError& e) {
    throw UsageError(e.what());
  }
}

void write_fingerprint(const train::TrainConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  std::ofstream(fs::path(cfg.out_dir) / "config.txt") << cfg.canonical();
  std::ofstream(fs::path(cfg.out_dir) / "fingerprint") << cfg.fingerprint_hex() << '\n';
}

std::vector<data::FeatureSequence> load_split(const train::TrainConfig& cfg, const std::string& data_dir,
                                              train::Split split, std::size_t limit) {
  auto seqs = data_dir.empty() ? train::make_split(cfg, split)
                               : data::read_features((fs::path(data_dir) / (train::to_string(split) + ".feat")).string());
  if (limit > 0 && seqs.size() > limit) seqs.resize(limit);
  return seqs;
}

void check_dims(const model::Model<float>& m, const std::vector<data::FeatureSequence>& seqs) {
  for (const auto& s : seqs) {
    if (s.frames.cols() != m.config().d_in) {
      throw std::runtime_error("corpus frames have " + std::to_string(s.frames.cols()) +
                               " channels but the checkpoint expects " + std::to_string(m.config().d_in));
    }
  }
}

struct PolicyArgs {
  std::string kind;  // empty = match the model
  double beta = 1.0;
  std::size_t stride = 6;
  std::size_t wait_k = 1;

  void add_to(CLI::App* app) {
    app->add_option("--policy", kind, "Streaming policy: star, cif or fixed (default: the model's own)")
        ->check(CLI::IsMember({"star", "cif", "fixed"}));
    app->add_option("--beta", beta, "Firing threshold for threshold policies")->capture_default_str();
    app->add_option("--stride", stride, "Frames per segment for the fixed policy")->capture_default_str();
    app->add_option("--wait-k", wait_k, "Segments read before the first token")->capture_default_str();
  }

  engine::Policy build(const model::Model<float>& m) const {
    std::string k = kind;
    if (k.empty()) k = m.config().compressor == model::Compressor::Cif ? "cif" : "star";
    if (k == "star") return engine::Policy::star(beta, wait_k);
    if (k == "cif") return engine::Policy::cif(beta, wait_k);
    return engine::Policy::fixed(stride, wait_k);
  }
};

train::EvalKind eval_kind(const std::string& s) {
  if (s == "offline-full") return train::EvalKind::OfflineFull;
  if (s == "offline-topk") return train::EvalKind::OfflineTopK;
  if (s == "stream") return train::EvalKind::Stream;
  if (s == "fixed-seg") return train::EvalKind::FixedSeg;
  return train::EvalKind::AllCache;
}

void print_report(const train::EvalReport& r) {
  std::cout << std::fixed << std::setprecision(4) << r.mode << ": token_error=" << r.token_error
            << " realized_rate=" << r.realized_rate;
  if (r.mode.rfind("stream", 0) == 0) std::cout << " dal=" << r.dal << " boundary_f1=" << r.boundary_f1;
  std::cout << " utterances=" << r.utterances << '\n';
}

// ---- subcommands -----------------------------------------------------------

int run_gen_data(const train::TrainConfig& cfg) {
  write_fingerprint(cfg);
  std::vector<data::ManifestEntry> manifest;
  for (auto split : {train::Split::Train, train::Split::Valid, train::Split::Test}) {
    if (train::split_size(cfg, split) == 0) continue;
    const auto seqs = train::make_split(cfg, split);
    const std::string name = train::to_string(split) + ".feat";
    const auto path = (fs::path(cfg.out_dir) / name).string();
    data::write_features(path, seqs);
    const auto sum = data::checksum(seqs);
    if (data::checksum(data::read_features(path)) != sum) {
      throw std::runtime_error("round-trip check failed for " + path);
    }
    manifest.push_back({name, train::to_string(split), seqs.size(), cfg.fingerprint_hex()});
    std::cout << name << ": " << seqs.size() << " utterances, checksum " << data::hex64(sum) << ", "
              << std::setprecision(4) << data::frames_per_token(seqs) << " frames/token\n";
  }
  data::write_manifest((fs::path(cfg.out_dir) / "manifest.jsonl").string(), manifest);
  return 0;
}

int run_train(const train::TrainConfig& cfg, const std::string& data_dir) {
  write_fingerprint(cfg);
  train::Corpus corpus;
  std::vector<data::FeatureSequence> valid;
  if (data_dir.empty()) {
    corpus = train::train_corpus(cfg);
    valid = train::make_split(cfg, train::Split::Valid);
  } else {
    auto seqs = std::make_shared<const std::vector<data::FeatureSequence>>(
        data::read_features((fs::path(data_dir) / "train.feat").string()));
    if (seqs->empty()) throw std::runtime_error("training split is empty");
    corpus = [seqs](std::size_t i) { return (*seqs)[i % seqs->size()]; };
    valid = data::read_features((fs::path(data_dir) / "valid.feat").string());
  }
  const auto result = train::train_loop(cfg, corpus, valid);
  std::vector<metrics::MetricRecord> records;
  for (const auto& s : result.stages) {
    std::cout << s.name << ": " << s.steps << " steps";
    if (!s.train_loss.empty()) std::cout << ", final train loss " << s.train_loss.back();
    if (!s.valid_loss.empty()) {
      std::cout << ", valid loss " << s.valid_loss.back();
      records.push_back({s.name + ".valid_loss", s.valid_loss.back(), cfg.fingerprint_hex(), ""});
    }
    if (s.plateaued) std::cout << " (plateau)";
    std::cout << '\n';
  }
  metrics::write_metrics((fs::path(cfg.out_dir) / "metrics.jsonl").string(), records);
  std::cout << "checkpoints in " << cfg.out_dir << '\n';
  return 0;
}

int run_eval(const train::TrainConfig& cfg, const std::string& ckpt, const train::EvalMode& mode,
             const std::string& data_dir, train::Split split, std::size_t limit) {
  write_fingerprint(cfg);
  const auto m = model::Model<float>::load(ckpt);
  const auto seqs = load_split(cfg, data_dir, split, limit);
  check_dims(m, seqs);
  const auto report = train::evaluate_mode(m, mode, seqs, train::expected_target_length(cfg));
  print_report(report);
  metrics::write_metrics((fs::path(cfg.out_dir) / "metrics.jsonl").string(),
                         train::to_records(report, cfg.fingerprint_hex()));
  return 0;
}

int run_stream(const train::TrainConfig& cfg, const std::string& ckpt, const PolicyArgs& pa,
               const std::string& data_dir, train::Split split, std::size_t index, std::string trace_path) {
  write_fingerprint(cfg);
  const auto m = model::Model<float>::load(ckpt);
  const auto seqs = load_split(cfg, data_dir, split, 0);
  if (index >= seqs.size()) throw std::runtime_error("utterance index " + std::to_string(index) + " out of range");
  const auto& seq = seqs[index];
  check_dims(m, {seq});
  const auto policy = pa.build(m);
  const auto max_len = static_cast<std::size_t>(std::lround(2 * train::expected_target_length(cfg)));
  const auto r = engine::run_stream(m, policy, seq.frames, max_len);
  if (trace_path.empty()) trace_path = (fs::path(cfg.out_dir) / "trace.jsonl").string();
  r.trace.write_jsonl(trace_path);

  auto join = [](const std::vector<int>& v) {
    std::ostringstream s;
    for (std::size_t i = 0; i < v.size(); ++i) s << (i ? " " : "") << v[i];
    return s.str();
  };
  const auto delays = r.trace.token_delays();
  std::cout << "policy     " << policy.describe() << '\n'
            << "reference  " << join(seq.tokens) << '\n'
            << "hypothesis " << join(r.hypothesis) << '\n'
            << "frames " << seq.frame_count() << ", segments " << r.anchors << ", token error "
            << metrics::wer(seq.tokens, r.hypothesis);
  if (!delays.empty()) std::cout << ", DAL " << metrics::dal_from_delays(delays, double(seq.frame_count()));
  std::cout << "\ntrace written to " << trace_path << '\n';
  const auto problem = r.trace.check_invariants();
  if (!problem.empty()) throw std::runtime_error("trace invariant violated: " + problem);
  return 0;
}

int run_sweep(const train::TrainConfig& cfg, const std::string& ckpt, const std::vector<double>& rates,
              const std::string& data_dir, train::Split split, std::size_t limit) {
  write_fingerprint(cfg);
  const auto m = model::Model<float>::load(ckpt);
  const auto seqs = load_split(cfg, data_dir, split, limit);
  check_dims(m, seqs);
  std::vector<metrics::MetricRecord> records;
  for (double r : rates) {
    const auto mode = train::EvalMode::offline_topk(r);
    const auto report = train::evaluate_mode(m, mode, seqs, train::expected_target_length(cfg));
    print_report(report);
    const auto recs = train::to_records(report, cfg.fingerprint_hex());
    records.insert(records.end(), recs.begin(), recs.end());
  }
  metrics::write_metrics((fs::path(cfg.out_dir) / "metrics.jsonl").string(), records);
  return 0;
}

int run_bench(std::size_t tx, double rate, std::size_t dim, std::size_t batch, const std::string& trace,
              std::size_t target_len, const std::string& out) {
  const auto r = engine::memory_account(tx, rate, dim, batch);
  std::cout << std::fixed << std::setprecision(0) << "uncompressed cache floats " << r.uncompressed_floats << '\n'
            << "compressed cache floats   " << r.compressed_floats << '\n'
            << std::setprecision(2) << "cache reduction           " << 100 * r.reduction << "%\n";
  if (!trace.empty()) {
    std::ifstream in(trace);
    if (!in) throw std::runtime_error("cannot open trace '" + trace + "'");
    const auto f = engine::flop_account(engine::TraceLog::read_jsonl(in), dim, target_len);
    std::cout << std::setprecision(0) << "anchors " << f.anchors << " of " << f.frames << " frames\n"
              << "cross-attention MACs         " << f.cross_attention << " (uncompressed "
              << f.cross_attention_uncompressed << ")\n"
              << "cached self-attention MACs   " << f.cached_self_attention << " (uncompressed "
              << f.cached_self_attention_uncompressed << ")\n";
  }
  if (!out.empty()) {
    fs::create_directories(out);
    std::ostringstream key;
    key << "tx=" << tx << ";rate=" << rate << ";dim=" << dim << ";batch=" << batch;
    const auto text = key.str();
    const auto fp = data::hex64(io::fnv1a(text.data(), text.size()));
    std::ofstream(fs::path(out) / "fingerprint") << fp << '\n';
    metrics::write_metrics((fs::path(out) / "metrics.jsonl").string(),
                           {{"cache.uncompressed_floats", r.uncompressed_floats, fp, text},
                            {"cache.compressed_floats", r.compressed_floats, fp, text},
                            {"cache.reduction", r.reduction, fp, text}});
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming sequence transduction with learned segment anchors"};
  app.require_subcommand(1);
  app.fallthrough();
  Global g;
  app.add_option("--config", g.config_path, "Config file (key = value lines, # comments)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Training seed (the corpus keeps data.seed)");
  app.add_option("--out", g.out, "Output directory (overrides out_dir)");
  app.add_option("--set", g.overrides, "Override one config key, KEY=VALUE (repeatable)");

  std::string data_dir, ckpt, mode_name, split_name = "test", trace_path;
  std::size_t limit = 0, index = 0;
  double rate = 1.0;
  PolicyArgs policy;

  auto* gen = app.add_subcommand("gen-data", "Write train/valid/test feature files and a manifest");

  auto* tr = app.add_subcommand("train", "Run the staged training recipe");
  tr->add_option("--data", data_dir, "Directory written by gen-data (default: generate on the fly)");

  auto add_common_eval = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
    sub->add_option("--data", data_dir, "Directory written by gen-data (default: generate on the fly)");
    sub->add_option("--split", split_name, "Split to evaluate")->check(CLI::IsMember({"train", "valid", "test"}));
  };
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint under one mode");
  add_common_eval(ev);
  ev->add_option("--mode", mode_name, "offline-full, offline-topk, stream, fixed-seg or all-cache")
      ->required()
      ->check(CLI::IsMember({"offline-full", "offline-topk", "stream", "fixed-seg", "all-cache"}));
  ev->add_option("--rate", rate, "Compression rate for offline-topk")->capture_default_str();
  ev->add_option("--limit", limit, "Evaluate only the first N utterances");
  policy.add_to(ev);

  auto* st = app.add_subcommand("stream", "Stream one utterance and write its trace");
  add_common_eval(st);
  st->add_option("--index", index, "Utterance index within the split")->capture_default_str();
  st->add_option("--trace", trace_path, "Trace output (default: OUT/trace.jsonl)");
  policy.add_to(st);

  std::vector<double> rates{6, 12, 24, 48};
  auto* sw = app.add_subcommand("sweep", "offline-topk evaluation over several rates");
  add_common_eval(sw);
  sw->add_option("--rates", rates, "Rates to evaluate")->delimiter(',')->capture_default_str();
  sw->add_option("--limit", limit, "Evaluate only the first N utterances");

  std::size_t tx = 0, dim = 0, batch = 1, target_len = 1;
  double bench_rate = 1;
  std::string bench_trace;
  auto* be = app.add_subcommand("bench", "Cache memory (and optional attention cost) accounting");
  be->add_option("--tx", tx, "Input frames")->required();
  be->add_option("--rate", bench_rate, "Compression rate")->required();
  be->add_option("--dim", dim, "Model dimension")->required();
  be->add_option("--batch", batch, "Batch size")->capture_default_str();
  be->add_option("--trace", bench_trace, "Trace file for attention multiply-add counts");
  be->add_option("--target-len", target_len, "Output length for the cross-attention count")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kUsageError;
  }

  try {
    if (be->parsed()) {
      if (!(bench_rate >= 1) || tx == 0 || dim == 0 || batch == 0) {
        throw UsageError("--tx, --dim and --batch must be positive and --rate >= 1");
      }
      return run_bench(tx, bench_rate, dim, batch, bench_trace, target_len, g.out);
    }
    const auto cfg = resolve_config(g);
    const auto split = train::split_from_string(split_name);
    if (gen->parsed()) return run_gen_data(cfg);
    if (tr->parsed()) return run_train(cfg, data_dir);
    if (ev->parsed()) {
      train::EvalMode mode;
      mode.kind = eval_kind(mode_name);
      mode.rate = rate;
      if (mode.kind == train::EvalKind::Stream) mode.policy = policy.build(model::Model<float>::load(ckpt));
      return run_eval(cfg, ckpt, mode, data_dir, split, limit);
    }
    if (st->parsed()) return run_stream(cfg, ckpt, policy, data_dir, split, index, trace_path);
    if (sw->parsed()) return run_sweep(cfg, ckpt, rates, data_dir, split, limit);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
