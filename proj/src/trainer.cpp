#include "star/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <numbers>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>
#include <omp.h>

#include "star/binary_io.hpp"
#include "star/metrics.hpp"

namespace star::train {

namespace {

using model::Compressor;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& value) {
  N out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) throw ConfigError("bad value '" + value + "' for " + key);
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("bad value '" + value + "' for " + key + " (expected true/false)");
}

// Shortest text that parses back to the same double.
std::string format_double(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

struct Option {
  std::string key;
  void (*set)(TrainConfig&, const std::string&, const std::string&);
  std::string (*get)(const TrainConfig&);
};

#define STAR_SIZE_OPTION(name, field)                                                              \
  Option {                                                                                         \
    name, [](TrainConfig& c, const std::string& k, const std::string& v) {                         \
      c.field = parse_number<std::size_t>(k, v);                                                   \
    },                                                                                             \
        [](const TrainConfig& c) { return std::to_string(c.field); }                               \
  }
#define STAR_DOUBLE_OPTION(name, field)                                                            \
  Option {                                                                                         \
    name, [](TrainConfig& c, const std::string& k, const std::string& v) {                         \
      c.field = parse_number<double>(k, v);                                                        \
    },                                                                                             \
        [](const TrainConfig& c) { return format_double(c.field); }                                \
  }

const std::vector<Option>& options() {
  static const std::vector<Option> table = [] {
    std::vector<Option> t{
        Option{"profile",
               [](TrainConfig& c, const std::string& k, const std::string& v) {
                 if (v != "desk" && v != "paper" && v != "tiny") throw ConfigError("bad value '" + v + "' for " + k);
                 c.profile = v;
               },
               [](const TrainConfig& c) { return c.profile; }},
        Option{"method",
               [](TrainConfig& c, const std::string& k, const std::string& v) {
                 try {
                   c.method = model::compressor_from_string(v);
                 } catch (const std::exception&) {
                   throw ConfigError("bad value '" + v + "' for " + k + " (star, cif, cnn, none)");
                 }
               },
               [](const TrainConfig& c) { return model::to_string(c.method); }},
        STAR_DOUBLE_OPTION("rate", rate),
        STAR_DOUBLE_OPTION("gamma", gamma),
        STAR_DOUBLE_OPTION("beta", beta),
        STAR_SIZE_OPTION("wait_k", wait_k),
        STAR_SIZE_OPTION("batch", batch),
        STAR_DOUBLE_OPTION("lr_stage1", lr_stage1),
        STAR_DOUBLE_OPTION("lr_stage2", lr_stage2),
        STAR_DOUBLE_OPTION("lr_stage3", lr_stage3),
        STAR_SIZE_OPTION("warmup", warmup),
        STAR_DOUBLE_OPTION("lr_floor", lr_floor),
        STAR_DOUBLE_OPTION("clip", clip),
        STAR_SIZE_OPTION("stage1_max_steps", stage1_max_steps),
        STAR_SIZE_OPTION("eval_every", eval_every),
        STAR_SIZE_OPTION("patience", patience),
        STAR_DOUBLE_OPTION("plateau_delta", plateau_delta),
        STAR_SIZE_OPTION("segmenter_steps", segmenter_steps),
        STAR_DOUBLE_OPTION("segmenter_lr_scale", segmenter_lr_scale),
        STAR_SIZE_OPTION("stage3_steps", stage3_steps),
        Option{"streaming",
               [](TrainConfig& c, const std::string& k, const std::string& v) { c.streaming = parse_bool(k, v); },
               [](const TrainConfig& c) { return std::string(c.streaming ? "true" : "false"); }},
        Option{"seed",
               [](TrainConfig& c, const std::string& k, const std::string& v) {
                 c.seed = parse_number<std::uint64_t>(k, v);
               },
               [](const TrainConfig& c) { return std::to_string(c.seed); }},
        STAR_SIZE_OPTION("train_size", train_size),
        STAR_SIZE_OPTION("valid_size", valid_size),
        STAR_SIZE_OPTION("test_size", test_size),
        STAR_SIZE_OPTION("threads", threads),
        Option{"out_dir", [](TrainConfig& c, const std::string&, const std::string& v) { c.out_dir = v; },
               [](const TrainConfig& c) { return c.out_dir; }},
        STAR_SIZE_OPTION("data.vocab_tokens", data.vocab_tokens),
        STAR_SIZE_OPTION("data.d_in", data.d_in),
        STAR_SIZE_OPTION("data.frames_min", data.frames_min),
        STAR_SIZE_OPTION("data.frames_max", data.frames_max),
        STAR_DOUBLE_OPTION("data.silence_prob", data.silence_prob),
        STAR_SIZE_OPTION("data.silence_min", data.silence_min),
        STAR_SIZE_OPTION("data.silence_max", data.silence_max),
        STAR_DOUBLE_OPTION("data.noise", data.noise),
        STAR_SIZE_OPTION("data.tokens_min", data.tokens_min),
        STAR_SIZE_OPTION("data.tokens_max", data.tokens_max),
        Option{"data.seed",
               [](TrainConfig& c, const std::string& k, const std::string& v) {
                 c.data.seed = parse_number<std::uint64_t>(k, v);
               },
               [](const TrainConfig& c) { return std::to_string(c.data.seed); }},
    };
    std::sort(t.begin(), t.end(), [](const Option& a, const Option& b) { return a.key < b.key; });
    return t;
  }();
  return table;
}

#undef STAR_SIZE_OPTION
#undef STAR_DOUBLE_OPTION

const Option* find_option(const std::string& key) {
  const auto& t = options();
  auto it = std::lower_bound(t.begin(), t.end(), key, [](const Option& o, const std::string& k) { return o.key < k; });
  return it != t.end() && it->key == key ? &*it : nullptr;
}

// Runs body(i) for i in [0, n) over OpenMP threads and rethrows the first
// exception on the calling thread.
template <typename F>
void parallel_for(std::size_t n, F&& body) {
  std::exception_ptr error;
  std::mutex mu;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
      std::lock_guard lock(mu);
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

std::vector<int> decoder_targets(const std::vector<int>& tokens) {
  std::vector<int> out(tokens.begin(), tokens.end());
  out.push_back(model::kEos);
  return out;
}

template <typename T>
std::vector<double> values_of(const ad::Var<T>& v) {
  return std::vector<double>(v.value().data.begin(), v.value().data.end());
}

template <typename T>
std::vector<std::uint8_t> flags_at(std::size_t frames, std::span<const std::size_t> idx) {
  std::vector<std::uint8_t> flags(frames, 0);
  for (auto i : idx) flags[i] = 1;
  return flags;
}

// Threshold boundaries plus the flush of a non-empty trailing segment.
std::vector<std::size_t> stream_boundaries(std::span<const double> alpha, double beta) {
  auto b = seg::threshold_boundaries(alpha, beta);
  if (b.empty() || b.back() + 1 != alpha.size()) b.push_back(alpha.size() - 1);
  return b;
}

}  // namespace

// ---- config -------------------------------------------------------------------

void TrainConfig::validate() const {
  if (rate != 0 && !(rate >= 1)) throw ConfigError("rate must be >= 1 (or 0 for the corpus mean)");
  if (!(gamma >= 0) || !std::isfinite(gamma)) throw ConfigError("gamma must be finite and >= 0");
  if (!(beta > 0)) throw ConfigError("beta must be > 0");
  if (wait_k == 0) throw ConfigError("wait_k must be >= 1");
  if (batch == 0) throw ConfigError("batch must be >= 1");
  for (double lr : {lr_stage1, lr_stage2, lr_stage3}) {
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("learning rates must be finite and > 0");
  }
  if (!(lr_floor > 0) || lr_floor > 1) throw ConfigError("lr_floor must be in (0, 1]");
  if (!(clip >= 0)) throw ConfigError("clip must be >= 0 (0 disables clipping)");
  if (!(segmenter_lr_scale > 0)) throw ConfigError("segmenter_lr_scale must be > 0");
  if (eval_every == 0) throw ConfigError("eval_every must be >= 1");
  if (patience == 0) throw ConfigError("patience must be >= 1");
  if (!(plateau_delta >= 0)) throw ConfigError("plateau_delta must be >= 0");
  if (train_size == 0 || valid_size == 0) throw ConfigError("train_size and valid_size must be >= 1");
  if (profile != "desk" && profile != "paper" && profile != "tiny") {
    throw ConfigError("profile must be desk, paper or tiny");
  }
  try {
    data.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

model::ModelConfig TrainConfig::model_config(Compressor compressor) const {
  auto m = profile == "paper"  ? model::ModelConfig::paper()
           : profile == "tiny" ? model::ModelConfig::tiny()
                               : model::ModelConfig::desk();
  m.d_in = data.d_in;
  m.vocab = data.vocab_size();
  m.compressor = compressor;
  const double r = rate > 0 ? rate : data.expected_frames_per_token();
  m.cnn_rate = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(r)));
  const std::size_t longest = data.tokens_max * (data.frames_max + data.silence_max);
  m.max_positions = std::max(m.max_positions, longest + 1);
  m.max_target = std::max(m.max_target, 2 * data.tokens_max + 2);
  return m;
}

std::string TrainConfig::canonical() const {
  std::string out;
  for (const auto& o : options()) out += o.key + " = " + o.get(*this) + "\n";
  return out;
}

std::uint64_t TrainConfig::fingerprint() const {
  const auto text = canonical();
  return io::fnv1a(reinterpret_cast<const unsigned char*>(text.data()), text.size());
}

std::string TrainConfig::fingerprint_hex() const { return data::hex64(fingerprint()); }

void set_option(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const Option* o = find_option(key);
  if (o == nullptr) throw ConfigError("unknown config key '" + key + "'");
  o->set(cfg, key, value);
}

std::vector<std::string> option_keys() {
  std::vector<std::string> keys;
  for (const auto& o : options()) keys.push_back(o.key);
  return keys;
}

TrainConfig parse_config(const std::string& text, TrainConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    try {
      set_option(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

TrainConfig load_config(const std::string& path, TrainConfig base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

// ---- losses ---------------------------------------------------------------------

template <typename T>
ad::Var<T> nll_il(const model::Model<T>& model, ad::Tape<T>& tape, std::span<const int> targets,
                  const model::DecoderInputs<T>& in) {
  if (targets.empty()) throw ShapeError("nll needs at least one target");
  if (!in.visible.empty() && in.visible.size() != targets.size()) {
    throw ShapeError("visibility mask has " + std::to_string(in.visible.size()) + " rows for " +
                     std::to_string(targets.size()) + " targets");
  }
  std::vector<int> inputs;
  inputs.reserve(targets.size());
  inputs.push_back(model::kBos);
  inputs.insert(inputs.end(), targets.begin(), targets.end() - 1);
  const auto logits = model.decode(tape, inputs, in);
  return ad::cross_entropy(logits, targets, model::kPad);
}

double compose_loss(double nll, double lp, double gamma, bool segmenter_active) {
  if (!std::isfinite(nll) || !std::isfinite(lp) || !std::isfinite(gamma)) {
    throw TrainingError("compose_loss given a non-finite input");
  }
  return segmenter_active ? nll + gamma * lp : nll;
}

template <typename T>
ad::Var<T> compose_loss(const ad::Var<T>& nll, const std::optional<ad::Var<T>>& lp, T gamma, bool segmenter_active) {
  const double lp_value = lp ? static_cast<double>(lp->value()[0]) : 0.0;
  compose_loss(static_cast<double>(nll.value()[0]), lp_value, static_cast<double>(gamma), segmenter_active);
  if (!segmenter_active || !lp || gamma == T{0}) return nll;
  return ad::add(nll, ad::scale(*lp, gamma));
}

template <typename T>
UtteranceLoss<T> utterance_loss(const model::Model<T>& model, ad::Tape<T>& tape, const data::FeatureSequence& seq,
                                const LossOptions& opt) {
  const auto& cfg = model.config();
  const std::size_t tx = seq.frame_count();
  const std::size_t ty = seq.tokens.size();
  if (tx == 0 || ty == 0) throw ShapeError("training utterance needs frames and tokens");
  const auto targets = decoder_targets(seq.tokens);
  const Tensor<T> frames = seq.frames.template cast<T>();
  const auto feats = model.features(tape, frames);

  model::DecoderInputs<T> in;
  std::optional<ad::Var<T>> lp;
  model::EncoderState<T> state;
  switch (cfg.compressor) {
    case Compressor::None:
      in.anchors = model.encode_features(tape, feats, {}, state);
      break;
    case Compressor::Star: {
      const auto s = model.segment_scores(tape, feats);
      const auto sv = values_of(s);
      std::vector<std::size_t> idx;
      if (opt.anchors == AnchorMode::TopK) {
        idx = seg::select_top_k(sv, seg::anchors_from_rate(tx, opt.rate));
      } else {
        idx = stream_boundaries(seg::gate(sv), opt.beta);
      }
      const auto flags = flags_at<T>(tx, idx);
      const auto hidden = model.encode_features(tape, feats, flags, state);
      in.anchors = ad::gather_rows(hidden, std::span<const std::size_t>(idx));
      in.scores = ad::gather_rows(s, std::span<const std::size_t>(idx));
      if (opt.anchors == AnchorMode::Threshold) in.visible = model::il_visible_counts(ty + 1, idx.size(), opt.wait_k);
      if (opt.segmenter_active) lp = seg::length_penalty(ad::sigmoid(s), ty);
      break;
    }
    case Compressor::Cif: {
      const auto s = model.segment_scores(tape, feats);
      const auto alpha = ad::sigmoid(s);
      const auto scaled = seg::rescale(alpha, ty, static_cast<T>(opt.beta));
      const auto w = seg::cif_weights(scaled, static_cast<T>(opt.beta), seg::TailRule::FireIfHalf);
      const auto hidden = model.encode_features(tape, feats, {}, state);
      in.anchors = ad::matmul(w, hidden);
      if (opt.segmenter_active) lp = seg::length_penalty(alpha, ty);
      break;
    }
    case Compressor::Cnn: {
      const auto compressed = model.cnn_compress(tape, feats);
      in.anchors = model.encode_features(tape, compressed, {}, state);
      break;
    }
  }

  const auto nll = nll_il(model, tape, targets, in);
  UtteranceLoss<T> out;
  out.total = compose_loss(nll, lp, static_cast<T>(opt.gamma), opt.segmenter_active);
  out.nll = static_cast<double>(nll.value()[0]);
  out.lp = lp ? static_cast<double>(lp->value()[0]) : 0.0;
  out.tokens = targets.size();
  return out;
}

// ---- training ---------------------------------------------------------------------

Trainer::Trainer(const TrainConfig& cfg, Corpus train, std::vector<data::FeatureSequence> valid)
    : cfg_(cfg), train_(std::move(train)), valid_(std::move(valid)) {
  cfg_.validate();
  if (!train_) throw ConfigError("trainer needs a training corpus");
}

double Trainer::validation_loss(const model::Model<float>& model, const LossOptions& opt) const {
  if (valid_.empty()) return 0.0;
  std::vector<double> nll(valid_.size()), tokens(valid_.size());
  parallel_for(valid_.size(), [&](std::size_t i) {
    ad::Tape<float> tape(false);
    LossOptions o = opt;
    o.segmenter_active = false;
    const auto r = utterance_loss(model, tape, valid_[i], o);
    nll[i] = r.nll;
    tokens[i] = static_cast<double>(r.tokens);
  });
  return std::accumulate(nll.begin(), nll.end(), 0.0) / std::accumulate(tokens.begin(), tokens.end(), 0.0);
}

StageLog Trainer::run_stage(model::Model<float>& model, const StageSpec& spec) {
  StageLog log;
  log.name = spec.name;
  auto& params = model.params();
  params.set_trainable("", true);
  if (!spec.train_frontend) params.set_trainable("frontend.", false);
  if (!spec.train_segmenter) params.set_trainable("seg.", false);
  if (spec.max_steps == 0) return log;

  const std::size_t b = cfg_.batch;
  std::vector<ad::GradientBuffer<float>> per_utt;
  per_utt.reserve(b);
  for (std::size_t i = 0; i < b; ++i) per_utt.emplace_back(params);
  ad::GradientBuffer<float> grads(params);
  ad::AdamState<float> adam, seg_adam;
  // A scaled segmenter rate takes a second Adam step over seg.* alone.
  const bool split_seg = spec.train_segmenter && spec.segmenter_lr_scale != 1.0;
  std::vector<double> losses(b), tokens(b);
  std::vector<data::FeatureSequence> batch(b);

  for (std::size_t step = 0; step < spec.max_steps; ++step) {
    for (std::size_t i = 0; i < b; ++i) batch[i] = train_((global_step_ * b + i) % cfg_.train_size);
    try {
      parallel_for(b, [&](std::size_t i) {
        per_utt[i].zero();
        ad::Tape<float> tape;
        const auto r = utterance_loss(model, tape, batch[i], spec.loss);
        losses[i] = static_cast<double>(r.total.value()[0]);
        tokens[i] = static_cast<double>(r.tokens);
        if (std::isfinite(losses[i])) {
          tape.backward(r.total);
          per_utt[i].accumulate(tape, params);
        }
      });
    } catch (const TrainingError& e) {
      throw TrainingError("non-finite loss in " + spec.name + " at step " + std::to_string(step) + ": " + e.what());
    }
    const double total_tokens = std::accumulate(tokens.begin(), tokens.end(), 0.0);
    const double loss = std::accumulate(losses.begin(), losses.end(), 0.0) / total_tokens;
    if (!std::isfinite(loss)) {
      throw TrainingError("non-finite loss in " + spec.name + " at step " + std::to_string(step));
    }
    grads.zero();
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t p = 0; p < grads.size(); ++p) {
        auto& dst = grads[p].data;
        const auto& src = per_utt[i][p].data;
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
      }
    }
    grads.scale(static_cast<float>(1.0 / total_tokens));
    if (cfg_.clip > 0) {
      const double norm = grads.global_norm();
      if (norm > cfg_.clip) grads.scale(static_cast<float>(cfg_.clip / norm));
    }
    ad::AdamConfig ac;
    ac.lr = spec.lr;
    if (cfg_.warmup > 0) ac.lr *= std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(cfg_.warmup));
    if (cfg_.lr_floor < 1) {
      const double progress = static_cast<double>(step) / static_cast<double>(spec.max_steps);
      ac.lr *= cfg_.lr_floor + (1 - cfg_.lr_floor) * 0.5 * (1 + std::cos(std::numbers::pi * progress));
    }
    try {
      if (split_seg) {
        params.set_trainable("seg.", false);
        ad::adam_step(params, grads, adam, ac);
        params.set_trainable("", false);
        params.set_trainable("seg.", true);
        ad::AdamConfig sc = ac;
        sc.lr *= spec.segmenter_lr_scale;
        ad::adam_step(params, grads, seg_adam, sc);
        params.set_trainable("", true);
        if (!spec.train_frontend) params.set_trainable("frontend.", false);
      } else {
        ad::adam_step(params, grads, adam, ac);
      }
    } catch (const ad::AutodiffError& e) {
      throw TrainingError("non-finite gradient in " + spec.name + " at step " + std::to_string(step) + ": " +
                          e.what());
    }
    ++global_step_;
    ++log.steps;
    log.train_loss.push_back(loss);

    if (spec.plateau_stop && (step + 1) % cfg_.eval_every == 0) {
      log.valid_loss.push_back(validation_loss(model, spec.loss));
      const auto& v = log.valid_loss;
      if (v.size() > cfg_.patience) {
        const auto split = v.end() - static_cast<std::ptrdiff_t>(cfg_.patience);
        const double before = *std::min_element(v.begin(), split);
        const double recent = *std::min_element(split, v.end());
        if (before - recent < cfg_.plateau_delta) {
          log.plateaued = true;
          break;
        }
      }
    }
  }
  if (!spec.plateau_stop) log.valid_loss.push_back(validation_loss(model, spec.loss));
  return log;
}

namespace {

LossOptions base_loss(const TrainConfig& cfg, double rate) {
  LossOptions o;
  o.rate = rate;
  o.beta = cfg.beta;
  o.gamma = cfg.gamma;
  o.wait_k = cfg.wait_k;
  return o;
}

double resolved_rate(const TrainConfig& cfg) {
  return cfg.rate > 0 ? cfg.rate : cfg.data.expected_frames_per_token();
}

}  // namespace

StageSpec stage1_spec(const TrainConfig& cfg) {
  StageSpec s;
  s.name = "stage1";
  s.max_steps = cfg.stage1_max_steps;
  s.lr = cfg.lr_stage1;
  s.loss = base_loss(cfg, resolved_rate(cfg));
  s.plateau_stop = true;
  s.train_frontend = true;
  s.train_segmenter = false;
  return s;
}

StageSpec stage2_spec(const TrainConfig& cfg, double rate) {
  StageSpec s;
  s.name = "stage2";
  s.max_steps = cfg.segmenter_steps;
  s.lr = cfg.lr_stage2;
  s.loss = base_loss(cfg, rate);
  s.loss.segmenter_active = cfg.method == Compressor::Star || cfg.method == Compressor::Cif;
  s.train_frontend = false;
  s.train_segmenter = true;
  s.segmenter_lr_scale = cfg.segmenter_lr_scale;
  return s;
}

StageSpec stage3_spec(const TrainConfig& cfg, double rate) {
  StageSpec s;
  s.name = "stage3";
  s.max_steps = cfg.stage3_steps;
  s.lr = cfg.lr_stage3;
  s.loss = base_loss(cfg, rate);
  s.loss.anchors = cfg.streaming && cfg.method == Compressor::Star ? AnchorMode::Threshold : AnchorMode::TopK;
  s.train_frontend = false;
  s.train_segmenter = false;
  return s;
}

TrainResult train_loop(const TrainConfig& cfg, const Corpus& train, const std::vector<data::FeatureSequence>& valid) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  {
    std::ofstream c(out / "config.txt");
    c << cfg.canonical();
    std::ofstream f(out / "fingerprint");
    f << cfg.fingerprint_hex() << '\n';
  }
  std::ofstream logf(out / "train_log.jsonl", std::ios::trunc);
  auto write_log = [&](const StageLog& s) {
    for (std::size_t i = 0; i < s.train_loss.size(); ++i) {
      logf << nlohmann::json{{"stage", s.name}, {"step", i}, {"loss", s.train_loss[i]}}.dump() << '\n';
    }
    for (std::size_t i = 0; i < s.valid_loss.size(); ++i) {
      logf << nlohmann::json{{"stage", s.name}, {"eval", i}, {"valid_loss", s.valid_loss[i]}}.dump() << '\n';
    }
    logf.flush();
  };

  TrainResult result;
  result.rate = resolved_rate(cfg);
  Trainer trainer(cfg, train, valid);
  auto run = [&](model::Model<float>& m, const StageSpec& spec) {
    try {
      auto log = trainer.run_stage(m, spec);
      write_log(log);
      result.stages.push_back(std::move(log));
    } catch (const TrainingError& e) {
      logf << nlohmann::json{{"stage", spec.name}, {"error", e.what()}}.dump() << '\n';
      throw;
    }
  };
  auto save = [&](const model::Model<float>& m, const std::string& name) {
    const auto path = (out / name).string();
    m.save(path);
    result.checkpoints.push_back(path);
  };

  model::Model<float> base(cfg.model_config(Compressor::None), cfg.seed);
  save(base, "init.ckpt");
  run(base, stage1_spec(cfg));
  save(base, "stage1.ckpt");
  if (cfg.method == Compressor::None) {
    save(base, "final.ckpt");
    return result;
  }
  model::Model<float> m(cfg.model_config(cfg.method), cfg.seed);
  model::copy_matching(base, m);
  run(m, stage2_spec(cfg, result.rate));
  save(m, "stage2.ckpt");
  run(m, stage3_spec(cfg, result.rate));
  save(m, "stage3.ckpt");
  save(m, "final.ckpt");
  return result;
}

// ---- splits -----------------------------------------------------------------------

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "valid") return Split::Valid;
  if (name == "test") return Split::Test;
  throw ConfigError("unknown split '" + name + "' (expected train, valid or test)");
}

std::size_t split_first(const TrainConfig& cfg, Split s) {
  switch (s) {
    case Split::Train: return 0;
    case Split::Valid: return cfg.train_size;
    case Split::Test: return cfg.train_size + cfg.valid_size;
  }
  return 0;
}

std::size_t split_size(const TrainConfig& cfg, Split s) {
  switch (s) {
    case Split::Train: return cfg.train_size;
    case Split::Valid: return cfg.valid_size;
    case Split::Test: return cfg.test_size;
  }
  return 0;
}

std::vector<data::FeatureSequence> make_split(const TrainConfig& cfg, Split s) {
  if (split_size(cfg, s) == 0) throw ConfigError(to_string(s) + " split is empty");
  return data::generate(cfg.data, split_size(cfg, s), split_first(cfg, s));
}

Corpus train_corpus(const TrainConfig& cfg) {
  auto templates = std::make_shared<const Tensor<float>>(data::token_templates(cfg.data));
  const auto dc = cfg.data;
  const std::size_t n = cfg.train_size;
  return [templates, dc, n](std::size_t i) { return data::generate_one(dc, *templates, i % n); };
}

double expected_target_length(const TrainConfig& cfg) {
  return 0.5 * static_cast<double>(cfg.data.tokens_min + cfg.data.tokens_max);
}

// ---- evaluation -----------------------------------------------------------------

std::string to_string(EvalKind k) {
  switch (k) {
    case EvalKind::OfflineFull: return "offline-full";
    case EvalKind::OfflineTopK: return "offline-topk";
    case EvalKind::Stream: return "stream";
    case EvalKind::FixedSeg: return "fixed-seg";
    case EvalKind::AllCache: return "all-cache";
  }
  return "?";
}

namespace {

EvalMode with_kind(EvalKind k) {
  EvalMode m;
  m.kind = k;
  return m;
}

}  // namespace

EvalMode EvalMode::offline_full() { return with_kind(EvalKind::OfflineFull); }
EvalMode EvalMode::fixed_seg() { return with_kind(EvalKind::FixedSeg); }
EvalMode EvalMode::all_cache() { return with_kind(EvalKind::AllCache); }

EvalMode EvalMode::offline_topk(double rate) {
  auto m = with_kind(EvalKind::OfflineTopK);
  m.rate = rate;
  return m;
}

EvalMode EvalMode::stream(const engine::Policy& policy) {
  auto m = with_kind(EvalKind::Stream);
  m.policy = policy;
  return m;
}

std::string EvalMode::describe() const {
  switch (kind) {
    case EvalKind::OfflineTopK: {
      std::ostringstream os;
      os << "offline-topk(r=" << rate << ")";
      return os.str();
    }
    case EvalKind::Stream: return "stream(" + policy.describe() + ")";
    default: return to_string(kind);
  }
}

template <typename T>
OfflineAnchors<T> offline_anchors(const model::Model<T>& model, const data::FeatureSequence& seq, const EvalMode& mode) {
  const auto c = model.config().compressor;
  const std::size_t tx = seq.frame_count();
  if (tx == 0) throw ShapeError("empty utterance");
  auto incompatible = [&] {
    return model::ModelError(mode.describe() + " is not defined for a " + model::to_string(c) + " model");
  };
  ad::Tape<T> tape(false);
  const Tensor<T> frames = seq.frames.template cast<T>();
  const auto feats = model.features(tape, frames);
  model::EncoderState<T> state;
  OfflineAnchors<T> out;

  auto star_at = [&](const std::vector<double>& sv, std::span<const std::size_t> idx) {
    const auto hidden = model.encode_features(tape, feats, flags_at<T>(tx, idx), state);
    out.anchors = seg::anchor_aggregate(hidden.value(), idx);
    for (auto i : idx) out.scores.push_back(static_cast<T>(sv[i]));
  };

  switch (mode.kind) {
    case EvalKind::Stream:
      throw model::ModelError("stream mode has no offline anchors");
    case EvalKind::OfflineFull:
      if (c == Compressor::None) {
        out.anchors = model.encode_features(tape, feats, {}, state).value();
      } else if (c == Compressor::Cnn) {
        out.anchors = model.encode_features(tape, model.cnn_compress(tape, feats), {}, state).value();
      } else {
        throw incompatible();
      }
      return out;
    case EvalKind::AllCache:
      if (c == Compressor::Cnn) throw incompatible();
      if (c == Compressor::Star) {
        const auto s = model.segment_scores(tape, feats);
        std::vector<std::size_t> all(tx);
        std::iota(all.begin(), all.end(), std::size_t{0});
        star_at(values_of(s), all);
      } else {
        out.anchors = model.encode_features(tape, feats, {}, state).value();
      }
      return out;
    case EvalKind::OfflineTopK: {
      if (!(mode.rate >= 1)) throw model::ModelError("rate override must be >= 1");
      const std::size_t k = seg::anchors_from_rate(tx, mode.rate);
      if (c == Compressor::Star) {
        const auto s = model.segment_scores(tape, feats);
        const auto sv = values_of(s);
        star_at(sv, seg::select_top_k(sv, k));
      } else if (c == Compressor::Cif) {
        const auto sv = values_of(model.segment_scores(tape, feats));
        const auto alpha = seg::rescale(seg::gate(sv), k, 1.0);
        const auto segm = seg::cif_segment(alpha, 1.0, seg::TailRule::FireIfHalf);
        const auto hidden = model.encode_features(tape, feats, {}, state).value().template cast<double>();
        out.anchors = seg::cif_aggregate(hidden, alpha, segm).template cast<T>();
      } else {
        throw incompatible();
      }
      return out;
    }
    case EvalKind::FixedSeg: {
      if (c == Compressor::Cnn) throw incompatible();
      const auto bounds = seg::uniform_boundaries(tx, seq.tokens.size());
      if (c == Compressor::Star) {
        const auto s = model.segment_scores(tape, feats);
        star_at(values_of(s), bounds);
      } else if (c == Compressor::Cif) {
        const auto alpha = seg::gate(values_of(model.segment_scores(tape, feats)));
        const auto hidden = model.encode_features(tape, feats, {}, state).value();
        out.anchors = Tensor<T>::matrix(bounds.size(), hidden.cols());
        std::size_t start = 0;
        for (std::size_t m = 0; m < bounds.size(); ++m) {
          double mass = 0;
          for (std::size_t t = start; t <= bounds[m]; ++t) mass += alpha[t];
          for (std::size_t t = start; t <= bounds[m]; ++t) {
            const T w = static_cast<T>(alpha[t] / mass);
            for (std::size_t j = 0; j < hidden.cols(); ++j) out.anchors.at(m, j) += w * hidden.at(t, j);
          }
          start = bounds[m] + 1;
        }
      } else {
        const auto hidden = model.encode_features(tape, feats, {}, state).value();
        out.anchors = seg::anchor_aggregate(hidden, bounds);
      }
      return out;
    }
  }
  return out;
}

template <typename T>
EvalReport evaluate_mode(const model::Model<T>& model, const EvalMode& mode,
                         const std::vector<data::FeatureSequence>& corpus, double expected_ty) {
  if (corpus.empty()) throw model::ModelError("evaluation corpus is empty");
  if (mode.kind == EvalKind::Stream) mode.policy.validate();
  const std::size_t max_len =
      mode.max_out_len > 0 ? mode.max_out_len
                           : std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(2.0 * expected_ty)));
  const std::size_t n = corpus.size();
  std::vector<double> edits(n), refs(n), dal(n), f1(n), frames(n), rows(n);
  EvalReport report;
  report.mode = mode.describe();
  report.utterances = n;
  report.hypotheses.resize(n);

  parallel_for(n, [&](std::size_t i) {
    const auto& seq = corpus[i];
    refs[i] = static_cast<double>(seq.tokens.size());
    frames[i] = static_cast<double>(seq.frame_count());
    std::vector<int> hyp;
    if (mode.kind == EvalKind::Stream) {
      const auto r = engine::run_stream(model, mode.policy, seq.frames.template cast<T>(), max_len);
      hyp = r.hypothesis;
      rows[i] = static_cast<double>(r.anchors);
      const auto delays = r.trace.token_delays();
      dal[i] = delays.empty() ? frames[i] : metrics::dal_from_delays(delays, frames[i]);
      f1[i] = metrics::boundary_f1(r.boundaries, seq.boundaries, 1).f1;
    } else {
      const auto a = offline_anchors(model, seq, mode);
      rows[i] = static_cast<double>(a.anchors.rows());
      hyp = model.greedy(a.anchors, a.scores, max_len);
    }
    edits[i] = static_cast<double>(metrics::edit_distance(seq.tokens, hyp));
    report.hypotheses[i] = std::move(hyp);
  });

  auto total = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); };
  report.token_error = total(edits) / total(refs);
  report.realized_rate = total(frames) / std::max(1.0, total(rows));
  if (mode.kind == EvalKind::Stream) {
    report.dal = total(dal) / static_cast<double>(n);
    report.boundary_f1 = total(f1) / static_cast<double>(n);
  }
  return report;
}

std::vector<metrics::MetricRecord> to_records(const EvalReport& report, const std::string& fingerprint) {
  std::vector<metrics::MetricRecord> out{{"token_error", report.token_error, fingerprint, report.mode},
                                         {"realized_rate", report.realized_rate, fingerprint, report.mode}};
  if (report.mode.rfind("stream", 0) == 0) {
    out.push_back({"dal", report.dal, fingerprint, report.mode});
    out.push_back({"boundary_f1", report.boundary_f1, fingerprint, report.mode});
  }
  return out;
}

#define STAR_INSTANTIATE(T)                                                                                        \
  template ad::Var<T> nll_il(const model::Model<T>&, ad::Tape<T>&, std::span<const int>,                          \
                             const model::DecoderInputs<T>&);                                                      \
  template ad::Var<T> compose_loss(const ad::Var<T>&, const std::optional<ad::Var<T>>&, T, bool);                 \
  template UtteranceLoss<T> utterance_loss(const model::Model<T>&, ad::Tape<T>&, const data::FeatureSequence&,    \
                                           const LossOptions&);                                                    \
  template OfflineAnchors<T> offline_anchors(const model::Model<T>&, const data::FeatureSequence&, const EvalMode&); \
  template EvalReport evaluate_mode(const model::Model<T>&, const EvalMode&,                                       \
                                    const std::vector<data::FeatureSequence>&, double);

STAR_INSTANTIATE(float)
STAR_INSTANTIATE(double)

#undef STAR_INSTANTIATE

}  // namespace star::train
