#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "star/data.hpp"
#include "star/engine.hpp"
#include "star/metrics.hpp"
#include "star/model.hpp"

namespace star::train {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// How a STAR model picks anchors while training.
enum class AnchorMode { TopK, Threshold };

struct TrainConfig {
  std::string profile = "desk";
  model::Compressor method = model::Compressor::Star;
  double rate = 0;           // 0 = corpus mean frames per token
  double gamma = 0.01;
  double beta = 1.0;
  std::size_t wait_k = 1;
  std::size_t batch = 32;
  double lr_stage1 = 3e-4;
  double lr_stage2 = 1e-4;
  double lr_stage3 = 1e-4;
  std::size_t warmup = 100;
  double lr_floor = 1.0;     // cosine decay to lr * lr_floor over each stage; 1 = constant
  double clip = 1.0;
  std::size_t stage1_max_steps = 3000;
  std::size_t eval_every = 100;
  std::size_t patience = 5;
  double plateau_delta = 1e-3;
  std::size_t segmenter_steps = 6000;
  double segmenter_lr_scale = 1.0;  // segmenter lr = stage-2 lr * scale
  std::size_t stage3_steps = 1000;
  bool streaming = false;    // STAR: stage 3 uses threshold anchors + infinite-lookback masks
  std::uint64_t seed = 1;
  std::size_t train_size = 20000;
  std::size_t valid_size = 200;
  std::size_t test_size = 2000;
  std::size_t threads = 0;   // 0 = OpenMP default
  std::string out_dir = "run";
  data::SyntheticConfig data;

  void validate() const;
  model::ModelConfig model_config(model::Compressor compressor) const;
  // Canonical "key = value" text of every setting, in key order.
  std::string canonical() const;
  std::uint64_t fingerprint() const;
  std::string fingerprint_hex() const;
};

// Parses UTF-8 "key = value" lines with # comments into `base`.
// Unknown keys and malformed lines raise ConfigError naming the line.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::string& path, TrainConfig base = {});
// Applies one setting; used by the parser and by command-line overrides.
void set_option(TrainConfig& cfg, const std::string& key, const std::string& value);
std::vector<std::string> option_keys();

// -log P(targets) summed over rows; rows whose target is PAD are skipped.
// `visible` holds the anchor count each row may attend (IL masks).
template <typename T>
ad::Var<T> nll_il(const model::Model<T>& model, ad::Tape<T>& tape, std::span<const int> targets,
                  const model::DecoderInputs<T>& in);

// L = nll + gamma * lp while the segmenter trains, else nll.
double compose_loss(double nll, double lp, double gamma, bool segmenter_active);
template <typename T>
ad::Var<T> compose_loss(const ad::Var<T>& nll, const std::optional<ad::Var<T>>& lp, T gamma, bool segmenter_active);

// Per-utterance training graph for any compressor.
struct LossOptions {
  double rate = 6.0;
  double beta = 1.0;
  double gamma = 0.01;
  std::size_t wait_k = 1;
  AnchorMode anchors = AnchorMode::TopK;
  bool segmenter_active = false;
};

template <typename T>
struct UtteranceLoss {
  ad::Var<T> total;
  double nll = 0;
  double lp = 0;
  std::size_t tokens = 0;  // predicted positions (T_y + 1)
};

template <typename T>
UtteranceLoss<T> utterance_loss(const model::Model<T>& model, ad::Tape<T>& tape, const data::FeatureSequence& seq,
                                const LossOptions& opt);

// Source of training utterances by index.
using Corpus = std::function<data::FeatureSequence(std::size_t)>;

// Train, valid and test are consecutive, disjoint index ranges of the same
// generator, so no split ever repeats an utterance of another.
enum class Split { Train, Valid, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& name);
std::size_t split_first(const TrainConfig& cfg, Split s);
std::size_t split_size(const TrainConfig& cfg, Split s);
std::vector<data::FeatureSequence> make_split(const TrainConfig& cfg, Split s);
// Lazily generated training utterances (index taken modulo train_size).
Corpus train_corpus(const TrainConfig& cfg);
// Mean transcript length the generator produces.
double expected_target_length(const TrainConfig& cfg);

struct StageSpec {
  std::string name;
  std::size_t max_steps = 0;
  double lr = 1e-4;
  LossOptions loss;
  bool plateau_stop = false;      // stop on validation plateau (stage 1)
  bool train_frontend = true;
  bool train_segmenter = false;
  double segmenter_lr_scale = 1.0;
};

struct StageLog {
  std::string name;
  std::size_t steps = 0;
  std::vector<double> train_loss;   // per step, mean per token
  std::vector<double> valid_loss;   // per evaluation
  bool plateaued = false;
};

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, Corpus train, std::vector<data::FeatureSequence> valid);

  // Runs one stage in place; `step_offset` continues the batch schedule.
  StageLog run_stage(model::Model<float>& model, const StageSpec& spec);
  // Mean per-token validation loss under `opt`.
  double validation_loss(const model::Model<float>& model, const LossOptions& opt) const;

  std::size_t steps_taken() const { return global_step_; }

 private:
  TrainConfig cfg_;
  Corpus train_;
  std::vector<data::FeatureSequence> valid_;
  std::size_t global_step_ = 0;
};

// Stage specs derived from a config.
StageSpec stage1_spec(const TrainConfig& cfg);
StageSpec stage2_spec(const TrainConfig& cfg, double rate);
StageSpec stage3_spec(const TrainConfig& cfg, double rate);

struct TrainResult {
  std::vector<StageLog> stages;
  std::vector<std::string> checkpoints;
  double rate = 0;
};

// Full staged recipe: stage 1 uncompressed to plateau, stage 2 compressor +
// segmenter for the segmenter budget, stage 3 fine-tuning with the
// segmenter frozen. Writes stage checkpoints and a JSONL training log
// under cfg.out_dir.
TrainResult train_loop(const TrainConfig& cfg, const Corpus& train, const std::vector<data::FeatureSequence>& valid);

// ---- evaluation -------------------------------------------------------------

enum class EvalKind { OfflineFull, OfflineTopK, Stream, FixedSeg, AllCache };

std::string to_string(EvalKind k);

struct EvalMode {
  EvalKind kind = EvalKind::OfflineFull;
  double rate = 1.0;              // OfflineTopK
  engine::Policy policy;          // Stream
  std::size_t max_out_len = 0;    // 0 = 2 * expected T_y

  static EvalMode offline_full();
  static EvalMode offline_topk(double rate);
  static EvalMode stream(const engine::Policy& policy);
  static EvalMode fixed_seg();
  static EvalMode all_cache();
  std::string describe() const;
};

struct EvalReport {
  std::string mode;
  double token_error = 0;         // corpus-level WER
  double dal = 0;                 // stream mode
  double boundary_f1 = 0;         // stream mode
  double realized_rate = 0;       // frames per cache row
  std::size_t utterances = 0;
  std::vector<std::vector<int>> hypotheses;
};

// Cache rows (and injected scores) a model hands the decoder for one
// utterance under an offline mode.
template <typename T>
struct OfflineAnchors {
  Tensor<T> anchors;
  std::vector<T> scores;  // empty = no injection
};

template <typename T>
OfflineAnchors<T> offline_anchors(const model::Model<T>& model, const data::FeatureSequence& seq, const EvalMode& mode);

template <typename T>
EvalReport evaluate_mode(const model::Model<T>& model, const EvalMode& mode,
                         const std::vector<data::FeatureSequence>& corpus, double expected_ty);

std::vector<metrics::MetricRecord> to_records(const EvalReport& report, const std::string& fingerprint);

}  // namespace star::train
