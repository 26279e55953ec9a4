#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "star/autodiff.hpp"
#include "star/optim.hpp"
#include "star/segmentation.hpp"

namespace star::model {

class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kFirstToken = 3;

enum class Compressor : std::uint32_t { None = 0, Star = 1, Cif = 2, Cnn = 3 };

using star::to_string;
std::string to_string(Compressor c);
Compressor compressor_from_string(const std::string& name);

// Greedy choice over the symbols a decoder may emit (EOS and real tokens);
// PAD and BOS never win.
template <typename T>
int best_token(std::span<const T> logits) {
  int best = kEos;
  for (std::size_t v = kFirstToken; v < logits.size(); ++v) {
    if (logits[v] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(v);
  }
  return best;
}

struct ModelConfig {
  std::size_t d_in = 32;
  std::size_t d = 64;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t heads = 4;
  std::size_t ffn = 128;
  std::size_t vocab = 67;
  std::size_t max_positions = 1024;  // encoder
  std::size_t max_target = 256;      // decoder
  Compressor compressor = Compressor::None;
  std::size_t cnn_rate = 6;          // only read when compressor == Cnn

  static ModelConfig desk();
  static ModelConfig paper();
  // Small enough for unit tests and smoke runs.
  static ModelConfig tiny();

  std::size_t d_head() const { return d / heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Per-layer key/value rows for frames already encoded.
template <typename T>
struct EncoderState {
  std::vector<Tensor<T>> keys;
  std::vector<Tensor<T>> values;
  std::size_t frames = 0;
  std::vector<T> prev_frame;  // last raw frame seen by the frontend; empty = zeros
};

// Filled by the decoder when requested: post-injection cross-attention
// logits, one Var per (layer, head), each [queries x keys].
template <typename T>
struct CrossAttentionCapture {
  std::vector<ad::Var<T>> logits;
};

template <typename T>
struct DecoderInputs {
  ad::Var<T> anchors;                     // Z [k x d]
  std::optional<ad::Var<T>> scores;       // injected into every cross-attention logit column
  std::vector<std::size_t> visible;       // anchors visible to each query row; empty = all
};

template <typename T>
class Model {
 public:
  explicit Model(ModelConfig cfg, std::uint64_t seed = 0);
  // Parameter handles point into params_, so copies go through clone().
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model clone() const;

  const ModelConfig& config() const { return cfg_; }
  ad::ParameterSet<T>& params() { return params_; }
  const ad::ParameterSet<T>& params() const { return params_; }

  // f_t = W_cur x_t + W_prev x_{t-1} + b; frames [T x d_in] -> [T x d].
  // `prev` is the frame before frames[0] (zeros when empty).
  ad::Var<T> features(ad::Tape<T>& tape, const Tensor<T>& frames, std::span<const T> prev = {}) const;

  // Raw segmenter scores s over features [T x d] -> [T].
  ad::Var<T> segment_scores(ad::Tape<T>& tape, const ad::Var<T>& features) const;

  // Causal encoder over features with anchor flags; extends `state`.
  ad::Var<T> encode_features(ad::Tape<T>& tape, const ad::Var<T>& features,
                             std::span<const std::uint8_t> anchor_flags, EncoderState<T>& state) const;

  // Frontend + encoder for a block of raw frames [b x d_in].
  ad::Var<T> encode_causal(ad::Tape<T>& tape, const Tensor<T>& frames,
                           std::span<const std::uint8_t> anchor_flags, EncoderState<T>& state) const;

  // Strided convolution stack over frontend features, ahead of the encoder
  // (Cnn models only).
  ad::Var<T> cnn_compress(ad::Tape<T>& tape, const ad::Var<T>& hidden) const;

  // Teacher-forced decoder; `tokens` is the input prefix starting with BOS.
  // Returns logits [tokens.size() x V].
  ad::Var<T> decode(ad::Tape<T>& tape, std::span<const int> tokens, const DecoderInputs<T>& in,
                    CrossAttentionCapture<T>* capture = nullptr) const;

  // Per-head S = (Z W_K)(Y W_Q)^T / sqrt(d_head), each [k x T_y], for one
  // decoder layer's cross-attention.
  std::vector<ad::Var<T>> cross_attention_scores(ad::Tape<T>& tape, std::size_t layer,
                                                 const ad::Var<T>& anchors, const ad::Var<T>& queries) const;

  // Next-token logits [V] after `prefix`, visible anchors as given.
  std::vector<T> decode_step(std::span<const int> prefix, const Tensor<T>& anchors,
                             std::span<const T> scores, std::span<const std::size_t> visible) const;

  // Greedy decoding over a fixed anchor set, all anchors visible.
  std::vector<int> greedy(const Tensor<T>& anchors, std::span<const T> scores, std::size_t max_len) const;

  void save(const std::string& path) const;
  static Model load(const std::string& path);

  seg::SegmenterWeights<T> segmenter() const;

 private:
  struct Attention {
    const ad::Parameter<T>* wq;
    const ad::Parameter<T>* wk;
    const ad::Parameter<T>* wv;
    const ad::Parameter<T>* wo;
  };
  struct Norm {
    const ad::Parameter<T>* gamma;
    const ad::Parameter<T>* beta;
  };
  struct Ffn {
    const ad::Parameter<T>* w1;
    const ad::Parameter<T>* b1;
    const ad::Parameter<T>* w2;
    const ad::Parameter<T>* b2;
  };
  struct EncLayer {
    Norm ln1, ln2;
    Attention attn;
    Ffn ffn;
  };
  struct DecLayer {
    Norm ln1, ln2, ln3;
    Attention self, cross;
    Ffn ffn;
  };

  void build(std::uint64_t seed);
  // Normal(0, stddev) entries, or the constant `fill` when stddev == 0.
  const ad::Parameter<T>* add(const std::string& name, Shape shape, double stddev, std::mt19937_64& rng,
                              T fill = T{0});
  Norm add_norm(const std::string& name);
  Attention add_attention(const std::string& name, std::mt19937_64& rng);
  Ffn add_ffn(const std::string& name, std::mt19937_64& rng);

  ad::Var<T> norm(ad::Tape<T>& tape, const Norm& n, const ad::Var<T>& x) const;
  ad::Var<T> ffn(ad::Tape<T>& tape, const Ffn& f, const ad::Var<T>& x) const;
  // Multi-head attention; `visible[r]` keys are visible to query row r
  // (prefix masks only). `scores`, when given, is added to every head.
  ad::Var<T> attend(ad::Tape<T>& tape, const Attention& a, const ad::Var<T>& q_in, const ad::Var<T>& k,
                    const ad::Var<T>& v, std::span<const std::size_t> visible,
                    const std::optional<ad::Var<T>>& scores, CrossAttentionCapture<T>* capture) const;

  ModelConfig cfg_;
  ad::ParameterSet<T> params_;
  const ad::Parameter<T>* front_cur_ = nullptr;
  const ad::Parameter<T>* front_prev_ = nullptr;
  const ad::Parameter<T>* front_bias_ = nullptr;
  seg::SegmenterWeights<T> seg_;
  const ad::Parameter<T>* anchor_embedding_ = nullptr;
  std::vector<EncLayer> enc_;
  Norm enc_final_{};
  std::vector<seg::ConvBlockWeights<T>> cnn_;
  const ad::Parameter<T>* tok_embedding_ = nullptr;
  std::vector<DecLayer> dec_;
  Norm dec_final_{};
  const ad::Parameter<T>* out_w_ = nullptr;
  const ad::Parameter<T>* out_b_ = nullptr;
};

// Sinusoidal position encodings for positions [start, start + count).
template <typename T>
Tensor<T> positional_encoding(std::size_t start, std::size_t count, std::size_t d);

// Visibility [anchors x T_y]: output t (1-based) sees anchor j iff
// j <= min(t + wait_k - 1, anchors).
std::vector<std::vector<bool>> build_il_mask(std::size_t target_len, std::size_t anchors, std::size_t wait_k);

// Per-row visible anchor counts under the same rule.
std::vector<std::size_t> il_visible_counts(std::size_t target_len, std::size_t anchors, std::size_t wait_k);

// S~[i][j] = S[i][j] + s[i] for S [k x T_y].
Tensor<double> inject_scores(const Tensor<double>& s_matrix, std::span<const double> scores);

// Copies every parameter value from `src` into `dst` (same names), e.g. to
// start a compressed model from an uncompressed one. Returns the number of
// parameters copied.
template <typename T>
std::size_t copy_matching(const Model<T>& src, Model<T>& dst);

}  // namespace star::model
