#include "star/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "star/binary_io.hpp"

namespace star::model {

namespace {

constexpr char kCheckpointMagic[8] = {'S', 'T', 'A', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kCheckpointVersion = 1;

// Row r of a [rows x keys] logit matrix keeps its first visible[r] entries.
std::vector<std::uint8_t> prefix_mask(std::span<const std::size_t> visible, std::size_t keys) {
  std::vector<std::uint8_t> mask(visible.size() * keys, 0);
  for (std::size_t r = 0; r < visible.size(); ++r) {
    std::fill_n(mask.begin() + r * keys, std::min(visible[r], keys), std::uint8_t{1});
  }
  return mask;
}

}  // namespace

std::string to_string(Compressor c) {
  switch (c) {
    case Compressor::None: return "none";
    case Compressor::Star: return "star";
    case Compressor::Cif: return "cif";
    case Compressor::Cnn: return "cnn";
  }
  return "unknown";
}

Compressor compressor_from_string(const std::string& name) {
  if (name == "none") return Compressor::None;
  if (name == "star") return Compressor::Star;
  if (name == "cif") return Compressor::Cif;
  if (name == "cnn") return Compressor::Cnn;
  throw ModelError("unknown compressor '" + name + "' (expected none, star, cif or cnn)");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.d = 512;
  c.enc_layers = 4;
  c.dec_layers = 4;
  c.heads = 8;
  c.ffn = 2048;
  c.max_positions = 1024;
  c.max_target = 512;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.d = 16;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.heads = 2;
  c.ffn = 32;
  return c;
}

void ModelConfig::validate() const {
  if (d == 0 || heads == 0 || d % heads != 0) {
    throw ModelError("hidden dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                     " heads");
  }
  if (vocab < 4) throw ModelError("vocabulary must hold PAD, BOS, EOS and at least one token");
  if (d_in == 0 || ffn == 0 || enc_layers == 0 || dec_layers == 0) {
    throw ModelError("model dimensions and layer counts must be positive");
  }
  if (max_positions == 0 || max_target == 0) throw ModelError("position limits must be positive");
  if (compressor == Compressor::Cnn && cnn_rate == 0) throw ModelError("cnn rate must be >= 1");
}

template <typename T>
Tensor<T> positional_encoding(std::size_t start, std::size_t count, std::size_t d) {
  Tensor<T> pe = Tensor<T>::matrix(count, d);
  for (std::size_t r = 0; r < count; ++r) {
    const double pos = static_cast<double>(start + r);
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe.at(r, i) = static_cast<T>(std::sin(pos * freq));
      if (i + 1 < d) pe.at(r, i + 1) = static_cast<T>(std::cos(pos * freq));
    }
  }
  return pe;
}

std::vector<std::size_t> il_visible_counts(std::size_t target_len, std::size_t anchors, std::size_t wait_k) {
  if (wait_k == 0) throw ModelError("wait-k must be >= 1");
  std::vector<std::size_t> out(target_len);
  for (std::size_t t = 1; t <= target_len; ++t) out[t - 1] = std::min(t + wait_k - 1, anchors);
  return out;
}

std::vector<std::vector<bool>> build_il_mask(std::size_t target_len, std::size_t anchors, std::size_t wait_k) {
  const auto counts = il_visible_counts(target_len, anchors, wait_k);
  std::vector<std::vector<bool>> mask(anchors, std::vector<bool>(target_len, false));
  for (std::size_t t = 0; t < target_len; ++t) {
    for (std::size_t j = 0; j < counts[t]; ++j) mask[j][t] = true;
  }
  return mask;
}

Tensor<double> inject_scores(const Tensor<double>& s_matrix, std::span<const double> scores) {
  if (s_matrix.rank() != 2 || s_matrix.shape[0] != scores.size()) {
    throw ShapeError("injecting " + std::to_string(scores.size()) + " scores into logits " +
                     to_string(s_matrix.shape));
  }
  Tensor<double> out = s_matrix;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    for (auto& v : out.row(i)) v += scores[i];
  }
  return out;
}

// ---- construction ------------------------------------------------------------

template <typename T>
Model<T>::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  build(seed);
}

template <typename T>
Model<T> Model<T>::clone() const {
  Model copy(cfg_, 0);
  copy_matching(*this, copy);
  for (std::size_t i = 0; i < params_.size(); ++i) copy.params_[i].trainable = params_[i].trainable;
  return copy;
}

template <typename T>
const ad::Parameter<T>* Model<T>::add(const std::string& name, Shape shape, double stddev,
                                      std::mt19937_64& rng, T fill) {
  Tensor<T> init(std::move(shape), fill);
  if (stddev > 0) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : init.data) v = static_cast<T>(dist(rng));
  }
  return &params_.add(name, std::move(init));
}

template <typename T>
typename Model<T>::Norm Model<T>::add_norm(const std::string& name) {
  std::mt19937_64 unused;
  return {add(name + ".gamma", {cfg_.d}, 0.0, unused, T{1}), add(name + ".beta", {cfg_.d}, 0.0, unused)};
}

template <typename T>
typename Model<T>::Attention Model<T>::add_attention(const std::string& name, std::mt19937_64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(cfg_.d));
  return {add(name + ".wq", {cfg_.d, cfg_.d}, s, rng), add(name + ".wk", {cfg_.d, cfg_.d}, s, rng),
          add(name + ".wv", {cfg_.d, cfg_.d}, s, rng), add(name + ".wo", {cfg_.d, cfg_.d}, s, rng)};
}

template <typename T>
typename Model<T>::Ffn Model<T>::add_ffn(const std::string& name, std::mt19937_64& rng) {
  return {add(name + ".w1", {cfg_.d, cfg_.ffn}, 1.0 / std::sqrt(static_cast<double>(cfg_.d)), rng),
          add(name + ".b1", {cfg_.ffn}, 0.0, rng),
          add(name + ".w2", {cfg_.ffn, cfg_.d}, 1.0 / std::sqrt(static_cast<double>(cfg_.ffn)), rng),
          add(name + ".b2", {cfg_.d}, 0.0, rng)};
}

template <typename T>
void Model<T>::build(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg_.d;
  const double inv_d = 1.0 / std::sqrt(static_cast<double>(d));

  front_cur_ = add("frontend.w_cur", {cfg_.d_in, d}, 1.0, rng);
  front_prev_ = add("frontend.w_prev", {cfg_.d_in, d}, 1.0, rng);
  front_bias_ = add("frontend.b", {d}, 0.0, rng);

  seg_.w1 = add("seg.w1", {d, d}, inv_d, rng);
  seg_.w1p = add("seg.w1p", {d, d}, 0.0, rng);  // zero: starts as a one-frame scorer
  seg_.b1 = add("seg.b1", {d}, 0.0, rng);
  seg_.w2 = add("seg.w2", {d, 1}, inv_d, rng);
  seg_.b2 = add("seg.b2", {1}, 0.0, rng);

  anchor_embedding_ = add("anchor.e", {d}, 0.5, rng);

  for (std::size_t l = 0; l < cfg_.enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    EncLayer layer;
    layer.ln1 = add_norm(p + ".ln1");
    layer.attn = add_attention(p + ".attn", rng);
    layer.ln2 = add_norm(p + ".ln2");
    layer.ffn = add_ffn(p + ".ffn", rng);
    enc_.push_back(layer);
  }
  enc_final_ = add_norm("enc.final");

  if (cfg_.compressor == Compressor::Cnn) {
    const auto strides = seg::StrideConfig::for_rate(cfg_.cnn_rate);
    for (std::size_t b = 0; b < strides.blocks.size(); ++b) {
      const std::string p = "cnn." + std::to_string(b);
      const auto& spec = strides.blocks[b];
      const std::size_t rk = strides.residual_kernel;
      seg::ConvBlockWeights<T> w;
      w.spec = spec;
      w.weight = add(p + ".w", {spec.kernel * d, d}, 1.0 / std::sqrt(static_cast<double>(spec.kernel * d)), rng);
      w.bias = add(p + ".b", {d}, 0.0, rng);
      w.res1_weight = add(p + ".r1.w", {rk * d, d}, 1.0 / std::sqrt(static_cast<double>(rk * d)), rng);
      w.res1_bias = add(p + ".r1.b", {d}, 0.0, rng);
      w.res2_weight = add(p + ".r2.w", {rk * d, d}, 0.1 / std::sqrt(static_cast<double>(rk * d)), rng);
      w.res2_bias = add(p + ".r2.b", {d}, 0.0, rng);
      cnn_.push_back(w);
    }
  }

  tok_embedding_ = add("dec.embed", {cfg_.vocab, d}, 1.0, rng);
  for (std::size_t l = 0; l < cfg_.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    DecLayer layer;
    layer.ln1 = add_norm(p + ".ln1");
    layer.self = add_attention(p + ".self", rng);
    layer.ln2 = add_norm(p + ".ln2");
    layer.cross = add_attention(p + ".cross", rng);
    layer.ln3 = add_norm(p + ".ln3");
    layer.ffn = add_ffn(p + ".ffn", rng);
    dec_.push_back(layer);
  }
  dec_final_ = add_norm("dec.final");
  out_w_ = add("dec.out.w", {d, cfg_.vocab}, inv_d, rng);
  out_b_ = add("dec.out.b", {cfg_.vocab}, 0.0, rng);
}

template <typename T>
seg::SegmenterWeights<T> Model<T>::segmenter() const {
  return seg_;
}

// ---- building blocks ------------------------------------------------------

template <typename T>
ad::Var<T> Model<T>::norm(ad::Tape<T>& tape, const Norm& n, const ad::Var<T>& x) const {
  return ad::layernorm(x, tape.param(*n.gamma), tape.param(*n.beta));
}

template <typename T>
ad::Var<T> Model<T>::ffn(ad::Tape<T>& tape, const Ffn& f, const ad::Var<T>& x) const {
  auto h = ad::relu(ad::add(ad::matmul(x, tape.param(*f.w1)), tape.param(*f.b1)));
  return ad::add(ad::matmul(h, tape.param(*f.w2)), tape.param(*f.b2));
}

template <typename T>
ad::Var<T> Model<T>::attend(ad::Tape<T>& tape, const Attention& a, const ad::Var<T>& q_in,
                            const ad::Var<T>& k, const ad::Var<T>& v, std::span<const std::size_t> visible,
                            const std::optional<ad::Var<T>>& scores, CrossAttentionCapture<T>* capture) const {
  const std::size_t dh = cfg_.d_head();
  const std::size_t keys = k.value().rows();
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
  auto q = ad::matmul(q_in, tape.param(*a.wq));
  std::vector<std::uint8_t> mask;
  bool masked = false;
  for (auto c : visible) masked = masked || c < keys;
  if (masked) mask = prefix_mask(visible, keys);
  std::vector<ad::Var<T>> heads;
  heads.reserve(cfg_.heads);
  for (std::size_t h = 0; h < cfg_.heads; ++h) {
    auto qh = cfg_.heads == 1 ? q : ad::slice_cols(q, h * dh, dh);
    auto kh = cfg_.heads == 1 ? k : ad::slice_cols(k, h * dh, dh);
    auto vh = cfg_.heads == 1 ? v : ad::slice_cols(v, h * dh, dh);
    auto logits = ad::scale(ad::matmul(qh, kh, false, true), inv_sqrt);
    if (scores) logits = ad::add(logits, *scores);
    if (capture != nullptr) capture->logits.push_back(logits);
    if (masked) logits = ad::mask_add(logits, std::span<const std::uint8_t>(mask));
    heads.push_back(ad::matmul(ad::softmax(logits), vh));
  }
  auto joined = heads.size() == 1 ? heads[0] : ad::concat(std::span<const ad::Var<T>>(heads), -1);
  return ad::matmul(joined, tape.param(*a.wo));
}

// ---- encoder ----------------------------------------------------------------

template <typename T>
ad::Var<T> Model<T>::features(ad::Tape<T>& tape, const Tensor<T>& frames, std::span<const T> prev) const {
  if (frames.rank() != 2 || frames.cols() != cfg_.d_in) {
    throw ShapeError("frames " + to_string(frames.shape) + " do not have " + std::to_string(cfg_.d_in) +
                     " channels");
  }
  if (!prev.empty() && prev.size() != cfg_.d_in) {
    throw ShapeError("previous frame has " + std::to_string(prev.size()) + " channels, expected " +
                     std::to_string(cfg_.d_in));
  }
  const std::size_t n = frames.rows(), din = cfg_.d_in;
  Tensor<T> shifted = Tensor<T>::matrix(n, din);
  if (!prev.empty()) std::copy(prev.begin(), prev.end(), shifted.data.begin());
  if (n > 1) std::copy_n(frames.data.begin(), (n - 1) * din, shifted.data.begin() + din);
  auto cur = ad::matmul(tape.constant(frames), tape.param(*front_cur_));
  auto before = ad::matmul(tape.constant(std::move(shifted)), tape.param(*front_prev_));
  return ad::add(ad::add(cur, before), tape.param(*front_bias_));
}

template <typename T>
ad::Var<T> Model<T>::segment_scores(ad::Tape<T>& tape, const ad::Var<T>& feats) const {
  return seg::score_frames(tape, seg_, feats);
}

template <typename T>
ad::Var<T> Model<T>::encode_features(ad::Tape<T>& tape, const ad::Var<T>& feats,
                                     std::span<const std::uint8_t> anchor_flags, EncoderState<T>& state) const {
  const auto& F = feats.value();
  if (F.rank() != 2 || F.cols() != cfg_.d) {
    throw ShapeError("encoder input " + to_string(F.shape) + " does not have width " + std::to_string(cfg_.d));
  }
  const std::size_t b = F.rows(), d = cfg_.d;
  if (!anchor_flags.empty() && anchor_flags.size() != b) {
    throw ShapeError(std::to_string(anchor_flags.size()) + " anchor flags for " + std::to_string(b) + " frames");
  }
  const std::size_t past = state.frames;
  if (past + b > cfg_.max_positions) {
    throw ModelError("encoder position " + std::to_string(past + b) + " exceeds the limit of " +
                     std::to_string(cfg_.max_positions));
  }
  if (state.keys.empty()) {
    state.keys.resize(enc_.size());
    state.values.resize(enc_.size());
  }

  auto x = ad::add(feats, tape.constant(positional_encoding<T>(past, b, d)));
  if (std::any_of(anchor_flags.begin(), anchor_flags.end(), [](std::uint8_t f) { return f != 0; })) {
    Tensor<T> column = Tensor<T>::matrix(b, 1);
    for (std::size_t i = 0; i < b; ++i) column.data[i] = anchor_flags[i] ? T{1} : T{0};
    auto e_row = ad::reshape(tape.param(*anchor_embedding_), {1, d});
    x = ad::add(x, ad::matmul(tape.constant(std::move(column)), e_row));
  }

  std::vector<std::size_t> visible(b);
  for (std::size_t r = 0; r < b; ++r) visible[r] = past + r + 1;

  for (std::size_t l = 0; l < enc_.size(); ++l) {
    const auto& layer = enc_[l];
    auto h = norm(tape, layer.ln1, x);
    auto k = ad::matmul(h, tape.param(*layer.attn.wk));
    auto v = ad::matmul(h, tape.param(*layer.attn.wv));
    ad::Var<T> k_all = k, v_all = v;
    if (past > 0) {
      std::vector<ad::Var<T>> kp{tape.constant(state.keys[l]), k};
      std::vector<ad::Var<T>> vp{tape.constant(state.values[l]), v};
      k_all = ad::concat(std::span<const ad::Var<T>>(kp), 0);
      v_all = ad::concat(std::span<const ad::Var<T>>(vp), 0);
    }
    x = ad::add(x, attend(tape, layer.attn, h, k_all, v_all, visible, std::nullopt, nullptr));
    x = ad::add(x, ffn(tape, layer.ffn, norm(tape, layer.ln2, x)));
    state.keys[l] = k_all.value();
    state.values[l] = v_all.value();
  }
  state.frames = past + b;
  return norm(tape, enc_final_, x);
}

template <typename T>
ad::Var<T> Model<T>::encode_causal(ad::Tape<T>& tape, const Tensor<T>& frames,
                                   std::span<const std::uint8_t> anchor_flags, EncoderState<T>& state) const {
  if (frames.rank() != 2 || frames.rows() == 0) throw ShapeError("encode_causal needs at least one frame");
  auto feats = features(tape, frames, std::span<const T>(state.prev_frame));
  auto out = encode_features(tape, feats, anchor_flags, state);
  const auto last = frames.row(frames.rows() - 1);
  state.prev_frame.assign(last.begin(), last.end());
  return out;
}

template <typename T>
ad::Var<T> Model<T>::cnn_compress(ad::Tape<T>& tape, const ad::Var<T>& hidden) const {
  if (cnn_.empty()) throw ModelError("model was not built with a convolutional compressor");
  return seg::cnn_compress(tape, std::span<const seg::ConvBlockWeights<T>>(cnn_), hidden);
}

// ---- decoder ----------------------------------------------------------------

template <typename T>
std::vector<ad::Var<T>> Model<T>::cross_attention_scores(ad::Tape<T>& tape, std::size_t layer,
                                                         const ad::Var<T>& anchors,
                                                         const ad::Var<T>& queries) const {
  if (layer >= dec_.size()) throw ModelError("decoder layer " + std::to_string(layer) + " out of range");
  if (anchors.value().rows() == 0) throw ModelError("empty anchor cache");
  const auto& a = dec_[layer].cross;
  const std::size_t dh = cfg_.d_head();
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
  auto k = ad::matmul(anchors, tape.param(*a.wk));
  auto q = ad::matmul(queries, tape.param(*a.wq));
  std::vector<ad::Var<T>> out;
  for (std::size_t h = 0; h < cfg_.heads; ++h) {
    auto kh = ad::slice_cols(k, h * dh, dh);
    auto qh = ad::slice_cols(q, h * dh, dh);
    out.push_back(ad::scale(ad::matmul(kh, qh, false, true), inv_sqrt));
  }
  return out;
}

template <typename T>
ad::Var<T> Model<T>::decode(ad::Tape<T>& tape, std::span<const int> tokens, const DecoderInputs<T>& in,
                            CrossAttentionCapture<T>* capture) const {
  if (tokens.empty() || tokens[0] != kBos) throw ModelError("decoder prefix must start with BOS");
  if (tokens.size() > cfg_.max_target) {
    throw ModelError("decoder prefix of " + std::to_string(tokens.size()) + " exceeds the limit of " +
                     std::to_string(cfg_.max_target));
  }
  if (!in.anchors.valid() || in.anchors.value().rows() == 0) throw ModelError("empty anchor cache");
  const auto& Z = in.anchors.value();
  if (Z.rank() != 2 || Z.cols() != cfg_.d) throw ShapeError("anchors " + to_string(Z.shape) + " have wrong width");
  const std::size_t n = tokens.size(), k = Z.rows();
  if (in.scores && in.scores->value().size() != k) {
    throw ShapeError(std::to_string(in.scores->value().size()) + " injected scores for " + std::to_string(k) +
                     " anchors");
  }
  if (!in.visible.empty() && in.visible.size() != n) {
    throw ShapeError("visibility for " + std::to_string(in.visible.size()) + " rows, decoder has " +
                     std::to_string(n));
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab) throw ModelError("token id " + std::to_string(t) + " out of range");
  }

  std::vector<std::size_t> self_visible(n), cross_visible(n, k);
  for (std::size_t r = 0; r < n; ++r) self_visible[r] = r + 1;
  if (!in.visible.empty()) cross_visible = in.visible;

  auto x = ad::add(ad::embed(tape.param(*tok_embedding_), tokens),
                   tape.constant(positional_encoding<T>(0, n, cfg_.d)));
  for (const auto& layer : dec_) {
    auto h = norm(tape, layer.ln1, x);
    auto sk = ad::matmul(h, tape.param(*layer.self.wk));
    auto sv = ad::matmul(h, tape.param(*layer.self.wv));
    x = ad::add(x, attend(tape, layer.self, h, sk, sv, self_visible, std::nullopt, nullptr));
    auto c = norm(tape, layer.ln2, x);
    auto ck = ad::matmul(in.anchors, tape.param(*layer.cross.wk));
    auto cv = ad::matmul(in.anchors, tape.param(*layer.cross.wv));
    x = ad::add(x, attend(tape, layer.cross, c, ck, cv, cross_visible, in.scores, capture));
    x = ad::add(x, ffn(tape, layer.ffn, norm(tape, layer.ln3, x)));
  }
  auto y = norm(tape, dec_final_, x);
  return ad::add(ad::matmul(y, tape.param(*out_w_)), tape.param(*out_b_));
}

template <typename T>
std::vector<T> Model<T>::decode_step(std::span<const int> prefix, const Tensor<T>& anchors,
                                     std::span<const T> scores, std::span<const std::size_t> visible) const {
  ad::Tape<T> tape(false);
  DecoderInputs<T> in;
  in.anchors = tape.constant(anchors);
  if (!scores.empty()) in.scores = tape.constant(Tensor<T>({scores.size()}, std::vector<T>(scores.begin(), scores.end())));
  in.visible.assign(visible.begin(), visible.end());
  auto logits = decode(tape, prefix, in);
  const auto last = logits.value().row(prefix.size() - 1);
  return {last.begin(), last.end()};
}

template <typename T>
std::vector<int> Model<T>::greedy(const Tensor<T>& anchors, std::span<const T> scores, std::size_t max_len) const {
  std::vector<int> prefix{kBos};
  std::vector<int> out;
  while (out.size() < max_len && prefix.size() < cfg_.max_target) {
    const auto logits = decode_step(prefix, anchors, scores, {});
    const int next = best_token<T>(logits);
    if (next == kEos) break;
    out.push_back(next);
    prefix.push_back(next);
  }
  return out;
}

// ---- checkpoints ------------------------------------------------------------

template <typename T>
void Model<T>::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io::FormatError("cannot open '" + path + "' for writing");
  io::write_bytes(out, kCheckpointMagic, sizeof kCheckpointMagic);
  io::write_bytes(out, &kCheckpointVersion, 1);
  const std::size_t fields[] = {cfg_.d_in, cfg_.d, cfg_.enc_layers, cfg_.dec_layers, cfg_.heads, cfg_.ffn,
                                cfg_.vocab, cfg_.max_positions, cfg_.max_target,
                                static_cast<std::size_t>(cfg_.compressor), cfg_.cnn_rate};
  io::write_u32(out, static_cast<std::uint32_t>(std::size(fields)));
  for (auto f : fields) io::write_u32(out, io::to_u32(f, "config field"));
  io::write_u32(out, io::to_u32(params_.size(), "parameter count"));
  for (const auto& p : params_) {
    io::write_u32(out, io::to_u32(p.name.size(), "parameter name"));
    io::write_bytes(out, p.name.data(), p.name.size());
    io::write_u32(out, io::to_u32(p.value.rank(), "rank"));
    for (auto dim : p.value.shape) io::write_u32(out, io::to_u32(dim, "dimension"));
    for (auto v : p.value.data) io::write_f32(out, static_cast<float>(v));
  }
  if (!out) throw io::FormatError("write to '" + path + "' failed");
}

template <typename T>
Model<T> Model<T>::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io::FormatError("cannot open checkpoint '" + path + "'");
  char magic[8];
  io::read_exact(in, magic, sizeof magic, "magic");
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw io::FormatError("'" + path + "' is not a checkpoint (bad magic)");
  }
  std::uint8_t version = 0;
  io::read_exact(in, &version, 1, "version");
  if (version != kCheckpointVersion) {
    throw io::FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t nfields = io::read_u32(in, "config size");
  if (nfields != 11) throw io::FormatError("unexpected config block of " + std::to_string(nfields) + " fields");
  std::size_t f[11];
  for (auto& v : f) v = io::read_u32(in, "config");
  ModelConfig cfg;
  cfg.d_in = f[0];
  cfg.d = f[1];
  cfg.enc_layers = f[2];
  cfg.dec_layers = f[3];
  cfg.heads = f[4];
  cfg.ffn = f[5];
  cfg.vocab = f[6];
  cfg.max_positions = f[7];
  cfg.max_target = f[8];
  if (f[9] > 3) throw io::FormatError("unknown compressor id " + std::to_string(f[9]));
  cfg.compressor = static_cast<Compressor>(f[9]);
  cfg.cnn_rate = f[10];
  Model model(cfg, 0);
  const std::uint32_t count = io::read_u32(in, "parameter count");
  if (count != model.params_.size()) {
    throw io::FormatError("checkpoint holds " + std::to_string(count) + " parameters, model expects " +
                          std::to_string(model.params_.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = io::read_u32(in, "name length");
    if (len > 4096) throw io::FormatError("parameter name too long");
    std::string name(len, '\0');
    io::read_exact(in, name.data(), len, "parameter name");
    auto* p = model.params_.find(name);
    if (p == nullptr) throw io::FormatError("checkpoint parameter '" + name + "' unknown to the model");
    const std::uint32_t rank = io::read_u32(in, "rank");
    Shape shape(rank);
    for (auto& dim : shape) dim = io::read_u32(in, "dimension");
    if (shape != p->value.shape) {
      throw io::FormatError("parameter '" + name + "' has shape " + to_string(shape) + ", model expects " +
                            to_string(p->value.shape));
    }
    for (auto& v : p->value.data) v = static_cast<T>(io::read_f32(in, "parameter values"));
  }
  return model;
}

template <typename T>
std::size_t copy_matching(const Model<T>& src, Model<T>& dst) {
  std::size_t copied = 0;
  for (auto& p : dst.params()) {
    const auto* s = src.params().find(p.name);
    if (s == nullptr || s->value.shape != p.value.shape) continue;
    p.value = s->value;
    ++copied;
  }
  return copied;
}

template class Model<float>;
template class Model<double>;
template Tensor<float> positional_encoding(std::size_t, std::size_t, std::size_t);
template Tensor<double> positional_encoding(std::size_t, std::size_t, std::size_t);
template std::size_t copy_matching(const Model<float>&, Model<float>&);
template std::size_t copy_matching(const Model<double>&, Model<double>&);

}  // namespace star::model
