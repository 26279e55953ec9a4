#include "star/engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

namespace star::engine {

namespace {

using model::Compressor;

double threshold_slack(double beta) { return 64 * std::numeric_limits<double>::epsilon() * (1.0 + beta); }

EventKind kind_from_string(const std::string& s) {
  if (s == "READ") return EventKind::Read;
  if (s == "YIELD") return EventKind::Yield;
  if (s == "EMIT") return EventKind::Emit;
  if (s == "FLUSH") return EventKind::Flush;
  if (s == "EOS") return EventKind::Eos;
  throw EngineError("unknown trace event '" + s + "'");
}

template <typename T>
Tensor<T> stack_rows(const std::vector<std::vector<T>>& rows) {
  const std::size_t d = rows.front().size();
  Tensor<T> out = Tensor<T>::matrix(rows.size(), d);
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), out.data.begin() + r * d);
  return out;
}

}  // namespace

std::string to_string(EventKind k) {
  switch (k) {
    case EventKind::Read: return "READ";
    case EventKind::Yield: return "YIELD";
    case EventKind::Emit: return "EMIT";
    case EventKind::Flush: return "FLUSH";
    case EventKind::Eos: return "EOS";
  }
  return "?";
}

std::string to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::StarThreshold: return "star-threshold";
    case PolicyKind::CifThreshold: return "cif-threshold";
    case PolicyKind::FixedStride: return "fixed-stride";
    case PolicyKind::OfflineTopK: return "offline-topk";
  }
  return "?";
}

// ---- trace ------------------------------------------------------------------

std::size_t TraceLog::count(EventKind k) const {
  return static_cast<std::size_t>(std::count_if(events.begin(), events.end(), [k](const StreamEvent& e) { return e.kind == k; }));
}

std::vector<double> TraceLog::token_delays() const {
  std::vector<double> out;
  for (const auto& e : events) {
    if (e.kind == EventKind::Emit) out.push_back(static_cast<double>(e.step));
  }
  return out;
}

std::vector<std::size_t> TraceLog::segment_lengths() const {
  std::vector<std::size_t> out;
  std::int64_t prev = -1;
  for (const auto& e : events) {
    if (e.kind != EventKind::Yield) continue;
    out.push_back(static_cast<std::size_t>(e.index - prev));
    prev = e.index;
  }
  return out;
}

std::size_t TraceLog::frames_read() const { return count(EventKind::Read); }

void TraceLog::write_jsonl(std::ostream& out) const {
  for (const auto& e : events) {
    out << nlohmann::json{{"kind", to_string(e.kind)}, {"index", e.index}, {"step", e.step}}.dump() << '\n';
  }
}

void TraceLog::write_jsonl(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw EngineError("cannot open '" + path + "' for writing");
  write_jsonl(out);
}

TraceLog TraceLog::read_jsonl(std::istream& in) {
  TraceLog log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    log.events.push_back({kind_from_string(j.at("kind").get<std::string>()), j.at("index").get<std::int64_t>(),
                          j.at("step").get<std::size_t>()});
  }
  return log;
}

std::string TraceLog::check_invariants() const {
  std::int64_t next_read = 0;
  std::size_t reads_since_yield = 0;
  bool flushed = false, ended = false;
  std::size_t last_step = 0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    const std::string at = "event " + std::to_string(i) + " (" + to_string(e.kind) + "): ";
    if (ended) return at + "event after EOS";
    if (e.step < last_step) return at + "step went backwards";
    last_step = e.step;
    const auto expected = static_cast<std::size_t>(next_read) + (e.kind == EventKind::Read ? 1 : 0);
    if (e.step != expected) return at + "step does not match frames read";
    switch (e.kind) {
      case EventKind::Read:
        if (flushed) return at + "READ after FLUSH";
        if (e.index != next_read) return at + "READ index not strictly increasing by one";
        ++next_read;
        ++reads_since_yield;
        break;
      case EventKind::Yield:
        if (!flushed && reads_since_yield == 0) return at + "YIELD without a READ since the previous YIELD";
        if (e.index >= next_read) return at + "YIELD beyond the frames read";
        reads_since_yield = 0;
        break;
      case EventKind::Flush:
        if (flushed) return at + "second FLUSH";
        flushed = true;
        break;
      case EventKind::Eos:
        ended = true;
        break;
      case EventKind::Emit:
        if (count(EventKind::Yield) == 0) return at + "EMIT without any YIELD";
        break;
    }
  }
  return {};
}

// ---- policy -----------------------------------------------------------------

Policy Policy::star(double beta, std::size_t wait_k) { return {PolicyKind::StarThreshold, beta, 1, 1.0, wait_k}; }
Policy Policy::cif(double beta, std::size_t wait_k) { return {PolicyKind::CifThreshold, beta, 1, 1.0, wait_k}; }
Policy Policy::fixed(std::size_t stride, std::size_t wait_k) { return {PolicyKind::FixedStride, 1.0, stride, 1.0, wait_k}; }
Policy Policy::offline(double rate) { return {PolicyKind::OfflineTopK, 1.0, 1, rate, 1}; }

void Policy::validate() const {
  if (wait_k == 0) throw EngineError("wait-k must be >= 1");
  switch (kind) {
    case PolicyKind::StarThreshold:
    case PolicyKind::CifThreshold:
      if (!(beta > 0)) throw EngineError("threshold must be positive");
      break;
    case PolicyKind::FixedStride:
      if (stride == 0) throw EngineError("stride must be >= 1 frame");
      break;
    case PolicyKind::OfflineTopK:
      if (!(rate >= 1)) throw EngineError("compression rate must be >= 1");
      break;
  }
}

std::string Policy::describe() const {
  std::ostringstream s;
  s << to_string(kind);
  switch (kind) {
    case PolicyKind::StarThreshold:
    case PolicyKind::CifThreshold: s << "(beta=" << beta << ")"; break;
    case PolicyKind::FixedStride: s << "(w=" << stride << ")"; break;
    case PolicyKind::OfflineTopK: s << "(r=" << rate << ")"; break;
  }
  if (kind != PolicyKind::OfflineTopK) s << ",wait-" << wait_k;
  return s.str();
}

// ---- engine -----------------------------------------------------------------

template <typename T>
StreamEngine<T>::StreamEngine(const model::Model<T>& model, Policy policy, std::size_t max_out_len)
    : model_(model), policy_(policy), max_out_len_(max_out_len) {
  policy_.validate();
  if (max_out_len_ == 0) throw EngineError("max output length must be >= 1");
  const auto c = model_.config().compressor;
  if (c == Compressor::Cnn) throw EngineError("convolutional models have no streaming segmentation");
  if ((c == Compressor::Cif) != (policy_.kind == PolicyKind::CifThreshold)) {
    throw EngineError("policy " + policy_.describe() + " does not match a " + model::to_string(c) + " model");
  }
  if (policy_.kind == PolicyKind::OfflineTopK && c != Compressor::Star) {
    throw EngineError("offline top-k selection needs a star model");
  }
}

template <typename T>
T StreamEngine<T>::frame_gate(std::span<const T> frame, T* raw_score) {
  ad::Tape<T> tape(false);
  Tensor<T> x({1, frame.size()}, std::vector<T>(frame.begin(), frame.end()));
  const auto f = model_.features(tape, x, std::span<const T>(score_prev_)).value();
  score_prev_.assign(frame.begin(), frame.end());
  // The scorer also reads the previous frame's features.
  Tensor<T> pair = Tensor<T>::matrix(score_prev_feature_.empty() ? 1 : 2, f.cols());
  if (!score_prev_feature_.empty()) std::copy(score_prev_feature_.begin(), score_prev_feature_.end(), pair.data.begin());
  std::copy(f.data.begin(), f.data.end(), pair.data.end() - static_cast<std::ptrdiff_t>(f.cols()));
  score_prev_feature_.assign(f.data.begin(), f.data.end());
  auto s = model_.segment_scores(tape, tape.constant(pair));
  const T v = s.value().data.back();
  *raw_score = v;
  return v >= T{0} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
}

template <typename T>
void StreamEngine<T>::step(std::span<const T> frame) {
  if (done_) throw EngineError("stream already finished");
  if (frame.size() != model_.config().d_in) {
    throw EngineError("frame has " + std::to_string(frame.size()) + " channels, model expects " +
                      std::to_string(model_.config().d_in));
  }
  trace_.events.push_back({EventKind::Read, static_cast<std::int64_t>(frames_read_), frames_read_ + 1});
  ++frames_read_;
  if (policy_.kind == PolicyKind::OfflineTopK) {
    offline_frames_.emplace_back(frame.begin(), frame.end());
    return;
  }
  T raw = 0;
  const T gate = frame_gate(frame, &raw);
  buffer_.emplace_back(frame.begin(), frame.end());
  buffer_gates_.push_back(gate);
  buffer_scores_.push_back(raw);
  switch (policy_.kind) {
    case PolicyKind::StarThreshold:
    case PolicyKind::CifThreshold:
      acc_ += static_cast<double>(gate);
      if (acc_ >= policy_.beta - threshold_slack(policy_.beta)) yield_segment(false);
      break;
    case PolicyKind::FixedStride:
      if (buffer_.size() == policy_.stride) yield_segment(false);
      break;
    case PolicyKind::OfflineTopK: break;
  }
}

template <typename T>
void StreamEngine<T>::yield_segment(bool flush) {
  const auto c = model_.config().compressor;
  const std::size_t b = buffer_.size();
  std::vector<std::uint8_t> flags;
  if (c == Compressor::Star) {
    flags.assign(b, 0);
    flags.back() = 1;
  }
  ad::Tape<T> tape(false);
  const auto hidden = model_.encode_causal(tape, stack_rows(buffer_), flags, enc_).value();
  const std::size_t d = hidden.cols();
  if (c == Compressor::Star) {
    const auto last = hidden.row(b - 1);
    anchor_rows_.emplace_back(last.begin(), last.end());
    anchor_scores_.push_back(buffer_scores_.back());
  } else if (c == Compressor::None) {
    for (std::size_t r = 0; r < b; ++r) anchor_rows_.emplace_back(hidden.row(r).begin(), hidden.row(r).end());
  } else {
    // Residual carry: the previous fire frame contributes its right share.
    std::vector<double> z(d, 0.0);
    if (!cif_carry_row_.empty()) {
      for (std::size_t j = 0; j < d; ++j) z[j] += cif_carry_weight_ * static_cast<double>(cif_carry_row_[j]);
    }
    for (std::size_t r = 0; r + 1 < b; ++r) {
      for (std::size_t j = 0; j < d; ++j) z[j] += static_cast<double>(buffer_gates_[r]) * hidden.at(r, j);
    }
    const double last_gate = static_cast<double>(buffer_gates_.back());
    const double left = flush ? last_gate : std::clamp(policy_.beta - (acc_ - last_gate), 0.0, last_gate);
    for (std::size_t j = 0; j < d; ++j) z[j] += left * hidden.at(b - 1, j);
    anchor_rows_.emplace_back(z.begin(), z.end());
    cif_carry_row_.assign(hidden.row(b - 1).begin(), hidden.row(b - 1).end());
    cif_carry_weight_ = last_gate - left;
  }
  boundaries_.push_back(frames_read_ - 1);
  trace_.events.push_back({EventKind::Yield, static_cast<std::int64_t>(frames_read_ - 1), frames_read_});
  acc_ = policy_.kind == PolicyKind::CifThreshold && !flush ? std::max(0.0, cif_carry_weight_) : 0.0;
  buffer_.clear();
  buffer_gates_.clear();
  buffer_scores_.clear();
  segment_start_ = frames_read_;
  if (!flush) emit_ready(false);
}

template <typename T>
bool StreamEngine<T>::emit_one(std::size_t visible) {
  std::vector<int> prefix{model::kBos};
  prefix.insert(prefix.end(), emitted_.begin(), emitted_.end());
  std::vector<std::size_t> vis = visible_;
  vis.push_back(visible);
  const auto logits = model_.decode_step(prefix, stack_rows(anchor_rows_), anchor_scores_, vis);
  const int next = model::best_token<T>(logits);
  if (next == model::kEos) {
    trace_.events.push_back({EventKind::Eos, -1, frames_read_});
    done_ = true;
    return false;
  }
  emitted_.push_back(next);
  visible_.push_back(visible);
  trace_.events.push_back({EventKind::Emit, next, frames_read_});
  if (emitted_.size() >= max_out_len_ || emitted_.size() + 1 >= model_.config().max_target) {
    trace_.events.push_back({EventKind::Eos, -1, frames_read_});
    done_ = true;
    return false;
  }
  return true;
}

template <typename T>
void StreamEngine<T>::emit_ready(bool flushing) {
  if (flushing) {
    while (!done_ && emit_one(anchor_rows_.size())) {
    }
    return;
  }
  // Token t may be emitted once t + wait_k - 1 segments exist.
  while (!done_ && emitted_.size() + policy_.wait_k <= boundaries_.size()) {
    if (!emit_one(anchor_rows_.size())) break;
  }
}

template <typename T>
void StreamEngine<T>::finish() {
  if (done_) return;
  if (policy_.kind == PolicyKind::OfflineTopK) {
    trace_.events.push_back({EventKind::Flush, static_cast<std::int64_t>(offline_frames_.size()), frames_read_});
    if (offline_frames_.empty()) {
      trace_.events.push_back({EventKind::Eos, -1, frames_read_});
      done_ = true;
      return;
    }
    ad::Tape<T> tape(false);
    const Tensor<T> frames = stack_rows(offline_frames_);
    auto feats = model_.features(tape, frames);
    const auto scores = model_.segment_scores(tape, feats).value();
    std::vector<double> s(scores.data.begin(), scores.data.end());
    const auto k = seg::anchors_from_rate(frames.rows(), policy_.rate);
    const auto picked = seg::select_top_k(s, k);
    std::vector<std::uint8_t> flags(frames.rows(), 0);
    for (auto i : picked) flags[i] = 1;
    const auto hidden = model_.encode_features(tape, feats, flags, enc_).value();
    for (auto i : picked) {
      anchor_rows_.emplace_back(hidden.row(i).begin(), hidden.row(i).end());
      anchor_scores_.push_back(scores.data[i]);
      boundaries_.push_back(i);
      trace_.events.push_back({EventKind::Yield, static_cast<std::int64_t>(i), frames_read_});
    }
    emit_ready(true);
    return;
  }
  trace_.events.push_back({EventKind::Flush, static_cast<std::int64_t>(buffer_.size()), frames_read_});
  if (!buffer_.empty()) yield_segment(true);
  if (anchor_rows_.empty()) {
    trace_.events.push_back({EventKind::Eos, -1, frames_read_});
    done_ = true;
    return;
  }
  emit_ready(true);
}

template <typename T>
StreamResult run_stream(const model::Model<T>& model, const Policy& policy, const Tensor<T>& frames,
                        std::size_t max_out_len) {
  StreamEngine<T> engine(model, policy, max_out_len);
  for (std::size_t r = 0; r < frames.rows() && !engine.done(); ++r) engine.step(frames.row(r));
  engine.finish();
  return {engine.hypothesis(), engine.trace(), engine.boundaries(), engine.anchor_count()};
}

// ---- accounting -------------------------------------------------------------

CacheReport memory_account(std::size_t frames, double rate, std::size_t dim, std::size_t batch) {
  if (frames == 0 || dim == 0 || batch == 0 || !(rate >= 1)) {
    throw EngineError("memory accounting needs positive sizes and rate >= 1");
  }
  CacheReport r;
  const double bd = static_cast<double>(batch) * static_cast<double>(dim);
  r.uncompressed_floats = bd * static_cast<double>(frames);
  r.compressed_floats = bd * std::ceil(static_cast<double>(frames) / rate);
  r.reduction = 1.0 - r.compressed_floats / r.uncompressed_floats;
  return r;
}

FlopReport flop_account(const TraceLog& trace, std::size_t dim, std::size_t target_len) {
  FlopReport r;
  r.anchors = trace.count(EventKind::Yield);
  r.frames = trace.frames_read();
  const double d = static_cast<double>(dim), ty = static_cast<double>(target_len);
  auto triangular = [](double n) { return n * (n + 1) / 2; };
  r.cross_attention = static_cast<double>(r.anchors) * ty * d;
  r.cached_self_attention = triangular(static_cast<double>(r.anchors)) * d;
  r.cross_attention_uncompressed = static_cast<double>(r.frames) * ty * d;
  r.cached_self_attention_uncompressed = triangular(static_cast<double>(r.frames)) * d;
  return r;
}

template class StreamEngine<float>;
template class StreamEngine<double>;
template StreamResult run_stream(const model::Model<float>&, const Policy&, const Tensor<float>&, std::size_t);
template StreamResult run_stream(const model::Model<double>&, const Policy&, const Tensor<double>&, std::size_t);

}  // namespace star::engine
