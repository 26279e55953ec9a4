#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "star/model.hpp"

// READ/YIELD streaming loop: frames arrive one at a time, a policy decides
// when the buffered segment is encoded into the anchor cache, and wait-k
// decides when the decoder may emit.
namespace star::engine {

class EngineError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class EventKind { Read, Yield, Emit, Flush, Eos };

std::string to_string(EventKind k);

// `step` is the number of frames read when the event happened.
// Read: index = frame index. Yield: index = last frame of the segment.
// Emit: index = token id. Flush: index = frames left in the buffer.
// Eos: index = -1.
struct StreamEvent {
  EventKind kind;
  std::int64_t index;
  std::size_t step;
  bool operator==(const StreamEvent&) const = default;
};

struct TraceLog {
  std::vector<StreamEvent> events;

  std::size_t count(EventKind k) const;
  // Frames read when each token was emitted, in emission order.
  std::vector<double> token_delays() const;
  // Frame count of each yielded segment.
  std::vector<std::size_t> segment_lengths() const;
  std::size_t frames_read() const;

  void write_jsonl(std::ostream& out) const;
  void write_jsonl(const std::string& path) const;
  static TraceLog read_jsonl(std::istream& in);

  // Empty when the trace is well formed, otherwise the first violation.
  std::string check_invariants() const;
};

enum class PolicyKind { StarThreshold, CifThreshold, FixedStride, OfflineTopK };

std::string to_string(PolicyKind k);

struct Policy {
  PolicyKind kind = PolicyKind::StarThreshold;
  double beta = 1.0;        // threshold policies
  std::size_t stride = 1;   // fixed-stride, frames per segment
  double rate = 1.0;        // offline-topk
  std::size_t wait_k = 1;

  static Policy star(double beta = 1.0, std::size_t wait_k = 1);
  static Policy cif(double beta = 1.0, std::size_t wait_k = 1);
  static Policy fixed(std::size_t stride, std::size_t wait_k = 1);
  static Policy offline(double rate);

  void validate() const;
  std::string describe() const;
};

struct StreamResult {
  std::vector<int> hypothesis;
  TraceLog trace;
  std::vector<std::size_t> boundaries;  // last frame of each yielded segment
  std::size_t anchors = 0;              // |Z| at the end
};

// One engine per stream. How a segment becomes cache rows depends on the
// model: Star keeps the anchor-flagged last row (and injects its score),
// Cif keeps the gate-weighted sum with residual carry, an uncompressed
// model keeps every row.
template <typename T>
class StreamEngine {
 public:
  StreamEngine(const model::Model<T>& model, Policy policy, std::size_t max_out_len);

  // Reads one frame; may yield a segment and emit tokens.
  void step(std::span<const T> frame);
  // Stream exhausted: flush the buffer and decode to EOS or max_out_len.
  void finish();

  bool done() const { return done_; }
  const TraceLog& trace() const { return trace_; }
  const std::vector<int>& hypothesis() const { return emitted_; }
  std::size_t anchor_count() const { return anchor_rows_.size(); }
  std::size_t yields() const { return boundaries_.size(); }
  const std::vector<std::size_t>& boundaries() const { return boundaries_; }
  double accumulator() const { return acc_; }

 private:
  void yield_segment(bool flush);
  void emit_ready(bool flushing);
  bool emit_one(std::size_t visible);
  T frame_gate(std::span<const T> frame, T* raw_score);

  const model::Model<T>& model_;
  Policy policy_;
  std::size_t max_out_len_;
  model::EncoderState<T> enc_;
  std::vector<T> score_prev_;              // previous raw frame, for the scorer
  std::vector<T> score_prev_feature_;      // its frontend features
  std::vector<std::vector<T>> buffer_;
  std::vector<T> buffer_gates_;
  std::vector<T> buffer_scores_;
  double acc_ = 0.0;
  std::vector<std::vector<T>> anchor_rows_;
  std::vector<T> anchor_scores_;
  std::vector<T> cif_carry_row_;           // hidden row of the last fire frame
  double cif_carry_weight_ = 0.0;
  std::vector<std::vector<T>> offline_frames_;
  std::vector<int> emitted_;
  std::vector<std::size_t> visible_;       // anchors visible to each emitted row
  std::vector<std::size_t> boundaries_;
  std::size_t frames_read_ = 0;
  std::size_t segment_start_ = 0;
  bool done_ = false;
  TraceLog trace_;
};

// Runs a whole stream over the rows of `frames`; a default-constructed
// (row-less) tensor is an empty stream.
template <typename T>
StreamResult run_stream(const model::Model<T>& model, const Policy& policy, const Tensor<T>& frames,
                        std::size_t max_out_len);

struct CacheReport {
  double uncompressed_floats = 0;
  double compressed_floats = 0;
  double reduction = 0;  // fraction of floats saved
};

// b*d*T_x vs b*d*ceil(T_x / r).
CacheReport memory_account(std::size_t frames, double rate, std::size_t dim, std::size_t batch);

struct FlopReport {
  double cross_attention = 0;       // |Z| * T_y * d, per layer
  double cached_self_attention = 0; // each yield's anchor attends over the cache: sum_n |Z_n| * d
  double cross_attention_uncompressed = 0;
  double cached_self_attention_uncompressed = 0;
  std::size_t anchors = 0;
  std::size_t frames = 0;
};

FlopReport flop_account(const TraceLog& trace, std::size_t dim, std::size_t target_len);

}  // namespace star::engine
