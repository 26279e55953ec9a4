#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "star/autodiff.hpp"

// Segmenter scoring and the three compressors: anchor selection,
// continuous integrate-and-fire, and strided convolution.
namespace star::seg {

class SegmentationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class TailRule {
  FireIfHalf,  // leftover mass >= beta/2 forms a final segment ending at the last frame
  AlwaysDrop,
};

struct Segmentation {
  std::vector<std::size_t> boundaries;  // fire frame of each segment
  std::vector<double> left;             // alpha_L: share of the fire frame kept by the segment
  std::vector<double> right;            // alpha_R: residual carried into the next segment
  double tail_mass = 0.0;               // mass after the last regular fire
  bool tail_fired = false;              // tail became the final entry of `boundaries`

  std::size_t count() const { return boundaries.size(); }
};

// Single-layer parameters of the stride/residual convolution stack.
struct ConvBlockSpec {
  std::size_t kernel = 1;
  std::size_t stride = 1;
};

struct StrideConfig {
  std::vector<ConvBlockSpec> blocks;
  std::size_t residual_kernel = 5;

  // Product of strides.
  std::size_t rate() const;
  std::size_t max_kernel() const;
  // Strides multiplying to `rate`, largest factors first (12 -> {4,3});
  // each block uses kernel 2*stride-1.
  static StrideConfig for_rate(std::size_t rate);
};

// ---- gating and rate control --------------------------------------------

// alpha = sigmoid(s), elementwise.
std::vector<double> gate(std::span<const double> scores);

// Scales gates so they sum to beta * target_len.
std::vector<double> rescale(std::span<const double> alpha, std::size_t target_len, double beta = 1.0);

// (target_len - sum alpha)^2
double length_penalty(std::span<const double> alpha, std::size_t target_len);

// Indices of the k largest scores (ties -> earlier index), ascending.
std::vector<std::size_t> select_top_k(std::span<const double> scores, std::size_t k);

// max(1, floor(frames / rate)).
std::size_t anchors_from_rate(std::size_t frames, double rate);

// ---- segmentation --------------------------------------------------------

// Integrate-and-fire with residual carry. Fires when the accumulator
// reaches beta (inclusive, up to rounding tolerance).
Segmentation cif_segment(std::span<const double> alpha, double beta = 1.0,
                         TailRule tail = TailRule::FireIfHalf);

// Threshold accumulation that restarts from zero after every fire (no
// residual). Frames left over at the end are not a boundary.
std::vector<std::size_t> threshold_boundaries(std::span<const double> alpha, double beta = 1.0);

// Uniform segments of floor(frames / segments) frames; the last frame of
// each, clipped to the sequence.
std::vector<std::size_t> uniform_boundaries(std::size_t frames, std::size_t segments);

// Weight matrix [count x frames] such that C = W * H is the CIF aggregate.
Tensor<double> cif_weight_matrix(std::span<const double> alpha, const Segmentation& seg);

// c_m = alpha_jR h_j + sum_{j<t<i} alpha_t h_t + alpha_iL h_i.
Tensor<double> cif_aggregate(const Tensor<double>& hidden, std::span<const double> alpha,
                             const Segmentation& seg);

// Rows of `hidden` at `boundaries`; pure gather.
template <typename T>
Tensor<T> anchor_aggregate(const Tensor<T>& hidden, std::span<const std::size_t> boundaries);

// ---- differentiable versions (used in training) --------------------------

// s_t = w2 * relu(w1 * x_t + w1p * x_{t-1} + b1) + b2; features [T x d] ->
// scores [T]. x_{-1} is taken to be x_0.
template <typename T>
struct SegmenterWeights {
  const ad::Parameter<T>* w1 = nullptr;  // [d x d]
  const ad::Parameter<T>* w1p = nullptr; // [d x d], previous frame
  const ad::Parameter<T>* b1 = nullptr;  // [d]
  const ad::Parameter<T>* w2 = nullptr;  // [d x 1]
  const ad::Parameter<T>* b2 = nullptr;  // [1]
};

template <typename T>
ad::Var<T> score_frames(ad::Tape<T>& tape, const SegmenterWeights<T>& w, const ad::Var<T>& features);

template <typename T>
ad::Var<T> rescale(const ad::Var<T>& alpha, std::size_t target_len, T beta = T{1});

template <typename T>
ad::Var<T> length_penalty(const ad::Var<T>& alpha, std::size_t target_len);

// CIF weight matrix as a function of alpha. The fire pattern is fixed by
// the forward values; weights are piecewise linear in alpha.
template <typename T>
ad::Var<T> cif_weights(const ad::Var<T>& alpha, T beta, TailRule tail, Segmentation* seg_out = nullptr);

// Per-layer weights of one stride block plus its residual pair.
template <typename T>
struct ConvBlockWeights {
  ConvBlockSpec spec;
  const ad::Parameter<T>* weight = nullptr;  // [kernel*d x d]
  const ad::Parameter<T>* bias = nullptr;    // [d]
  const ad::Parameter<T>* res1_weight = nullptr;
  const ad::Parameter<T>* res1_bias = nullptr;
  const ad::Parameter<T>* res2_weight = nullptr;
  const ad::Parameter<T>* res2_bias = nullptr;
};

// 1-D convolution over time with symmetric zero padding chosen so the
// output has ceil(T / stride) rows. weight is [kernel*d_in x d_out].
template <typename T>
ad::Var<T> conv1d(const ad::Var<T>& x, const ad::Var<T>& weight, const ad::Var<T>& bias,
                  std::size_t kernel, std::size_t stride);

// Strided blocks, each followed by x + conv(relu(conv(x))) with kernel-5
// stride-1 convolutions. Output length ceil(T / rate).
template <typename T>
ad::Var<T> cnn_compress(ad::Tape<T>& tape, std::span<const ConvBlockWeights<T>> blocks,
                        const ad::Var<T>& x);

std::size_t conv_output_length(std::size_t frames, std::size_t stride);

}  // namespace star::seg
