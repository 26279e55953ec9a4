#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "star/tensor.hpp"

namespace star::metrics {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Unit-cost Levenshtein distance.
std::size_t edit_distance(std::span<const int> a, std::span<const int> b);

// edit_distance / |reference|.
double wer(std::span<const int> reference, std::span<const int> hypothesis);

// Differentiable average lagging from segment lengths: token i is
// released when segment i completes (tokens past the last segment reuse the
// final delay).
double dal(std::span<const std::size_t> segment_lengths, std::size_t target_len);

// Same metric from explicit per-token delays d_i (frames read when token i
// was emitted) and the total input length.
double dal_from_delays(std::span<const double> delays, double total_frames);

struct BoundaryScore {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

// Greedy one-to-one matching of sorted boundaries within +-tol frames.
BoundaryScore boundary_f1(std::span<const std::size_t> predicted, std::span<const std::size_t> truth,
                          std::size_t tol = 1);

std::vector<double> mean_pool(const Tensor<double>& reprs);

// (1/m) sum_i max_j cos(q_i, c_j).
double max_sim(const Tensor<double>& queries, const Tensor<double>& candidates);

// Candidate indices by descending score; ties keep the lower index first.
std::vector<std::size_t> rank_by(std::span<const double> scores);

// nDCG@k of a system ranking; `ranked_relevance[i]` is the graded relevance
// of the item placed at rank i. The ideal ordering sorts all relevances.
double ndcg_at_k(std::span<const double> ranked_relevance, std::size_t k);

// Reciprocal rank of the first item with relevance > 0 within the top k.
double mrr_at_k(std::span<const double> ranked_relevance, std::size_t k);

struct MetricRecord {
  std::string name;
  double value = 0;
  std::string fingerprint;
  std::string mode;  // optional free-form context, omitted when empty
};

// Appends (or truncates first, if !append) one JSON object per line.
void write_metrics(const std::string& path, const std::vector<MetricRecord>& records, bool append = true);

}  // namespace star::metrics
