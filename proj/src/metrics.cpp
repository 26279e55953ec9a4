#include "star/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace star::metrics {

std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double wer(std::span<const int> reference, std::span<const int> hypothesis) {
  if (reference.empty()) throw MetricError("WER needs a non-empty reference");
  return static_cast<double>(edit_distance(reference, hypothesis)) / static_cast<double>(reference.size());
}

double dal_from_delays(std::span<const double> delays, double total_frames) {
  if (delays.empty()) throw MetricError("DAL needs at least one output token");
  const double ty = static_cast<double>(delays.size());
  const double step = total_frames / ty;  // 1 / gamma
  double prev = 0, acc = 0;
  for (std::size_t i = 0; i < delays.size(); ++i) {
    const double d = i == 0 ? delays[0] : std::max(delays[i], prev + step);
    acc += d - static_cast<double>(i) * step;
    prev = d;
  }
  return acc / ty;
}

double dal(std::span<const std::size_t> segment_lengths, std::size_t target_len) {
  if (target_len == 0) throw MetricError("DAL needs T_y >= 1");
  if (segment_lengths.empty()) throw MetricError("DAL needs at least one segment");
  std::vector<double> ends;
  double elapsed = 0;
  for (auto len : segment_lengths) {
    if (len == 0) throw MetricError("segment lengths must be >= 1");
    elapsed += static_cast<double>(len);
    ends.push_back(elapsed);
  }
  std::vector<double> delays(target_len);
  for (std::size_t i = 0; i < target_len; ++i) delays[i] = ends[std::min(i, ends.size() - 1)];
  return dal_from_delays(delays, elapsed);
}

BoundaryScore boundary_f1(std::span<const std::size_t> predicted, std::span<const std::size_t> truth,
                          std::size_t tol) {
  if (predicted.empty() && truth.empty()) return {1, 1, 1};
  std::vector<bool> used(truth.size(), false);
  std::size_t hits = 0;
  for (auto p : predicted) {
    for (std::size_t j = 0; j < truth.size(); ++j) {
      if (used[j]) continue;
      const std::size_t gap = p > truth[j] ? p - truth[j] : truth[j] - p;
      if (gap <= tol) {
        used[j] = true;
        ++hits;
        break;
      }
      if (truth[j] > p + tol) break;
    }
  }
  BoundaryScore s;
  if (!predicted.empty()) s.precision = static_cast<double>(hits) / static_cast<double>(predicted.size());
  if (!truth.empty()) s.recall = static_cast<double>(hits) / static_cast<double>(truth.size());
  if (s.precision + s.recall > 0) s.f1 = 2 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

std::vector<double> mean_pool(const Tensor<double>& reprs) {
  if (reprs.rank() != 2) throw MetricError("mean_pool expects a matrix");
  std::vector<double> out(reprs.cols(), 0.0);
  for (std::size_t r = 0; r < reprs.rows(); ++r) {
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += reprs.at(r, j);
  }
  for (auto& v : out) v /= static_cast<double>(reprs.rows());
  return out;
}

namespace {

Tensor<double> normalized(const Tensor<double>& m, const char* what) {
  if (m.rank() != 2) throw MetricError(std::string(what) + " must be a matrix");
  Tensor<double> out = m;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    double n = 0;
    for (double v : row) n += v * v;
    if (!(n > 0)) throw MetricError(std::string(what) + " row " + std::to_string(r) + " has zero norm");
    n = std::sqrt(n);
    for (auto& v : row) v /= n;
  }
  return out;
}

}  // namespace

double max_sim(const Tensor<double>& queries, const Tensor<double>& candidates) {
  const auto q = normalized(queries, "query");
  const auto c = normalized(candidates, "candidate");
  if (q.cols() != c.cols()) throw MetricError("query and candidate dimensions differ");
  double total = 0;
  for (std::size_t i = 0; i < q.rows(); ++i) {
    double best = -2;
    for (std::size_t j = 0; j < c.rows(); ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < q.cols(); ++k) dot += q.at(i, k) * c.at(j, k);
      best = std::max(best, dot);
    }
    total += best;
  }
  return total / static_cast<double>(q.rows());
}

std::vector<std::size_t> rank_by(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

double ndcg_at_k(std::span<const double> ranked_relevance, std::size_t k) {
  if (k == 0) throw MetricError("k must be >= 1");
  std::vector<double> ideal(ranked_relevance.begin(), ranked_relevance.end());
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  auto dcg = [k](std::span<const double> rel) {
    double s = 0;
    for (std::size_t i = 0; i < std::min(k, rel.size()); ++i) s += rel[i] / std::log2(static_cast<double>(i) + 2.0);
    return s;
  };
  const double best = dcg(ideal);
  if (!(best > 0)) throw MetricError("ranking case has no relevant item");
  return dcg(ranked_relevance) / best;
}

double mrr_at_k(std::span<const double> ranked_relevance, std::size_t k) {
  if (k == 0) throw MetricError("k must be >= 1");
  if (std::none_of(ranked_relevance.begin(), ranked_relevance.end(), [](double r) { return r > 0; })) {
    throw MetricError("ranking case has no relevant item");
  }
  for (std::size_t i = 0; i < std::min(k, ranked_relevance.size()); ++i) {
    if (ranked_relevance[i] > 0) return 1.0 / static_cast<double>(i + 1);
  }
  return 0.0;
}

void write_metrics(const std::string& path, const std::vector<MetricRecord>& records, bool append) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw MetricError("cannot open '" + path + "' for writing");
  for (const auto& r : records) {
    nlohmann::json j{{"metric", r.name}, {"value", r.value}, {"fingerprint", r.fingerprint}};
    if (!r.mode.empty()) j["mode"] = r.mode;
    out << j.dump() << '\n';
  }
}

}  // namespace star::metrics
