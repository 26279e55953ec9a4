#include "star/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace star::seg {

namespace {

// Rounding slack for "accumulator reached beta". Rescaled gates sum to
// beta*T_y only up to rounding; without slack the last fire can be lost.
template <typename T>
T fire_tolerance(T total, T beta) {
  return T{64} * std::numeric_limits<T>::epsilon() * (std::abs(total) + beta);
}

template <typename T>
struct CifPlan {
  Segmentation seg;
  std::vector<T> cumsum;  // C_t = alpha_0 + ... + alpha_t
};

// Segment m owns the interval [m*beta, (m+1)*beta) of cumulative mass; a
// frame contributes its overlap with that interval. This is the residual
// carry scan written in closed form.
template <typename T>
CifPlan<T> plan_cif(std::span<const T> alpha, T beta, TailRule tail) {
  if (!(beta > T{0})) throw SegmentationError("CIF threshold must be positive");
  CifPlan<T> plan;
  plan.cumsum.resize(alpha.size());
  T acc{0};
  for (std::size_t t = 0; t < alpha.size(); ++t) {
    if (!std::isfinite(static_cast<double>(alpha[t])) || alpha[t] < T{0}) {
      throw SegmentationError("gate " + std::to_string(t) + " is negative or non-finite");
    }
    acc += alpha[t];
    plan.cumsum[t] = acc;
  }
  const T tol = fire_tolerance(acc, beta);
  auto& seg = plan.seg;
  std::size_t fired = 0;
  for (std::size_t t = 0; t < alpha.size(); ++t) {
    const T prev = t == 0 ? T{0} : plan.cumsum[t - 1];
    const T cur = plan.cumsum[t];
    double used = 0.0;
    while (cur >= static_cast<T>(fired + 1) * beta - tol) {
      const T lo = std::max(prev, static_cast<T>(fired) * beta);
      const T hi = std::min(cur, static_cast<T>(fired + 1) * beta);
      const double left = std::max(0.0, static_cast<double>(hi - lo));
      seg.boundaries.push_back(t);
      seg.left.push_back(left);
      used += left;
      seg.right.push_back(static_cast<double>(alpha[t]) - used);
      ++fired;
    }
  }
  const double tail_mass = std::max(0.0, static_cast<double>(acc - static_cast<T>(fired) * beta));
  seg.tail_mass = tail_mass;
  const bool last_is_boundary = !seg.boundaries.empty() && seg.boundaries.back() + 1 == alpha.size();
  if (tail == TailRule::FireIfHalf && !alpha.empty() && tail_mass >= 0.5 * beta &&
      !last_is_boundary) {
    const std::size_t t = alpha.size() - 1;
    const T prev = t == 0 ? T{0} : plan.cumsum[t - 1];
    const double left = static_cast<double>(plan.cumsum[t] - std::max(prev, static_cast<T>(fired) * beta));
    seg.boundaries.push_back(t);
    seg.left.push_back(left);
    seg.right.push_back(0.0);
    seg.tail_fired = true;
  }
  return plan;
}

// Overlap of frame t with segment m's mass interval; the fired tail has no
// upper bound.
template <typename T>
T overlap(const std::vector<T>& cumsum, std::size_t t, std::size_t m, T beta, bool open_top) {
  const T prev = t == 0 ? T{0} : cumsum[t - 1];
  const T lo = std::max(prev, static_cast<T>(m) * beta);
  const T hi = open_top ? cumsum[t] : std::min(cumsum[t], static_cast<T>(m + 1) * beta);
  return hi > lo ? hi - lo : T{0};
}

template <typename T>
Tensor<T> weight_matrix(const CifPlan<T>& plan, T beta) {
  const std::size_t n = plan.seg.count();
  const std::size_t frames = plan.cumsum.size();
  Tensor<T> w = Tensor<T>::matrix(n, frames);
  for (std::size_t m = 0; m < n; ++m) {
    const bool open_top = plan.seg.tail_fired && m + 1 == n;
    for (std::size_t t = 0; t < frames; ++t) w.at(m, t) = overlap(plan.cumsum, t, m, beta, open_top);
  }
  return w;
}

}  // namespace

std::size_t StrideConfig::rate() const {
  std::size_t r = 1;
  for (const auto& b : blocks) r *= b.stride;
  return r;
}

std::size_t StrideConfig::max_kernel() const {
  std::size_t k = residual_kernel;
  for (const auto& b : blocks) k = std::max(k, b.kernel);
  return k;
}

StrideConfig StrideConfig::for_rate(std::size_t rate) {
  if (rate == 0) throw SegmentationError("compression rate must be >= 1");
  StrideConfig cfg;
  std::size_t rest = rate;
  for (std::size_t f : {5u, 4u, 3u, 2u}) {
    while (rest % f == 0 && rest > 1) {
      cfg.blocks.push_back({2 * f - 1, f});
      rest /= f;
    }
  }
  if (rest > 1) cfg.blocks.push_back({2 * rest - 1, rest});
  if (cfg.blocks.empty()) cfg.blocks.push_back({1, 1});
  return cfg;
}

std::vector<double> gate(std::span<const double> scores) {
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double s = scores[i];
    out[i] = s >= 0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
  }
  return out;
}

std::vector<double> rescale(std::span<const double> alpha, std::size_t target_len, double beta) {
  if (target_len == 0) throw SegmentationError("rescale target length must be >= 1");
  const double total = std::accumulate(alpha.begin(), alpha.end(), 0.0);
  if (!(total > 0)) throw SegmentationError("cannot rescale all-zero gates");
  const double f = beta * static_cast<double>(target_len) / total;
  std::vector<double> out(alpha.begin(), alpha.end());
  for (auto& a : out) a *= f;
  return out;
}

double length_penalty(std::span<const double> alpha, std::size_t target_len) {
  const double diff = static_cast<double>(target_len) - std::accumulate(alpha.begin(), alpha.end(), 0.0);
  return diff * diff;
}

std::vector<std::size_t> select_top_k(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k > scores.size()) {
    throw SegmentationError("top-k with k=" + std::to_string(k) + " over " +
                            std::to_string(scores.size()) + " scores");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

std::size_t anchors_from_rate(std::size_t frames, double rate) {
  if (!(rate >= 1.0)) throw SegmentationError("compression rate must be >= 1");
  const auto k = static_cast<std::size_t>(std::floor(static_cast<double>(frames) / rate));
  return std::max<std::size_t>(1, k);
}

Segmentation cif_segment(std::span<const double> alpha, double beta, TailRule tail) {
  return plan_cif<double>(alpha, beta, tail).seg;
}

std::vector<std::size_t> threshold_boundaries(std::span<const double> alpha, double beta) {
  if (!(beta > 0)) throw SegmentationError("threshold must be positive");
  std::vector<std::size_t> out;
  double acc = 0;
  const double tol = fire_tolerance(1.0, beta);
  for (std::size_t t = 0; t < alpha.size(); ++t) {
    acc += alpha[t];
    if (acc >= beta - tol) {
      out.push_back(t);
      acc = 0;
    }
  }
  return out;
}

std::vector<std::size_t> uniform_boundaries(std::size_t frames, std::size_t segments) {
  if (frames == 0 || segments == 0) throw SegmentationError("uniform segmentation of nothing");
  const std::size_t width = std::max<std::size_t>(1, frames / segments);
  std::vector<std::size_t> out;
  for (std::size_t m = 1; m <= segments; ++m) {
    const std::size_t end = std::min(width * m, frames);
    if (!out.empty() && out.back() == end - 1) break;
    out.push_back(end - 1);
  }
  return out;
}

Tensor<double> cif_weight_matrix(std::span<const double> alpha, const Segmentation& seg) {
  if (seg.count() == 0) throw SegmentationError("segmentation has no segments");
  if (seg.boundaries.back() >= alpha.size()) {
    throw SegmentationError("boundary " + std::to_string(seg.boundaries.back()) + " beyond " +
                            std::to_string(alpha.size()) + " frames");
  }
  // Rebuild the weights from the recorded left/right split so this works
  // for any segmentation over the same gates.
  Tensor<double> w = Tensor<double>::matrix(seg.count(), alpha.size());
  std::size_t start = 0;
  double carry = 0.0;
  for (std::size_t m = 0; m < seg.count(); ++m) {
    const std::size_t i = seg.boundaries[m];
    if (m > 0 && i < seg.boundaries[m - 1]) throw SegmentationError("boundaries must be sorted");
    if (m > 0 && i == seg.boundaries[m - 1]) {
      w.at(m, i) = seg.left[m];
    } else {
      if (m > 0) w.at(m, start) = carry;
      for (std::size_t t = (m > 0 ? start + 1 : 0); t < i; ++t) w.at(m, t) = alpha[t];
      w.at(m, i) = seg.left[m];
    }
    start = i;
    carry = seg.right[m];
  }
  return w;
}

Tensor<double> cif_aggregate(const Tensor<double>& hidden, std::span<const double> alpha,
                             const Segmentation& seg) {
  if (hidden.rank() != 2 || hidden.rows() != alpha.size()) {
    throw SegmentationError("cif_aggregate: hidden " + to_string(hidden.shape) + " vs " +
                            std::to_string(alpha.size()) + " gates");
  }
  const Tensor<double> w = cif_weight_matrix(alpha, seg);
  const std::size_t d = hidden.cols();
  Tensor<double> out = Tensor<double>::matrix(seg.count(), d);
  for (std::size_t m = 0; m < seg.count(); ++m) {
    for (std::size_t t = 0; t < alpha.size(); ++t) {
      const double wt = w.at(m, t);
      if (wt == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) out.at(m, j) += wt * hidden.at(t, j);
    }
  }
  return out;
}

template <typename T>
Tensor<T> anchor_aggregate(const Tensor<T>& hidden, std::span<const std::size_t> boundaries) {
  if (boundaries.empty()) throw SegmentationError("anchor selection needs at least one boundary");
  const std::size_t d = hidden.cols();
  Tensor<T> out = Tensor<T>::matrix(boundaries.size(), d);
  for (std::size_t r = 0; r < boundaries.size(); ++r) {
    if (boundaries[r] >= hidden.rows()) {
      throw SegmentationError("anchor " + std::to_string(boundaries[r]) + " beyond " +
                              std::to_string(hidden.rows()) + " frames");
    }
    std::copy_n(hidden.data.begin() + boundaries[r] * d, d, out.data.begin() + r * d);
  }
  return out;
}

// ---- differentiable --------------------------------------------------------

template <typename T>
ad::Var<T> score_frames(ad::Tape<T>& tape, const SegmenterWeights<T>& w, const ad::Var<T>& features) {
  // Row t also sees row t-1 through w1p; the first row is its own predecessor.
  const std::size_t n = features.value().rows();
  std::vector<std::size_t> prev(n);
  for (std::size_t t = 1; t < n; ++t) prev[t] = t - 1;
  auto pre = ad::add(ad::matmul(features, tape.param(*w.w1)),
                     ad::gather_rows(ad::matmul(features, tape.param(*w.w1p)), std::span<const std::size_t>(prev)));
  auto h = ad::relu(ad::add(pre, tape.param(*w.b1)));
  auto s = ad::add(ad::matmul(h, tape.param(*w.w2)), tape.param(*w.b2));
  return ad::reshape(s, {s.value().rows()});
}

template <typename T>
ad::Var<T> rescale(const ad::Var<T>& alpha, std::size_t target_len, T beta) {
  if (target_len == 0) throw SegmentationError("rescale target length must be >= 1");
  const auto& a = alpha.value();
  T total{0};
  for (auto v : a.data) total += v;
  if (!(total > T{0})) throw SegmentationError("cannot rescale all-zero gates");
  const T c = beta * static_cast<T>(target_len);
  Tensor<T> out = a;
  for (auto& v : out.data) v *= c / total;
  const std::size_t ia = alpha.id();
  return alpha.tape().push(std::move(out), {ia}, [=](ad::Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    const auto& av = t.value_of(ia);
    T dot{0};
    for (std::size_t i = 0; i < g.size(); ++i) dot += g.data[i] * av.data[i];
    auto& da = t.accumulate_grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      da.data[i] += c / total * g.data[i] - c / (total * total) * dot;
    }
  });
}

template <typename T>
ad::Var<T> length_penalty(const ad::Var<T>& alpha, std::size_t target_len) {
  T total{0};
  for (auto v : alpha.value().data) total += v;
  const T diff = static_cast<T>(target_len) - total;
  const std::size_t ia = alpha.id();
  return alpha.tape().push(Tensor<T>::scalar(diff * diff), {ia}, [=](ad::Tape<T>& t, std::size_t self) {
    const T g = t.grad_of(self).data[0];
    for (auto& v : t.accumulate_grad(ia).data) v += g * T{-2} * diff;
  });
}

template <typename T>
ad::Var<T> cif_weights(const ad::Var<T>& alpha, T beta, TailRule tail, Segmentation* seg_out) {
  const auto& a = alpha.value();
  if (a.rank() != 1) throw ShapeError("cif_weights expects gates of rank 1, got " + to_string(a.shape));
  CifPlan<T> plan = plan_cif<T>(std::span<const T>(a.data), beta, tail);
  if (plan.seg.count() == 0) throw SegmentationError("no segment fired");
  Tensor<T> w = weight_matrix(plan, beta);
  if (seg_out != nullptr) *seg_out = plan.seg;
  const std::size_t ia = alpha.id();
  const std::size_t n = plan.seg.count();
  const bool tail_fired = plan.seg.tail_fired;
  return alpha.tape().push(
      std::move(w), {ia}, [=, cumsum = std::move(plan.cumsum)](ad::Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_of(self);
        const std::size_t frames = cumsum.size();
        std::vector<T> dc(frames, T{0});
        for (std::size_t m = 0; m < n; ++m) {
          const bool open_top = tail_fired && m + 1 == n;
          const T lo_bound = static_cast<T>(m) * beta;
          const T hi_bound = static_cast<T>(m + 1) * beta;
          for (std::size_t f = 0; f < frames; ++f) {
            const T gv = g.data[m * frames + f];
            if (gv == T{0} || overlap(cumsum, f, m, beta, open_top) <= T{0}) continue;
            if (open_top || cumsum[f] < hi_bound) dc[f] += gv;
            if (f > 0 && cumsum[f - 1] > lo_bound) dc[f - 1] -= gv;
          }
        }
        auto& da = t.accumulate_grad(ia);
        T suffix{0};
        for (std::size_t u = frames; u-- > 0;) {
          suffix += dc[u];
          da.data[u] += suffix;
        }
      });
}

namespace {

// Patches [out x kernel*d] with zero padding; row r covers input rows
// r*stride - pad_left ... + kernel - 1.
template <typename T>
ad::Var<T> im2col(const ad::Var<T>& x, std::size_t kernel, std::size_t stride) {
  const auto& X = x.value();
  const std::size_t frames = X.rows(), d = X.cols();
  const std::size_t out = conv_output_length(frames, stride);
  const std::size_t span_needed = (out - 1) * stride + kernel;
  const std::size_t pad = span_needed > frames ? span_needed - frames : 0;
  const std::size_t pad_left = pad / 2;
  Tensor<T> patches = Tensor<T>::matrix(out, kernel * d);
  for (std::size_t r = 0; r < out; ++r) {
    for (std::size_t k = 0; k < kernel; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(r * stride + k) - static_cast<std::ptrdiff_t>(pad_left);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(frames)) continue;
      std::copy_n(X.data.begin() + src * d, d, patches.data.begin() + r * kernel * d + k * d);
    }
  }
  const std::size_t ix = x.id();
  return x.tape().push(std::move(patches), {ix}, [=](ad::Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    auto& dx = t.accumulate_grad(ix);
    for (std::size_t r = 0; r < out; ++r) {
      for (std::size_t k = 0; k < kernel; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(r * stride + k) - static_cast<std::ptrdiff_t>(pad_left);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(frames)) continue;
        for (std::size_t j = 0; j < d; ++j) dx.data[src * d + j] += g.data[r * kernel * d + k * d + j];
      }
    }
  });
}

}  // namespace

std::size_t conv_output_length(std::size_t frames, std::size_t stride) {
  if (stride == 0) throw SegmentationError("stride must be >= 1");
  return (frames + stride - 1) / stride;
}

template <typename T>
ad::Var<T> conv1d(const ad::Var<T>& x, const ad::Var<T>& weight, const ad::Var<T>& bias,
                  std::size_t kernel, std::size_t stride) {
  const std::size_t d_in = x.value().cols();
  if (weight.value().rank() != 2 || weight.value().shape[0] != kernel * d_in) {
    throw ShapeError("conv1d weight " + to_string(weight.shape()) + " does not match kernel " +
                     std::to_string(kernel) + " over " + std::to_string(d_in) + " channels");
  }
  return ad::add(ad::matmul(im2col(x, kernel, stride), weight), bias);
}

template <typename T>
ad::Var<T> cnn_compress(ad::Tape<T>& tape, std::span<const ConvBlockWeights<T>> blocks,
                        const ad::Var<T>& x) {
  std::size_t max_kernel = 0;
  for (const auto& b : blocks) max_kernel = std::max(max_kernel, b.spec.kernel);
  if (x.value().rows() < max_kernel) {
    throw SegmentationError("input of " + std::to_string(x.value().rows()) +
                            " frames is shorter than kernel " + std::to_string(max_kernel));
  }
  ad::Var<T> h = x;
  for (const auto& b : blocks) {
    const std::size_t rk = b.res1_weight->value.shape[0] / h.value().cols();
    auto y = conv1d(h, tape.param(*b.weight), tape.param(*b.bias), b.spec.kernel, b.spec.stride);
    auto r = ad::relu(conv1d(y, tape.param(*b.res1_weight), tape.param(*b.res1_bias), rk, 1));
    r = conv1d(r, tape.param(*b.res2_weight), tape.param(*b.res2_bias), rk, 1);
    h = ad::add(y, r);
  }
  return h;
}

#define STAR_SEG_INSTANTIATE(T)                                                                  \
  template Tensor<T> anchor_aggregate(const Tensor<T>&, std::span<const std::size_t>);           \
  template ad::Var<T> score_frames(ad::Tape<T>&, const SegmenterWeights<T>&, const ad::Var<T>&); \
  template ad::Var<T> rescale(const ad::Var<T>&, std::size_t, T);                                \
  template ad::Var<T> length_penalty(const ad::Var<T>&, std::size_t);                            \
  template ad::Var<T> cif_weights(const ad::Var<T>&, T, TailRule, Segmentation*);                \
  template ad::Var<T> conv1d(const ad::Var<T>&, const ad::Var<T>&, const ad::Var<T>&,            \
                             std::size_t, std::size_t);                                          \
  template ad::Var<T> cnn_compress(ad::Tape<T>&, std::span<const ConvBlockWeights<T>>,           \
                                   const ad::Var<T>&);

STAR_SEG_INSTANTIATE(float)
STAR_SEG_INSTANTIATE(double)

#undef STAR_SEG_INSTANTIATE

}  // namespace star::seg
