#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "star/model.hpp"
#include "star/segmentation.hpp"

using namespace star;

namespace {

std::vector<double> random_gates(oracle::Rng& rng, std::size_t n, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> a(n);
  for (auto& v : a) v = u(rng);
  return a;
}

}  // namespace

TEST_CASE("gate") {
  const std::vector<double> s{0.0, -50.0, 50.0};
  const auto a = seg::gate(s);
  CHECK(a[0] == 0.5);
  CHECK(a[1] <= 1e-15);
  CHECK(1.0 - a[2] <= 1e-15);
  oracle::Rng rng(1);
  auto xs = random_gates(rng, 200, -10, 10);
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  const auto g = seg::gate(xs);
  for (std::size_t i = 1; i < g.size(); ++i) CHECK(g[i - 1] < g[i]);
}

TEST_CASE("rescale") {
  const std::vector<double> a{0.2, 0.2, 0.2};
  const auto r = seg::rescale(a, 2, 1.0);
  for (double v : r) CHECK(v == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(std::accumulate(r.begin(), r.end(), 0.0) == doctest::Approx(2.0).epsilon(1e-15));

  const std::vector<double> exact{0.5, 0.25, 0.25};
  CHECK(seg::rescale(exact, 1, 1.0) == exact);

  oracle::Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto g = random_gates(rng, 12, 0.01, 1.0);
    auto scaled = g;
    for (auto& v : scaled) v *= 3.7;
    const auto r1 = seg::rescale(g, 4, 1.0), r2 = seg::rescale(scaled, 4, 1.0);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(r1[i] == doctest::Approx(r2[i]).epsilon(1e-14));
    CHECK(std::abs(std::accumulate(r1.begin(), r1.end(), 0.0) - 4.0) <= 1e-9);
  }
  CHECK_THROWS_AS(seg::rescale(std::vector<double>{0, 0}, 1, 1.0), seg::SegmentationError);
  CHECK_THROWS_AS(seg::rescale(std::vector<double>{0.5}, 0, 1.0), seg::SegmentationError);
}

TEST_CASE("length penalty value and gradient") {
  CHECK(seg::length_penalty(std::vector<double>{0.5, 0.5, 0.5, 0.5}, 2) == 0.0);
  CHECK(seg::length_penalty(std::vector<double>{0.9, 0.9}, 1) == doctest::Approx(0.64).epsilon(1e-14));

  ad::Tape<double> tape;
  const auto a = tape.leaf(Tensor<double>({2}, std::vector<double>{0.9, 0.9}));
  tape.backward(seg::length_penalty(a, 1));
  // d/da_t (T_y - sum a)^2 = -2 (T_y - sum a) = 1.6 for every t
  CHECK(a.grad()[0] == doctest::Approx(1.6).epsilon(1e-14));
  CHECK(a.grad()[1] == doctest::Approx(1.6).epsilon(1e-14));
}

TEST_CASE("select_top_k") {
  const std::vector<double> s{0.1, 0.9, 0.3, 0.8};
  CHECK(seg::select_top_k(s, 2) == std::vector<std::size_t>{1, 3});
  CHECK(seg::select_top_k(s, 4) == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(seg::select_top_k(std::vector<double>(5, 1.0), 2) == std::vector<std::size_t>{0, 1});
  CHECK_THROWS_AS(seg::select_top_k(s, 0), seg::SegmentationError);
  CHECK_THROWS_AS(seg::select_top_k(s, 5), seg::SegmentationError);

  // Permuting values permutes the selection.
  oracle::Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = random_gates(rng, 10);
    std::vector<std::size_t> perm(10);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> y(10);
    for (std::size_t i = 0; i < 10; ++i) y[perm[i]] = x[i];
    auto picked = seg::select_top_k(x, 4);
    std::vector<std::size_t> mapped;
    for (auto i : picked) mapped.push_back(perm[i]);
    std::sort(mapped.begin(), mapped.end());
    CHECK(seg::select_top_k(y, 4) == mapped);
  }
}

TEST_CASE("anchors_from_rate") {
  CHECK(seg::anchors_from_rate(500, 12) == 41);
  CHECK(seg::anchors_from_rate(37, 1) == 37);
  CHECK(seg::anchors_from_rate(5, 10) == 1);
}

TEST_CASE("cif worked trace") {
  const std::vector<double> alpha{0.4, 0.5, 0.3, 0.9};
  const auto s = seg::cif_segment(alpha, 1.0, seg::TailRule::FireIfHalf);
  REQUIRE(s.boundaries == std::vector<std::size_t>{2, 3});
  CHECK(s.left[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(s.right[0] == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(s.left[1] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(s.right[1] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(s.tail_mass == doctest::Approx(0.1).epsilon(1e-12));
  CHECK_FALSE(s.tail_fired);

  Tensor<double> h = Tensor<double>::matrix(4, 4);
  for (std::size_t t = 0; t < 4; ++t) h.at(t, t) = 1.0;
  const auto c = seg::cif_aggregate(h, alpha, s);
  CHECK(c.at(1, 2) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(c.at(1, 3) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(c.at(1, 0) == 0.0);
  CHECK(c.at(1, 1) == 0.0);
  CHECK(c.at(0, 0) == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(c.at(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(c.at(0, 2) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("cif exact fires and identity aggregation") {
  const std::vector<double> alpha{1.0, 1.0};
  const auto s = seg::cif_segment(alpha, 1.0, seg::TailRule::FireIfHalf);
  CHECK(s.boundaries == std::vector<std::size_t>{0, 1});
  CHECK(s.left == std::vector<double>{1.0, 1.0});
  CHECK(s.right == std::vector<double>{0.0, 0.0});
  oracle::Rng rng(4);
  const auto h = oracle::random_tensor(rng, {2, 3});
  CHECK(seg::cif_aggregate(h, alpha, s).data == h.data);
}

TEST_CASE("rescaled gates fire exactly T_y times") {
  const auto r = seg::rescale(std::vector<double>{0.2, 0.2, 0.2}, 2, 1.0);
  CHECK(seg::cif_segment(r, 1.0, seg::TailRule::AlwaysDrop).count() == 2);
  oracle::Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng() % 40;
    const std::size_t ty = 1 + rng() % n;
    const auto a = seg::rescale(random_gates(rng, n, 0.001, 1.0), ty, 1.0);
    const auto s = seg::cif_segment(a, 1.0, seg::TailRule::AlwaysDrop);
    CHECK(s.count() == ty);
    CHECK(s.tail_mass < 1e-9);
  }
}

TEST_CASE("tail rules") {
  const std::vector<double> alpha{0.6, 0.6, 0.5};  // fire at 1 with residual 0.2; tail 0.7
  const auto keep = seg::cif_segment(alpha, 1.0, seg::TailRule::FireIfHalf);
  CHECK(keep.boundaries == std::vector<std::size_t>{1, 2});
  CHECK(keep.tail_fired);
  CHECK(keep.left[1] == doctest::Approx(0.5).epsilon(1e-14));
  const auto drop = seg::cif_segment(alpha, 1.0, seg::TailRule::AlwaysDrop);
  CHECK(drop.boundaries == std::vector<std::size_t>{1});
  CHECK(drop.tail_mass == doctest::Approx(0.7).epsilon(1e-14));
}

TEST_CASE("cif agrees with a literal scan and conserves mass") {
  oracle::Rng rng(6);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng() % 30;
    const double beta = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
    const auto alpha = random_gates(rng, n, 0.0, beta);
    for (bool half : {false, true}) {
      const auto s = seg::cif_segment(alpha, beta, half ? seg::TailRule::FireIfHalf : seg::TailRule::AlwaysDrop);
      const auto o = oracle::cif_scan(alpha, beta, half);
      REQUIRE(s.boundaries == o.boundaries);
      CHECK(s.tail_fired == o.tail_fired);
      CHECK(std::abs(s.tail_mass - o.tail_mass) <= 1e-9);
      for (std::size_t m = 0; m < s.count(); ++m) {
        CHECK(std::abs(s.left[m] - o.left[m]) <= 1e-9);
        CHECK(std::abs(s.right[m] - o.right[m]) <= 1e-9);
        const auto b = s.boundaries[m];
        CHECK(std::abs(s.left[m] + s.right[m] - alpha[b]) <= 1e-9);
        if (s.tail_fired && m + 1 == s.count()) continue;
        double mass = s.left[m];
        const std::size_t start = m == 0 ? 0 : s.boundaries[m - 1] + 1;
        if (m > 0) mass += s.right[m - 1];
        for (std::size_t t = start; t < b; ++t) mass += alpha[t];
        CHECK(std::abs(mass - beta) <= 1e-9);
      }
      const auto h = oracle::random_tensor(rng, {n, 3});
      if (s.count() == 0) {
        CHECK_THROWS_AS(seg::cif_aggregate(h, alpha, s), seg::SegmentationError);
        continue;
      }
      const auto c = seg::cif_aggregate(h, alpha, s);
      const auto ref = oracle::cif_combine(h, alpha, o);
      REQUIRE(c.shape == ref.shape);
      for (std::size_t i = 0; i < c.size(); ++i) CHECK(std::abs(c[i] - ref[i]) <= 1e-12);
    }
  }
}

TEST_CASE("cif weight matrix reproduces the aggregate") {
  oracle::Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const auto alpha = random_gates(rng, 2 + rng() % 20);
    const auto s = seg::cif_segment(alpha, 1.0, seg::TailRule::FireIfHalf);
    if (s.count() == 0) continue;
    const auto h = oracle::random_tensor(rng, {alpha.size(), 4});
    const auto w = seg::cif_weight_matrix(alpha, s);
    const auto c = seg::cif_aggregate(h, alpha, s);
    for (std::size_t m = 0; m < s.count(); ++m) {
      for (std::size_t j = 0; j < 4; ++j) {
        double v = 0;
        for (std::size_t t = 0; t < alpha.size(); ++t) v += w.at(m, t) * h.at(t, j);
        CHECK(std::abs(v - c.at(m, j)) <= 1e-12);
      }
    }
  }
}

TEST_CASE("differentiable cif weights match the plain segmentation") {
  oracle::Rng rng(8);
  ad::Tape<double> tape(false);
  for (int trial = 0; trial < 50; ++trial) {
    const auto alpha = random_gates(rng, 8 + rng() % 10, 0.1, 1.0);
    seg::Segmentation seg_out;
    const auto w = seg::cif_weights(tape.constant(Tensor<double>({alpha.size()}, alpha)), 1.0,
                                    seg::TailRule::FireIfHalf, &seg_out);
    const auto s = seg::cif_segment(alpha, 1.0, seg::TailRule::FireIfHalf);
    CHECK(seg_out.boundaries == s.boundaries);
    const auto ref = seg::cif_weight_matrix(alpha, s);
    REQUIRE(w.value().shape == ref.shape);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(w.value()[i] - ref[i]) <= 1e-12);
  }
  CHECK_THROWS_AS(seg::cif_weights(tape.constant(Tensor<double>({2}, std::vector<double>{0.1, 0.1})), 1.0,
                                   seg::TailRule::AlwaysDrop),
                  seg::SegmentationError);
}

TEST_CASE("threshold boundaries reset after every fire") {
  const std::vector<double> a(3, 2.0 / 3.0);
  CHECK(seg::threshold_boundaries(a, 1.0) == std::vector<std::size_t>{1});
  CHECK(seg::cif_segment(a, 1.0, seg::TailRule::AlwaysDrop).boundaries == std::vector<std::size_t>{1, 2});
  CHECK(seg::threshold_boundaries(std::vector<double>{1.0, 1.0, 0.3}, 1.0) == std::vector<std::size_t>{0, 1});
}

TEST_CASE("uniform boundaries") {
  CHECK(seg::uniform_boundaries(10, 3) == std::vector<std::size_t>{2, 5, 8});
  CHECK(seg::uniform_boundaries(6, 6) == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});
  oracle::Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t tx = 1 + rng() % 100, ty = 1 + rng() % tx;
    const auto b = seg::uniform_boundaries(tx, ty);
    const std::size_t w = tx / ty;
    REQUIRE(b.size() == ty);
    for (std::size_t m = 0; m < ty; ++m) CHECK(b[m] + 1 == std::min(w * (m + 1), tx));
  }
}

TEST_CASE("anchor aggregation is a pure gather") {
  oracle::Rng rng(10);
  const auto h = oracle::random_tensor(rng, {6, 3});
  const std::vector<std::size_t> last{5};
  CHECK(seg::anchor_aggregate(h, std::span<const std::size_t>(last)).data ==
        std::vector<double>(h.data.end() - 3, h.data.end()));
  std::vector<std::size_t> all(6);
  std::iota(all.begin(), all.end(), 0);
  CHECK(seg::anchor_aggregate(h, std::span<const std::size_t>(all)).data == h.data);
  const std::vector<double> scores{0.3, 2.0, -1.0, 0.5, 1.5, 0.0};
  const auto idx = seg::select_top_k(scores, 3);
  const auto z = seg::anchor_aggregate(h, std::span<const std::size_t>(idx));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(z.at(r, j) == h.at(idx[r], j));
  }
  CHECK_THROWS(seg::anchor_aggregate(h, std::span<const std::size_t>()));
}

TEST_CASE("segment scores") {
  model::ModelConfig cfg;
  cfg.d_in = 4;
  cfg.d = 4;
  cfg.heads = 1;
  cfg.compressor = model::Compressor::Star;
  model::Model<double> m(cfg, 3);
  auto& p = m.params();
  oracle::Rng rng(11);
  const auto x = oracle::random_tensor(rng, {3, 4});
  p.find("seg.w1p")->value = oracle::random_tensor(rng, {4, 4});

  ad::Tape<double> tape(false);
  const auto s = seg::score_frames(tape, m.segmenter(), tape.constant(x));
  REQUIRE(s.value().shape == Shape{3});
  const auto& w1 = p.find("seg.w1")->value;
  const auto& w1p = p.find("seg.w1p")->value;
  const auto& b1 = p.find("seg.b1")->value;
  const auto& w2 = p.find("seg.w2")->value;
  const double b2 = p.find("seg.b2")->value[0];
  for (std::size_t t = 0; t < 3; ++t) {
    double out = b2;
    for (std::size_t j = 0; j < 4; ++j) {
      double hj = b1[j];
      const std::size_t prev = t == 0 ? 0 : t - 1;  // the first frame is its own predecessor
      for (std::size_t i = 0; i < 4; ++i) hj += x.at(t, i) * w1.at(i, j) + x.at(prev, i) * w1p.at(i, j);
      out += std::max(0.0, hj) * w2[j];
    }
    CHECK(s.value()[t] == doctest::Approx(out).epsilon(1e-13));
  }

  // Changing frame 1 moves scores 1 and 2 only.
  auto y = x;
  y.at(1, 0) += 0.5;
  ad::Tape<double> tape1(false);
  const auto s1 = seg::score_frames(tape1, m.segmenter(), tape1.constant(y));
  CHECK(s1.value()[0] == s.value()[0]);
  CHECK(s1.value()[1] != s.value()[1]);
  CHECK(s1.value()[2] != s.value()[2]);

  for (const char* name : {"seg.w1", "seg.w1p", "seg.b1", "seg.w2"}) {
    auto& v = p.find(name)->value;
    std::fill(v.data.begin(), v.data.end(), 0.0);
  }
  p.find("seg.b2")->value[0] = 0.25;
  ad::Tape<double> tape2(false);
  const auto s0 = seg::score_frames(tape2, m.segmenter(), tape2.constant(x));
  CHECK(s0.value().data == std::vector<double>(3, 0.25));
}

TEST_CASE("stride configs") {
  const auto c12 = seg::StrideConfig::for_rate(12);
  REQUIRE(c12.blocks.size() == 2);
  CHECK(c12.blocks[0].stride == 4);
  CHECK(c12.blocks[1].stride == 3);
  CHECK(c12.rate() == 12);
  CHECK(seg::StrideConfig::for_rate(6).rate() == 6);
  CHECK(seg::StrideConfig::for_rate(7).rate() == 7);
  CHECK(seg::StrideConfig::for_rate(1).rate() == 1);
  CHECK(seg::conv_output_length(24, 4) == 6);
  CHECK(seg::conv_output_length(6, 3) == 2);
  CHECK(seg::conv_output_length(25, 4) == 7);
}

TEST_CASE("convolution stack") {
  ad::Tape<double> tape(false);
  oracle::Rng rng(12);
  const std::size_t d = 3;

  SUBCASE("identity kernel with zero residual is the identity") {
    ad::ParameterSet<double> ps;
    seg::ConvBlockWeights<double> blk;
    blk.spec = {3, 1};
    Tensor<double> w = Tensor<double>::matrix(3 * d, d);
    for (std::size_t j = 0; j < d; ++j) w.at(d + j, j) = 1.0;  // center tap
    blk.weight = &ps.add("w", w);
    blk.bias = &ps.add("b", Tensor<double>::vector(d));
    blk.res1_weight = &ps.add("r1w", Tensor<double>::matrix(5 * d, d));
    blk.res1_bias = &ps.add("r1b", Tensor<double>::vector(d));
    blk.res2_weight = &ps.add("r2w", Tensor<double>::matrix(5 * d, d));
    blk.res2_bias = &ps.add("r2b", Tensor<double>::vector(d));
    const auto x = oracle::random_tensor(rng, {8, d});
    const std::vector<seg::ConvBlockWeights<double>> blocks{blk};
    const auto y = seg::cnn_compress<double>(tape, blocks, tape.constant(x));
    CHECK(y.value().data == x.data);
  }

  SUBCASE("strides (4,3) over 24 frames give 2 rows") {
    ad::ParameterSet<double> ps;
    std::vector<seg::ConvBlockWeights<double>> blocks;
    const auto cfg = seg::StrideConfig::for_rate(12);
    for (std::size_t b = 0; b < cfg.blocks.size(); ++b) {
      const auto k = cfg.blocks[b].kernel;
      const std::string n = std::to_string(b);
      seg::ConvBlockWeights<double> blk;
      blk.spec = cfg.blocks[b];
      blk.weight = &ps.add(n + "w", oracle::random_tensor(rng, {k * d, d}));
      blk.bias = &ps.add(n + "b", Tensor<double>::vector(d));
      blk.res1_weight = &ps.add(n + "r1w", oracle::random_tensor(rng, {5 * d, d}));
      blk.res1_bias = &ps.add(n + "r1b", Tensor<double>::vector(d));
      blk.res2_weight = &ps.add(n + "r2w", oracle::random_tensor(rng, {5 * d, d}));
      blk.res2_bias = &ps.add(n + "r2b", Tensor<double>::vector(d));
      blocks.push_back(blk);
    }
    const auto y = seg::cnn_compress<double>(tape, blocks, tape.constant(oracle::random_tensor(rng, {24, d})));
    CHECK(y.value().shape == Shape{2, d});
    CHECK_THROWS_AS(seg::cnn_compress<double>(tape, blocks, tape.constant(oracle::random_tensor(rng, {4, d}))),
                    seg::SegmentationError);
  }

  SUBCASE("shifting by one stride shifts interior outputs by one row") {
    const std::size_t k = 3, s = 2;
    const auto w = tape.constant(oracle::random_tensor(rng, {k * d, d}));
    const auto b = tape.constant(oracle::random_tensor(rng, {d}));
    const auto x = oracle::random_tensor(rng, {20, d});
    Tensor<double> shifted = Tensor<double>::matrix(20, d);
    for (std::size_t t = s; t < 20; ++t) {
      for (std::size_t j = 0; j < d; ++j) shifted.at(t, j) = x.at(t - s, j);
    }
    const auto y1 = seg::conv1d(tape.constant(x), w, b, k, s).value();
    const auto y2 = seg::conv1d(tape.constant(shifted), w, b, k, s).value();
    for (std::size_t r = 2; r + 2 < y1.rows(); ++r) {
      for (std::size_t j = 0; j < d; ++j) CHECK(y2.at(r + 1, j) == doctest::Approx(y1.at(r, j)).epsilon(1e-13));
    }
  }
}
