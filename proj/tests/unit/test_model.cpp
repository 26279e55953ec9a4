#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "star/binary_io.hpp"
#include "star/model.hpp"

using namespace star;
using model::Model;
using model::ModelConfig;

namespace {

ModelConfig tiny(model::Compressor c = model::Compressor::Star) {
  ModelConfig cfg;
  cfg.d_in = 5;
  cfg.d = 8;
  cfg.enc_layers = 2;
  cfg.dec_layers = 2;
  cfg.heads = 2;
  cfg.ffn = 16;
  cfg.vocab = 9;
  cfg.max_positions = 64;
  cfg.max_target = 32;
  cfg.compressor = c;
  return cfg;
}

Tensor<double> rows_of(const Tensor<double>& x, std::size_t start, std::size_t count) {
  Tensor<double> out = Tensor<double>::matrix(count, x.cols());
  std::copy(x.data.begin() + start * x.cols(), x.data.begin() + (start + count) * x.cols(), out.data.begin());
  return out;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("star_test_model_" + name);
}

}  // namespace

TEST_CASE("config validation") {
  auto cfg = tiny();
  CHECK_NOTHROW(cfg.validate());
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), model::ModelError);
  cfg = tiny();
  cfg.vocab = 3;
  CHECK_THROWS_AS(cfg.validate(), model::ModelError);
  CHECK(ModelConfig::paper().d == 512);
  CHECK(ModelConfig::paper().heads == 8);
  CHECK(ModelConfig::desk().d == 64);
  CHECK(ModelConfig::desk().enc_layers == 2);
}

TEST_CASE("incremental encoding equals one-shot encoding") {
  const Model<double> m(tiny(), 1);
  oracle::Rng rng(2);
  const auto x = oracle::random_tensor(rng, {7, 5});
  const std::vector<std::uint8_t> flags{0, 1, 0, 0, 1, 0, 1};

  ad::Tape<double> tape(false);
  model::EncoderState<double> whole;
  const auto h = m.encode_causal(tape, x, flags, whole).value();

  for (std::size_t chunk : {1u, 2u, 3u}) {
    model::EncoderState<double> inc;
    std::vector<double> got;
    for (std::size_t start = 0; start < 7; start += chunk) {
      const std::size_t n = std::min<std::size_t>(chunk, 7 - start);
      const std::vector<std::uint8_t> f(flags.begin() + start, flags.begin() + start + n);
      const auto part = m.encode_causal(tape, rows_of(x, start, n), f, inc).value();
      got.insert(got.end(), part.data.begin(), part.data.end());
    }
    REQUIRE(got.size() == h.size());
    double worst = 0;
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - h[i]));
    CHECK(worst <= 1e-10);
    CHECK(inc.frames == 7);
    for (std::size_t l = 0; l < inc.keys.size(); ++l) {
      CHECK(inc.keys[l].rows() == 7);
      CHECK(inc.values[l].rows() == 7);
    }
  }
}

TEST_CASE("encoder causality") {
  const Model<double> m(tiny(), 3);
  oracle::Rng rng(4);
  const auto x = oracle::random_tensor(rng, {6, 5});
  ad::Tape<double> tape(false);
  model::EncoderState<double> s0;
  const auto h = m.encode_causal(tape, x, {}, s0).value();
  for (std::size_t t = 0; t < 6; ++t) {
    auto y = x;
    for (auto& v : y.row(t)) v += 0.5;
    model::EncoderState<double> s1;
    const auto g = m.encode_causal(tape, y, {}, s1).value();
    for (std::size_t r = 0; r < 6; ++r) {
      double diff = 0;
      for (std::size_t j = 0; j < 8; ++j) diff = std::max(diff, std::abs(g.at(r, j) - h.at(r, j)));
      if (r < t) {
        CHECK(diff == 0.0);
      } else if (r == t) {
        CHECK(diff > 0.0);
      }
    }
  }
}

TEST_CASE("anchor flags add the type embedding") {
  Model<double> m(tiny(), 5);
  oracle::Rng rng(6);
  const auto x = oracle::random_tensor(rng, {4, 5});
  const std::vector<std::uint8_t> none(4, 0), all(4, 1);
  auto encode = [&](const std::vector<std::uint8_t>& f) {
    ad::Tape<double> tape(false);
    model::EncoderState<double> s;
    return m.encode_causal(tape, x, f, s).value().data;
  };
  CHECK(encode(none) != encode(all));
  auto& e = m.params().find("anchor.e")->value;
  std::fill(e.data.begin(), e.data.end(), 0.0);
  CHECK(encode(none) == encode(all));
}

TEST_CASE("encoder shapes and errors") {
  const Model<double> m(tiny(), 7);
  ad::Tape<double> tape(false);
  model::EncoderState<double> s;
  const auto h = m.encode_causal(tape, Tensor<double>::matrix(1, 5, 0.3), {}, s);
  CHECK(h.shape() == Shape{1, 8});
  CHECK(s.frames == 1);
  CHECK_THROWS_AS(m.encode_causal(tape, Tensor<double>::matrix(2, 4), {}, s), ShapeError);
  model::EncoderState<double> full;
  m.encode_causal(tape, Tensor<double>::matrix(64, 5, 0.1), {}, full);
  CHECK_THROWS_AS(m.encode_causal(tape, Tensor<double>::matrix(1, 5), {}, full), model::ModelError);
}

TEST_CASE("cross-attention scores") {
  auto cfg = tiny();
  cfg.heads = 1;
  Model<double> m(cfg, 8);

  SUBCASE("identity projections on basis vectors") {
    for (const char* name : {"dec.0.cross.wq", "dec.0.cross.wk"}) {
      auto& w = m.params().find(name)->value;
      std::fill(w.data.begin(), w.data.end(), 0.0);
      for (std::size_t i = 0; i < 8; ++i) w.at(i, i) = 1.0;
    }
    ad::Tape<double> tape(false);
    Tensor<double> basis = Tensor<double>::matrix(3, 8);
    for (std::size_t i = 0; i < 3; ++i) basis.at(i, i) = 1.0;
    const auto s = m.cross_attention_scores(tape, 0, tape.constant(basis), tape.constant(basis));
    REQUIRE(s.size() == 1);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) CHECK(s[0].value().at(i, j) == doctest::Approx(i == j ? 1 / std::sqrt(8.0) : 0.0));
    }
  }

  SUBCASE("one anchor gives one row") {
    ad::Tape<double> tape(false);
    oracle::Rng rng(9);
    const auto s = m.cross_attention_scores(tape, 1, tape.constant(oracle::random_tensor(rng, {1, 8})),
                                            tape.constant(oracle::random_tensor(rng, {5, 8})));
    CHECK(s[0].shape() == Shape{1, 5});
    CHECK_THROWS_AS(m.cross_attention_scores(tape, 2, tape.constant(oracle::random_tensor(rng, {1, 8})),
                                             tape.constant(oracle::random_tensor(rng, {5, 8}))),
                    model::ModelError);
  }

  SUBCASE("matches a double loop per head") {
    auto cfg2 = tiny();
    const Model<double> m2(cfg2, 10);
    oracle::Rng rng(11);
    const auto z = oracle::random_tensor(rng, {4, 8});
    const auto y = oracle::random_tensor(rng, {3, 8});
    ad::Tape<double> tape(false);
    const auto s = m2.cross_attention_scores(tape, 1, tape.constant(z), tape.constant(y));
    const auto& wq = m2.params().find("dec.1.cross.wq")->value;
    const auto& wk = m2.params().find("dec.1.cross.wk")->value;
    const std::size_t dh = 4;
    REQUIRE(s.size() == 2);
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
          double v = 0;
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
            double k = 0, q = 0;
            for (std::size_t r = 0; r < 8; ++r) {
              k += z.at(i, r) * wk.at(r, c);
              q += y.at(j, r) * wq.at(r, c);
            }
            v += k * q;
          }
          CHECK(std::abs(s[h].value().at(i, j) - v / std::sqrt(4.0)) <= 1e-10);
        }
      }
    }
  }
}

TEST_CASE("score injection") {
  const Tensor<double> s({1, 1}, std::vector<double>{0.0});
  CHECK(model::inject_scores(s, std::vector<double>{1.5}).data == std::vector<double>{1.5});
  oracle::Rng rng(12);
  const auto big = oracle::random_tensor(rng, {3, 4});
  CHECK(model::inject_scores(big, std::vector<double>(3, 0.0)).data == big.data);
  const auto added = model::inject_scores(big, std::vector<double>{1, 2, 3});
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 4; ++j) CHECK(added.at(i, j) == big.at(i, j) + static_cast<double>(i + 1));
  }
  CHECK_THROWS_AS(model::inject_scores(big, std::vector<double>{1, 2}), ShapeError);
}

TEST_CASE("injection gradient identity") {
  oracle::Rng rng(13);
  double identity = 0, fd = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto r = oracle::injection_identity_trial(rng);
    identity = std::max(identity, r.identity_error);
    fd = std::max(fd, r.fd_error);
  }
  CHECK(identity <= 1e-12);
  CHECK(fd <= 1e-4);
}

TEST_CASE("injection reaches every decoder layer and head") {
  const Model<double> m(tiny(), 14);
  oracle::Rng rng(15);
  ad::Tape<double> tape;
  const auto z = tape.constant(oracle::random_tensor(rng, {3, 8}));
  const auto s = tape.leaf(oracle::random_tensor(rng, {3}));
  model::DecoderInputs<double> in;
  in.anchors = z;
  in.scores = s;
  model::CrossAttentionCapture<double> capture;
  const std::vector<int> tokens{model::kBos, 4, 5};
  const std::vector<int> targets{4, 5, model::kEos};
  tape.backward(ad::cross_entropy(m.decode(tape, tokens, in, &capture), targets));
  REQUIRE(capture.logits.size() == 4);  // 2 layers x 2 heads
  for (std::size_t i = 0; i < 3; ++i) {
    double summed = 0;
    for (const auto& l : capture.logits) {
      const auto g = l.grad();
      for (std::size_t q = 0; q < 3; ++q) summed += g.at(q, i);
    }
    CHECK(std::abs(summed - s.grad()[i]) <= 1e-12);
  }
}

TEST_CASE("infinite-lookback masks") {
  const auto lower = model::build_il_mask(3, 3, 1);
  for (std::size_t j = 0; j < 3; ++j) {
    for (std::size_t t = 0; t < 3; ++t) CHECK(lower[j][t] == (j <= t));
  }
  const auto full = model::build_il_mask(4, 3, 3);
  for (const auto& row : full) {
    for (bool v : row) CHECK(v);
  }
  CHECK(model::il_visible_counts(2, 4, 2) == std::vector<std::size_t>{2, 3});
  CHECK_THROWS_AS(model::il_visible_counts(2, 4, 0), model::ModelError);
}

TEST_CASE("decode step") {
  const Model<double> m(tiny(), 16);
  oracle::Rng rng(17);
  const auto z = oracle::random_tensor(rng, {4, 8});
  const std::vector<double> scores{0.1, -0.3, 0.7, 0.2};
  const std::vector<int> prefix{model::kBos, 5};

  const std::vector<std::size_t> masked{3, 3};
  const auto a = m.decode_step(prefix, z, scores, masked);
  const auto z3 = rows_of(z, 0, 3);
  const std::vector<double> s3(scores.begin(), scores.begin() + 3);
  const auto b = m.decode_step(prefix, z3, s3, {});
  REQUIRE(a.size() == 9);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-8);

  const auto all = m.decode_step(prefix, z, scores, {});
  CHECK(all != a);
  CHECK_THROWS(m.decode_step(std::vector<int>{5}, z, scores, {}));
  CHECK_THROWS(m.decode_step(prefix, Tensor<double>(), {}, {}));
}

TEST_CASE("greedy decoding is deterministic and bounded") {
  const Model<double> m(tiny(), 18);
  oracle::Rng rng(19);
  const auto z = oracle::random_tensor(rng, {3, 8});
  const auto a = m.greedy(z, {}, 6);
  CHECK(a == m.greedy(z, {}, 6));
  CHECK(a.size() <= 6);
  for (int t : a) {
    CHECK(t != model::kEos);
    CHECK(t >= 0);
    CHECK(t < 9);
  }
}

TEST_CASE("checkpoint round trip") {
  const Model<float> m(tiny(model::Compressor::Cnn), 20);
  const auto p1 = temp_path("a.ckpt"), p2 = temp_path("b.ckpt");
  m.save(p1.string());
  const auto loaded = Model<float>::load(p1.string());
  CHECK(loaded.config() == m.config());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    CHECK(loaded.params()[i].name == m.params()[i].name);
    CHECK(loaded.params()[i].value.data == m.params()[i].value.data);
  }
  loaded.save(p2.string());
  auto bytes = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<char>(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(bytes(p1) == bytes(p2));

  auto corrupt = bytes(p1);
  corrupt[0] = 'X';
  {
    std::ofstream out(p2, std::ios::binary);
    out.write(corrupt.data(), static_cast<std::streamsize>(corrupt.size()));
  }
  CHECK_THROWS_AS(Model<float>::load(p2.string()), io::FormatError);
  auto truncated = bytes(p1);
  truncated.resize(truncated.size() / 2);
  {
    std::ofstream out(p2, std::ios::binary);
    out.write(truncated.data(), static_cast<std::streamsize>(truncated.size()));
  }
  CHECK_THROWS_AS(Model<float>::load(p2.string()), io::FormatError);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("copy_matching and clone") {
  const Model<float> base(tiny(model::Compressor::None), 21);
  Model<float> star(tiny(model::Compressor::Star), 22);
  const std::size_t copied = model::copy_matching(base, star);
  CHECK(copied == base.params().size());
  CHECK(star.params().find("dec.out.w")->value.data == base.params().find("dec.out.w")->value.data);
  const auto c = star.clone();
  CHECK(c.config() == star.config());
  CHECK(c.params().find("seg.w1")->value.data == star.params().find("seg.w1")->value.data);
  CHECK(&c.params().find("seg.w1")->value != &star.params().find("seg.w1")->value);
}

TEST_CASE("positional encodings") {
  const auto pe = model::positional_encoding<double>(3, 2, 6);
  CHECK(pe.at(0, 0) == doctest::Approx(std::sin(3.0)));
  CHECK(pe.at(1, 1) == doctest::Approx(std::cos(4.0)));
}
