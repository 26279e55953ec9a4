#include "star/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "star/binary_io.hpp"

namespace star::data {

namespace {

constexpr char kFeatureMagic[8] = {'S', 'T', 'A', 'R', 'F', 'T', '0', '1'};
constexpr std::uint32_t kMaxDim = 1u << 20;
constexpr int kFirstTokenId = 3;  // ids 0..2 are PAD, BOS, EOS

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

std::size_t uniform_in(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

void serialize(std::ostream& out, const std::vector<FeatureSequence>& seqs) {
  io::write_bytes(out, kFeatureMagic, sizeof kFeatureMagic);
  io::write_u32(out, io::to_u32(seqs.size(), "sequence count"));
  for (const auto& s : seqs) {
    if (s.boundaries.size() != s.tokens.size()) {
      throw DataError("sequence has " + std::to_string(s.tokens.size()) + " tokens but " +
                      std::to_string(s.boundaries.size()) + " boundaries");
    }
    io::write_u32(out, io::to_u32(s.frames.rows(), "T_x"));
    io::write_u32(out, io::to_u32(s.frames.cols(), "d_in"));
    io::write_u32(out, io::to_u32(s.tokens.size(), "T_y"));
    for (float v : s.frames.data) io::write_f32(out, v);
    for (int t : s.tokens) io::write_u32(out, static_cast<std::uint32_t>(t));
    for (auto b : s.boundaries) io::write_u32(out, io::to_u32(b, "boundary"));
  }
}

}  // namespace

void SyntheticConfig::validate() const {
  if (vocab_tokens < 2) throw DataError("need at least 2 tokens");
  if (d_in == 0) throw DataError("frame dimension must be positive");
  if (frames_min == 0 || frames_min > frames_max) throw DataError("frames-per-token range is empty");
  if (silence_min == 0 || silence_min > silence_max) throw DataError("silence length range is empty");
  if (tokens_min == 0 || tokens_min > tokens_max) throw DataError("tokens-per-utterance range is empty");
  if (!(silence_prob >= 0 && silence_prob <= 1)) throw DataError("silence probability must lie in [0, 1]");
  if (!(noise >= 0)) throw DataError("noise level must be >= 0");
}

double SyntheticConfig::expected_frames_per_token() const {
  return 0.5 * static_cast<double>(frames_min + frames_max) +
         silence_prob * 0.5 * static_cast<double>(silence_min + silence_max);
}

std::uint64_t SyntheticConfig::fingerprint() const {
  std::ostringstream s;
  s << vocab_tokens << ',' << d_in << ',' << frames_min << ',' << frames_max << ',' << silence_prob << ','
    << silence_min << ',' << silence_max << ',' << noise << ',' << tokens_min << ',' << tokens_max << ','
    << seed;
  const std::string text = s.str();
  return io::fnv1a(text.data(), text.size());
}

Tensor<float> token_templates(const SyntheticConfig& cfg) {
  cfg.validate();
  auto rng = stream_rng(cfg.seed, 1, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<float> t = Tensor<float>::matrix(cfg.vocab_size(), cfg.d_in);
  for (std::size_t v = 3; v < cfg.vocab_size(); ++v) {
    std::vector<double> row(cfg.d_in);
    double norm = 0;
    for (auto& x : row) {
      x = normal(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < cfg.d_in; ++j) t.at(v, j) = static_cast<float>(row[j] / norm);
  }
  return t;
}

FeatureSequence generate_one(const SyntheticConfig& cfg, const Tensor<float>& templates, std::size_t index) {
  auto rng = stream_rng(cfg.seed, 2, index);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution silence(cfg.silence_prob);
  const std::size_t n_tokens = uniform_in(rng, cfg.tokens_min, cfg.tokens_max);

  FeatureSequence seq;
  std::vector<float> frames;
  auto emit = [&](std::size_t token, bool is_silence) {
    for (std::size_t j = 0; j < cfg.d_in; ++j) {
      const double base = is_silence ? 0.0 : templates.at(token, j);
      frames.push_back(static_cast<float>(base + cfg.noise * normal(rng)));
    }
    seq.silence.push_back(is_silence ? 1 : 0);
  };
  for (std::size_t i = 0; i < n_tokens; ++i) {
    if (silence(rng)) {
      const std::size_t len = uniform_in(rng, cfg.silence_min, cfg.silence_max);
      for (std::size_t f = 0; f < len; ++f) emit(0, true);
    }
    const int token = static_cast<int>(3 + uniform_in(rng, 0, cfg.vocab_tokens - 1));
    const std::size_t len = uniform_in(rng, cfg.frames_min, cfg.frames_max);
    for (std::size_t f = 0; f < len; ++f) emit(static_cast<std::size_t>(token), false);
    seq.tokens.push_back(token);
    seq.boundaries.push_back(seq.silence.size() - 1);
  }
  seq.frames = Tensor<float>({seq.silence.size(), cfg.d_in}, std::move(frames));
  return seq;
}

FeatureSequence render_transcript(const SyntheticConfig& cfg, const Tensor<float>& templates,
                                  const std::vector<int>& tokens, std::uint64_t seed) {
  auto rng = stream_rng(cfg.seed, 3, seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution silence(cfg.silence_prob);
  FeatureSequence seq;
  std::vector<float> frames;
  auto emit = [&](int token, bool is_silence) {
    for (std::size_t j = 0; j < cfg.d_in; ++j) {
      const double base = is_silence ? 0.0 : templates.at(static_cast<std::size_t>(token), j);
      frames.push_back(static_cast<float>(base + cfg.noise * normal(rng)));
    }
    seq.silence.push_back(is_silence ? 1 : 0);
  };
  for (int token : tokens) {
    if (token < kFirstTokenId || static_cast<std::size_t>(token) >= cfg.vocab_size()) {
      throw DataError("token " + std::to_string(token) + " is outside the vocabulary");
    }
    if (silence(rng)) {
      const std::size_t len = uniform_in(rng, cfg.silence_min, cfg.silence_max);
      for (std::size_t f = 0; f < len; ++f) emit(0, true);
    }
    const std::size_t len = uniform_in(rng, cfg.frames_min, cfg.frames_max);
    for (std::size_t f = 0; f < len; ++f) emit(token, false);
    seq.tokens.push_back(token);
    seq.boundaries.push_back(seq.silence.size() - 1);
  }
  seq.frames = Tensor<float>({seq.silence.size(), cfg.d_in}, std::move(frames));
  return seq;
}

std::vector<FeatureSequence> generate(const SyntheticConfig& cfg, std::size_t n, std::size_t first) {
  if (n == 0) throw DataError("corpus size must be >= 1");
  const auto templates = token_templates(cfg);
  std::vector<FeatureSequence> out(n);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) out[i] = generate_one(cfg, templates, first + i);
  return out;
}

double frames_per_token(const std::vector<FeatureSequence>& corpus) {
  std::size_t frames = 0, tokens = 0;
  for (const auto& s : corpus) {
    frames += s.frame_count();
    tokens += s.tokens.size();
  }
  if (tokens == 0) throw DataError("corpus has no tokens");
  return static_cast<double>(frames) / static_cast<double>(tokens);
}

NoiseBank make_noise_bank(std::size_t d_in, std::size_t clips, std::size_t length, std::uint64_t seed,
                          double gain) {
  if (d_in == 0 || clips == 0 || length == 0) throw DataError("noise bank dimensions must be positive");
  NoiseBank bank;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> coeff(0.5, 0.95);
  for (std::size_t c = 0; c < clips; ++c) {
    auto rng = stream_rng(seed, 3, c);
    Tensor<float> clip = Tensor<float>::matrix(length, d_in);
    std::vector<double> state(d_in, 0.0), rho(d_in);
    for (auto& r : rho) r = coeff(rng);
    // Per-frame norm ~ gain: each channel has stationary variance 1 / d_in.
    const double unit = gain / std::sqrt(static_cast<double>(d_in));
    for (std::size_t t = 0; t < length; ++t) {
      for (std::size_t j = 0; j < d_in; ++j) {
        state[j] = rho[j] * state[j] + std::sqrt(1.0 - rho[j] * rho[j]) * normal(rng);
        clip.at(t, j) = static_cast<float>(unit * state[j]);
      }
    }
    bank.clips.push_back(std::move(clip));
  }
  return bank;
}

std::pair<std::size_t, std::size_t> noise_span(std::size_t frames, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0 && ratio <= 1)) throw DataError("noise ratio must lie in [0, 1]");
  const auto len = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(frames)));
  if (len == 0) return {0, 0};
  auto rng = stream_rng(seed, 4, frames);
  return {uniform_in(rng, 0, frames - len), len};
}

FeatureSequence inject_noise(const FeatureSequence& seq, double ratio, const NoiseBank& bank, std::uint64_t seed) {
  const auto [start, len] = noise_span(seq.frame_count(), ratio, seed);
  FeatureSequence out = seq;
  if (len == 0) return out;
  if (bank.clips.empty()) throw DataError("noise bank is empty");
  const auto& clip = bank.clips[seed % bank.clips.size()];
  if (clip.cols() != seq.frames.cols()) throw DataError("noise bank frame dimension does not match");
  for (std::size_t t = 0; t < len; ++t) {
    const auto src = clip.row(t % clip.rows());
    auto dst = out.frames.row(start + t);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
  return out;
}

void write_features(const std::string& path, const std::vector<FeatureSequence>& seqs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io::FormatError("cannot open '" + path + "' for writing");
  serialize(out, seqs);
  if (!out) throw io::FormatError("write to '" + path + "' failed");
}

std::vector<FeatureSequence> read_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io::FormatError("cannot open feature file '" + path + "'");
  char magic[8];
  io::read_exact(in, magic, sizeof magic, "magic");
  if (std::memcmp(magic, kFeatureMagic, sizeof magic) != 0) {
    throw io::FormatError("'" + path + "' is not a feature file (bad magic)");
  }
  const std::uint32_t count = io::read_u32(in, "sequence count");
  std::vector<FeatureSequence> seqs;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t tx = io::read_u32(in, "T_x");
    const std::uint32_t din = io::read_u32(in, "d_in");
    const std::uint32_t ty = io::read_u32(in, "T_y");
    if (tx == 0 || din == 0 || tx > kMaxDim || din > kMaxDim || ty > tx) {
      throw io::FormatError("sequence " + std::to_string(i) + " has implausible dimensions " + std::to_string(tx) +
                            "x" + std::to_string(din) + ", T_y=" + std::to_string(ty));
    }
    FeatureSequence s;
    std::vector<float> frames(static_cast<std::size_t>(tx) * din);
    for (auto& v : frames) v = io::read_f32(in, "frames");
    s.frames = Tensor<float>({tx, din}, std::move(frames));
    s.tokens.resize(ty);
    for (auto& t : s.tokens) t = static_cast<int>(io::read_u32(in, "tokens"));
    s.boundaries.resize(ty);
    for (auto& b : s.boundaries) {
      b = io::read_u32(in, "boundaries");
      if (b >= tx) throw io::FormatError("boundary beyond the last frame in sequence " + std::to_string(i));
    }
    seqs.push_back(std::move(s));
  }
  return seqs;
}

std::uint64_t checksum(const std::vector<FeatureSequence>& seqs) {
  std::ostringstream out(std::ios::binary);
  serialize(out, seqs);
  const std::string bytes = out.str();
  return io::fnv1a(bytes.data(), bytes.size());
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io::FormatError("cannot open '" + path + "' for writing");
  for (const auto& e : entries) {
    nlohmann::json j{{"path", e.path}, {"split", e.split}, {"count", e.count}, {"fingerprint", e.fingerprint}};
    out << j.dump() << '\n';
  }
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io::FormatError("cannot open manifest '" + path + "'");
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("path").get<std::string>(), j.at("split").get<std::string>(),
                   j.at("count").get<std::size_t>(), j.at("fingerprint").get<std::string>()});
  }
  return out;
}

}  // namespace star::data
