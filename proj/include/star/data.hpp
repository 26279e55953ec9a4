#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "star/tensor.hpp"

// Synthetic frame-stream transduction corpus: every token is rendered as a
// run of noisy copies of its template vector, with optional silence runs
// in between.
namespace star::data {

class DataError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SyntheticConfig {
  std::size_t vocab_tokens = 64;  // real tokens; ids start after PAD/BOS/EOS
  std::size_t d_in = 32;
  std::size_t frames_min = 3;
  std::size_t frames_max = 9;
  double silence_prob = 0.2;
  std::size_t silence_min = 1;
  std::size_t silence_max = 3;
  double noise = 0.1;
  std::size_t tokens_min = 5;
  std::size_t tokens_max = 20;
  std::uint64_t seed = 1;

  void validate() const;
  // Vocabulary size including PAD, BOS and EOS.
  std::size_t vocab_size() const { return vocab_tokens + 3; }
  // Expected frames per output token, silence included.
  double expected_frames_per_token() const;
  std::uint64_t fingerprint() const;
};

struct FeatureSequence {
  Tensor<float> frames;                 // [T_x x d_in]
  std::vector<int> tokens;              // transcript, no BOS/EOS
  std::vector<std::size_t> boundaries;  // last frame of each token's span
  std::vector<std::uint8_t> silence;    // per frame; not stored on disk

  std::size_t frame_count() const { return frames.rows(); }
  bool operator==(const FeatureSequence& o) const {
    return frames.shape == o.frames.shape && frames.data == o.frames.data && tokens == o.tokens &&
           boundaries == o.boundaries;
  }
};

// Unit-norm template per token id (rows 0..2 unused and zero).
Tensor<float> token_templates(const SyntheticConfig& cfg);

// Utterance `index` of the corpus; depends only on (cfg, index).
FeatureSequence generate_one(const SyntheticConfig& cfg, const Tensor<float>& templates, std::size_t index);

// The same transcript rendered again with fresh frame counts, silences and
// noise drawn from `seed`.
FeatureSequence render_transcript(const SyntheticConfig& cfg, const Tensor<float>& templates,
                                  const std::vector<int>& tokens, std::uint64_t seed);

// Utterances first..first+n-1.
std::vector<FeatureSequence> generate(const SyntheticConfig& cfg, std::size_t n, std::size_t first = 0);

// Mean frames per output token over a corpus, silence included.
double frames_per_token(const std::vector<FeatureSequence>& corpus);

// Pre-generated colored (AR(1)-filtered Gaussian) noise clips [length x d_in].
struct NoiseBank {
  std::vector<Tensor<float>> clips;
};

NoiseBank make_noise_bank(std::size_t d_in, std::size_t clips, std::size_t length, std::uint64_t seed,
                          double gain = 1.0);

// Adds a noise clip over a contiguous span of floor(ratio * T_x) frames at
// a seeded offset. Transcript and boundaries are untouched.
FeatureSequence inject_noise(const FeatureSequence& seq, double ratio, const NoiseBank& bank, std::uint64_t seed);

// Start and length of the span inject_noise would use.
std::pair<std::size_t, std::size_t> noise_span(std::size_t frames, double ratio, std::uint64_t seed);

void write_features(const std::string& path, const std::vector<FeatureSequence>& seqs);
std::vector<FeatureSequence> read_features(const std::string& path);

// FNV-1a over the serialized corpus bytes.
std::uint64_t checksum(const std::vector<FeatureSequence>& seqs);

struct ManifestEntry {
  std::string path;
  std::string split;
  std::size_t count = 0;
  std::string fingerprint;
};

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

std::string hex64(std::uint64_t v);

}  // namespace star::data
