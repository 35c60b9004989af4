#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "secousti/audio.hpp"
#include "secousti/config.hpp"
#include "secousti/rng.hpp"
#include "secousti/tensor.hpp"

namespace secousti {

// Frame-major natural-log mel energies [frames x n_mels].
struct MelSpectrogram {
  Tensor<float> values;
  int sample_rate = 22050;
  int hop_length = 256;

  std::size_t frames() const { return values.rows(); }
  std::size_t bands() const { return values.cols(); }
};

// Short-time Fourier transform with a periodic Hann window and reflect center padding.
// Frame t is centred on sample t * hop; a signal of N samples has ceil(N / hop) frames.
class Stft {
 public:
  explicit Stft(const MelConfig& cfg);
  ~Stft();
  Stft(const Stft&) = delete;
  Stft& operator=(const Stft&) = delete;

  std::size_t bins() const { return static_cast<std::size_t>(n_fft_ / 2 + 1); }
  std::size_t frame_count(std::size_t num_samples) const;
  int hop() const { return hop_; }
  int n_fft() const { return n_fft_; }

  // Complex spectrum [frames x bins], row-major.
  std::vector<std::complex<double>> analyze(std::span<const float> samples) const;
  Tensor<double> magnitude(std::span<const float> samples) const;
  // Weighted overlap-add inverse producing frames * hop samples.
  std::vector<float> synthesize(const std::vector<std::complex<double>>& spec, std::size_t frames) const;

 private:
  struct Plans;
  int n_fft_;
  int win_;
  int hop_;
  std::vector<double> window_;
  std::unique_ptr<Plans> plans_;
};

// Slaney-style triangular filterbank [n_mels x bins], area normalised.
Tensor<double> mel_filterbank(const MelConfig& cfg);
double hz_to_mel(double hz);
double mel_to_hz(double mel);

class MelExtractor {
 public:
  explicit MelExtractor(const MelConfig& cfg);
  MelSpectrogram compute(std::span<const float> samples) const;
  MelSpectrogram compute(const Waveform& wav) const;
  const MelConfig& config() const { return cfg_; }
  const Tensor<double>& filterbank() const { return fb_; }
  const Stft& stft() const { return stft_; }

 private:
  MelConfig cfg_;
  Stft stft_;
  Tensor<double> fb_;
};

struct PhonemeSequence {
  std::vector<int> ids;
  std::vector<int> durations;  // frames per phoneme
};

struct Utterance {
  std::string name;
  MelSpectrogram mel;
  PhonemeSequence phonemes;
  int speaker_id = 0;
  std::optional<Waveform> waveform;
};

// Expands each phoneme id by its duration. expected_frames (if >= 0) must equal the
// duration sum.
std::vector<int> length_regulate(const PhonemeSequence& phonemes, long expected_frames = -1);

// Random crop of `frames` frames; shorter inputs are tiled cyclically first.
MelSpectrogram crop_paralinguistic_window(const MelSpectrogram& mel, std::size_t frames, Rng& rng);
// Deterministic inference-time reference: the first `frames` frames (tiled if shorter).
MelSpectrogram reference_window(const MelSpectrogram& mel, std::size_t frames);

struct CorpusOptions {
  int vocab_size = 32;
  int num_speakers = 2;
  int min_phonemes = 8;
  int max_phonemes = 16;
  int min_duration = 3;
  int max_duration = 8;
  // Amplitude exponent per speaker: partials are scaled by (f / 1 kHz)^tilt.
  double max_tilt = 0.8;
  MelConfig mel;
};

double speaker_tilt(int speaker, int num_speakers, double max_tilt);

// Deterministic synthetic corpus: every phoneme is a fixed tone or noise-band pattern,
// speakers differ only by spectral tilt.
std::vector<Utterance> gen_synthetic_corpus(std::uint64_t seed, int n_utts, const CorpusOptions& opts);

// Samples of phoneme `id` spoken by a speaker with the given tilt.
std::vector<float> synthesize_phoneme(int id, double tilt, std::size_t num_samples, const CorpusOptions& opts);

struct ManifestRecord {
  std::string wav_path;
  int speaker_id = 0;
  PhonemeSequence phonemes;
};

std::vector<ManifestRecord> parse_manifest(const std::string& text);
std::string format_manifest(const std::vector<ManifestRecord>& records);
// Writes <dir>/manifest.tsv and one wav per utterance.
void write_corpus(const std::string& dir, const std::vector<Utterance>& utts);
// Loads <dir>/manifest.tsv (wav paths relative to dir) and computes mels.
std::vector<Utterance> load_corpus(const std::string& dir, const MelConfig& cfg);

}  // namespace secousti
