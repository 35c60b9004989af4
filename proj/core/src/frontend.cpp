#include "secousti/frontend.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace secousti {
namespace {

// FFTW's planner is not thread-safe.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

// Reflect padding index (numpy "reflect" mode, repeated for short signals).
std::size_t reflect_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * static_cast<long>(n - 1);
  long m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<long>(n)) m = period - m;
  return static_cast<std::size_t>(m);
}

}  // namespace

struct Stft::Plans {
  fftw_plan forward = nullptr;
  fftw_plan inverse = nullptr;
};

Stft::Stft(const MelConfig& cfg)
    : n_fft_(cfg.n_fft), win_(cfg.win_length), hop_(cfg.hop_length), plans_(std::make_unique<Plans>()) {
  if (n_fft_ <= 0 || win_ <= 0 || win_ > n_fft_ || hop_ <= 0) {
    throw std::invalid_argument("stft: invalid n_fft/win/hop");
  }
  // Periodic Hann of length win, centred inside n_fft.
  window_.assign(static_cast<std::size_t>(n_fft_), 0.0);
  const int off = (n_fft_ - win_) / 2;
  for (int i = 0; i < win_; ++i) {
    window_[static_cast<std::size_t>(off + i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / win_);
  }
  std::lock_guard<std::mutex> lock(fftw_planner_mutex());
  double* in = fftw_alloc_real(static_cast<std::size_t>(n_fft_));
  fftw_complex* out = fftw_alloc_complex(bins());
  plans_->forward = fftw_plan_dft_r2c_1d(n_fft_, in, out, FFTW_ESTIMATE);
  plans_->inverse = fftw_plan_dft_c2r_1d(n_fft_, out, in, FFTW_ESTIMATE);
  fftw_free(in);
  fftw_free(out);
}

Stft::~Stft() {
  std::lock_guard<std::mutex> lock(fftw_planner_mutex());
  if (plans_->forward) fftw_destroy_plan(plans_->forward);
  if (plans_->inverse) fftw_destroy_plan(plans_->inverse);
}

std::size_t Stft::frame_count(std::size_t num_samples) const {
  return (num_samples + static_cast<std::size_t>(hop_) - 1) / static_cast<std::size_t>(hop_);
}

std::vector<std::complex<double>> Stft::analyze(std::span<const float> samples) const {
  if (samples.empty()) throw std::invalid_argument("stft: empty waveform");
  const std::size_t n = samples.size();
  const std::size_t frames = frame_count(n);
  const std::size_t nb = bins();
  std::vector<std::complex<double>> spec(frames * nb);
  double* in = fftw_alloc_real(static_cast<std::size_t>(n_fft_));
  fftw_complex* out = fftw_alloc_complex(nb);
  for (std::size_t t = 0; t < frames; ++t) {
    const long start = static_cast<long>(t) * hop_ - n_fft_ / 2;
    for (int i = 0; i < n_fft_; ++i) {
      in[i] = static_cast<double>(samples[reflect_index(start + i, n)]) * window_[static_cast<std::size_t>(i)];
    }
    fftw_execute_dft_r2c(plans_->forward, in, out);
    for (std::size_t k = 0; k < nb; ++k) spec[t * nb + k] = {out[k][0], out[k][1]};
  }
  fftw_free(in);
  fftw_free(out);
  return spec;
}

Tensor<double> Stft::magnitude(std::span<const float> samples) const {
  const auto spec = analyze(samples);
  const std::size_t nb = bins();
  Tensor<double> mag = Tensor<double>::matrix(spec.size() / nb, nb);
  for (std::size_t i = 0; i < spec.size(); ++i) mag[i] = std::abs(spec[i]);
  return mag;
}

std::vector<float> Stft::synthesize(const std::vector<std::complex<double>>& spec, std::size_t frames) const {
  const std::size_t nb = bins();
  if (spec.size() != frames * nb) throw std::invalid_argument("istft: spectrum size mismatch");
  const std::size_t len = frames * static_cast<std::size_t>(hop_);
  const long pad = n_fft_ / 2;
  std::vector<double> acc(len + static_cast<std::size_t>(n_fft_), 0.0);
  std::vector<double> norm(acc.size(), 0.0);
  double* out = fftw_alloc_real(static_cast<std::size_t>(n_fft_));
  fftw_complex* in = fftw_alloc_complex(nb);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t k = 0; k < nb; ++k) {
      in[k][0] = spec[t * nb + k].real();
      in[k][1] = spec[t * nb + k].imag();
    }
    fftw_execute_dft_c2r(plans_->inverse, in, out);
    const long start = static_cast<long>(t) * hop_;  // shifted by +pad relative to the signal
    for (int i = 0; i < n_fft_; ++i) {
      const double w = window_[static_cast<std::size_t>(i)];
      acc[static_cast<std::size_t>(start + i)] += out[i] / n_fft_ * w;
      norm[static_cast<std::size_t>(start + i)] += w * w;
    }
  }
  fftw_free(out);
  fftw_free(in);
  std::vector<float> y(len);
  for (std::size_t i = 0; i < len; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(pad);
    y[i] = static_cast<float>(norm[j] > 1e-8 ? acc[j] / norm[j] : 0.0);
  }
  return y;
}

double hz_to_mel(double hz) {
  constexpr double f_sp = 200.0 / 3.0;
  constexpr double min_log_hz = 1000.0;
  constexpr double min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  if (hz < min_log_hz) return hz / f_sp;
  return min_log_mel + std::log(hz / min_log_hz) / logstep;
}

double mel_to_hz(double mel) {
  constexpr double f_sp = 200.0 / 3.0;
  constexpr double min_log_hz = 1000.0;
  constexpr double min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  if (mel < min_log_mel) return mel * f_sp;
  return min_log_hz * std::exp(logstep * (mel - min_log_mel));
}

Tensor<double> mel_filterbank(const MelConfig& cfg) {
  const std::size_t nb = static_cast<std::size_t>(cfg.n_fft / 2 + 1);
  const std::size_t nm = static_cast<std::size_t>(cfg.n_mels);
  std::vector<double> pts(nm + 2);
  const double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(cfg.fmax);
  for (std::size_t i = 0; i < nm + 2; ++i) pts[i] = mel_to_hz(lo + (hi - lo) * i / static_cast<double>(nm + 1));
  Tensor<double> fb = Tensor<double>::matrix(nm, nb);
  for (std::size_t m = 0; m < nm; ++m) {
    const double enorm = 2.0 / (pts[m + 2] - pts[m]);
    for (std::size_t k = 0; k < nb; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.n_fft;
      const double lower = (f - pts[m]) / (pts[m + 1] - pts[m]);
      const double upper = (pts[m + 2] - f) / (pts[m + 2] - pts[m + 1]);
      fb.at(m, k) = std::max(0.0, std::min(lower, upper)) * enorm;
    }
  }
  return fb;
}

MelExtractor::MelExtractor(const MelConfig& cfg) : cfg_(cfg), stft_(cfg), fb_(mel_filterbank(cfg)) {}

MelSpectrogram MelExtractor::compute(std::span<const float> samples) const {
  if (samples.empty()) throw std::invalid_argument("compute_mel: empty waveform");
  for (float s : samples) {
    if (!std::isfinite(s)) throw std::invalid_argument("compute_mel: non-finite sample");
  }
  const Tensor<double> mag = stft_.magnitude(samples);
  const std::size_t frames = mag.rows(), nb = mag.cols(), nm = fb_.rows();
  MelSpectrogram mel;
  mel.sample_rate = cfg_.sample_rate;
  mel.hop_length = cfg_.hop_length;
  mel.values = Tensor<float>::matrix(frames, nm);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t m = 0; m < nm; ++m) {
      double e = 0;
      const double* w = fb_.data() + m * nb;
      const double* x = mag.data() + t * nb;
      for (std::size_t k = 0; k < nb; ++k) e += w[k] * x[k];
      mel.values.at(t, m) = static_cast<float>(std::log(std::max(e, cfg_.log_floor)));
    }
  }
  return mel;
}

MelSpectrogram MelExtractor::compute(const Waveform& wav) const {
  if (wav.sample_rate != cfg_.sample_rate) {
    throw std::invalid_argument("compute_mel: waveform sample rate " + std::to_string(wav.sample_rate) +
                                " does not match configured " + std::to_string(cfg_.sample_rate));
  }
  return compute(std::span<const float>(wav.samples));
}

std::vector<int> length_regulate(const PhonemeSequence& phonemes, long expected_frames) {
  if (phonemes.ids.size() != phonemes.durations.size()) {
    throw std::invalid_argument("length_regulate: " + std::to_string(phonemes.ids.size()) + " ids but " +
                                std::to_string(phonemes.durations.size()) + " durations");
  }
  long total = 0;
  for (int d : phonemes.durations) {
    if (d <= 0) throw std::invalid_argument("length_regulate: non-positive duration " + std::to_string(d));
    total += d;
  }
  if (expected_frames >= 0 && total != expected_frames) {
    throw std::invalid_argument("length_regulate: durations sum to " + std::to_string(total) +
                                " frames, expected " + std::to_string(expected_frames));
  }
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(total));
  for (std::size_t i = 0; i < phonemes.ids.size(); ++i) out.insert(out.end(), phonemes.durations[i], phonemes.ids[i]);
  return out;
}

namespace {

MelSpectrogram cyclic_window(const MelSpectrogram& mel, std::size_t start, std::size_t frames) {
  const std::size_t T = mel.frames(), C = mel.bands();
  if (T == 0) throw std::invalid_argument("paralinguistic window: empty mel");
  MelSpectrogram out;
  out.sample_rate = mel.sample_rate;
  out.hop_length = mel.hop_length;
  out.values = Tensor<float>::matrix(frames, C);
  for (std::size_t i = 0; i < frames; ++i) {
    const auto src = mel.values.row((start + i) % T);
    std::copy(src.begin(), src.end(), out.values.row(i).begin());
  }
  return out;
}

}  // namespace

MelSpectrogram crop_paralinguistic_window(const MelSpectrogram& mel, std::size_t frames, Rng& rng) {
  const std::size_t T = mel.frames();
  const std::size_t start = T >= frames ? rng.below(T - frames + 1) : rng.below(T);
  return cyclic_window(mel, start, frames);
}

MelSpectrogram reference_window(const MelSpectrogram& mel, std::size_t frames) {
  return cyclic_window(mel, 0, frames);
}

double speaker_tilt(int speaker, int num_speakers, double max_tilt) {
  if (num_speakers <= 1) return 0.0;
  return -max_tilt + 2.0 * max_tilt * speaker / (num_speakers - 1);
}

std::vector<float> synthesize_phoneme(int id, double tilt, std::size_t num_samples, const CorpusOptions& opts) {
  Rng rng(mix_seed(0x5ec0u, static_cast<std::uint64_t>(id)));
  const double sr = opts.mel.sample_rate;
  std::vector<double> freqs, amps, phases;
  const bool voiced = id % 4 != 3;
  if (voiced) {
    const double f0 = rng.uniform(100.0, 220.0);
    const double f1 = rng.uniform(300.0, 900.0);
    const double f2 = rng.uniform(1000.0, 3200.0);
    for (double f = f0; f < 5000.0; f += f0) {
      const double a = std::exp(-std::pow((f - f1) / 150.0, 2)) + 0.7 * std::exp(-std::pow((f - f2) / 250.0, 2)) + 0.03;
      freqs.push_back(f);
      amps.push_back(a);
      phases.push_back(rng.uniform(0.0, 2.0 * std::numbers::pi));
    }
  } else {
    const double centre = rng.uniform(2000.0, 5000.0);
    for (int k = 0; k < 48; ++k) {
      freqs.push_back(rng.uniform(centre - 400.0, centre + 400.0));
      amps.push_back(1.0);
      phases.push_back(rng.uniform(0.0, 2.0 * std::numbers::pi));
    }
  }
  double total = 0;
  for (std::size_t k = 0; k < freqs.size(); ++k) {
    amps[k] *= std::pow(freqs[k] / 1000.0, tilt);
    total += amps[k];
  }
  const double gain = 0.5 / total;
  std::vector<float> out(num_samples, 0.0f);
  const std::size_t fade = std::min<std::size_t>(64, num_samples / 2);
  for (std::size_t n = 0; n < num_samples; ++n) {
    double s = 0;
    for (std::size_t k = 0; k < freqs.size(); ++k) {
      s += amps[k] * std::sin(2.0 * std::numbers::pi * freqs[k] * static_cast<double>(n) / sr + phases[k]);
    }
    double env = 1.0;
    if (n < fade) env = 0.5 - 0.5 * std::cos(std::numbers::pi * n / fade);
    if (num_samples - 1 - n < fade) env = 0.5 - 0.5 * std::cos(std::numbers::pi * (num_samples - 1 - n) / fade);
    out[n] = static_cast<float>(s * gain * env);
  }
  return out;
}

std::vector<Utterance> gen_synthetic_corpus(std::uint64_t seed, int n_utts, const CorpusOptions& opts) {
  if (n_utts < 1) throw std::invalid_argument("gen_synthetic_corpus: n_utts must be >= 1");
  if (opts.vocab_size < 1 || opts.num_speakers < 1 || opts.min_phonemes < 1 ||
      opts.max_phonemes < opts.min_phonemes || opts.min_duration < 1 || opts.max_duration < opts.min_duration) {
    throw std::invalid_argument("gen_synthetic_corpus: invalid corpus options");
  }
  MelExtractor mel(opts.mel);
  const std::size_t hop = static_cast<std::size_t>(opts.mel.hop_length);
  std::vector<Utterance> out;
  out.reserve(static_cast<std::size_t>(n_utts));
  for (int u = 0; u < n_utts; ++u) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(u)));
    Utterance utt;
    char name[32];
    std::snprintf(name, sizeof(name), "utt%04d", u);
    utt.name = name;
    utt.speaker_id = u % opts.num_speakers;
    const double tilt = speaker_tilt(utt.speaker_id, opts.num_speakers, opts.max_tilt);
    const int n_ph = opts.min_phonemes + static_cast<int>(rng.below(static_cast<std::uint64_t>(opts.max_phonemes - opts.min_phonemes + 1)));
    Waveform wav;
    wav.sample_rate = opts.mel.sample_rate;
    for (int p = 0; p < n_ph; ++p) {
      const int id = static_cast<int>(rng.below(static_cast<std::uint64_t>(opts.vocab_size)));
      const int dur = opts.min_duration + static_cast<int>(rng.below(static_cast<std::uint64_t>(opts.max_duration - opts.min_duration + 1)));
      utt.phonemes.ids.push_back(id);
      utt.phonemes.durations.push_back(dur);
      const auto seg = synthesize_phoneme(id, tilt, static_cast<std::size_t>(dur) * hop, opts);
      wav.samples.insert(wav.samples.end(), seg.begin(), seg.end());
    }
    utt.mel = mel.compute(wav);
    utt.waveform = std::move(wav);
    out.push_back(std::move(utt));
  }
  return out;
}

std::vector<ManifestRecord> parse_manifest(const std::string& text) {
  std::vector<ManifestRecord> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  auto parse_ints = [&](const std::string& field, const char* what) {
    std::vector<int> v;
    std::istringstream fs(field);
    std::string tok;
    while (fs >> tok) {
      try {
        std::size_t used = 0;
        v.push_back(std::stoi(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw std::invalid_argument("manifest line " + std::to_string(lineno) + ": bad " + what + " '" + tok + "'");
      }
    }
    return v;
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::string f;
    std::istringstream ls(line);
    while (std::getline(ls, f, '\t')) fields.push_back(f);
    if (fields.size() != 4) {
      throw std::invalid_argument("manifest line " + std::to_string(lineno) + ": expected 4 tab-separated fields");
    }
    ManifestRecord r;
    r.wav_path = fields[0];
    const auto spk = parse_ints(fields[1], "speaker id");
    if (spk.size() != 1) throw std::invalid_argument("manifest line " + std::to_string(lineno) + ": bad speaker id");
    r.speaker_id = spk[0];
    r.phonemes.ids = parse_ints(fields[2], "phoneme id");
    r.phonemes.durations = parse_ints(fields[3], "duration");
    if (r.phonemes.ids.size() != r.phonemes.durations.size() || r.phonemes.ids.empty()) {
      throw std::invalid_argument("manifest line " + std::to_string(lineno) + ": id/duration count mismatch");
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string format_manifest(const std::vector<ManifestRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += r.wav_path + "\t" + std::to_string(r.speaker_id) + "\t";
    for (std::size_t i = 0; i < r.phonemes.ids.size(); ++i) {
      if (i) out += " ";
      out += std::to_string(r.phonemes.ids[i]);
    }
    out += "\t";
    for (std::size_t i = 0; i < r.phonemes.durations.size(); ++i) {
      if (i) out += " ";
      out += std::to_string(r.phonemes.durations[i]);
    }
    out += "\n";
  }
  return out;
}

void write_corpus(const std::string& dir, const std::vector<Utterance>& utts) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<ManifestRecord> records;
  for (const auto& u : utts) {
    if (!u.waveform) throw std::invalid_argument("write_corpus: utterance " + u.name + " has no waveform");
    const std::string file = u.name + ".wav";
    write_wav((fs::path(dir) / file).string(), *u.waveform);
    records.push_back({file, u.speaker_id, u.phonemes});
  }
  std::ofstream m(fs::path(dir) / "manifest.tsv");
  if (!m) throw std::runtime_error("cannot write manifest in " + dir);
  m << format_manifest(records);
}

std::vector<Utterance> load_corpus(const std::string& dir, const MelConfig& cfg) {
  namespace fs = std::filesystem;
  const fs::path manifest = fs::path(dir) / "manifest.tsv";
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error("cannot open manifest: " + manifest.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  MelExtractor mel(cfg);
  std::vector<Utterance> out;
  for (auto& r : parse_manifest(ss.str())) {
    Utterance u;
    const fs::path wav_path = fs::path(r.wav_path).is_absolute() ? fs::path(r.wav_path) : fs::path(dir) / r.wav_path;
    u.name = fs::path(r.wav_path).stem().string();
    u.waveform = read_wav(wav_path.string());
    u.mel = mel.compute(*u.waveform);
    u.speaker_id = r.speaker_id;
    u.phonemes = std::move(r.phonemes);
    length_regulate(u.phonemes, static_cast<long>(u.mel.frames()));
    out.push_back(std::move(u));
  }
  return out;
}

}  // namespace secousti
