#include <cmath>
#include <filesystem>
#include <numbers>
#include <vector>

#include "doctest.h"
#include "secousti/audio.hpp"
#include "secousti/frontend.hpp"
#include "support.hpp"

using namespace secousti;

namespace {

// Slaney mel scale, written out independently of the library.
double hz_to_mel_ref(double f) {
  const double f_sp = 200.0 / 3.0, min_log_hz = 1000.0, min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return f < min_log_hz ? f / f_sp : min_log_mel + std::log(f / min_log_hz) / logstep;
}

double mel_to_hz_ref(double m) {
  const double f_sp = 200.0 / 3.0, min_log_hz = 1000.0, min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return m < min_log_mel ? m * f_sp : min_log_hz * std::exp(logstep * (m - min_log_mel));
}

// Band whose triangle responds most strongly to a pure tone at f (area-normalised filters).
int band_for_tone(double f, const MelConfig& cfg) {
  const double lo = hz_to_mel_ref(cfg.fmin), hi = hz_to_mel_ref(cfg.fmax);
  int best = -1;
  double best_w = -1;
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double a = mel_to_hz_ref(lo + (hi - lo) * m / (cfg.n_mels + 1));
    const double c = mel_to_hz_ref(lo + (hi - lo) * (m + 1) / (cfg.n_mels + 1));
    const double b = mel_to_hz_ref(lo + (hi - lo) * (m + 2) / (cfg.n_mels + 1));
    double w = 0;
    if (f > a && f <= c) w = (f - a) / (c - a);
    if (f > c && f < b) w = (b - f) / (b - c);
    w *= 2.0 / (b - a);
    if (w > best_w) best_w = w, best = m;
  }
  return best;
}

}  // namespace

TEST_CASE("mel of silence is the log floor with ceil(N/hop) frames") {
  MelConfig cfg;
  MelExtractor ext(cfg);
  const std::vector<float> zeros(22050, 0.0f);
  const MelSpectrogram m = ext.compute(zeros);
  CHECK(m.frames() == 87);
  CHECK(m.bands() == 80);
  const float floor_val = static_cast<float>(std::log(1e-5));
  for (float v : m.values.storage()) CHECK(v == floor_val);
  CHECK(ext.compute(std::vector<float>(256, 0.1f)).frames() == 1);
  CHECK(ext.compute(std::vector<float>(257, 0.1f)).frames() == 2);
}

TEST_CASE("a 440 Hz tone peaks in the band that contains 440 Hz") {
  MelConfig cfg;
  MelExtractor ext(cfg);
  std::vector<float> tone(22050);
  for (std::size_t n = 0; n < tone.size(); ++n) tone[n] = 0.5f * static_cast<float>(std::sin(2 * std::numbers::pi * 440.0 * n / 22050.0));
  const MelSpectrogram m = ext.compute(tone);
  const int expect = band_for_tone(440.0, cfg);
  for (std::size_t t = 4; t + 4 < m.frames(); ++t) {
    const auto row = m.values.row(t);
    const int arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    CHECK(arg == expect);
  }
}

TEST_CASE("mel rejects empty and non-finite input, and a wrong sample rate") {
  MelExtractor ext(MelConfig{});
  CHECK_THROWS(ext.compute(std::vector<float>{}));
  CHECK_THROWS(ext.compute(std::vector<float>{0.1f, NAN, 0.0f}));
  Waveform w;
  w.sample_rate = 16000;
  w.samples.assign(1000, 0.0f);
  CHECK_THROWS(ext.compute(w));
}

TEST_CASE("mel is shift-covariant at hop granularity") {
  MelConfig cfg;
  MelExtractor ext(cfg);
  Rng rng(3);
  std::vector<float> x(8192);
  for (auto& v : x) v = static_cast<float>(0.3 * rng.normal());
  const std::size_t k = 3;
  std::vector<float> y(k * 256, 0.0f);
  y.insert(y.end(), x.begin(), x.end());
  const auto mx = ext.compute(x).values, my = ext.compute(y).values;
  const std::size_t edge = static_cast<std::size_t>(cfg.n_fft / 2 / cfg.hop_length);
  for (std::size_t t = edge; t + edge < mx.rows(); ++t) {
    for (std::size_t c = 0; c < mx.cols(); ++c) REQUIRE(mx.at(t, c) == my.at(t + k, c));
  }
}

TEST_CASE("length regulator") {
  CHECK(length_regulate({{4, 7}, {2, 3}}) == std::vector<int>{4, 4, 7, 7, 7});
  CHECK(length_regulate({{5}, {1}}) == std::vector<int>{5});
  CHECK(length_regulate({{1, 2, 3}, {1, 1, 1}}) == std::vector<int>{1, 2, 3});
  try {
    length_regulate({{1, 2}, {2, 2}}, 5);
    FAIL("expected a duration mismatch");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find('4') != std::string::npos);
    CHECK(msg.find('5') != std::string::npos);
  }
  CHECK_THROWS(length_regulate({{1}, {0}}));
  // Monotone surjection with the given fibre sizes.
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    PhonemeSequence p;
    for (int i = 0; i < 6; ++i) {
      p.ids.push_back(i);
      p.durations.push_back(1 + static_cast<int>(rng.below(4)));
    }
    const auto f = length_regulate(p);
    CHECK(std::is_sorted(f.begin(), f.end()));
    for (int i = 0; i < 6; ++i) CHECK(std::count(f.begin(), f.end(), i) == p.durations[static_cast<std::size_t>(i)]);
  }
}

TEST_CASE("paralinguistic crops") {
  Rng data(1);
  MelSpectrogram m;
  m.values = secousti::testing::random_mel(500, 80, data);
  Rng a(42), b(42);
  const auto c1 = crop_paralinguistic_window(m, 259, a), c2 = crop_paralinguistic_window(m, 259, b);
  CHECK(c1.frames() == 259);
  CHECK(secousti::testing::bit_identical(c1.values, c2.values));

  MelSpectrogram s;
  s.values = secousti::testing::random_mel(100, 80, data);
  Rng r(5);
  const auto tiled = crop_paralinguistic_window(s, 259, r);
  CHECK(tiled.frames() == 259);
  // Tiling: every output row is some input row, and rows 100 apart repeat.
  for (std::size_t t = 0; t + 100 < 259; ++t) {
    for (std::size_t c = 0; c < 80; ++c) REQUIRE(tiled.values.at(t, c) == tiled.values.at(t + 100, c));
  }

  int distinct = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng x(seed), y(seed + 100);
    if (!secousti::testing::bit_identical(crop_paralinguistic_window(m, 259, x).values,
                                          crop_paralinguistic_window(m, 259, y).values))
      ++distinct;
  }
  CHECK(distinct >= 8);

  const auto ref = reference_window(m, 259);
  CHECK(secousti::testing::rows_identical(ref.values, m.values, 259));
}

TEST_CASE("synthetic corpus is deterministic and aligned") {
  CorpusOptions opts;
  const auto a = gen_synthetic_corpus(1, 2, opts), b = gen_synthetic_corpus(1, 2, opts);
  REQUIRE(a.size() == 2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(a[i].phonemes.ids == b[i].phonemes.ids);
    CHECK(a[i].waveform->samples == b[i].waveform->samples);
    CHECK(secousti::testing::bit_identical(a[i].mel.values, b[i].mel.values));
  }
  for (const auto& u : gen_synthetic_corpus(9, 12, opts)) {
    long sum = 0;
    for (int d : u.phonemes.durations) sum += d;
    CHECK(sum == static_cast<long>(u.mel.frames()));
    for (int id : u.phonemes.ids) CHECK((id >= 0 && id < opts.vocab_size));
  }
  CHECK(speaker_tilt(0, 2, 0.8) == -0.8);
  CHECK(speaker_tilt(1, 2, 0.8) == 0.8);
}

TEST_CASE("a phoneme's band signature differs between speakers by the spectral tilt") {
  CorpusOptions opts;
  MelExtractor ext(opts.mel);
  const auto fb_centres = [&] {
    std::vector<double> c;
    const double lo = hz_to_mel_ref(opts.mel.fmin), hi = hz_to_mel_ref(opts.mel.fmax);
    for (int m = 0; m < opts.mel.n_mels; ++m) c.push_back(mel_to_hz_ref(lo + (hi - lo) * (m + 1) / (opts.mel.n_mels + 1)));
    return c;
  }();
  for (int id : {0, 1, 2, 5}) {
    const auto a = ext.compute(synthesize_phoneme(id, -0.8, 8192, opts)).values;
    const auto b = ext.compute(synthesize_phoneme(id, 0.8, 8192, opts)).values;
    // Same speaker, same phoneme: identical samples, so identical frames.
    CHECK(synthesize_phoneme(id, 0.8, 8192, opts) == synthesize_phoneme(id, 0.8, 8192, opts));
    // Regress the per-band log-energy difference on log(f / 1 kHz) over bands with energy.
    const std::size_t t = a.rows() / 2;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int n = 0;
    for (std::size_t m = 0; m < a.cols(); ++m) {
      if (a.at(t, m) < -6 || b.at(t, m) < -6) continue;
      const double x = std::log(fb_centres[m] / 1000.0);
      const double y = b.at(t, m) - a.at(t, m);
      sx += x, sy += y, sxx += x * x, sxy += x * y, ++n;
    }
    REQUIRE(n > 5);
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    INFO("phoneme " << id << " slope " << slope);
    // Mel energies are magnitudes, so the log slope is the amplitude tilt difference itself.
    CHECK(slope == doctest::Approx(1.6).epsilon(0.05));
  }
}

TEST_CASE("manifest and corpus directory round trip") {
  CorpusOptions opts;
  const auto corpus = gen_synthetic_corpus(4, 3, opts);
  const auto dir = std::filesystem::temp_directory_path() / "secousti_corpus_test";
  std::filesystem::remove_all(dir);
  write_corpus(dir.string(), corpus);
  const auto back = load_corpus(dir.string(), opts.mel);
  REQUIRE(back.size() == corpus.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].speaker_id == corpus[i].speaker_id);
    CHECK(back[i].phonemes.ids == corpus[i].phonemes.ids);
    CHECK(back[i].phonemes.durations == corpus[i].phonemes.durations);
    CHECK(secousti::testing::bit_identical(back[i].mel.values, corpus[i].mel.values));
  }
  std::vector<ManifestRecord> recs{{"a.wav", 1, {{3, 4}, {2, 5}}}};
  CHECK(parse_manifest(format_manifest(recs)).front().phonemes.durations == std::vector<int>{2, 5});
  CHECK_THROWS(parse_manifest("a.wav\t0\t1 2\n"));
  CHECK_THROWS(parse_manifest("a.wav\tx\t1\t2\n"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("wav round trip") {
  Waveform w;
  w.sample_rate = 22050;
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) w.samples.push_back(static_cast<float>(rng.uniform(-1, 1)));
  const auto p = (std::filesystem::temp_directory_path() / "secousti_wav_test.wav").string();
  write_wav(p, w);
  const Waveform r = read_wav(p);
  CHECK(r.sample_rate == 22050);
  CHECK(r.samples == w.samples);
  write_wav(p, w, true);
  const Waveform q = read_wav(p);
  REQUIRE(q.samples.size() == w.samples.size());
  for (std::size_t i = 0; i < q.samples.size(); ++i) CHECK(std::abs(q.samples[i] - w.samples[i]) <= 1.5 / 32767);
  std::filesystem::remove(p);
}
