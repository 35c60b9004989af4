#include <cmath>
#include <numbers>
#include <vector>

#include "doctest.h"
#include "secousti/metrics.hpp"
#include "support.hpp"

using namespace secousti;
using secousti::testing::random_matrix;

TEST_CASE("log-spectral distance examples") {
  Rng rng(1);
  Tensor<double> ref = random_matrix<double>(4, 5, rng);
  for (auto& v : ref.storage()) v = 0.1 + std::abs(v);
  CHECK(lsd(ref, ref) == 0.0);
  Tensor<double> deg = ref;
  for (auto& v : deg.storage()) v *= 10.0;
  CHECK(lsd(ref, deg) == doctest::Approx(1.0).epsilon(1e-12));

  // Hand evaluation of a 2 x 3 pair: mean over frames of the RMS log10 ratio.
  Tensor<double> a(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  Tensor<double> b(Shape{2, 3}, std::vector<double>{2, 2, 1, 4, 10, 3});
  double total = 0;
  for (int t = 0; t < 2; ++t) {
    double s = 0;
    for (int k = 0; k < 3; ++k) {
      const double d = std::log10(a.at(t, k)) - std::log10(b.at(t, k));
      s += d * d;
    }
    total += std::sqrt(s / 3.0);
  }
  CHECK(lsd(a, b) == doctest::Approx(total / 2.0).epsilon(1e-12));
  CHECK_THROWS(lsd(a, random_matrix<double>(2, 4, rng)));
}

TEST_CASE("mel-cepstral distortion examples") {
  const double k = 10.0 * std::sqrt(2.0) / std::numbers::ln10;
  Tensor<double> ref = Tensor<double>::matrix(1, 14);
  Tensor<double> deg = ref;
  CHECK(mcd(ref, deg, 13) == 0.0);
  deg.at(0, 1) = 1.0;
  CHECK(mcd(ref, deg, 13) == doctest::Approx(k).epsilon(1e-12));
  CHECK(mcd(ref, deg, 13) == doctest::Approx(6.1421).epsilon(1e-4));

  Rng rng(2);
  const Tensor<double> r = random_matrix<double>(5, 14, rng);
  Tensor<double> d = random_matrix<double>(5, 14, rng);
  Tensor<double> d2 = d;
  for (std::size_t i = 0; i < d2.size(); ++i) d2[i] = r[i] + 2.0 * (d[i] - r[i]);
  CHECK(mcd(r, d2, 13) == doctest::Approx(2.0 * mcd(r, d, 13)).epsilon(1e-12));
  CHECK_THROWS(mcd(r, random_matrix<double>(4, 14, rng), 13));

  // c0 carries the frame energy and is excluded.
  Tensor<double> e = ref;
  e.at(0, 0) = 5.0;
  CHECK(mcd(ref, e, 13) == 0.0);
}

TEST_CASE("mel cepstrum of a constant frame has only c0") {
  Tensor<float> mel = Tensor<float>::matrix(2, 80, -3.0f);
  const Tensor<double> c = mel_cepstrum(mel, 13);
  CHECK(c.cols() == 14);
  CHECK(c.at(0, 0) == doctest::Approx(-3.0 * std::sqrt(80.0)).epsilon(1e-6));
  for (std::size_t k = 1; k < 14; ++k) CHECK(std::abs(c.at(1, k)) < 1e-5);
}

TEST_CASE("pitch metric examples") {
  const std::vector<double> ref{100, 120, 0, 90};
  PitchMetrics same = pitch_metrics(ref, ref);
  CHECK(same.msep == 0.0);
  CHECK(same.vuv_mismatch == 0.0);
  const PitchMetrics a = pitch_metrics(std::vector<double>{100, 0}, std::vector<double>{110, 0});
  CHECK(a.msep == 100.0);
  CHECK(a.vuv_mismatch == 0.0);
  CHECK(pitch_metrics(std::vector<double>{100, 100}, std::vector<double>{100, 0}).vuv_mismatch == 0.5);
  const PitchMetrics none = pitch_metrics(std::vector<double>{0, 100}, std::vector<double>{100, 0});
  CHECK(none.no_common_voiced);
  CHECK(none.msep == 0.0);
}

TEST_CASE("pitch tracker finds a steady tone") {
  const int sr = 22050;
  std::vector<float> x(sr / 2);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.5f * static_cast<float>(std::sin(2 * std::numbers::pi * 180.0 * i / sr));
  const std::vector<double> f0 = estimate_f0(x, sr);
  int voiced = 0;
  for (std::size_t i = 10; i + 10 < f0.size(); ++i) {
    if (f0[i] > 0) {
      ++voiced;
      CHECK(f0[i] == doctest::Approx(180.0).epsilon(0.01));
    }
  }
  CHECK(voiced > 50);
  const std::vector<double> quiet = estimate_f0(std::vector<float>(sr / 4, 0.0f), sr);
  for (double v : quiet) CHECK(v == 0.0);
}

TEST_CASE("evaluating a signal against itself is zero") {
  std::vector<float> x(22050);
  Rng rng(3);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = 0.3f * static_cast<float>(std::sin(2 * std::numbers::pi * 200.0 * i / 22050.0)) + 0.01f * static_cast<float>(rng.normal());
  }
  const MetricReport r = evaluate_audio(x, x, MelConfig{});
  CHECK(r.lsd == 0.0);
  CHECK(r.mcd == 0.0);
  CHECK(r.msep == 0.0);
  CHECK(r.vuv_mismatch == 0.0);
  CHECK(r.mel_mse == 0.0);
}
