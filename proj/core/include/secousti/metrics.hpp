#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "secousti/config.hpp"
#include "secousti/quantizer.hpp"
#include "secousti/tensor.hpp"

namespace secousti {

// Log-spectral distance between two non-negative spectrograms [frames x bins], base 10 with a
// 1e-5 floor.
double lsd(const Tensor<double>& ref, const Tensor<double>& deg);

// Orthonormal DCT-II of each log-mel frame, keeping coefficients c0..cK.
Tensor<double> mel_cepstrum(const Tensor<float>& log_mel, int K);

// Mel-cepstral distortion over c1..cK of [frames x (>K)] cepstra.
double mcd(const Tensor<double>& ref, const Tensor<double>& deg, int K);

struct PitchMetrics {
  double msep = 0;
  double vuv_mismatch = 0;
  // Set when no frame is voiced in both tracks; msep is then reported as 0.
  bool no_common_voiced = false;
};

// 0 encodes an unvoiced frame.
PitchMetrics pitch_metrics(std::span<const double> ref_f0, std::span<const double> deg_f0);

struct PitchTrackerConfig {
  double hop_ms = 5.0;
  double window_ms = 40.0;
  double fmin = 60.0;
  double fmax = 500.0;
  double voicing_threshold = 0.5;
  double silence_rms = 1e-3;
};

// Normalized autocorrelation F0 track, one value per hop.
std::vector<double> estimate_f0(std::span<const float> samples, int sample_rate, const PitchTrackerConfig& cfg = {});

double mel_mse(const Tensor<float>& ref, const Tensor<float>& deg);

struct MetricReport {
  double lsd = 0;
  double mcd = 0;
  double msep = 0;
  double vuv_mismatch = 0;
  double mel_mse = 0;
  bool no_common_voiced = false;
  std::optional<Utilization> utilization;
};

// Compares two waveforms at the mel frontend's sample rate; the longer one is trimmed.
MetricReport evaluate_audio(std::span<const float> ref, std::span<const float> deg, const MelConfig& cfg);

std::string format_report(const MetricReport& r);

}  // namespace secousti
