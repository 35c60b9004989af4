#include "secousti/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "secousti/frontend.hpp"

namespace secousti {

namespace {

void require_same_shape(const char* what, std::size_t r1, std::size_t c1, std::size_t r2, std::size_t c2) {
  if (r1 != r2 || c1 != c2) {
    std::ostringstream os;
    os << what << ": shape mismatch " << r1 << "x" << c1 << " vs " << r2 << "x" << c2;
    throw std::invalid_argument(os.str());
  }
}

}  // namespace

double lsd(const Tensor<double>& ref, const Tensor<double>& deg) {
  require_same_shape("lsd", ref.rows(), ref.cols(), deg.rows(), deg.cols());
  if (ref.rows() == 0 || ref.cols() == 0) return 0.0;
  constexpr double floor = 1e-5;
  double total = 0;
  for (std::size_t t = 0; t < ref.rows(); ++t) {
    double s = 0;
    for (std::size_t k = 0; k < ref.cols(); ++k) {
      const double d = std::log10(std::max(ref.at(t, k), floor)) - std::log10(std::max(deg.at(t, k), floor));
      s += d * d;
    }
    total += std::sqrt(s / static_cast<double>(ref.cols()));
  }
  return total / static_cast<double>(ref.rows());
}

Tensor<double> mel_cepstrum(const Tensor<float>& log_mel, int K) {
  const std::size_t M = log_mel.cols();
  const std::size_t n = static_cast<std::size_t>(K) + 1;
  if (K < 1 || n > M) throw std::invalid_argument("mel_cepstrum: need 1 <= K < n_mels");
  Tensor<double> out = Tensor<double>::matrix(log_mel.rows(), n);
  for (std::size_t t = 0; t < log_mel.rows(); ++t) {
    for (std::size_t k = 0; k < n; ++k) {
      double s = 0;
      for (std::size_t m = 0; m < M; ++m) {
        s += static_cast<double>(log_mel.at(t, m)) *
             std::cos(std::numbers::pi * static_cast<double>(k) * (static_cast<double>(m) + 0.5) / static_cast<double>(M));
      }
      out.at(t, k) = s * std::sqrt((k == 0 ? 1.0 : 2.0) / static_cast<double>(M));
    }
  }
  return out;
}

double mcd(const Tensor<double>& ref, const Tensor<double>& deg, int K) {
  require_same_shape("mcd", ref.rows(), ref.cols(), deg.rows(), deg.cols());
  if (K < 1 || static_cast<std::size_t>(K) >= ref.cols()) {
    throw std::invalid_argument("mcd: K=" + std::to_string(K) + " needs at least K+1 cepstral columns");
  }
  if (ref.rows() == 0) return 0.0;
  double total = 0;
  for (std::size_t t = 0; t < ref.rows(); ++t) {
    double s = 0;
    for (std::size_t k = 1; k <= static_cast<std::size_t>(K); ++k) {
      const double d = ref.at(t, k) - deg.at(t, k);
      s += d * d;
    }
    total += std::sqrt(s);
  }
  return 10.0 * std::sqrt(2.0) / std::log(10.0) * total / static_cast<double>(ref.rows());
}

PitchMetrics pitch_metrics(std::span<const double> ref_f0, std::span<const double> deg_f0) {
  if (ref_f0.size() != deg_f0.size()) {
    throw std::invalid_argument("pitch_metrics: track lengths " + std::to_string(ref_f0.size()) + " and " +
                                std::to_string(deg_f0.size()) + " differ");
  }
  PitchMetrics m;
  std::size_t both = 0, mismatch = 0;
  double se = 0;
  for (std::size_t i = 0; i < ref_f0.size(); ++i) {
    const bool vr = ref_f0[i] > 0, vd = deg_f0[i] > 0;
    if (vr != vd) ++mismatch;
    if (vr && vd) {
      const double d = ref_f0[i] - deg_f0[i];
      se += d * d;
      ++both;
    }
  }
  m.no_common_voiced = both == 0;
  m.msep = both ? se / static_cast<double>(both) : 0.0;
  m.vuv_mismatch = ref_f0.empty() ? 0.0 : static_cast<double>(mismatch) / static_cast<double>(ref_f0.size());
  return m;
}

std::vector<double> estimate_f0(std::span<const float> samples, int sample_rate, const PitchTrackerConfig& cfg) {
  const double sr = sample_rate;
  const std::size_t hop = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.hop_ms * 1e-3 * sr)));
  const std::size_t win = static_cast<std::size_t>(std::lround(cfg.window_ms * 1e-3 * sr));
  const std::size_t lag_min = static_cast<std::size_t>(std::floor(sr / cfg.fmax));
  const std::size_t lag_max = static_cast<std::size_t>(std::ceil(sr / cfg.fmin));
  const std::size_t frames = (samples.size() + hop - 1) / hop;
  std::vector<double> f0(frames, 0.0);
  std::vector<double> x(win + lag_max);
  for (std::size_t f = 0; f < frames; ++f) {
    const long start = static_cast<long>(f * hop) - static_cast<long>(win / 2);
    double mean = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const long s = start + static_cast<long>(i);
      x[i] = (s >= 0 && s < static_cast<long>(samples.size())) ? samples[static_cast<std::size_t>(s)] : 0.0;
    }
    for (std::size_t i = 0; i < win; ++i) mean += x[i] * x[i];
    if (std::sqrt(mean / static_cast<double>(win)) < cfg.silence_rms) continue;
    double best = 0;
    std::size_t best_lag = 0;
    std::vector<double> r(lag_max + 2, 0.0);
    for (std::size_t lag = lag_min; lag <= lag_max + 1 && lag < x.size(); ++lag) {
      double num = 0, e0 = 0, e1 = 0;
      for (std::size_t i = 0; i < win && i + lag < x.size(); ++i) {
        num += x[i] * x[i + lag];
        e0 += x[i] * x[i];
        e1 += x[i + lag] * x[i + lag];
      }
      r[lag] = (e0 > 0 && e1 > 0) ? num / std::sqrt(e0 * e1) : 0.0;
    }
    const auto is_peak = [&](std::size_t lag) { return r[lag] >= r[lag - 1] && r[lag] >= r[lag + 1]; };
    for (std::size_t lag = std::max<std::size_t>(lag_min, 1); lag <= lag_max; ++lag) {
      if (is_peak(lag) && r[lag] > best) best = r[lag];
    }
    // Multiples of the period correlate about as well as the period itself; prefer the shortest
    // lag that comes close to the best peak.
    for (std::size_t lag = std::max<std::size_t>(lag_min, 1); lag <= lag_max; ++lag) {
      if (is_peak(lag) && r[lag] >= 0.9 * best) {
        best = r[lag];
        best_lag = lag;
        break;
      }
    }
    if (best_lag == 0 || best < cfg.voicing_threshold) continue;
    // Parabolic refinement around the peak.
    const double a = r[best_lag - 1], b = r[best_lag], c = r[best_lag + 1];
    const double den = a - 2 * b + c;
    const double shift = den != 0 ? 0.5 * (a - c) / den : 0.0;
    f0[f] = sr / (static_cast<double>(best_lag) + std::clamp(shift, -0.5, 0.5));
  }
  return f0;
}

double mel_mse(const Tensor<float>& ref, const Tensor<float>& deg) {
  require_same_shape("mel_mse", ref.rows(), ref.cols(), deg.rows(), deg.cols());
  if (ref.size() == 0) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = static_cast<double>(ref[i]) - static_cast<double>(deg[i]);
    s += d * d;
  }
  return s / static_cast<double>(ref.size());
}

MetricReport evaluate_audio(std::span<const float> ref, std::span<const float> deg, const MelConfig& cfg) {
  const std::size_t n = std::min(ref.size(), deg.size());
  if (n == 0) throw std::invalid_argument("evaluate_audio: empty waveform");
  ref = ref.first(n);
  deg = deg.first(n);
  MelExtractor ext(cfg);
  const Tensor<double> sr = ext.stft().magnitude(ref);
  const Tensor<double> sd = ext.stft().magnitude(deg);
  const Tensor<float> mr = ext.compute(ref).values;
  const Tensor<float> md = ext.compute(deg).values;
  MetricReport r;
  r.lsd = lsd(sr, sd);
  r.mcd = mcd(mel_cepstrum(mr, 13), mel_cepstrum(md, 13), 13);
  r.mel_mse = mel_mse(mr, md);
  const auto fr = estimate_f0(ref, cfg.sample_rate);
  const auto fd = estimate_f0(deg, cfg.sample_rate);
  const PitchMetrics p = pitch_metrics(fr, fd);
  r.msep = p.msep;
  r.vuv_mismatch = p.vuv_mismatch;
  r.no_common_voiced = p.no_common_voiced;
  return r;
}

std::string format_report(const MetricReport& r) {
  std::ostringstream os;
  os << std::setprecision(6);
  os << "lsd\t" << r.lsd << "\n";
  os << "mcd\t" << r.mcd << "\n";
  os << "msep\t" << r.msep << "\n";
  os << "vuv_mismatch\t" << r.vuv_mismatch << "\n";
  os << "mel_mse\t" << r.mel_mse << "\n";
  if (r.no_common_voiced) os << "msep_flag\tno_common_voiced_frames\n";
  if (r.utilization) {
    os << "codebook_used_fraction\t" << r.utilization->used_fraction << "\n";
    os << "codebook_distinct\t" << r.utilization->distinct << "\n";
    os << "codebook_max_frequency\t" << r.utilization->max_frequency << "\n";
  }
  return os.str();
}

}  // namespace secousti
