#pragma once

// Per-frame forward kernels shared by the autodiff ops and the streaming runtime.
// Both paths call exactly these functions with the same operands in the same order,
// which is what makes streamed output bit-identical to offline output.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace secousti::kernels {

template <class Real>
inline Real elu(Real x) {
  return x > Real(0) ? x : std::expm1(x);
}
template <class Real>
inline Real elu_grad(Real x) {
  return x > Real(0) ? Real(1) : std::exp(x);
}
template <class Real>
inline Real relu(Real x) {
  return x > Real(0) ? x : Real(0);
}
template <class Real>
inline Real sigmoid(Real x) {
  return Real(1) / (Real(1) + std::exp(-x));
}

// y = b + x * W, with W stored [in x out].
template <class Real>
inline void affine_row(const Real* x, std::size_t in, const Real* w, const Real* b, std::size_t out,
                       Real* y) {
  if (b) {
    std::copy(b, b + out, y);
  } else {
    std::fill(y, y + out, Real(0));
  }
  for (std::size_t c = 0; c < in; ++c) {
    const Real xv = x[c];
    const Real* wr = w + c * out;
    for (std::size_t o = 0; o < out; ++o) y[o] += xv * wr[o];
  }
}

// One output frame of a 1-D convolution. taps[j] is the input frame multiplied by kernel
// tap j, or nullptr where the tap falls into zero padding. W is stored [K x in x out].
template <class Real>
inline void conv_frame(std::span<const Real* const> taps, std::size_t in, const Real* w,
                       const Real* b, std::size_t out, Real* y) {
  std::copy(b, b + out, y);
  for (std::size_t j = 0; j < taps.size(); ++j) {
    const Real* x = taps[j];
    if (!x) continue;
    const Real* wj = w + j * in * out;
    for (std::size_t c = 0; c < in; ++c) {
      const Real xv = x[c];
      const Real* wr = wj + c * out;
      for (std::size_t o = 0; o < out; ++o) y[o] += xv * wr[o];
    }
  }
}

template <class Real>
struct NormStats {
  Real mean;
  Real rstd;
};

template <class Real>
inline NormStats<Real> layer_norm_row(const Real* x, std::size_t n, const Real* gamma,
                                      const Real* beta, Real eps, Real* y) {
  Real mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += x[i];
  mean /= static_cast<Real>(n);
  Real var = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Real d = x[i] - mean;
    var += d * d;
  }
  var /= static_cast<Real>(n);
  const Real rstd = Real(1) / std::sqrt(var + eps);
  for (std::size_t i = 0; i < n; ++i) y[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
  return {mean, rstd};
}

// Rotary embedding on interleaved pairs (2i, 2i+1) of every head. inverse=true applies the
// transposed rotation, which is the backward map.
template <class Real>
inline void rope_row(Real* row, std::size_t heads, std::size_t head_dim, std::size_t pos,
                     double base, bool inverse = false) {
  const std::size_t half = head_dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double inv_freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    const double angle = static_cast<double>(pos) * inv_freq;
    const Real c = static_cast<Real>(std::cos(angle));
    const Real s = static_cast<Real>(inverse ? -std::sin(angle) : std::sin(angle));
    for (std::size_t h = 0; h < heads; ++h) {
      Real* p = row + h * head_dim + 2 * i;
      const Real a = p[0];
      const Real b = p[1];
      p[0] = a * c - b * s;
      p[1] = a * s + b * c;
    }
  }
}

// Attention of one query frame over keys/values given oldest-first. probs (optional) receives
// heads x keys.size() softmax weights.
template <class Real>
inline void attend_row(const Real* q, std::span<const Real* const> keys,
                       std::span<const Real* const> values, std::size_t heads,
                       std::size_t head_dim, Real* out, Real* probs = nullptr) {
  const std::size_t n = keys.size();
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(head_dim));
  std::vector<Real> p(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * head_dim;
    Real mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      Real s = 0;
      for (std::size_t i = 0; i < head_dim; ++i) s += q[off + i] * keys[j][off + i];
      p[j] = s * scale;
      mx = std::max(mx, p[j]);
    }
    Real denom = 0;
    for (std::size_t j = 0; j < n; ++j) {
      p[j] = std::exp(p[j] - mx);
      denom += p[j];
    }
    Real* o = out + off;
    std::fill(o, o + head_dim, Real(0));
    for (std::size_t j = 0; j < n; ++j) {
      p[j] /= denom;
      const Real* v = values[j] + off;
      for (std::size_t i = 0; i < head_dim; ++i) o[i] += p[j] * v[i];
    }
    if (probs) std::copy(p.begin(), p.end(), probs + h * n);
  }
}

}  // namespace secousti::kernels
