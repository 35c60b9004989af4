#pragma once

#include <cstdint>
#include <cstring>
#include <vector>

#include "secousti/codec.hpp"
#include "secousti/config.hpp"
#include "secousti/rng.hpp"
#include "secousti/tensor.hpp"

namespace secousti::testing {

// Tiny model for gradient checks and fast property tests.
inline CodecConfig toy_config() {
  CodecConfig c;
  c.mel.n_mels = 6;
  c.encoder_strides = {2};
  c.semantic_rate = 4;
  c.conv_channels = 4;
  c.conv_kernel = 3;
  c.residual_layers = 1;
  c.residual_compress = 2;
  c.model_dim = 8;
  c.heads = 2;
  c.layers = 1;
  c.ffn_dim = 8;
  c.attn_window = 3;
  c.acous_dim = 4;
  c.joint_dim = 4;
  c.fsq_d = 2;
  c.fsq_levels = 3;
  c.phoneme_vocab = 5;
  c.phoneme_layers = 1;
  c.para_dim = 3;
  c.para_frames = 6;
  c.para_channels = 4;
  c.para_conv_layers = 2;
  c.para_se_blocks = 1;
  c.para_se_reduction = 2;
  c.validate();
  return c;
}

// Desk widths with a short attention window so that key/value eviction is exercised.
inline CodecConfig small_config(int window = 250) {
  CodecConfig c;
  c.conv_channels = 16;
  c.model_dim = 32;
  c.heads = 4;
  c.layers = 2;
  c.ffn_dim = 64;
  c.attn_window = window;
  c.acous_dim = 16;
  c.joint_dim = 16;
  c.fsq_d = 2;
  c.fsq_levels = 5;
  c.phoneme_layers = 1;
  c.para_dim = 8;
  c.para_frames = 16;
  c.para_channels = 16;
  c.para_conv_layers = 2;
  c.validate();
  return c;
}

template <class Real>
Tensor<Real> random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double mean = 0.0, double stddev = 1.0) {
  Tensor<Real> t = Tensor<Real>::matrix(rows, cols);
  for (auto& v : t.storage()) v = static_cast<Real>(mean + stddev * rng.normal());
  return t;
}

// Log-mel-like input: values in a plausible dynamic range.
inline Tensor<float> random_mel(std::size_t frames, std::size_t bands, Rng& rng) {
  return random_matrix<float>(frames, bands, rng, -4.0, 2.0);
}

template <class Real>
bool rows_identical(const Tensor<Real>& a, const Tensor<Real>& b, std::size_t rows) {
  if (a.cols() != b.cols() || a.rows() < rows || b.rows() < rows) return false;
  return rows == 0 || std::memcmp(a.data(), b.data(), rows * a.cols() * sizeof(Real)) == 0;
}

template <class Real>
bool bit_identical(const Tensor<Real>& a, const Tensor<Real>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(Real)) == 0;
}

}  // namespace secousti::testing
