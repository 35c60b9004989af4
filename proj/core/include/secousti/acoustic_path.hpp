#pragma once

#include <cstddef>

#include "secousti/config.hpp"
#include "secousti/layers.hpp"

namespace secousti {

inline constexpr const char* kSpeechEncoder = "speech_encoder";
inline constexpr const char* kAcousticProjection = "acoustic_projection";
inline constexpr const char* kSpeechDecoder = "speech_decoder";

TransformerSpec projection_spec(const CodecConfig& cfg);
// Dilation of residual unit j inside every stage.
std::size_t residual_dilation(const CodecConfig& cfg, int j);

template <class Real> void init_speech_encoder(Initializer<Real>& init, const CodecConfig& cfg);
template <class Real> void init_acoustic_projection(Initializer<Real>& init, const CodecConfig& cfg);
template <class Real> void init_speech_decoder(Initializer<Real>& init, const CodecConfig& cfg);

// Boundary normalisation of log-mel; identity under the default config.
template <class Real> Var<Real> normalize_mel(const CodecConfig& cfg, Var<Real> mel);
template <class Real> Var<Real> denormalize_mel(const CodecConfig& cfg, Var<Real> x);
// Per-value forms used by the streaming runtime; same rounding as the graph ops.
template <class Real>
Real normalize_mel_value(const CodecConfig& cfg, Real v) {
  return (v + static_cast<Real>(-cfg.mel_offset)) * static_cast<Real>(1.0 / cfg.mel_scale);
}
template <class Real>
Real denormalize_mel_value(const CodecConfig& cfg, Real v) {
  return v * static_cast<Real>(cfg.mel_scale) + static_cast<Real>(cfg.mel_offset);
}

// mel [T x n_mels], T a multiple of the acoustic rate -> hidden [T / r_ac x conv_channels].
template <class Real> Var<Real> speech_encode(Scope<Real>& s, const CodecConfig& cfg, Var<Real> mel);
// hidden -> A [frames x acous_dim].
template <class Real> Var<Real> acoustic_project(Scope<Real>& s, const CodecConfig& cfg, Var<Real> hidden);
// A [F x acous_dim] -> mel [F * r_ac x n_mels].
template <class Real> Var<Real> speech_decode(Scope<Real>& s, const CodecConfig& cfg, Var<Real> a);

// MSE between a decoder output trimmed to the target length and the target.
template <class Real> Var<Real> mel_loss(Var<Real> predicted, Var<Real> target);

// Appends rows of `value` until the frame count is a multiple of `multiple`.
template <class Real>
Tensor<Real> pad_frames(const Tensor<Real>& x, std::size_t multiple, Real value);

}  // namespace secousti
