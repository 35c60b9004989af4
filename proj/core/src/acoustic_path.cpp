#include "secousti/acoustic_path.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace secousti {

TransformerSpec projection_spec(const CodecConfig& cfg) {
  TransformerSpec spec;
  spec.dim = static_cast<std::size_t>(cfg.model_dim);
  spec.heads = static_cast<std::size_t>(cfg.heads);
  spec.layers = static_cast<std::size_t>(cfg.layers);
  spec.ffn = static_cast<std::size_t>(cfg.ffn_dim);
  spec.window = static_cast<std::size_t>(cfg.attn_window);
  spec.rope_base = cfg.rope_base;
  return spec;
}

std::size_t residual_dilation(const CodecConfig& cfg, int j) {
  std::size_t d = 1;
  for (int i = 0; i < j; ++i) d *= static_cast<std::size_t>(cfg.dilation_base);
  return d;
}

namespace {

std::string stage_name(const char* module, std::size_t i) {
  return std::string(module) + ".stage" + std::to_string(i);
}

}  // namespace

template <class Real>
void init_speech_encoder(Initializer<Real>& init, const CodecConfig& cfg) {
  const std::size_t C = static_cast<std::size_t>(cfg.conv_channels);
  const std::size_t K = static_cast<std::size_t>(cfg.conv_kernel);
  init.conv(std::string(kSpeechEncoder) + ".in", K, static_cast<std::size_t>(cfg.mel.n_mels), C);
  for (std::size_t i = 0; i < cfg.encoder_strides.size(); ++i) {
    const std::string st = stage_name(kSpeechEncoder, i);
    for (int j = 0; j < cfg.residual_layers; ++j) {
      init_residual_unit(init, st + ".res" + std::to_string(j), C, C / static_cast<std::size_t>(cfg.residual_compress));
    }
    init.conv(st + ".down", 2 * static_cast<std::size_t>(cfg.encoder_strides[i]), C, C);
  }
  init.conv(std::string(kSpeechEncoder) + ".out", K, C, C);
}

template <class Real>
void init_acoustic_projection(Initializer<Real>& init, const CodecConfig& cfg) {
  const std::string p = kAcousticProjection;
  init.linear(p + ".in", static_cast<std::size_t>(cfg.conv_channels), static_cast<std::size_t>(cfg.model_dim));
  init_transformer(init, p + ".tf", projection_spec(cfg));
  init.linear(p + ".out", static_cast<std::size_t>(cfg.model_dim), static_cast<std::size_t>(cfg.acous_dim));
}

template <class Real>
void init_speech_decoder(Initializer<Real>& init, const CodecConfig& cfg) {
  const std::size_t C = static_cast<std::size_t>(cfg.conv_channels);
  const std::size_t K = static_cast<std::size_t>(cfg.conv_kernel);
  init.conv(std::string(kSpeechDecoder) + ".in", K, static_cast<std::size_t>(cfg.acous_dim), C);
  const std::size_t n = cfg.encoder_strides.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::string st = stage_name(kSpeechDecoder, i);
    init.conv(st + ".up", 2 * static_cast<std::size_t>(cfg.encoder_strides[n - 1 - i]), C, C);
    for (int j = 0; j < cfg.residual_layers; ++j) {
      init_residual_unit(init, st + ".res" + std::to_string(j), C, C / static_cast<std::size_t>(cfg.residual_compress));
    }
  }
  init.conv(std::string(kSpeechDecoder) + ".out", K, C, static_cast<std::size_t>(cfg.mel.n_mels));
}

template <class Real>
Var<Real> normalize_mel(const CodecConfig& cfg, Var<Real> mel) {
  if (cfg.mel_offset == 0.0 && cfg.mel_scale == 1.0) return mel;
  return ad::scale(ad::add_scalar(mel, static_cast<Real>(-cfg.mel_offset)), static_cast<Real>(1.0 / cfg.mel_scale));
}

template <class Real>
Var<Real> denormalize_mel(const CodecConfig& cfg, Var<Real> x) {
  if (cfg.mel_offset == 0.0 && cfg.mel_scale == 1.0) return x;
  return ad::add_scalar(ad::scale(x, static_cast<Real>(cfg.mel_scale)), static_cast<Real>(cfg.mel_offset));
}

template <class Real>
Var<Real> speech_encode(Scope<Real>& s, const CodecConfig& cfg, Var<Real> mel) {
  Var<Real> x = conv(s, std::string(kSpeechEncoder) + ".in", normalize_mel(cfg, mel));
  for (std::size_t i = 0; i < cfg.encoder_strides.size(); ++i) {
    const std::string st = stage_name(kSpeechEncoder, i);
    for (int j = 0; j < cfg.residual_layers; ++j) {
      x = residual_unit(s, st + ".res" + std::to_string(j), x, residual_dilation(cfg, j));
    }
    x = conv(s, st + ".down", ad::elu(x), static_cast<std::size_t>(cfg.encoder_strides[i]));
  }
  return conv(s, std::string(kSpeechEncoder) + ".out", ad::elu(x));
}

template <class Real>
Var<Real> acoustic_project(Scope<Real>& s, const CodecConfig& cfg, Var<Real> hidden) {
  const std::string p = kAcousticProjection;
  Var<Real> x = linear(s, p + ".in", hidden);
  x = transformer(s, p + ".tf", projection_spec(cfg), x);
  return linear(s, p + ".out", x);
}

template <class Real>
Var<Real> speech_decode(Scope<Real>& s, const CodecConfig& cfg, Var<Real> a) {
  Var<Real> x = conv(s, std::string(kSpeechDecoder) + ".in", a);
  const std::size_t n = cfg.encoder_strides.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::string st = stage_name(kSpeechDecoder, i);
    x = conv_transpose(s, st + ".up", ad::elu(x), static_cast<std::size_t>(cfg.encoder_strides[n - 1 - i]));
    for (int j = 0; j < cfg.residual_layers; ++j) {
      x = residual_unit(s, st + ".res" + std::to_string(j), x, residual_dilation(cfg, j));
    }
  }
  return denormalize_mel(cfg, conv(s, std::string(kSpeechDecoder) + ".out", ad::elu(x)));
}

template <class Real>
Var<Real> mel_loss(Var<Real> predicted, Var<Real> target) {
  if (predicted.cols() != target.cols()) {
    throw std::invalid_argument("mel_loss: band mismatch " + shape_to_string(predicted.shape()) + " vs " +
                                shape_to_string(target.shape()));
  }
  if (predicted.rows() < target.rows()) {
    throw std::invalid_argument("mel_loss: decoder produced " + std::to_string(predicted.rows()) +
                                " frames for a " + std::to_string(target.rows()) + "-frame target");
  }
  if (predicted.rows() > target.rows()) predicted = ad::slice_rows(predicted, 0, target.rows());
  return ad::mse(predicted, target);
}

template <class Real>
Tensor<Real> pad_frames(const Tensor<Real>& x, std::size_t multiple, Real value) {
  const std::size_t T = x.rows(), C = x.cols();
  const std::size_t padded = (T + multiple - 1) / multiple * multiple;
  Tensor<Real> out = Tensor<Real>::matrix(padded, C, value);
  std::copy(x.data(), x.data() + T * C, out.data());
  return out;
}

#define SECOUSTI_INSTANTIATE_ACOUSTIC(R)                                                \
  template void init_speech_encoder(Initializer<R>&, const CodecConfig&);               \
  template void init_acoustic_projection(Initializer<R>&, const CodecConfig&);          \
  template void init_speech_decoder(Initializer<R>&, const CodecConfig&);               \
  template Var<R> normalize_mel(const CodecConfig&, Var<R>);                            \
  template Var<R> denormalize_mel(const CodecConfig&, Var<R>);                          \
  template Var<R> speech_encode(Scope<R>&, const CodecConfig&, Var<R>);                 \
  template Var<R> acoustic_project(Scope<R>&, const CodecConfig&, Var<R>);              \
  template Var<R> speech_decode(Scope<R>&, const CodecConfig&, Var<R>);                 \
  template Var<R> mel_loss(Var<R>, Var<R>);                                             \
  template Tensor<R> pad_frames(const Tensor<R>&, std::size_t, R);

SECOUSTI_INSTANTIATE_ACOUSTIC(float)
SECOUSTI_INSTANTIATE_ACOUSTIC(double)

}  // namespace secousti
