#include "secousti/paralinguistic_path.hpp"

#include <stdexcept>
#include <string>

#include "secousti/acoustic_path.hpp"
#include "secousti/quantizer.hpp"

namespace secousti {

template <class Real>
void init_paralinguistic_encoder(Initializer<Real>& init, const CodecConfig& cfg) {
  const std::string p = kParalinguisticEncoder;
  const std::size_t C = static_cast<std::size_t>(cfg.para_channels);
  for (int i = 0; i < cfg.para_conv_layers; ++i) {
    const std::size_t in = i == 0 ? static_cast<std::size_t>(cfg.mel.n_mels) : C;
    init.conv(p + ".conv" + std::to_string(i), 3, in, C);
  }
  for (int i = 0; i < cfg.para_se_blocks; ++i) {
    init_se_block(init, p + ".se" + std::to_string(i), C, static_cast<std::size_t>(cfg.para_se_reduction));
  }
  init.norm(p + ".ln", C);
  init.linear(p + ".mu", C, static_cast<std::size_t>(cfg.para_dim));
  init.linear(p + ".log_sigma", C, static_cast<std::size_t>(cfg.para_dim));
}

template <class Real>
ParalinguisticVector<Real> paralinguistic_encode(Scope<Real>& s, const CodecConfig& cfg, Var<Real> window,
                                                 bool train, Rng* rng) {
  const std::string p = kParalinguisticEncoder;
  if (window.rows() != static_cast<std::size_t>(cfg.para_frames)) {
    throw std::invalid_argument("paralinguistic_encode: window has " + std::to_string(window.rows()) +
                                " frames, expected " + std::to_string(cfg.para_frames));
  }
  Var<Real> x = normalize_mel(cfg, window);
  for (int i = 0; i < cfg.para_conv_layers; ++i) {
    x = conv(s, p + ".conv" + std::to_string(i), i == 0 ? x : ad::elu(x));
  }
  for (int i = 0; i < cfg.para_se_blocks; ++i) x = se_block(s, p + ".se" + std::to_string(i), x);
  Var<Real> pooled = norm(s, p + ".ln", ad::mean_rows(x));
  const LatentSample<Real> z =
      vae_sample(linear(s, p + ".mu", pooled), linear(s, p + ".log_sigma", pooled), cfg.log_sigma_clamp, train, rng);
  return {z.z, z.mu, z.sigma};
}

template <class Real>
Var<Real> kl_margin_loss(Var<Real> mu, Var<Real> sigma, Real delta) {
  if (mu.shape() != sigma.shape()) {
    throw std::invalid_argument("kl_margin_loss: " + mu.label() + " " + shape_to_string(mu.shape()) + " vs " +
                                sigma.label() + " " + shape_to_string(sigma.shape()));
  }
  for (Real v : sigma.value().storage()) {
    if (!(v > Real(0))) throw std::invalid_argument("kl_margin_loss: non-positive sigma in " + sigma.label());
  }
  Var<Real> terms = ad::add(ad::square(mu), ad::square(sigma));
  terms = ad::sub(ad::add_scalar(terms, Real(-1)), ad::scale(ad::log(sigma), Real(2)));
  Var<Real> kl = ad::scale(ad::sum(terms), Real(0.5) / static_cast<Real>(mu.rows()));
  return ad::hinge(kl, delta);
}

#define SECOUSTI_INSTANTIATE_PARA(R)                                                                    \
  template void init_paralinguistic_encoder(Initializer<R>&, const CodecConfig&);                       \
  template ParalinguisticVector<R> paralinguistic_encode(Scope<R>&, const CodecConfig&, Var<R>, bool, Rng*); \
  template Var<R> kl_margin_loss(Var<R>, Var<R>, R);

SECOUSTI_INSTANTIATE_PARA(float)
SECOUSTI_INSTANTIATE_PARA(double)

}  // namespace secousti
