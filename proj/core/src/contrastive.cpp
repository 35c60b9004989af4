#include "secousti/contrastive.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "secousti/acoustic_path.hpp"

namespace secousti {
namespace {

TransformerSpec phoneme_spec(const CodecConfig& cfg) {
  TransformerSpec spec = projection_spec(cfg);
  spec.layers = static_cast<std::size_t>(cfg.phoneme_layers);
  return spec;
}

}  // namespace

template <class Real>
void init_phoneme_encoder(Initializer<Real>& init, const CodecConfig& cfg) {
  const std::string p = kPhonemeEncoder;
  const std::size_t M = static_cast<std::size_t>(cfg.model_dim);
  init.table(p + ".embed", static_cast<std::size_t>(cfg.phoneme_vocab), M, 1.0);
  init.conv(p + ".down", static_cast<std::size_t>(cfg.semantic_rate), M, M);
  init_transformer(init, p + ".tf", phoneme_spec(cfg));
  init.linear(p + ".out", M, static_cast<std::size_t>(cfg.joint_dim));
}

template <class Real>
void init_contrastive(Initializer<Real>& init, const CodecConfig& cfg) {
  init.scalar(std::string(kContrastive) + ".log_tau", std::log(cfg.tau_init));
}

template <class Real>
Var<Real> phoneme_encode(Scope<Real>& s, const CodecConfig& cfg, const std::vector<int>& frame_ids) {
  const std::string p = kPhonemeEncoder;
  for (std::size_t i = 0; i < frame_ids.size(); ++i) {
    if (frame_ids[i] < 0 || frame_ids[i] >= cfg.phoneme_vocab) {
      throw std::invalid_argument("phoneme_encode: id " + std::to_string(frame_ids[i]) + " at frame " +
                                  std::to_string(i) + " outside vocabulary of " +
                                  std::to_string(cfg.phoneme_vocab));
    }
  }
  Var<Real> x = ad::embedding(s.p(p + ".embed"), frame_ids);
  x = ad::relu(conv(s, p + ".down", x, static_cast<std::size_t>(cfg.semantic_rate)));
  x = transformer(s, p + ".tf", phoneme_spec(cfg), x);
  return linear(s, p + ".out", x);
}

template <class Real>
Var<Real> temperature(Scope<Real>& s, const CodecConfig& cfg) {
  if (!cfg.learnable_tau) return s.input(Tensor<Real>::scalar(static_cast<Real>(cfg.tau_init)), "tau");
  return ad::exp(s.p(std::string(kContrastive) + ".log_tau"));
}

template <class Real>
Var<Real> similarity_matrix(Var<Real> sem, Var<Real> pho, Var<Real> tau, bool normalize) {
  if (sem.shape() != pho.shape()) {
    throw std::invalid_argument("similarity_matrix: " + sem.label() + " " + shape_to_string(sem.shape()) +
                                " vs " + pho.label() + " " + shape_to_string(pho.shape()));
  }
  if (normalize) {
    sem = ad::l2_normalize_rows(sem);
    pho = ad::l2_normalize_rows(pho);
  }
  return ad::scale_by(ad::matmul_nt(sem, pho), tau);
}

template <class Real>
Var<Real> contrastive_loss(Var<Real> c) {
  return ad::symmetric_cross_entropy(c);
}

#define SECOUSTI_INSTANTIATE_CONTRASTIVE(R)                                              \
  template void init_phoneme_encoder(Initializer<R>&, const CodecConfig&);               \
  template void init_contrastive(Initializer<R>&, const CodecConfig&);                   \
  template Var<R> phoneme_encode(Scope<R>&, const CodecConfig&, const std::vector<int>&); \
  template Var<R> temperature(Scope<R>&, const CodecConfig&);                            \
  template Var<R> similarity_matrix(Var<R>, Var<R>, Var<R>, bool);                        \
  template Var<R> contrastive_loss(Var<R>);

SECOUSTI_INSTANTIATE_CONTRASTIVE(float)
SECOUSTI_INSTANTIATE_CONTRASTIVE(double)

}  // namespace secousti
