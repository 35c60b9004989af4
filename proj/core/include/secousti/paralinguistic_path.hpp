#pragma once

#include "secousti/config.hpp"
#include "secousti/layers.hpp"

namespace secousti {

inline constexpr const char* kParalinguisticEncoder = "paralinguistic_encoder";

template <class Real>
struct ParalinguisticVector {
  Var<Real> g;      // [1 x D_g]
  Var<Real> mu;     // [1 x D_g]
  Var<Real> sigma;  // [1 x D_g]
};

template <class Real> void init_paralinguistic_encoder(Initializer<Real>& init, const CodecConfig& cfg);

// window [para_frames x n_mels]. Training: g = mu + sigma * phi; inference: g = mu.
template <class Real>
ParalinguisticVector<Real> paralinguistic_encode(Scope<Real>& s, const CodecConfig& cfg, Var<Real> window,
                                                 bool train, Rng* rng);

// max(0, mean_rows(0.5 * sum(mu^2 + sigma^2 - 1 - 2 ln sigma)) - delta).
template <class Real> Var<Real> kl_margin_loss(Var<Real> mu, Var<Real> sigma, Real delta);

}  // namespace secousti
