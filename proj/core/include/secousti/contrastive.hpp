#pragma once

#include <vector>

#include "secousti/config.hpp"
#include "secousti/layers.hpp"

namespace secousti {

inline constexpr const char* kPhonemeEncoder = "phoneme_encoder";
inline constexpr const char* kContrastive = "contrastive";

template <class Real> void init_phoneme_encoder(Initializer<Real>& init, const CodecConfig& cfg);
template <class Real> void init_contrastive(Initializer<Real>& init, const CodecConfig& cfg);

// Frame-level phoneme ids (length a multiple of r_sem) -> P [T / r_sem x joint_dim].
template <class Real>
Var<Real> phoneme_encode(Scope<Real>& s, const CodecConfig& cfg, const std::vector<int>& frame_ids);

// tau = exp(log_tau) when learnable, otherwise the configured initial value.
template <class Real> Var<Real> temperature(Scope<Real>& s, const CodecConfig& cfg);

// C = tau * S P^T, rows L2-normalised first when `normalize` is set.
template <class Real>
Var<Real> similarity_matrix(Var<Real> sem, Var<Real> pho, Var<Real> tau, bool normalize = true);

// Symmetric cross-entropy with the diagonal as positives.
template <class Real> Var<Real> contrastive_loss(Var<Real> c);

}  // namespace secousti
