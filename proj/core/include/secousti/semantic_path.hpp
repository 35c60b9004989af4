#pragma once

#include "secousti/config.hpp"
#include "secousti/layers.hpp"

namespace secousti {

inline constexpr const char* kSemanticProjection = "semantic_projection";
inline constexpr const char* kSemanticConnector = "semantic_connector";

template <class Real>
struct SemanticHeads {
  Var<Real> mu;
  Var<Real> log_sigma_raw;
};

// Ratio between the semantic and acoustic frame rates.
int semantic_factor(const CodecConfig& cfg);

template <class Real> void init_semantic_projection(Initializer<Real>& init, const CodecConfig& cfg);
template <class Real> void init_semantic_connector(Initializer<Real>& init, const CodecConfig& cfg);

// hidden [T / r_ac x conv_channels] -> heads [T / r_sem x joint_dim].
template <class Real>
SemanticHeads<Real> semantic_project(Scope<Real>& s, const CodecConfig& cfg, Var<Real> hidden);
// S [F x joint_dim], G [1 x D_g] -> A_hat [F * r_sem / r_ac x acous_dim].
template <class Real>
Var<Real> semantic_connect(Scope<Real>& s, const CodecConfig& cfg, Var<Real> sem, Var<Real> g);

// MSE(A_hat, stop_gradient(A)) over the common frame prefix.
template <class Real> Var<Real> acoustic_loss(Var<Real> a_hat, Var<Real> a);

}  // namespace secousti
