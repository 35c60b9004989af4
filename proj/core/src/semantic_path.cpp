#include "secousti/semantic_path.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "secousti/acoustic_path.hpp"

namespace secousti {

int semantic_factor(const CodecConfig& cfg) { return cfg.semantic_rate / cfg.acoustic_rate(); }

template <class Real>
void init_semantic_projection(Initializer<Real>& init, const CodecConfig& cfg) {
  const std::string p = kSemanticProjection;
  const std::size_t C = static_cast<std::size_t>(cfg.conv_channels);
  const std::size_t f = static_cast<std::size_t>(semantic_factor(cfg));
  if (f > 1) init.conv(p + ".down", f, C, C);
  init.linear(p + ".in", C, static_cast<std::size_t>(cfg.model_dim));
  init_transformer(init, p + ".tf", projection_spec(cfg));
  init.linear(p + ".mu", static_cast<std::size_t>(cfg.model_dim), static_cast<std::size_t>(cfg.joint_dim));
  init.linear(p + ".log_sigma", static_cast<std::size_t>(cfg.model_dim), static_cast<std::size_t>(cfg.joint_dim));
}

template <class Real>
void init_semantic_connector(Initializer<Real>& init, const CodecConfig& cfg) {
  const std::string p = kSemanticConnector;
  const std::size_t M = static_cast<std::size_t>(cfg.model_dim);
  init.linear(p + ".s_in", static_cast<std::size_t>(cfg.joint_dim), M);
  init.linear(p + ".g_in", static_cast<std::size_t>(cfg.para_dim), M);
  init_transformer(init, p + ".tf", projection_spec(cfg));
  init.linear(p + ".out", M, static_cast<std::size_t>(cfg.acous_dim));
}

template <class Real>
SemanticHeads<Real> semantic_project(Scope<Real>& s, const CodecConfig& cfg, Var<Real> hidden) {
  const std::string p = kSemanticProjection;
  const int f = semantic_factor(cfg);
  if (f > 1) hidden = conv(s, p + ".down", hidden, static_cast<std::size_t>(f));
  Var<Real> x = transformer(s, p + ".tf", projection_spec(cfg), linear(s, p + ".in", hidden));
  return {linear(s, p + ".mu", x), linear(s, p + ".log_sigma", x)};
}

template <class Real>
Var<Real> semantic_connect(Scope<Real>& s, const CodecConfig& cfg, Var<Real> sem, Var<Real> g) {
  const std::string p = kSemanticConnector;
  if (g.value().size() != static_cast<std::size_t>(cfg.para_dim)) {
    throw std::invalid_argument("semantic_connect: paralinguistic vector " + g.label() + " has " +
                                std::to_string(g.value().size()) + " elements, expected " +
                                std::to_string(cfg.para_dim));
  }
  Var<Real> x = ad::add_row(linear(s, p + ".s_in", sem), linear(s, p + ".g_in", g));
  x = linear(s, p + ".out", transformer(s, p + ".tf", projection_spec(cfg), x));
  const int f = semantic_factor(cfg);
  return f > 1 ? ad::repeat_rows(x, static_cast<std::size_t>(f)) : x;
}

template <class Real>
Var<Real> acoustic_loss(Var<Real> a_hat, Var<Real> a) {
  if (a_hat.cols() != a.cols()) {
    throw std::invalid_argument("acoustic_loss: dim mismatch " + shape_to_string(a_hat.shape()) + " vs " +
                                shape_to_string(a.shape()));
  }
  const std::size_t n = std::min(a_hat.rows(), a.rows());
  if (a_hat.rows() != n) a_hat = ad::slice_rows(a_hat, 0, n);
  if (a.rows() != n) a = ad::slice_rows(a, 0, n);
  return ad::mse(a_hat, ad::detach(a));
}

#define SECOUSTI_INSTANTIATE_SEMANTIC(R)                                                    \
  template void init_semantic_projection(Initializer<R>&, const CodecConfig&);              \
  template void init_semantic_connector(Initializer<R>&, const CodecConfig&);               \
  template SemanticHeads<R> semantic_project(Scope<R>&, const CodecConfig&, Var<R>);        \
  template Var<R> semantic_connect(Scope<R>&, const CodecConfig&, Var<R>, Var<R>);          \
  template Var<R> acoustic_loss(Var<R>, Var<R>);

SECOUSTI_INSTANTIATE_SEMANTIC(float)
SECOUSTI_INSTANTIATE_SEMANTIC(double)

}  // namespace secousti
