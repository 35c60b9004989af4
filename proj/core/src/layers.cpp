#include "secousti/layers.hpp"

#include <algorithm>
#include <cmath>

namespace secousti {

template <class Real>
Var<Real> Scope<Real>::p(const std::string& name) {
  bool trainable = true;
  for (const auto& f : frozen) {
    if (name.compare(0, f.size(), f) == 0) trainable = false;
  }
  return tape.param(store, name, trainable);
}

template <class Real>
void Initializer<Real>::linear(const std::string& name, std::size_t in, std::size_t out, double gain) {
  const double bound = gain / std::sqrt(static_cast<double>(in));
  Tensor<Real> w = Tensor<Real>::matrix(in, out);
  for (auto& v : w.storage()) v = static_cast<Real>(rng.uniform(-bound, bound));
  store.add(name + ".w", std::move(w));
  store.add(name + ".b", Tensor<Real>(Shape{out}));
}

template <class Real>
void Initializer<Real>::conv(const std::string& name, std::size_t kernel, std::size_t in, std::size_t out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(kernel * in));
  Tensor<Real> w(Shape{kernel, in, out});
  for (auto& v : w.storage()) v = static_cast<Real>(rng.uniform(-bound, bound));
  store.add(name + ".w", std::move(w));
  store.add(name + ".b", Tensor<Real>(Shape{out}));
}

template <class Real>
void Initializer<Real>::norm(const std::string& name, std::size_t n) {
  store.add(name + ".g", Tensor<Real>(Shape{n}, Real(1)));
  store.add(name + ".b", Tensor<Real>(Shape{n}));
}

template <class Real>
void Initializer<Real>::table(const std::string& name, std::size_t rows, std::size_t cols, double stddev) {
  Tensor<Real> t = Tensor<Real>::matrix(rows, cols);
  for (auto& v : t.storage()) v = static_cast<Real>(stddev * rng.normal());
  store.add(name, std::move(t));
}

template <class Real>
void Initializer<Real>::scalar(const std::string& name, double value) {
  store.add(name, Tensor<Real>::scalar(static_cast<Real>(value)));
}

template <class Real>
void Initializer<Real>::constant(const std::string& name, std::size_t n, double value) {
  store.add(name, Tensor<Real>(Shape{n}, static_cast<Real>(value)));
}

template <class Real>
Var<Real> linear(Scope<Real>& s, const std::string& name, Var<Real> x) {
  return ad::affine(x, s.p(name + ".w"), s.p(name + ".b"));
}

template <class Real>
Var<Real> conv(Scope<Real>& s, const std::string& name, Var<Real> x, std::size_t stride, std::size_t dilation) {
  return ad::conv_causal(x, s.p(name + ".w"), s.p(name + ".b"), stride, dilation);
}

template <class Real>
Var<Real> conv_transpose(Scope<Real>& s, const std::string& name, Var<Real> x, std::size_t stride) {
  return ad::conv_transpose_causal(x, s.p(name + ".w"), s.p(name + ".b"), stride);
}

template <class Real>
Var<Real> norm(Scope<Real>& s, const std::string& name, Var<Real> x) {
  return ad::layer_norm(x, s.p(name + ".g"), s.p(name + ".b"));
}

template <class Real>
void init_transformer(Initializer<Real>& init, const std::string& name, const TransformerSpec& spec) {
  const double out_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(spec.layers));
  for (std::size_t l = 0; l < spec.layers; ++l) {
    const std::string p = name + ".layer" + std::to_string(l);
    init.norm(p + ".ln1", spec.dim);
    init.linear(p + ".wq", spec.dim, spec.dim);
    init.linear(p + ".wk", spec.dim, spec.dim);
    init.linear(p + ".wv", spec.dim, spec.dim);
    init.linear(p + ".wo", spec.dim, spec.dim, out_gain);
    init.norm(p + ".ln2", spec.dim);
    init.linear(p + ".ff1", spec.dim, spec.ffn);
    init.linear(p + ".ff2", spec.ffn, spec.dim, out_gain);
  }
  init.norm(name + ".ln_f", spec.dim);
}

template <class Real>
Var<Real> transformer(Scope<Real>& s, const std::string& name, const TransformerSpec& spec, Var<Real> x) {
  for (std::size_t l = 0; l < spec.layers; ++l) {
    const std::string p = name + ".layer" + std::to_string(l);
    Var<Real> h = norm(s, p + ".ln1", x);
    Var<Real> q = ad::rope(linear(s, p + ".wq", h), spec.heads, spec.rope_base);
    Var<Real> k = ad::rope(linear(s, p + ".wk", h), spec.heads, spec.rope_base);
    Var<Real> v = linear(s, p + ".wv", h);
    x = ad::add(x, linear(s, p + ".wo", ad::windowed_attention(q, k, v, spec.heads, spec.window)));
    h = norm(s, p + ".ln2", x);
    x = ad::add(x, linear(s, p + ".ff2", ad::relu(linear(s, p + ".ff1", h))));
  }
  return norm(s, name + ".ln_f", x);
}

template <class Real>
void init_residual_unit(Initializer<Real>& init, const std::string& name, std::size_t channels, std::size_t hidden) {
  init.conv(name + ".conv1", 3, channels, hidden);
  init.conv(name + ".conv2", 1, hidden, channels);
}

template <class Real>
Var<Real> residual_unit(Scope<Real>& s, const std::string& name, Var<Real> x, std::size_t dilation) {
  Var<Real> h = conv(s, name + ".conv1", ad::elu(x), 1, dilation);
  h = conv(s, name + ".conv2", ad::elu(h));
  return ad::add(x, h);
}

template <class Real>
void init_se_block(Initializer<Real>& init, const std::string& name, std::size_t channels, std::size_t reduction) {
  const std::size_t squeezed = std::max<std::size_t>(1, channels / reduction);
  init.conv(name + ".conv1", 3, channels, channels);
  init.conv(name + ".conv2", 3, channels, channels);
  init.linear(name + ".se1", channels, squeezed);
  init.linear(name + ".se2", squeezed, channels);
}

template <class Real>
Var<Real> se_block(Scope<Real>& s, const std::string& name, Var<Real> x) {
  Var<Real> h = conv(s, name + ".conv1", ad::elu(x));
  h = conv(s, name + ".conv2", ad::elu(h));
  Var<Real> w = ad::mean_rows(h);
  w = ad::sigmoid(linear(s, name + ".se2", ad::relu(linear(s, name + ".se1", w))));
  return ad::add(x, ad::mul_row(h, w));
}

#define SECOUSTI_INSTANTIATE_LAYERS(R)                                                               \
  template struct Scope<R>;                                                                          \
  template struct Initializer<R>;                                                                    \
  template Var<R> linear(Scope<R>&, const std::string&, Var<R>);                                     \
  template Var<R> conv(Scope<R>&, const std::string&, Var<R>, std::size_t, std::size_t);             \
  template Var<R> conv_transpose(Scope<R>&, const std::string&, Var<R>, std::size_t);                \
  template Var<R> norm(Scope<R>&, const std::string&, Var<R>);                                       \
  template void init_transformer(Initializer<R>&, const std::string&, const TransformerSpec&);       \
  template Var<R> transformer(Scope<R>&, const std::string&, const TransformerSpec&, Var<R>);        \
  template void init_residual_unit(Initializer<R>&, const std::string&, std::size_t, std::size_t);   \
  template Var<R> residual_unit(Scope<R>&, const std::string&, Var<R>, std::size_t);                 \
  template void init_se_block(Initializer<R>&, const std::string&, std::size_t, std::size_t);        \
  template Var<R> se_block(Scope<R>&, const std::string&, Var<R>);

SECOUSTI_INSTANTIATE_LAYERS(float)
SECOUSTI_INSTANTIATE_LAYERS(double)

}  // namespace secousti
