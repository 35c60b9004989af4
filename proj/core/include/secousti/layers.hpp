#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "secousti/autodiff.hpp"
#include "secousti/rng.hpp"

namespace secousti {

// Binds a tape to a parameter store. Parameters whose names start with a frozen prefix
// enter the graph as constants.
template <class Real>
struct Scope {
  Tape<Real>& tape;
  ParameterStore<Real>& store;
  std::vector<std::string> frozen;

  Scope(Tape<Real>& t, ParameterStore<Real>& s) : tape(t), store(s) {}
  Var<Real> p(const std::string& name);
  Var<Real> input(Tensor<Real> value, const std::string& label) { return tape.constant(std::move(value), label); }
};

template <class Real>
struct Initializer {
  ParameterStore<Real>& store;
  Rng& rng;

  void linear(const std::string& name, std::size_t in, std::size_t out, double gain = 1.0);
  void conv(const std::string& name, std::size_t kernel, std::size_t in, std::size_t out);
  void norm(const std::string& name, std::size_t n);
  void table(const std::string& name, std::size_t rows, std::size_t cols, double stddev);
  void scalar(const std::string& name, double value);
  void constant(const std::string& name, std::size_t n, double value);
};

struct TransformerSpec {
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ffn = 128;
  std::size_t window = 250;
  double rope_base = 10000.0;
};

template <class Real> Var<Real> linear(Scope<Real>& s, const std::string& name, Var<Real> x);
template <class Real>
Var<Real> conv(Scope<Real>& s, const std::string& name, Var<Real> x, std::size_t stride = 1, std::size_t dilation = 1);
template <class Real>
Var<Real> conv_transpose(Scope<Real>& s, const std::string& name, Var<Real> x, std::size_t stride);
template <class Real> Var<Real> norm(Scope<Real>& s, const std::string& name, Var<Real> x);

// Pre-norm causal transformer with rotary positions and a final norm.
template <class Real>
void init_transformer(Initializer<Real>& init, const std::string& name, const TransformerSpec& spec);
template <class Real>
Var<Real> transformer(Scope<Real>& s, const std::string& name, const TransformerSpec& spec, Var<Real> x);

// x + conv1x1(elu(conv3_dil(elu(x)))), hidden width `hidden`.
template <class Real>
void init_residual_unit(Initializer<Real>& init, const std::string& name, std::size_t channels, std::size_t hidden);
template <class Real>
Var<Real> residual_unit(Scope<Real>& s, const std::string& name, Var<Real> x, std::size_t dilation);

// Squeeze-excitation residual block over time.
template <class Real>
void init_se_block(Initializer<Real>& init, const std::string& name, std::size_t channels, std::size_t reduction);
template <class Real>
Var<Real> se_block(Scope<Real>& s, const std::string& name, Var<Real> x);

}  // namespace secousti
