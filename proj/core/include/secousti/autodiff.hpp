#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "secousti/tensor.hpp"

namespace secousti {

// Named, ordered parameter registry. Names are hierarchical ("speech_encoder.in.w").
template <class Real>
class ParameterStore {
 public:
  struct Entry {
    Tensor<Real> value;
    Tensor<Real> grad;
  };

  Tensor<Real>& add(const std::string& name, Tensor<Real> init);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  Tensor<Real>& value(const std::string& name);
  const Tensor<Real>& value(const std::string& name) const;
  Tensor<Real>& grad(const std::string& name);
  const Tensor<Real>& grad(const std::string& name) const;

  void zero_grad();
  std::size_t parameter_count(const std::string& prefix = "") const;
  std::vector<std::string> names(const std::string& prefix = "") const;

  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

 private:
  std::map<std::string, Entry> entries_;
};

template <class Real>
class Tape;

// Handle to a node on a tape.
template <class Real>
struct Var {
  Tape<Real>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<Real>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  const std::string& label() const;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the node list is a
// topological order and backward() walks it once in reverse.
template <class Real>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;
    bool requires_grad = false;
    std::string label;
    BackwardFn backward;
    Tensor<Real>* param_grad = nullptr;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // With recording disabled, ops evaluate forward only; used for inference.
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

  Var<Real> constant(Tensor<Real> value, const std::string& label = "const");
  Var<Real> leaf(Tensor<Real> value, const std::string& label);
  // Parameter leaf; gradients are added into the store's grad on backward().
  // trainable=false enters the parameter as a constant.
  Var<Real> param(ParameterStore<Real>& store, const std::string& name, bool trainable = true);

  Var<Real> push(Tensor<Real> value, const std::string& op, std::initializer_list<Var<Real>> inputs,
                 BackwardFn backward);
  Var<Real> push(Tensor<Real> value, const std::string& op, const std::vector<Var<Real>>& inputs,
                 BackwardFn backward);

  // Requires a scalar loss. Grads of every node reachable from the loss are populated.
  void backward(Var<Real> loss);

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  const Tensor<Real>& grad_of(Var<Real> v) const { return nodes_[v.id].grad; }
  bool requires_grad(Var<Real> v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Adds g into the gradient of v (no-op when v does not require grad).
  void accumulate(Var<Real> v, const Tensor<Real>& g);
  Tensor<Real>& grad_buffer(Var<Real> v);

 private:
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<Real>*, std::size_t> param_nodes_;
  bool recording_ = true;
};

// Differentiable operator set. Shapes: sequences are [frames x channels].
namespace ad {

template <class Real> Var<Real> add(Var<Real> a, Var<Real> b);
template <class Real> Var<Real> sub(Var<Real> a, Var<Real> b);
template <class Real> Var<Real> mul(Var<Real> a, Var<Real> b);
template <class Real> Var<Real> scale(Var<Real> a, Real c);
template <class Real> Var<Real> add_scalar(Var<Real> a, Real c);
// s * a for a scalar node s.
template <class Real> Var<Real> scale_by(Var<Real> a, Var<Real> s);
// x [T x C] + r, r has C elements, broadcast over frames.
template <class Real> Var<Real> add_row(Var<Real> x, Var<Real> r);
template <class Real> Var<Real> mul_row(Var<Real> x, Var<Real> r);

template <class Real> Var<Real> affine(Var<Real> x, Var<Real> w, Var<Real> b);
// Causal strided/dilated conv. W: [K x Cin x Cout]. Output frame t reads input frames
// t*stride + stride - 1 - j*dilation for taps j. Requires frames % stride == 0.
template <class Real>
Var<Real> conv_causal(Var<Real> x, Var<Real> w, Var<Real> b, std::size_t stride, std::size_t dilation);
// Causal transposed conv: output frame t reads input frame (t - j) / stride for taps j with
// (t - j) divisible by stride. Output has frames * stride frames.
template <class Real>
Var<Real> conv_transpose_causal(Var<Real> x, Var<Real> w, Var<Real> b, std::size_t stride);

template <class Real> Var<Real> layer_norm(Var<Real> x, Var<Real> gamma, Var<Real> beta, Real eps = Real(1e-5));

template <class Real> Var<Real> elu(Var<Real> x);
template <class Real> Var<Real> relu(Var<Real> x);
template <class Real> Var<Real> tanh(Var<Real> x);
template <class Real> Var<Real> sigmoid(Var<Real> x);
template <class Real> Var<Real> exp(Var<Real> x);
template <class Real> Var<Real> log(Var<Real> x);
template <class Real> Var<Real> square(Var<Real> x);
// Gradient passes only where lo < x < hi.
template <class Real> Var<Real> clamp(Var<Real> x, Real lo, Real hi);

// Round with straight-through gradient.
template <class Real> Var<Real> round_ste(Var<Real> x);
// Round with its true (zero almost everywhere) gradient.
template <class Real> Var<Real> round_hard(Var<Real> x);
template <class Real> Var<Real> detach(Var<Real> x);

template <class Real> Var<Real> sum(Var<Real> x);
template <class Real> Var<Real> mean(Var<Real> x);
// Temporal mean: [T x C] -> [1 x C].
template <class Real> Var<Real> mean_rows(Var<Real> x);
// max(0, x - delta) on a scalar.
template <class Real> Var<Real> hinge(Var<Real> x, Real delta);
template <class Real> Var<Real> mse(Var<Real> a, Var<Real> b);

template <class Real>
Var<Real> rope(Var<Real> x, std::size_t heads, double base, std::size_t pos_offset = 0);
// Causal attention over a hard window of `window` frames (including the current one).
template <class Real>
Var<Real> windowed_attention(Var<Real> q, Var<Real> k, Var<Real> v, std::size_t heads,
                             std::size_t window);

template <class Real> Var<Real> repeat_rows(Var<Real> x, std::size_t factor);
template <class Real> Var<Real> concat_rows(const std::vector<Var<Real>>& parts);
template <class Real> Var<Real> slice_rows(Var<Real> x, std::size_t begin, std::size_t end);
template <class Real> Var<Real> embedding(Var<Real> table, const std::vector<int>& ids);

// x / sqrt(|x|^2 + eps) per row; with eps = 0 an all-zero row is an error.
template <class Real> Var<Real> l2_normalize_rows(Var<Real> x, Real eps = Real(0));
// a [N x d] times b^T, b [M x d] -> [N x M].
template <class Real> Var<Real> matmul_nt(Var<Real> a, Var<Real> b);
// -0.5 * (mean_i log softmax_row(C)_ii + mean_j log softmax_col(C)_jj).
template <class Real> Var<Real> symmetric_cross_entropy(Var<Real> c);

}  // namespace ad

}  // namespace secousti
