#include "secousti/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>

#include "secousti/kernels.hpp"

namespace secousti {

std::string shape_to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

// ---------------------------------------------------------------------------------------------
// ParameterStore

template <class Real>
Tensor<Real>& ParameterStore<Real>::add(const std::string& name, Tensor<Real> init) {
  if (entries_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Entry e;
  e.grad = Tensor<Real>(init.shape());
  e.value = std::move(init);
  return entries_.emplace(name, std::move(e)).first->second.value;
}

template <class Real>
Tensor<Real>& ParameterStore<Real>::value(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second.value;
}

template <class Real>
const Tensor<Real>& ParameterStore<Real>::value(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second.value;
}

template <class Real>
Tensor<Real>& ParameterStore<Real>::grad(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second.grad;
}

template <class Real>
const Tensor<Real>& ParameterStore<Real>::grad(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second.grad;
}

template <class Real>
void ParameterStore<Real>::zero_grad() {
  for (auto& [name, e] : entries_) e.grad.fill(Real(0));
}

template <class Real>
std::size_t ParameterStore<Real>::parameter_count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_) {
    if (name.rfind(prefix, 0) == 0) n += e.value.size();
  }
  return n;
}

template <class Real>
std::vector<std::string> ParameterStore<Real>::names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_) {
    if (name.rfind(prefix, 0) == 0) out.push_back(name);
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Tape

template <class Real>
const Tensor<Real>& Var<Real>::value() const {
  return tape->node(id).value;
}

template <class Real>
const std::string& Var<Real>::label() const {
  return tape->node(id).label;
}

template <class Real>
Var<Real> Tape<Real>::constant(Tensor<Real> value, const std::string& label) {
  Node n;
  n.value = std::move(value);
  n.label = label + "#" + std::to_string(nodes_.size());
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <class Real>
Var<Real> Tape<Real>::leaf(Tensor<Real> value, const std::string& label) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = recording_;
  n.label = label + "#" + std::to_string(nodes_.size());
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <class Real>
Var<Real> Tape<Real>::param(ParameterStore<Real>& store, const std::string& name, bool trainable) {
  Tensor<Real>& value = store.value(name);
  auto it = param_nodes_.find(&value);
  if (it != param_nodes_.end()) {
    Var<Real> v{this, it->second};
    if (nodes_[v.id].requires_grad != (trainable && recording_)) {
      throw std::logic_error("parameter " + name + " entered with conflicting trainable flags");
    }
    return v;
  }
  Node n;
  n.value = value;
  n.requires_grad = trainable && recording_;
  n.label = "param:" + name;
  if (n.requires_grad) n.param_grad = &store.grad(name);
  nodes_.push_back(std::move(n));
  param_nodes_.emplace(&value, nodes_.size() - 1);
  return {this, nodes_.size() - 1};
}

template <class Real>
Var<Real> Tape<Real>::push(Tensor<Real> value, const std::string& op,
                           std::initializer_list<Var<Real>> inputs, BackwardFn backward) {
  return push(std::move(value), op, std::vector<Var<Real>>(inputs), std::move(backward));
}

template <class Real>
Var<Real> Tape<Real>::push(Tensor<Real> value, const std::string& op,
                           const std::vector<Var<Real>>& inputs, BackwardFn backward) {
  bool needs = false;
  for (const auto& in : inputs) {
    if (in.tape != this) throw std::logic_error(op + ": input from a different tape");
    needs = needs || nodes_[in.id].requires_grad;
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = needs && recording_;
  n.label = op + "#" + std::to_string(nodes_.size());
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <class Real>
Tensor<Real>& Tape<Real>::grad_buffer(Var<Real> v) {
  Node& n = nodes_[v.id];
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) {
    n.grad = Tensor<Real>(n.value.shape());
  }
  return n.grad;
}

template <class Real>
void Tape<Real>::accumulate(Var<Real> v, const Tensor<Real>& g) {
  Node& n = nodes_[v.id];
  if (!n.requires_grad) return;
  Tensor<Real>& dst = grad_buffer(v);
  if (g.size() != dst.size()) {
    throw std::logic_error("gradient size mismatch at " + n.label);
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

template <class Real>
void Tape<Real>::backward(Var<Real> loss) {
  Node& ln = nodes_[loss.id];
  if (ln.value.size() != 1) {
    throw std::invalid_argument("backward: loss " + ln.label + " is not scalar, shape " +
                                shape_to_string(ln.value.shape()));
  }
  if (!ln.requires_grad) return;
  grad_buffer(loss)[0] = Real(1);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param_grad) {
      Tensor<Real>& dst = *n.param_grad;
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
    }
  }
}

// ---------------------------------------------------------------------------------------------
// Ops

namespace ad {
namespace {

template <class Real>
void check_same(const char* op, Var<Real> a, Var<Real> b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch between " + a.label() + " " +
                                shape_to_string(a.shape()) + " and " + b.label() + " " +
                                shape_to_string(b.shape()));
  }
}

template <class Real>
void check_rank2(const char* op, Var<Real> a) {
  if (a.value().rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a [frames x channels] input, got " +
                                a.label() + " " + shape_to_string(a.shape()));
  }
}

template <class Real>
void check_numel(const char* op, Var<Real> v, std::size_t n, Var<Real> other) {
  if (v.value().size() != n) {
    throw std::invalid_argument(std::string(op) + ": " + v.label() + " " + shape_to_string(v.shape()) +
                                " incompatible with " + other.label() + " " +
                                shape_to_string(other.shape()));
  }
}

template <class Real, class F, class G>
Var<Real> unary(const char* op, Var<Real> x, F f, G dfdx) {
  const Tensor<Real>& xv = x.value();
  Tensor<Real> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return x.tape->push(std::move(out), op, {x}, [x, dfdx](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.node(self).grad;
    const Tensor<Real>& xv = t.node(x.id).value;
    const Tensor<Real>& yv = t.node(self).value;
    Tensor<Real> dx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) dx[i] = g[i] * dfdx(xv[i], yv[i]);
    t.accumulate(x, dx);
  });
}

template <class Real>
Var<Real> scalar_result(Var<Real> x, Real value, const char* op,
                        std::function<void(Tape<Real>&, std::size_t)> bw) {
  return x.tape->push(Tensor<Real>::scalar(value), op, {x}, std::move(bw));
}

}  // namespace

template <class Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  check_same("add", a, b);
  Tensor<Real> out = a.value();
  const Tensor<Real>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->push(std::move(out), "add", {a, b}, [a, b](Tape<Real>& t, std::size_t self) {
    const Tensor<Real> g = t.node(self).grad;
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <class Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
  check_same("sub", a, b);
  Tensor<Real> out = a.value();
  const Tensor<Real>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->push(std::move(out), "sub", {a, b}, [a, b](Tape<Real>& t, std::size_t self) {
    Tensor<Real> g = t.node(self).grad;
    t.accumulate(a, g);
    for (auto& v : g.storage()) v = -v;
    t.accumulate(b, g);
  });
}

template <class Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
  check_same("mul", a, b);
  Tensor<Real> out = a.value();
  const Tensor<Real>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->push(std::move(out), "mul", {a, b}, [a, b](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.node(self).grad;
    const Tensor<Real>& av = t.node(a.id).value;
    const Tensor<Real>& bv = t.node(b.id).value;
    Tensor<Real> da(av.shape()), db(bv.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      da[i] = g[i] * bv[i];
      db[i] = g[i] * av[i];
    }
    t.accumulate(a, da);
    t.accumulate(b, db);
  });
}

template <class Real>
Var<Real> scale(Var<Real> a, Real c) {
  Tensor<Real> out = a.value();
  for (auto& v : out.storage()) v *= c;
  return a.tape->push(std::move(out), "scale", {a}, [a, c](Tape<Real>& t, std::size_t self) {
    Tensor<Real> g = t.node(self).grad;
    for (auto& v : g.storage()) v *= c;
    t.accumulate(a, g);
  });
}

template <class Real>
Var<Real> add_scalar(Var<Real> a, Real c) {
  Tensor<Real> out = a.value();
  for (auto& v : out.storage()) v += c;
  return a.tape->push(std::move(out), "add_scalar", {a}, [a](Tape<Real>& t, std::size_t self) {
    const Tensor<Real> g = t.node(self).grad;
    t.accumulate(a, g);
  });
}

template <class Real>
Var<Real> scale_by(Var<Real> a, Var<Real> s) {
  if (s.value().size() != 1) {
    throw std::invalid_argument("scale_by: scale " + s.label() + " is not scalar");
  }
  const Real sv = s.value()[0];
  Tensor<Real> out = a.value();
  for (auto& v : out.storage()) v *= sv;
  return a.tape->push(std::move(out), "scale_by", {a, s}, [a, s](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.node(self).grad;
    const Tensor<Real>& av = t.node(a.id).value;
    const Real sv = t.node(s.id).value[0];
    Tensor<Real> da(av.shape());
    Real ds = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      da[i] = g[i] * sv;
      ds += g[i] * av[i];
    }
    t.accumulate(a, da);
    t.accumulate(s, Tensor<Real>(s.shape(), std::vector<Real>{ds}));
  });
}

template <class Real>
Var<Real> add_row(Var<Real> x, Var<Real> r) {
  const std::size_t T = x.rows(), C = x.cols();
  check_numel("add_row", r, C, x);
  Tensor<Real> out = x.value();
  const Tensor<Real>& rv = r.value();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) out[t * C + c] += rv[c];
  return x.tape->push(std::move(out), "add_row", {x, r}, [x, r, T, C](Tape<Real>& t, std::size_t self) {
    const Tensor<Real> g = t.node(self).grad;
    t.accumulate(x, g);
    Tensor<Real> dr(t.node(r.id).value.shape());
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t c = 0; c < C; ++c) dr[c] += g[i * C + c];
    t.accumulate(r, dr);
  });
}

template <class Real>
Var<Real> mul_row(Var<Real> x, Var<Real> r) {
  const std::size_t T = x.rows(), C = x.cols();
  check_numel("mul_row", r, C, x);
  Tensor<Real> out = x.value();
  const Tensor<Real>& rv = r.value();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) out[t * C + c] *= rv[c];
  return x.tape->push(std::move(out), "mul_row", {x, r}, [x, r, T, C](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.node(self).grad;
    const Tensor<Real>& xv = t.node(x.id).value;
    const Tensor<Real>& rv = t.node(r.id).value;
    Tensor<Real> dx(xv.shape());
    Tensor<Real> dr(rv.shape());
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t c = 0; c < C; ++c) {
        dx[i * C + c] = g[i * C + c] * rv[c];
        dr[c] += g[i * C + c] * xv[i * C + c];
      }
    t.accumulate(x, dx);
    t.accumulate(r, dr);
  });
}

template <class Real>
Var<Real> affine(Var<Real> x, Var<Real> w, Var<Real> b) {
  check_rank2("affine", x);
  const std::size_t T = x.rows(), in = x.cols();
  if (w.value().rank() != 2 || w.shape()[0] != in) {
    throw std::invalid_argument("affine: weight " + w.label() + " " + shape_to_string(w.shape()) +
                                " incompatible with input " + x.label() + " " +
                                shape_to_string(x.shape()));
  }
  const std::size_t out = w.shape()[1];
  check_numel("affine", b, out, w);
  Tensor<Real> y = Tensor<Real>::matrix(T, out);
  const Real* xd = x.value().data();
  for (std::size_t t = 0; t < T; ++t) {
    kernels::affine_row(xd + t * in, in, w.value().data(), b.value().data(), out, y.data() + t * out);
  }
  return x.tape->push(std::move(y), "affine", {x, w, b},
                      [x, w, b, T, in, out](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.node(self).grad;
    const Tensor<Real>& xv = t.node(x.id).value;
    const Tensor<Real>& wv = t.node(w.id).value;
    if (t.requires_grad(x)) {
      Tensor<Real> dx(xv.shape());
      for (std::size_t r = 0; r < T; ++r)
        for (std::size_t c = 0; c < in; ++c) {
          Real acc = 0;
          const Real* wr = wv.data() + c * out;
          const Real* gr = g.data() + r * out;
          for (std::size_t o = 0; o < out; ++o) acc += wr[o] * gr[o];
          dx[r * in + c] = acc;
        }
      t.accumulate(x, dx);
    }
    if (t.requires_grad(w)) {
      Tensor<Real>& dw = t.grad_buffer(w);
      for (std::size_t r = 0; r < T; ++r)
        for (std::size_t c = 0; c < in; ++c) {
          const Real xv_rc = xv[r * in + c];
          Real* dwr = dw.data() + c * out;
          const Real* gr = g.data() + r * out;
          for (std::size_t o = 0; o < out; ++o) dwr[o] += xv_rc * gr[o];
        }
    }
    if (t.requires_grad(b)) {
      Tensor<Real>& db = t.grad_buffer(b);
      for (std::size_t r = 0; r < T; ++r)
        for (std::size_t o = 0; o < out; ++o) db[o] += g[r * out + o];
    }
  });
}

namespace {

template <class Real>
void check_conv_weight(const char* op, Var<Real> x, Var<Real> w, Var<Real> b) {
  check_rank2(op, x);
  const Shape& ws = w.shape();
  if (ws.size() != 3 || ws[1] != x.cols()) {
    throw std::invalid_argument(std::string(op) + ": weight " + w.label() + " " + shape_to_string(ws) +
                                " incompatible with input " + x.label() + " " +
                                shape_to_string(x.shape()));
  }
  check_numel(op, b, ws[2], w);
}

// Backward shared by both conv flavours: taps_of(t, taps) fills input frame indices (or -1).
template <class Real, class TapFn>
void conv_backward(Tape<Real>& t, std::size_t self, Var<Real> x, Var<Real> w, Var<Real> b,
                   std::size_t out_frames, TapFn taps_of) {
  const Tensor<Real>& g = t.node(self).grad;
  const Tensor<Real>& xv = t.node(x.id).value;
  const Tensor<Real>& wv = t.node(w.id).value;
  const std::size_t K = wv.shape()[0], in = wv.shape()[1], out = wv.shape()[2];
  const bool need_x = t.requires_grad(x), need_w = t.requires_grad(w);
  Tensor<Real> dx;
  if (need_x) dx = Tensor<Real>(xv.shape());
  Real* dw = need_w ? t.grad_buffer(w).data() : nullptr;
  std::vector<long> idx(K);
  for (std::size_t tt = 0; tt < out_frames; ++tt) {
    taps_of(tt, idx);
    const Real* gr = g.data() + tt * out;
    for (std::size_t j = 0; j < K; ++j) {
      if (idx[j] < 0) continue;
      const std::size_t s = static_cast<std::size_t>(idx[j]);
      const Real* xr = xv.data() + s * in;
      const Real* wj = wv.data() + j * in * out;
      for (std::size_t c = 0; c < in; ++c) {
        const Real* wr = wj + c * out;
        if (need_x) {
          Real acc = 0;
          for (std::size_t o = 0; o < out; ++o) acc += wr[o] * gr[o];
          dx[s * in + c] += acc;
        }
        if (need_w) {
          Real* dwr = dw + (j * in + c) * out;
          const Real xc = xr[c];
          for (std::size_t o = 0; o < out; ++o) dwr[o] += xc * gr[o];
        }
      }
    }
  }
  if (need_x) t.accumulate(x, dx);
  if (t.requires_grad(b)) {
    Tensor<Real>& db = t.grad_buffer(b);
    for (std::size_t tt = 0; tt < out_frames; ++tt)
      for (std::size_t o = 0; o < out; ++o) db[o] += g[tt * out + o];
  }
}

}  // namespace

template <class Real>
Var<Real> conv_causal(Var<Real> x, Var<Real> w, Var<Real> b, std::size_t stride, std::size_t dilation) {
  check_conv_weight("conv_causal", x, w, b);
  const std::size_t T = x.rows();
  if (stride == 0 || dilation == 0 || T % stride != 0) {
    throw std::invalid_argument("conv_causal: input " + x.label() + " has " + std::to_string(T) +
                                " frames, not a multiple of stride " + std::to_string(stride));
  }
  const std::size_t K = w.shape()[0], in = w.shape()[1], out = w.shape()[2];
  const std::size_t Tout = T / stride;
  auto taps_of = [stride, dilation, K](std::size_t t, std::vector<long>& idx) {
    for (std::size_t j = 0; j < K; ++j) {
      idx[j] = static_cast<long>(t * stride + stride - 1) - static_cast<long>(j * dilation);
    }
  };
  Tensor<Real> y = Tensor<Real>::matrix(Tout, out);
  std::vector<long> idx(K);
  std::vector<const Real*> taps(K);
  const Real* xd = x.value().data();
  for (std::size_t t = 0; t < Tout; ++t) {
    taps_of(t, idx);
    for (std::size_t j = 0; j < K; ++j) taps[j] = idx[j] >= 0 ? xd + idx[j] * in : nullptr;
    kernels::conv_frame<Real>(taps, in, w.value().data(), b.value().data(), out, y.data() + t * out);
  }
  return x.tape->push(std::move(y), "conv_causal", {x, w, b},
                      [x, w, b, Tout, taps_of](Tape<Real>& t, std::size_t self) {
                        conv_backward(t, self, x, w, b, Tout, taps_of);
                      });
}

template <class Real>
Var<Real> conv_transpose_causal(Var<Real> x, Var<Real> w, Var<Real> b, std::size_t stride) {
  check_conv_weight("conv_transpose_causal", x, w, b);
  if (stride == 0) throw std::invalid_argument("conv_transpose_causal: zero stride");
  const std::size_t T = x.rows();
  const std::size_t K = w.shape()[0], in = w.shape()[1], out = w.shape()[2];
  const std::size_t Tout = T * stride;
  auto taps_of = [stride, K, T](std::size_t t, std::vector<long>& idx) {
    for (std::size_t j = 0; j < K; ++j) {
      const long d = static_cast<long>(t) - static_cast<long>(j);
      if (d < 0 || d % static_cast<long>(stride) != 0 || d / static_cast<long>(stride) >= static_cast<long>(T)) {
        idx[j] = -1;
      } else {
        idx[j] = d / static_cast<long>(stride);
      }
    }
  };
  Tensor<Real> y = Tensor<Real>::matrix(Tout, out);
  std::vector<long> idx(K);
  std::vector<const Real*> taps(K);
  const Real* xd = x.value().data();
  for (std::size_t t = 0; t < Tout; ++t) {
    taps_of(t, idx);
    for (std::size_t j = 0; j < K; ++j) taps[j] = idx[j] >= 0 ? xd + idx[j] * in : nullptr;
    kernels::conv_frame<Real>(taps, in, w.value().data(), b.value().data(), out, y.data() + t * out);
  }
  return x.tape->push(std::move(y), "conv_transpose_causal", {x, w, b},
                      [x, w, b, Tout, taps_of](Tape<Real>& t, std::size_t self) {
                        conv_backward(t, self, x, w, b, Tout, taps_of);
                      });
}

template <class Real>
Var<Real> layer_norm(Var<Real> x, Var<Real> gamma, Var<Real> beta, Real eps) {
  check_rank2("layer_norm", x);
  const std::size_t T = x.rows(), C = x.cols();
  check_numel("layer_norm", gamma, C, x);
  check_numel("layer_norm", beta, C, x);
  Tensor<Real> y(x.shape());
  auto stats = std::make_shared<std::vector<kernels::NormStats<Real>>>(T);
  for (std::size_t t = 0; t < T; ++t) {
    (*stats)[t] = kernels::layer_norm_row(x.value().data() + t * C, C, gamma.value().data(),
                                          beta.value().data(), eps, y.data() + t * C);
  }
  return x.tape->push(std::move(y), "layer_norm", {x, gamma, beta},
                      [x, gamma, beta, stats, T, C](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.node(self).grad;
    const Tensor<Real>& xv = t.node(x.id).value;
    const Tensor<Real>& gv = t.node(gamma.id).value;
    Tensor<Real> dx(xv.shape()), dgamma(gv.shape()), dbeta(gv.shape());
    std::vector<Real> xhat(C), dxhat(C);
    for (std::size_t r = 0; r < T; ++r) {
      const auto [mean, rstd] = (*stats)[r];
      Real m1 = 0, m2 = 0;
      for (std::size_t c = 0; c < C; ++c) {
        xhat[c] = (xv[r * C + c] - mean) * rstd;
        const Real gr = g[r * C + c];
        dgamma[c] += gr * xhat[c];
        dbeta[c] += gr;
        dxhat[c] = gr * gv[c];
        m1 += dxhat[c];
        m2 += dxhat[c] * xhat[c];
      }
      m1 /= static_cast<Real>(C);
      m2 /= static_cast<Real>(C);
      for (std::size_t c = 0; c < C; ++c) dx[r * C + c] = rstd * (dxhat[c] - m1 - xhat[c] * m2);
    }
    t.accumulate(x, dx);
    t.accumulate(gamma, dgamma);
    t.accumulate(beta, dbeta);
  });
}

template <class Real>
Var<Real> elu(Var<Real> x) {
  return unary<Real>("elu", x, [](Real v) { return kernels::elu(v); },
                     [](Real v, Real) { return kernels::elu_grad(v); });
}

template <class Real>
Var<Real> relu(Var<Real> x) {
  return unary<Real>("relu", x, [](Real v) { return kernels::relu(v); },
                     [](Real v, Real) { return v > Real(0) ? Real(1) : Real(0); });
}

template <class Real>
Var<Real> tanh(Var<Real> x) {
  return unary<Real>("tanh", x, [](Real v) { return std::tanh(v); },
                     [](Real, Real y) { return Real(1) - y * y; });
}

template <class Real>
Var<Real> sigmoid(Var<Real> x) {
  return unary<Real>("sigmoid", x, [](Real v) { return kernels::sigmoid(v); },
                     [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real>
Var<Real> exp(Var<Real> x) {
  return unary<Real>("exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

template <class Real>
Var<Real> log(Var<Real> x) {
  for (Real v : x.value().storage()) {
    if (!(v > Real(0))) throw std::domain_error("log: non-positive input in " + x.label());
  }
  return unary<Real>("log", x, [](Real v) { return std::log(v); },
                     [](Real v, Real) { return Real(1) / v; });
}

template <class Real>
Var<Real> square(Var<Real> x) {
  return unary<Real>("square", x, [](Real v) { return v * v; },
                     [](Real v, Real) { return Real(2) * v; });
}

template <class Real>
Var<Real> clamp(Var<Real> x, Real lo, Real hi) {
  return unary<Real>("clamp", x, [lo, hi](Real v) { return std::min(std::max(v, lo), hi); },
                     [lo, hi](Real v, Real) { return (v > lo && v < hi) ? Real(1) : Real(0); });
}

template <class Real>
Var<Real> round_ste(Var<Real> x) {
  return unary<Real>("round_ste", x, [](Real v) { return std::round(v); },
                     [](Real, Real) { return Real(1); });
}

template <class Real>
Var<Real> round_hard(Var<Real> x) {
  return unary<Real>("round", x, [](Real v) { return std::round(v); },
                     [](Real, Real) { return Real(0); });
}

template <class Real>
Var<Real> detach(Var<Real> x) {
  return x.tape->constant(x.value(), "detach");
}

template <class Real>
Var<Real> sum(Var<Real> x) {
  Real s = 0;
  for (Real v : x.value().storage()) s += v;
  return scalar_result<Real>(x, s, "sum", [x](Tape<Real>& t, std::size_t self) {
    const Real g = t.node(self).grad[0];
    Tensor<Real> dx(t.node(x.id).value.shape(), g);
    t.accumulate(x, dx);
  });
}

template <class Real>
Var<Real> mean(Var<Real> x) {
  Real s = 0;
  for (Real v : x.value().storage()) s += v;
  const Real n = static_cast<Real>(x.value().size());
  return scalar_result<Real>(x, s / n, "mean", [x, n](Tape<Real>& t, std::size_t self) {
    const Real g = t.node(self).grad[0] / n;
    Tensor<Real> dx(t.node(x.id).value.shape(), g);
    t.accumulate(x, dx);
  });
}

template <class Real>
Var<Real> mean_rows(Var<Real> x) {
  check_rank2("mean_rows", x);
  const std::size_t T = x.rows(), C = x.cols();
  if (T == 0) throw std::invalid_argument("mean_rows: empty input " + x.label());
  Tensor<Real> y = Tensor<Real>::matrix(1, C);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) y[c] += x.value()[t * C + c];
  for (std::size_t c = 0; c < C; ++c) y[c] /= static_cast<Real>(T);
  return x.tape->push(std::move(y), "mean_rows", {x}, [x, T, C](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.node(self).grad;
    Tensor<Real> dx(t.node(x.id).value.shape());
    for (std::size_t r = 0; r < T; ++r)
      for (std::size_t c = 0; c < C; ++c) dx[r * C + c] = g[c] / static_cast<Real>(T);
    t.accumulate(x, dx);
  });
}

template <class Real>
Var<Real> hinge(Var<Real> x, Real delta) {
  if (x.value().size() != 1) throw std::invalid_argument("hinge: non-scalar input " + x.label());
  const Real v = x.value()[0] - delta;
  const bool active = v > Real(0);
  return scalar_result<Real>(x, active ? v : Real(0), "hinge", [x, active](Tape<Real>& t, std::size_t self) {
    const Real g = active ? t.node(self).grad[0] : Real(0);
    t.accumulate(x, Tensor<Real>(t.node(x.id).value.shape(), g));
  });
}

template <class Real>
Var<Real> mse(Var<Real> a, Var<Real> b) {
  check_same("mse", a, b);
  const Tensor<Real>& av = a.value();
  const Tensor<Real>& bv = b.value();
  if (av.size() == 0) throw std::invalid_argument("mse: empty inputs");
  Real s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const Real d = av[i] - bv[i];
    s += d * d;
  }
  const Real n = static_cast<Real>(av.size());
  return a.tape->push(Tensor<Real>::scalar(s / n), "mse", {a, b}, [a, b, n](Tape<Real>& t, std::size_t self) {
    const Real g = t.node(self).grad[0];
    const Tensor<Real>& av = t.node(a.id).value;
    const Tensor<Real>& bv = t.node(b.id).value;
    Tensor<Real> da(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) da[i] = Real(2) * (av[i] - bv[i]) / n * g;
    t.accumulate(a, da);
    for (auto& v : da.storage()) v = -v;
    t.accumulate(b, da);
  });
}

template <class Real>
Var<Real> rope(Var<Real> x, std::size_t heads, double base, std::size_t pos_offset) {
  check_rank2("rope", x);
  const std::size_t T = x.rows(), D = x.cols();
  if (heads == 0 || D % heads != 0 || (D / heads) % 2 != 0) {
    throw std::invalid_argument("rope: width " + std::to_string(D) + " not divisible into " +
                                std::to_string(heads) + " even-sized heads");
  }
  const std::size_t hd = D / heads;
  Tensor<Real> y = x.value();
  for (std::size_t t = 0; t < T; ++t) kernels::rope_row(y.data() + t * D, heads, hd, pos_offset + t, base);
  return x.tape->push(std::move(y), "rope", {x}, [x, T, D, heads, hd, base, pos_offset](Tape<Real>& t, std::size_t self) {
    Tensor<Real> g = t.node(self).grad;
    for (std::size_t r = 0; r < T; ++r) kernels::rope_row(g.data() + r * D, heads, hd, pos_offset + r, base, true);
    t.accumulate(x, g);
  });
}

template <class Real>
Var<Real> windowed_attention(Var<Real> q, Var<Real> k, Var<Real> v, std::size_t heads, std::size_t window) {
  check_rank2("windowed_attention", q);
  check_same("windowed_attention", q, k);
  check_same("windowed_attention", q, v);
  const std::size_t T = q.rows(), D = q.cols();
  if (heads == 0 || D % heads != 0) {
    throw std::invalid_argument("windowed_attention: width " + std::to_string(D) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (window == 0) throw std::invalid_argument("windowed_attention: zero window");
  const std::size_t hd = D / heads;
  Tensor<Real> y = Tensor<Real>::matrix(T, D);
  auto probs = std::make_shared<std::vector<std::vector<Real>>>(T);
  const Real* qd = q.value().data();
  const Real* kd = k.value().data();
  const Real* vd = v.value().data();
  std::vector<const Real*> kp, vp;
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t lo = t + 1 > window ? t + 1 - window : 0;
    const std::size_t n = t - lo + 1;
    kp.resize(n);
    vp.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      kp[j] = kd + (lo + j) * D;
      vp[j] = vd + (lo + j) * D;
    }
    (*probs)[t].resize(heads * n);
    kernels::attend_row<Real>(qd + t * D, kp, vp, heads, hd, y.data() + t * D, (*probs)[t].data());
  }
  return q.tape->push(std::move(y), "windowed_attention", {q, k, v},
                      [q, k, v, probs, T, D, heads, hd, window](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.node(self).grad;
    const Tensor<Real>& qv = t.node(q.id).value;
    const Tensor<Real>& kv = t.node(k.id).value;
    const Tensor<Real>& vv = t.node(v.id).value;
    Tensor<Real> dq(qv.shape()), dk(kv.shape()), dv(vv.shape());
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));
    std::vector<Real> dp;
    for (std::size_t r = 0; r < T; ++r) {
      const std::size_t lo = r + 1 > window ? r + 1 - window : 0;
      const std::size_t n = r - lo + 1;
      dp.resize(n);
      for (std::size_t h = 0; h < heads; ++h) {
        const Real* p = (*probs)[r].data() + h * n;
        const std::size_t off = h * hd;
        const Real* gr = g.data() + r * D + off;
        Real pdp = 0;
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t s = lo + j;
          Real acc = 0;
          for (std::size_t i = 0; i < hd; ++i) {
            acc += gr[i] * vv[s * D + off + i];
            dv[s * D + off + i] += p[j] * gr[i];
          }
          dp[j] = acc;
          pdp += p[j] * acc;
        }
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t s = lo + j;
          const Real ds = p[j] * (dp[j] - pdp) * scale;
          for (std::size_t i = 0; i < hd; ++i) {
            dq[r * D + off + i] += ds * kv[s * D + off + i];
            dk[s * D + off + i] += ds * qv[r * D + off + i];
          }
        }
      }
    }
    t.accumulate(q, dq);
    t.accumulate(k, dk);
    t.accumulate(v, dv);
  });
}

template <class Real>
Var<Real> repeat_rows(Var<Real> x, std::size_t factor) {
  check_rank2("repeat_rows", x);
  if (factor == 0) throw std::invalid_argument("repeat_rows: zero factor");
  const std::size_t T = x.rows(), C = x.cols();
  Tensor<Real> y = Tensor<Real>::matrix(T * factor, C);
  for (std::size_t t = 0; t < T * factor; ++t) {
    std::copy(x.value().data() + (t / factor) * C, x.value().data() + (t / factor + 1) * C, y.data() + t * C);
  }
  return x.tape->push(std::move(y), "repeat_rows", {x}, [x, T, C, factor](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.node(self).grad;
    Tensor<Real> dx(t.node(x.id).value.shape());
    for (std::size_t r = 0; r < T * factor; ++r)
      for (std::size_t c = 0; c < C; ++c) dx[(r / factor) * C + c] += g[r * C + c];
    t.accumulate(x, dx);
  });
}

template <class Real>
Var<Real> concat_rows(const std::vector<Var<Real>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t C = parts[0].cols();
  std::size_t T = 0;
  for (const auto& p : parts) {
    check_rank2("concat_rows", p);
    if (p.cols() != C) {
      throw std::invalid_argument("concat_rows: width mismatch between " + parts[0].label() + " " +
                                  shape_to_string(parts[0].shape()) + " and " + p.label() + " " +
                                  shape_to_string(p.shape()));
    }
    T += p.rows();
  }
  Tensor<Real> y = Tensor<Real>::matrix(T, C);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), y.data() + off);
    off += p.value().size();
  }
  return parts[0].tape->push(std::move(y), "concat_rows", parts, [parts](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.node(self).grad;
    std::size_t off = 0;
    for (const auto& p : parts) {
      const Tensor<Real>& pv = t.node(p.id).value;
      Tensor<Real> dp(pv.shape(), std::vector<Real>(g.data() + off, g.data() + off + pv.size()));
      t.accumulate(p, dp);
      off += pv.size();
    }
  });
}

template <class Real>
Var<Real> slice_rows(Var<Real> x, std::size_t begin, std::size_t end) {
  check_rank2("slice_rows", x);
  Tensor<Real> y = secousti::slice_rows(x.value(), begin, end);
  const std::size_t C = x.cols();
  return x.tape->push(std::move(y), "slice_rows", {x}, [x, begin, C](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.node(self).grad;
    Tensor<Real> dx(t.node(x.id).value.shape());
    std::copy(g.data(), g.data() + g.size(), dx.data() + begin * C);
    t.accumulate(x, dx);
  });
}

template <class Real>
Var<Real> embedding(Var<Real> table, const std::vector<int>& ids) {
  check_rank2("embedding", table);
  const std::size_t V = table.rows(), D = table.cols();
  Tensor<Real> y = Tensor<Real>::matrix(ids.size(), D);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= V) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[t]) + " at position " +
                              std::to_string(t) + " outside vocabulary of " + std::to_string(V));
    }
    std::copy(table.value().data() + ids[t] * D, table.value().data() + (ids[t] + 1) * D, y.data() + t * D);
  }
  return table.tape->push(std::move(y), "embedding", {table}, [table, ids, D](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.node(self).grad;
    Tensor<Real>& dt = t.grad_buffer(table);
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t c = 0; c < D; ++c) dt[ids[r] * D + c] += g[r * D + c];
  });
}

template <class Real>
Var<Real> l2_normalize_rows(Var<Real> x, Real eps) {
  check_rank2("l2_normalize_rows", x);
  const std::size_t T = x.rows(), C = x.cols();
  Tensor<Real> y = x.value();
  auto norms = std::make_shared<std::vector<Real>>(T);
  for (std::size_t t = 0; t < T; ++t) {
    Real s = 0;
    for (std::size_t c = 0; c < C; ++c) s += y[t * C + c] * y[t * C + c];
    const Real n = std::sqrt(s + eps);
    if (!(n > Real(0))) {
      throw std::domain_error("l2_normalize_rows: zero-norm row " + std::to_string(t) + " in " + x.label());
    }
    (*norms)[t] = n;
    for (std::size_t c = 0; c < C; ++c) y[t * C + c] /= n;
  }
  return x.tape->push(std::move(y), "l2_normalize_rows", {x}, [x, norms, T, C](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.node(self).grad;
    const Tensor<Real>& yv = t.node(self).value;
    Tensor<Real> dx(yv.shape());
    for (std::size_t r = 0; r < T; ++r) {
      Real dot = 0;
      for (std::size_t c = 0; c < C; ++c) dot += yv[r * C + c] * g[r * C + c];
      for (std::size_t c = 0; c < C; ++c) dx[r * C + c] = (g[r * C + c] - yv[r * C + c] * dot) / (*norms)[r];
    }
    t.accumulate(x, dx);
  });
}

template <class Real>
Var<Real> matmul_nt(Var<Real> a, Var<Real> b) {
  check_rank2("matmul_nt", a);
  check_rank2("matmul_nt", b);
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_nt: inner dimension mismatch between " + a.label() + " " +
                                shape_to_string(a.shape()) + " and " + b.label() + " " +
                                shape_to_string(b.shape()));
  }
  const std::size_t N = a.rows(), M = b.rows(), d = a.cols();
  Tensor<Real> y = Tensor<Real>::matrix(N, M);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < M; ++j) {
      Real s = 0;
      for (std::size_t k = 0; k < d; ++k) s += a.value()[i * d + k] * b.value()[j * d + k];
      y[i * M + j] = s;
    }
  return a.tape->push(std::move(y), "matmul_nt", {a, b}, [a, b, N, M, d](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.node(self).grad;
    const Tensor<Real>& av = t.node(a.id).value;
    const Tensor<Real>& bv = t.node(b.id).value;
    Tensor<Real> da(av.shape()), db(bv.shape());
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < M; ++j) {
        const Real gij = g[i * M + j];
        for (std::size_t k = 0; k < d; ++k) {
          da[i * d + k] += gij * bv[j * d + k];
          db[j * d + k] += gij * av[i * d + k];
        }
      }
    t.accumulate(a, da);
    t.accumulate(b, db);
  });
}

template <class Real>
Var<Real> symmetric_cross_entropy(Var<Real> c) {
  check_rank2("symmetric_cross_entropy", c);
  const std::size_t N = c.rows();
  if (c.cols() != N) {
    throw std::invalid_argument("symmetric_cross_entropy: " + c.label() + " is not square " +
                                shape_to_string(c.shape()));
  }
  if (N < 2) throw std::invalid_argument("symmetric_cross_entropy: needs at least 2 pairs");
  const Tensor<Real>& cv = c.value();
  // Softmax along rows (speech axis) and columns (phoneme axis).
  auto row_sm = std::make_shared<std::vector<Real>>(N * N);
  auto col_sm = std::make_shared<std::vector<Real>>(N * N);
  Real row_term = 0, col_term = 0;
  for (std::size_t i = 0; i < N; ++i) {
    Real mx = -INFINITY;
    for (std::size_t j = 0; j < N; ++j) mx = std::max(mx, cv[i * N + j]);
    Real s = 0;
    for (std::size_t j = 0; j < N; ++j) s += std::exp(cv[i * N + j] - mx);
    const Real lse = mx + std::log(s);
    for (std::size_t j = 0; j < N; ++j) (*row_sm)[i * N + j] = std::exp(cv[i * N + j] - lse);
    row_term += cv[i * N + i] - lse;
  }
  for (std::size_t j = 0; j < N; ++j) {
    Real mx = -INFINITY;
    for (std::size_t i = 0; i < N; ++i) mx = std::max(mx, cv[i * N + j]);
    Real s = 0;
    for (std::size_t i = 0; i < N; ++i) s += std::exp(cv[i * N + j] - mx);
    const Real lse = mx + std::log(s);
    for (std::size_t i = 0; i < N; ++i) (*col_sm)[i * N + j] = std::exp(cv[i * N + j] - lse);
    col_term += cv[j * N + j] - lse;
  }
  const Real n = static_cast<Real>(N);
  const Real loss = -Real(0.5) * (row_term / n + col_term / n);
  return c.tape->push(Tensor<Real>::scalar(loss), "symmetric_cross_entropy", {c},
                      [c, row_sm, col_sm, N](Tape<Real>& t, std::size_t self) {
    const Real g = t.node(self).grad[0];
    const Real k = g * Real(0.5) / static_cast<Real>(N);
    Tensor<Real> dc(t.node(c.id).value.shape());
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        const Real delta = i == j ? Real(1) : Real(0);
        dc[i * N + j] = k * (((*row_sm)[i * N + j] - delta) + ((*col_sm)[i * N + j] - delta));
      }
    t.accumulate(c, dc);
  });
}

}  // namespace ad

#define SECOUSTI_INSTANTIATE_AD(R)                                                              \
  template class ParameterStore<R>;                                                             \
  template struct Var<R>;                                                                       \
  template class Tape<R>;                                                                       \
  namespace ad {                                                                                \
  template Var<R> add(Var<R>, Var<R>);                                                          \
  template Var<R> sub(Var<R>, Var<R>);                                                          \
  template Var<R> mul(Var<R>, Var<R>);                                                          \
  template Var<R> scale(Var<R>, R);                                                             \
  template Var<R> add_scalar(Var<R>, R);                                                        \
  template Var<R> scale_by(Var<R>, Var<R>);                                                     \
  template Var<R> add_row(Var<R>, Var<R>);                                                      \
  template Var<R> mul_row(Var<R>, Var<R>);                                                      \
  template Var<R> affine(Var<R>, Var<R>, Var<R>);                                               \
  template Var<R> conv_causal(Var<R>, Var<R>, Var<R>, std::size_t, std::size_t);               \
  template Var<R> conv_transpose_causal(Var<R>, Var<R>, Var<R>, std::size_t);                  \
  template Var<R> layer_norm(Var<R>, Var<R>, Var<R>, R);                                        \
  template Var<R> elu(Var<R>);                                                                  \
  template Var<R> relu(Var<R>);                                                                 \
  template Var<R> tanh(Var<R>);                                                                 \
  template Var<R> sigmoid(Var<R>);                                                              \
  template Var<R> exp(Var<R>);                                                                  \
  template Var<R> log(Var<R>);                                                                  \
  template Var<R> square(Var<R>);                                                               \
  template Var<R> clamp(Var<R>, R, R);                                                          \
  template Var<R> round_ste(Var<R>);                                                            \
  template Var<R> round_hard(Var<R>);                                                           \
  template Var<R> detach(Var<R>);                                                               \
  template Var<R> sum(Var<R>);                                                                  \
  template Var<R> mean(Var<R>);                                                                 \
  template Var<R> mean_rows(Var<R>);                                                            \
  template Var<R> hinge(Var<R>, R);                                                             \
  template Var<R> mse(Var<R>, Var<R>);                                                          \
  template Var<R> rope(Var<R>, std::size_t, double, std::size_t);                               \
  template Var<R> windowed_attention(Var<R>, Var<R>, Var<R>, std::size_t, std::size_t);         \
  template Var<R> repeat_rows(Var<R>, std::size_t);                                             \
  template Var<R> concat_rows(const std::vector<Var<R>>&);                                      \
  template Var<R> slice_rows(Var<R>, std::size_t, std::size_t);                                 \
  template Var<R> embedding(Var<R>, const std::vector<int>&);                                   \
  template Var<R> l2_normalize_rows(Var<R>, R);                                                 \
  template Var<R> matmul_nt(Var<R>, Var<R>);                                                    \
  template Var<R> symmetric_cross_entropy(Var<R>);                                              \
  }

SECOUSTI_INSTANTIATE_AD(float)
SECOUSTI_INSTANTIATE_AD(double)

}  // namespace secousti
