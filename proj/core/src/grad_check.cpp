#include "secousti/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "secousti/rng.hpp"

namespace secousti {

bool GradCheckReport::ok() const {
  return std::none_of(entries.begin(), entries.end(), [](const GradCheckEntry& e) { return e.flagged; });
}

const GradCheckEntry& GradCheckReport::operator[](const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw std::out_of_range("no grad-check entry for " + name);
}

template <class Real>
ForwardBackwardResult<Real> forward_backward(ParameterStore<Real>& store,
                                             const std::function<Var<Real>(Tape<Real>&)>& loss_fn) {
  store.zero_grad();
  Tape<Real> tape;
  Var<Real> loss = loss_fn(tape);
  tape.backward(loss);
  ForwardBackwardResult<Real> r;
  r.loss = loss.value().item();
  for (const auto& [name, e] : store.entries()) r.grads.emplace_back(name, e.grad);
  return r;
}

template ForwardBackwardResult<float> forward_backward(ParameterStore<float>&,
                                                       const std::function<Var<float>(Tape<float>&)>&);
template ForwardBackwardResult<double> forward_backward(ParameterStore<double>&,
                                                        const std::function<Var<double>(Tape<double>&)>&);

namespace {

// A perturbation that leaves the loss's domain counts as a non-finite evaluation.
double evaluate(const LossFn& fn) {
  Tape<double> tape;
  tape.set_recording(false);
  try {
    return fn(tape).value().item();
  } catch (const std::domain_error&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace

GradCheckReport grad_check(ParameterStore<double>& store, const std::vector<std::string>& params,
                           const LossFn& loss_fn, const GradCheckOptions& opts) {
  if (!(opts.eps >= 1e-6 && opts.eps <= 1e-3)) {
    throw std::invalid_argument("grad_check: eps must lie in [1e-6, 1e-3]");
  }
  store.zero_grad();
  {
    Tape<double> tape;
    Var<double> loss = loss_fn(tape);
    tape.backward(loss);
  }

  GradCheckReport report;
  Rng rng(opts.seed);
  for (const auto& name : params) {
    Tensor<double>& value = store.value(name);
    const Tensor<double> analytic = store.grad(name);
    std::vector<std::size_t> idx(value.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (opts.max_elements && idx.size() > opts.max_elements) {
      for (std::size_t i = 0; i < opts.max_elements; ++i) {
        std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      }
      idx.resize(opts.max_elements);
      std::sort(idx.begin(), idx.end());
    }

    GradCheckEntry e;
    e.name = name;
    double max_a = 0, max_n = 0;
    bool zero_analytic_nonzero_numeric = false;
    for (std::size_t i : idx) {
      const double orig = value[i];
      value[i] = orig + opts.eps;
      const double fp = evaluate(loss_fn);
      value[i] = orig - opts.eps;
      const double fm = evaluate(loss_fn);
      value[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        e.non_finite = true;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * opts.eps);
      const double a = analytic[i];
      max_a = std::max(max_a, std::abs(a));
      max_n = std::max(max_n, std::abs(numeric));
      e.max_abs_error = std::max(e.max_abs_error, std::abs(a - numeric));
      if (a == 0.0 && std::abs(numeric) > opts.tol) zero_analytic_nonzero_numeric = true;
      ++e.checked;
    }
    const double denom = std::max({max_a, max_n, opts.abs_floor});
    e.max_rel_error = e.max_abs_error / denom;
    e.flagged = e.non_finite || e.max_rel_error > opts.tol;
    e.discontinuity = e.flagged && zero_analytic_nonzero_numeric;
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace secousti
