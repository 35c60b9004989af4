#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "secousti/autodiff.hpp"

namespace secousti {

struct GradCheckOptions {
  double eps = 1e-6;
  double tol = 1e-4;
  // Relative errors use max(|analytic|_inf, |numeric|_inf, abs_floor) per parameter tensor.
  double abs_floor = 1e-10;
  // 0 checks every element; otherwise a seeded subset of this many elements per parameter.
  std::size_t max_elements = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_abs_error = 0;
  double max_rel_error = 0;
  bool flagged = false;
  // Analytic gradient is zero where the finite difference is not: a step discontinuity.
  bool discontinuity = false;
  bool non_finite = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0;
  bool ok() const;
  const GradCheckEntry& operator[](const std::string& name) const;
};

// Rebuilds the loss with loss_fn on a fresh tape for every evaluation. The function must be
// deterministic (reseed any sampling inside it). Only double precision is supported.
using LossFn = std::function<Var<double>(Tape<double>&)>;

GradCheckReport grad_check(ParameterStore<double>& store, const std::vector<std::string>& params,
                           const LossFn& loss_fn, const GradCheckOptions& opts = {});

// Runs one forward/backward pass and returns the loss and the named parameter gradients.
template <class Real>
struct ForwardBackwardResult {
  Real loss = 0;
  std::vector<std::pair<std::string, Tensor<Real>>> grads;
};

template <class Real>
ForwardBackwardResult<Real> forward_backward(ParameterStore<Real>& store,
                                             const std::function<Var<Real>(Tape<Real>&)>& loss_fn);

}  // namespace secousti
