#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "secousti/config.hpp"
#include "secousti/layers.hpp"

namespace secousti {

inline constexpr const char* kQuantizer = "quantizer";

template <class Real>
struct LatentSample {
  Var<Real> z;
  Var<Real> mu;
  Var<Real> sigma;
};

// sigma = exp(clamp(log_sigma_raw, -clamp, clamp)). Training draws z = mu + sigma * phi with
// phi ~ N(0, I) from rng; inference returns z = mu.
template <class Real>
LatentSample<Real> vae_sample(Var<Real> mu, Var<Real> log_sigma_raw, double clamp, bool train, Rng* rng);

enum class RoundMode {
  straight_through,  // round forward, identity backward
  identity,          // no rounding at all (round-free reference graph)
  hard,              // round with its true gradient
};

template <class Real>
struct FsqOutput {
  Var<Real> s;       // Proj_up(levels), [T x joint_dim]
  Var<Real> levels;  // [T x fsq_d], integers in [-L/2, L/2] unless RoundMode::identity
  std::vector<std::uint32_t> codes;
};

template <class Real> void init_quantizer(Initializer<Real>& init, const CodecConfig& cfg);

template <class Real>
FsqOutput<Real> fsq_quantize(Scope<Real>& s, const CodecConfig& cfg, Var<Real> z,
                             RoundMode mode = RoundMode::straight_through);

// code = sum_i (v_i + L/2) * L^i.
template <class Real>
std::vector<std::uint32_t> pack_codes(const Tensor<Real>& levels, int fsq_levels);
// Inverse of pack_codes; throws naming the first out-of-range position.
template <class Real>
Tensor<Real> unpack_codes(std::span<const std::uint32_t> codes, int fsq_d, int fsq_levels);

template <class Real>
Var<Real> codes_to_embedding(Scope<Real>& s, const CodecConfig& cfg, std::span<const std::uint32_t> codes);

struct Utilization {
  double used_fraction = 0;
  double max_frequency = 0;
  std::size_t distinct = 0;
  std::size_t total = 0;
  std::vector<double> frequency;  // per code, sums to 1
};

Utilization utilization(std::span<const std::uint32_t> codes, std::uint64_t codebook_size);

}  // namespace secousti
