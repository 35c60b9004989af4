#include "secousti/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace secousti {

template <class Real>
LatentSample<Real> vae_sample(Var<Real> mu, Var<Real> log_sigma_raw, double clamp, bool train, Rng* rng) {
  const Real c = static_cast<Real>(clamp);
  Var<Real> sigma = ad::exp(ad::clamp(log_sigma_raw, -c, c));
  if (!train) return {mu, mu, sigma};
  if (!rng) throw std::invalid_argument("vae_sample: training mode needs an rng");
  Tensor<Real> phi(mu.shape());
  for (auto& v : phi.storage()) v = static_cast<Real>(rng->normal());
  Var<Real> noise = mu.tape->constant(std::move(phi), "phi");
  return {ad::add(mu, ad::mul(sigma, noise)), mu, sigma};
}

template <class Real>
void init_quantizer(Initializer<Real>& init, const CodecConfig& cfg) {
  const std::string p = kQuantizer;
  init.linear(p + ".down", static_cast<std::size_t>(cfg.joint_dim), static_cast<std::size_t>(cfg.fsq_d));
  init.linear(p + ".up", static_cast<std::size_t>(cfg.fsq_d), static_cast<std::size_t>(cfg.joint_dim));
  // A zero bias would send the all-zero code to the origin, which has no direction to normalise.
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.fsq_d));
  for (auto& v : init.store.value(p + ".up.b").storage()) v = static_cast<Real>(init.rng.uniform(-bound, bound));
}

template <class Real>
std::vector<std::uint32_t> pack_codes(const Tensor<Real>& levels, int fsq_levels) {
  const std::size_t T = levels.rows(), d = levels.cols();
  const long half = fsq_levels / 2;
  std::vector<std::uint32_t> codes(T);
  for (std::size_t t = 0; t < T; ++t) {
    std::uint64_t code = 0, place = 1;
    for (std::size_t i = 0; i < d; ++i) {
      const long digit = std::lround(static_cast<double>(levels.at(t, i))) + half;
      if (digit < 0 || digit >= fsq_levels) {
        throw std::invalid_argument("pack_codes: level out of range at frame " + std::to_string(t));
      }
      code += static_cast<std::uint64_t>(digit) * place;
      place *= static_cast<std::uint64_t>(fsq_levels);
    }
    codes[t] = static_cast<std::uint32_t>(code);
  }
  return codes;
}

template <class Real>
Tensor<Real> unpack_codes(std::span<const std::uint32_t> codes, int fsq_d, int fsq_levels) {
  std::uint64_t size = 1;
  for (int i = 0; i < fsq_d; ++i) size *= static_cast<std::uint64_t>(fsq_levels);
  const long half = fsq_levels / 2;
  Tensor<Real> levels = Tensor<Real>::matrix(codes.size(), static_cast<std::size_t>(fsq_d));
  for (std::size_t t = 0; t < codes.size(); ++t) {
    std::uint64_t c = codes[t];
    if (c >= size) {
      throw std::invalid_argument("code " + std::to_string(c) + " at position " + std::to_string(t) +
                                  " outside codebook of size " + std::to_string(size));
    }
    for (int i = 0; i < fsq_d; ++i) {
      levels.at(t, static_cast<std::size_t>(i)) =
          static_cast<Real>(static_cast<long>(c % static_cast<std::uint64_t>(fsq_levels)) - half);
      c /= static_cast<std::uint64_t>(fsq_levels);
    }
  }
  return levels;
}

template <class Real>
FsqOutput<Real> fsq_quantize(Scope<Real>& s, const CodecConfig& cfg, Var<Real> z, RoundMode mode) {
  const std::string p = kQuantizer;
  const Real half = static_cast<Real>(cfg.fsq_levels / 2);
  Var<Real> bounded = ad::scale(ad::tanh(linear(s, p + ".down", z)), half);
  Var<Real> levels;
  switch (mode) {
    case RoundMode::straight_through: levels = ad::round_ste(bounded); break;
    case RoundMode::identity: levels = bounded; break;
    case RoundMode::hard: levels = ad::round_hard(bounded); break;
  }
  Tensor<Real> rounded = bounded.value();
  for (auto& v : rounded.storage()) v = std::round(v);
  FsqOutput<Real> out;
  out.codes = pack_codes(rounded, cfg.fsq_levels);
  out.levels = levels;
  out.s = linear(s, p + ".up", levels);
  return out;
}

template <class Real>
Var<Real> codes_to_embedding(Scope<Real>& s, const CodecConfig& cfg, std::span<const std::uint32_t> codes) {
  Var<Real> levels = s.input(unpack_codes<Real>(codes, cfg.fsq_d, cfg.fsq_levels), "levels");
  return linear(s, std::string(kQuantizer) + ".up", levels);
}

Utilization utilization(std::span<const std::uint32_t> codes, std::uint64_t codebook_size) {
  if (codes.empty()) throw std::invalid_argument("utilization: empty code stream");
  Utilization u;
  u.total = codes.size();
  std::vector<std::size_t> counts(codebook_size, 0);
  for (auto c : codes) {
    if (c >= codebook_size) {
      throw std::invalid_argument("utilization: code " + std::to_string(c) + " outside codebook of size " +
                                  std::to_string(codebook_size));
    }
    ++counts[c];
  }
  u.frequency.resize(codebook_size);
  for (std::size_t i = 0; i < codebook_size; ++i) {
    u.frequency[i] = static_cast<double>(counts[i]) / static_cast<double>(u.total);
    if (counts[i]) ++u.distinct;
    u.max_frequency = std::max(u.max_frequency, u.frequency[i]);
  }
  u.used_fraction = static_cast<double>(u.distinct) / static_cast<double>(codebook_size);
  return u;
}

#define SECOUSTI_INSTANTIATE_QUANTIZER(R)                                                         \
  template LatentSample<R> vae_sample(Var<R>, Var<R>, double, bool, Rng*);                        \
  template void init_quantizer(Initializer<R>&, const CodecConfig&);                              \
  template FsqOutput<R> fsq_quantize(Scope<R>&, const CodecConfig&, Var<R>, RoundMode);           \
  template std::vector<std::uint32_t> pack_codes(const Tensor<R>&, int);                          \
  template Tensor<R> unpack_codes(std::span<const std::uint32_t>, int, int);                      \
  template Var<R> codes_to_embedding(Scope<R>&, const CodecConfig&, std::span<const std::uint32_t>);

SECOUSTI_INSTANTIATE_QUANTIZER(float)
SECOUSTI_INSTANTIATE_QUANTIZER(double)

}  // namespace secousti
