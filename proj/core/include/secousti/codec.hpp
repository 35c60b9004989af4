#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "secousti/acoustic_path.hpp"
#include "secousti/config.hpp"
#include "secousti/contrastive.hpp"
#include "secousti/paralinguistic_path.hpp"
#include "secousti/quantizer.hpp"
#include "secousti/semantic_path.hpp"

namespace secousti {

template <class Real>
struct CodecModel {
  CodecConfig config;
  ParameterStore<Real> params;
};

CodecModel<float> init_codec(const CodecConfig& cfg, std::uint64_t seed);

template <class To, class From>
CodecModel<To> cast_model(const CodecModel<From>& m) {
  CodecModel<To> out;
  out.config = m.config;
  for (const auto& [name, e] : m.params.entries()) out.params.add(name, e.value.template cast<To>());
  return out;
}

// Parameter prefixes trained in stage 1 (speech encoder, acoustic projection, speech decoder).
const std::vector<std::string>& stage1_prefixes();
const std::vector<std::string>& stage2_prefixes();
bool is_stage1_parameter(const std::string& name);

// Log-mel value used to pad inputs to a whole number of semantic frames.
inline constexpr double kSilenceLogMel = -11.512925464970229;  // ln(1e-5)

template <class Real>
Tensor<Real> pad_to_semantic(const CodecConfig& cfg, const Tensor<Real>& mel);
// Phoneme frame ids padded with the last id to a whole number of semantic frames.
std::vector<int> pad_frame_ids(const CodecConfig& cfg, std::vector<int> ids);
// `frames` rows starting at `start`, wrapping cyclically.
template <class Real>
Tensor<Real> cyclic_rows(const Tensor<Real>& x, std::size_t start, std::size_t frames);

// Stage 1: MSE between reconstructed and input mel, concatenated over the batch.
template <class Real>
Var<Real> stage1_loss(Scope<Real>& s, const CodecConfig& cfg, const std::vector<const Tensor<Real>*>& mels);

template <class Real>
struct Stage2Item {
  Var<Real> hidden;    // speech encoder output (treated as constant)
  Var<Real> acoustic;  // A target (treated as constant)
  std::vector<int> frame_ids;  // padded
  Var<Real> para_window;
};

struct LossWeights {
  int stage = 1;
  double alpha = 1.0;
  double beta = 0.0;
  double gamma = 0.0;
  double delta = 0.0;
};

template <class Real>
struct Stage2Losses {
  Var<Real> total;
  Var<Real> acoustic;
  Var<Real> contrastive;
  Var<Real> kl_para;
  Var<Real> kl_semantic;
  std::vector<std::uint32_t> codes;
};

template <class Real>
Stage2Losses<Real> stage2_loss(Scope<Real>& s, const CodecConfig& cfg, const std::vector<Stage2Item<Real>>& batch,
                               const LossWeights& w, bool train, Rng* rng,
                               RoundMode mode = RoundMode::straight_through);

// Inference helpers. They evaluate without recording and never modify the model.
template <class Real>
struct AcousticTargets {
  Tensor<Real> hidden;
  Tensor<Real> acoustic;
};
template <class Real>
AcousticTargets<Real> acoustic_targets(const CodecModel<Real>& m, const Tensor<Real>& mel);
template <class Real>
Tensor<Real> reconstruct_acoustic(const CodecModel<Real>& m, const Tensor<Real>& mel);
template <class Real>
std::vector<std::uint32_t> encode_tokens(const CodecModel<Real>& m, const Tensor<Real>& mel);
// Paralinguistic vector from the first para_frames frames (tiled when shorter).
template <class Real>
Tensor<Real> paralinguistic_reference(const CodecModel<Real>& m, const Tensor<Real>& mel);
template <class Real>
Tensor<Real> decode_tokens(const CodecModel<Real>& m, std::span<const std::uint32_t> codes, const Tensor<Real>& g);

}  // namespace secousti
