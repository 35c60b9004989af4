#include "secousti/codec.hpp"

#include <algorithm>
#include <stdexcept>

namespace secousti {

CodecModel<float> init_codec(const CodecConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  CodecModel<float> m;
  m.config = cfg;
  // One stream per module so that changing one module's shape leaves the others' init intact.
  auto init_with = [&](std::uint64_t stream, auto&& fn) {
    Rng rng(mix_seed(seed, stream));
    Initializer<float> init{m.params, rng};
    fn(init);
  };
  init_with(1, [&](auto& i) { init_speech_encoder(i, cfg); });
  init_with(2, [&](auto& i) { init_acoustic_projection(i, cfg); });
  init_with(3, [&](auto& i) { init_speech_decoder(i, cfg); });
  init_with(4, [&](auto& i) { init_semantic_projection(i, cfg); });
  init_with(5, [&](auto& i) { init_quantizer(i, cfg); });
  init_with(6, [&](auto& i) { init_semantic_connector(i, cfg); });
  init_with(7, [&](auto& i) { init_phoneme_encoder(i, cfg); });
  init_with(8, [&](auto& i) { init_paralinguistic_encoder(i, cfg); });
  init_with(9, [&](auto& i) { init_contrastive(i, cfg); });
  return m;
}

const std::vector<std::string>& stage1_prefixes() {
  static const std::vector<std::string> p{std::string(kSpeechEncoder) + ".", std::string(kAcousticProjection) + ".",
                                          std::string(kSpeechDecoder) + "."};
  return p;
}

const std::vector<std::string>& stage2_prefixes() {
  static const std::vector<std::string> p{
      std::string(kPhonemeEncoder) + ".",     std::string(kParalinguisticEncoder) + ".",
      std::string(kSemanticProjection) + ".", std::string(kQuantizer) + ".",
      std::string(kSemanticConnector) + ".",  std::string(kContrastive) + "."};
  return p;
}

bool is_stage1_parameter(const std::string& name) {
  for (const auto& p : stage1_prefixes()) {
    if (name.compare(0, p.size(), p) == 0) return true;
  }
  return false;
}

template <class Real>
Tensor<Real> pad_to_semantic(const CodecConfig& cfg, const Tensor<Real>& mel) {
  if (mel.rows() == 0) throw std::invalid_argument("empty mel input");
  if (mel.cols() != static_cast<std::size_t>(cfg.mel.n_mels)) {
    throw std::invalid_argument("mel has " + std::to_string(mel.cols()) + " bands, model expects " +
                                std::to_string(cfg.mel.n_mels));
  }
  return pad_frames(mel, static_cast<std::size_t>(cfg.frame_multiple()), static_cast<Real>(kSilenceLogMel));
}

std::vector<int> pad_frame_ids(const CodecConfig& cfg, std::vector<int> ids) {
  if (ids.empty()) throw std::invalid_argument("pad_frame_ids: empty id sequence");
  const std::size_t m = static_cast<std::size_t>(cfg.frame_multiple());
  while (ids.size() % m) ids.push_back(ids.back());
  return ids;
}

template <class Real>
Tensor<Real> cyclic_rows(const Tensor<Real>& x, std::size_t start, std::size_t frames) {
  const std::size_t T = x.rows(), C = x.cols();
  if (T == 0) throw std::invalid_argument("cyclic_rows: empty input");
  Tensor<Real> out = Tensor<Real>::matrix(frames, C);
  for (std::size_t i = 0; i < frames; ++i) {
    const auto r = x.row((start + i) % T);
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  return out;
}

template <class Real>
Var<Real> stage1_loss(Scope<Real>& s, const CodecConfig& cfg, const std::vector<const Tensor<Real>*>& mels) {
  if (mels.empty()) throw std::invalid_argument("stage1_loss: empty batch");
  std::vector<Var<Real>> preds, targets;
  for (const Tensor<Real>* mel : mels) {
    Var<Real> x = s.input(pad_to_semantic(cfg, *mel), "mel");
    Var<Real> rec = speech_decode(s, cfg, acoustic_project(s, cfg, speech_encode(s, cfg, x)));
    preds.push_back(ad::slice_rows(rec, 0, mel->rows()));
    targets.push_back(s.input(*mel, "mel_target"));
  }
  if (preds.size() == 1) return mel_loss(preds[0], targets[0]);
  return mel_loss(ad::concat_rows(preds), ad::concat_rows(targets));
}

template <class Real>
Stage2Losses<Real> stage2_loss(Scope<Real>& s, const CodecConfig& cfg, const std::vector<Stage2Item<Real>>& batch,
                               const LossWeights& w, bool train, Rng* rng, RoundMode mode) {
  if (batch.empty()) throw std::invalid_argument("stage2_loss: empty batch");
  std::vector<Var<Real>> a_hat, a, sem, pho, sem_mu, sem_sigma, para_mu, para_sigma;
  Stage2Losses<Real> out;
  for (const auto& item : batch) {
    const SemanticHeads<Real> heads = semantic_project(s, cfg, ad::detach(item.hidden));
    const LatentSample<Real> z = vae_sample(heads.mu, heads.log_sigma_raw, cfg.log_sigma_clamp, train, rng);
    FsqOutput<Real> q = fsq_quantize(s, cfg, z.z, mode);
    const ParalinguisticVector<Real> para = paralinguistic_encode(s, cfg, item.para_window, train, rng);
    Var<Real> pred = semantic_connect(s, cfg, q.s, para.g);
    const std::size_t n = std::min(pred.rows(), item.acoustic.rows());
    a_hat.push_back(ad::slice_rows(pred, 0, n));
    a.push_back(ad::slice_rows(item.acoustic, 0, n));
    sem.push_back(q.s);
    pho.push_back(phoneme_encode(s, cfg, item.frame_ids));
    sem_mu.push_back(z.mu);
    sem_sigma.push_back(z.sigma);
    para_mu.push_back(para.mu);
    para_sigma.push_back(para.sigma);
    out.codes.insert(out.codes.end(), q.codes.begin(), q.codes.end());
  }
  auto cat = [](const std::vector<Var<Real>>& v) { return v.size() == 1 ? v[0] : ad::concat_rows(v); };
  out.acoustic = acoustic_loss(cat(a_hat), cat(a));
  out.contrastive = contrastive_loss(similarity_matrix(cat(sem), cat(pho), temperature(s, cfg), cfg.normalize_embeddings));
  out.kl_para = kl_margin_loss(cat(para_mu), cat(para_sigma), static_cast<Real>(cfg.kl_margin_para));
  out.kl_semantic = kl_margin_loss(cat(sem_mu), cat(sem_sigma), static_cast<Real>(cfg.kl_margin_semantic));
  Var<Real> total = ad::scale(out.acoustic, static_cast<Real>(w.alpha));
  total = ad::add(total, ad::scale(out.contrastive, static_cast<Real>(w.beta)));
  total = ad::add(total, ad::scale(out.kl_para, static_cast<Real>(w.gamma)));
  out.total = ad::add(total, ad::scale(out.kl_semantic, static_cast<Real>(w.delta)));
  return out;
}

namespace {

// Inference never writes to the store; the tape API just takes it by reference.
template <class Real>
ParameterStore<Real>& readonly(const CodecModel<Real>& m) {
  return const_cast<ParameterStore<Real>&>(m.params);
}

}  // namespace

template <class Real>
AcousticTargets<Real> acoustic_targets(const CodecModel<Real>& m, const Tensor<Real>& mel) {
  Tape<Real> tape;
  tape.set_recording(false);
  Scope<Real> s(tape, readonly(m));
  Var<Real> hidden = speech_encode(s, m.config, s.input(pad_to_semantic(m.config, mel), "mel"));
  Var<Real> a = acoustic_project(s, m.config, hidden);
  return {hidden.value(), a.value()};
}

template <class Real>
Tensor<Real> reconstruct_acoustic(const CodecModel<Real>& m, const Tensor<Real>& mel) {
  Tape<Real> tape;
  tape.set_recording(false);
  Scope<Real> s(tape, readonly(m));
  Var<Real> x = s.input(pad_to_semantic(m.config, mel), "mel");
  Var<Real> rec = speech_decode(s, m.config, acoustic_project(s, m.config, speech_encode(s, m.config, x)));
  return slice_rows(rec.value(), 0, mel.rows());
}

template <class Real>
std::vector<std::uint32_t> encode_tokens(const CodecModel<Real>& m, const Tensor<Real>& mel) {
  Tape<Real> tape;
  tape.set_recording(false);
  Scope<Real> s(tape, readonly(m));
  Var<Real> hidden = speech_encode(s, m.config, s.input(pad_to_semantic(m.config, mel), "mel"));
  const SemanticHeads<Real> heads = semantic_project(s, m.config, hidden);
  return fsq_quantize(s, m.config, heads.mu).codes;
}

template <class Real>
Tensor<Real> paralinguistic_reference(const CodecModel<Real>& m, const Tensor<Real>& mel) {
  Tape<Real> tape;
  tape.set_recording(false);
  Scope<Real> s(tape, readonly(m));
  Var<Real> window = s.input(cyclic_rows(mel, 0, static_cast<std::size_t>(m.config.para_frames)), "para_window");
  return paralinguistic_encode(s, m.config, window, false, nullptr).g.value();
}

template <class Real>
Tensor<Real> decode_tokens(const CodecModel<Real>& m, std::span<const std::uint32_t> codes, const Tensor<Real>& g) {
  if (codes.empty()) return Tensor<Real>::matrix(0, static_cast<std::size_t>(m.config.mel.n_mels));
  Tape<Real> tape;
  tape.set_recording(false);
  Scope<Real> s(tape, readonly(m));
  Var<Real> sem = codes_to_embedding(s, m.config, codes);
  Var<Real> a_hat = semantic_connect(s, m.config, sem, s.input(g, "g"));
  return speech_decode(s, m.config, a_hat).value();
}

#define SECOUSTI_INSTANTIATE_CODEC(R)                                                                        \
  template Tensor<R> pad_to_semantic(const CodecConfig&, const Tensor<R>&);                                  \
  template Tensor<R> cyclic_rows(const Tensor<R>&, std::size_t, std::size_t);                                \
  template Var<R> stage1_loss(Scope<R>&, const CodecConfig&, const std::vector<const Tensor<R>*>&);          \
  template Stage2Losses<R> stage2_loss(Scope<R>&, const CodecConfig&, const std::vector<Stage2Item<R>>&,      \
                                       const LossWeights&, bool, Rng*, RoundMode);                           \
  template AcousticTargets<R> acoustic_targets(const CodecModel<R>&, const Tensor<R>&);                      \
  template Tensor<R> reconstruct_acoustic(const CodecModel<R>&, const Tensor<R>&);                           \
  template std::vector<std::uint32_t> encode_tokens(const CodecModel<R>&, const Tensor<R>&);                 \
  template Tensor<R> paralinguistic_reference(const CodecModel<R>&, const Tensor<R>&);                       \
  template Tensor<R> decode_tokens(const CodecModel<R>&, std::span<const std::uint32_t>, const Tensor<R>&);

SECOUSTI_INSTANTIATE_CODEC(float)
SECOUSTI_INSTANTIATE_CODEC(double)

}  // namespace secousti
