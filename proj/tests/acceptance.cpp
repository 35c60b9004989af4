// Acceptance suite: one PASS/FAIL line per criterion. Optional arguments select criteria by
// number, e.g. `acceptance 3 7`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "secousti/grad_check.hpp"
#include "secousti/streaming.hpp"
#include "secousti/trainer.hpp"
#include "support.hpp"

using namespace secousti;
using secousti::testing::bit_identical;
using secousti::testing::random_matrix;
using secousti::testing::random_mel;
using secousti::testing::rows_identical;

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

void progress(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

TrainConfig desk_config() {
  return load_config(std::string(SECOUSTI_SOURCE_DIR) + "/configs/desk.conf");
}

bool has_prefix(const std::string& name, const std::vector<std::string>& prefixes) {
  for (const auto& p : prefixes) {
    if (name.compare(0, p.size(), p) == 0) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------------------------
// 1. Gradient suite

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  CodecConfig cfg = secousti::testing::toy_config();
  // Keep both KL hinges in their active region so their gradients are exercised.
  cfg.kl_margin_para = 0.0;
  cfg.kl_margin_semantic = 0.0;
  cfg.validate();

  CorpusOptions opts;
  opts.mel = cfg.mel;
  opts.vocab_size = cfg.phoneme_vocab;
  opts.min_phonemes = 3;
  opts.max_phonemes = 3;
  opts.min_duration = 2;
  opts.max_duration = 3;
  const std::vector<TrainingExample> ex = prepare_examples(cfg, gen_synthetic_corpus(3, 2, opts));

  CodecModel<double> model = cast_model<double>(init_codec(cfg, 5));
  std::vector<Tensor<double>> mels, windows;
  std::vector<AcousticTargets<double>> targets;
  Rng crop_rng(6);
  for (const auto& e : ex) {
    mels.push_back(e.mel.cast<double>());
    targets.push_back(acoustic_targets(model, mels.back()));
    MelSpectrogram m;
    m.values = e.mel;
    windows.push_back(crop_paralinguistic_window(m, static_cast<std::size_t>(cfg.para_frames), crop_rng).values.cast<double>());
  }

  ParameterStore<double>& store = model.params;
  const LossWeights total_w = loss_weights(25000, ScheduleConfig{});

  enum class Part { mel, acoustic, contrastive, kl_para, kl_semantic, total };
  auto make_loss = [&](Part part) -> LossFn {
    return [&, part](Tape<double>& tape) -> Var<double> {
      Scope<double> s(tape, store);
      if (part == Part::mel) {
        s.frozen = stage2_prefixes();
        std::vector<const Tensor<double>*> ms;
        for (const auto& m : mels) ms.push_back(&m);
        return stage1_loss(s, cfg, ms);
      }
      s.frozen = stage1_prefixes();
      std::vector<Stage2Item<double>> items;
      for (std::size_t i = 0; i < ex.size(); ++i) {
        items.push_back({s.input(targets[i].hidden, "hidden"), s.input(targets[i].acoustic, "acoustic"),
                         ex[i].frame_ids, s.input(windows[i], "para_window")});
      }
      // Fixed noise: every evaluation sees the same reparameterisation draws.
      Rng rng(77);
      const Stage2Losses<double> L = stage2_loss(s, cfg, items, total_w, true, &rng, RoundMode::identity);
      switch (part) {
        case Part::acoustic: return L.acoustic;
        case Part::contrastive: return L.contrastive;
        case Part::kl_para: return L.kl_para;
        case Part::kl_semantic: return L.kl_semantic;
        default: return L.total;
      }
    };
  };

  const std::string pe = std::string(kParalinguisticEncoder) + ".";
  const std::string sp = std::string(kSemanticProjection) + ".";
  const std::string qz = std::string(kQuantizer) + ".";
  const std::string sc = std::string(kSemanticConnector) + ".";
  const std::string ph = std::string(kPhonemeEncoder) + ".";
  const std::string ct = std::string(kContrastive) + ".";
  struct Case {
    const char* name;
    Part part;
    std::vector<std::string> prefixes;
  };
  const std::vector<Case> cases{
      {"mel", Part::mel, stage1_prefixes()},
      {"acoustic", Part::acoustic, {pe, sp, qz, sc}},
      {"contrastive", Part::contrastive, {sp, qz, ph, ct}},
      {"kl_para", Part::kl_para, {pe}},
      {"kl_semantic", Part::kl_semantic, {sp}},
      {"total", Part::total, stage2_prefixes()},
  };

  GradCheckOptions go;
  go.eps = 1e-5;
  go.tol = 1e-4;
  double worst = 0;
  std::string worst_name;
  bool ok = true;
  std::ostringstream per;
  for (const auto& c : cases) {
    std::vector<std::string> names;
    for (const auto& n : store.names()) {
      if (has_prefix(n, c.prefixes)) names.push_back(n);
    }
    const GradCheckReport rep = grad_check(store, names, make_loss(c.part), go);
    double case_worst = 0;
    for (const auto& e : rep.entries) {
      if (e.flagged || e.non_finite || e.discontinuity) ok = false;
      if (e.max_rel_error > case_worst) case_worst = e.max_rel_error;
      if (e.max_rel_error > worst) worst = e.max_rel_error, worst_name = std::string(c.name) + ":" + e.name;
    }
    per << " " << c.name << "=" << fmt("%.1e", case_worst);
    progress(std::string("grad check ") + c.name + " " + fmt("%.2e", case_worst) + " over " +
             std::to_string(names.size()) + " tensors");
  }
  const double secs = seconds_since(t0);
  ok = ok && worst < 1e-4 && secs < 300.0;
  return {ok, "max rel error " + fmt("%.2e", worst) + " (" + worst_name + ");" + per.str() + "; " +
                  fmt("%.1f", secs) + " s"};
}

// ---------------------------------------------------------------------------------------------
// 2. Causality suite

Outcome causality_suite() {
  CodecConfig cfg = secousti::testing::small_config(8);
  cfg.mel_offset = -5.0;
  cfg.mel_scale = 3.0;
  cfg.validate();
  CodecModel<float> m = init_codec(cfg, 123);
  const std::size_t r_ac = static_cast<std::size_t>(cfg.acoustic_rate());
  const std::size_t r_sem = static_cast<std::size_t>(cfg.semantic_rate);
  const std::size_t f = static_cast<std::size_t>(semantic_factor(cfg));
  const std::size_t C = static_cast<std::size_t>(cfg.conv_channels);
  Rng rng(99);

  using Fn = std::function<Tensor<float>(const Tensor<float>&)>;
  auto graph = [&](auto build) -> Fn {
    return [&, build](const Tensor<float>& x) {
      Tape<float> tape;
      Scope<float> s(tape, m.params);
      return build(s, s.input(x, "x")).value();
    };
  };
  const Tensor<float> g = random_matrix<float>(1, static_cast<std::size_t>(cfg.para_dim), rng);

  struct Suite {
    const char* name;
    std::size_t in_cols;
    std::size_t in_multiple;
    Fn fn;
    // Number of leading outputs that must not change when inputs from frame t on are perturbed.
    std::function<std::size_t(std::size_t)> safe;
  };
  std::vector<Suite> suites{
      {"encoder", 80, r_ac, graph([&](Scope<float>& s, Var<float> x) { return speech_encode(s, cfg, x); }),
       [&](std::size_t t) { return t / r_ac; }},
      {"acoustic_projection", C, 1,
       graph([&](Scope<float>& s, Var<float> x) { return acoustic_project(s, cfg, x); }),
       [](std::size_t t) { return t; }},
      {"semantic_projection", C, f,
       graph([&](Scope<float>& s, Var<float> x) { return semantic_project(s, cfg, x).mu; }),
       [&](std::size_t t) { return t / f; }},
      {"connector", static_cast<std::size_t>(cfg.joint_dim), 1,
       graph([&](Scope<float>& s, Var<float> x) { return semantic_connect(s, cfg, x, s.input(g, "g")); }),
       [&](std::size_t t) { return t * f; }},
      {"decoder", static_cast<std::size_t>(cfg.acous_dim), 1,
       graph([&](Scope<float>& s, Var<float> x) { return speech_decode(s, cfg, x); }),
       [&](std::size_t t) { return t * r_ac; }},
      {"acoustic_codec", 80, 1, [&](const Tensor<float>& x) { return reconstruct_acoustic(m, x); },
       [&](std::size_t t) { return t / r_ac * r_ac; }},
      {"token_codec", 80, 1,
       [&](const Tensor<float>& x) { return decode_tokens(m, encode_tokens(m, x), g); },
       [&](std::size_t t) { return t / r_sem * r_sem; }},
  };

  std::size_t failures = 0, trials = 0, changed = 0;
  std::string failed_names;
  for (auto& su : suites) {
    std::size_t fail_here = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t units = 4 + rng.below(12);
      const std::size_t T = units * su.in_multiple * (su.in_cols == 80 ? r_sem : 1);
      Tensor<float> x = su.in_cols == 80 ? random_mel(T, 80, rng) : random_matrix<float>(T, su.in_cols, rng);
      const Tensor<float> base = su.fn(x);
      const std::size_t t = rng.below(T);
      for (std::size_t r = t; r < T; ++r) {
        for (auto& v : x.row(r)) v += static_cast<float>(rng.normal());
      }
      const Tensor<float> pert = su.fn(x);
      const std::size_t keep = std::min(su.safe(t), base.rows());
      ++trials;
      if (!rows_identical(base, pert, keep)) ++fail_here;
      if (!bit_identical(base, pert)) ++changed;
    }
    if (fail_here) failed_names += std::string(" ") + su.name;
    failures += fail_here;
  }
  return {failures == 0 && changed > 0,
          std::to_string(trials) + " trials over " + std::to_string(suites.size()) + " maps, " +
              std::to_string(failures) + " prefix violations" + (failed_names.empty() ? "" : " in" + failed_names)};
}

// ---------------------------------------------------------------------------------------------
// 3. Streaming equals offline

Outcome streaming_suite() {
  CodecConfig desk = desk_config().codec;
  CodecConfig narrow = desk;
  narrow.attn_window = 8;
  narrow.validate();
  std::size_t runs = 0, token_mismatch = 0, mel_mismatch = 0;
  Rng rng(2024);
  for (const CodecConfig& cfg : {desk, narrow}) {
    const CodecModel<float> m = init_codec(cfg, 31);
    for (int trial = 0; trial < 50; ++trial) {
      const Tensor<float> mel = random_mel(200, static_cast<std::size_t>(cfg.mel.n_mels), rng);
      const std::vector<std::uint32_t> offline = encode_tokens(m, mel);
      auto enc = open_encode_stream(m);
      std::vector<std::uint32_t> streamed;
      for (std::size_t at = 0; at < mel.rows();) {
        const std::size_t n = std::min<std::size_t>(1 + rng.below(40), mel.rows() - at);
        const auto part = enc->push(slice_rows(mel, at, at + n));
        streamed.insert(streamed.end(), part.begin(), part.end());
        at += n;
      }
      const auto tail = enc->finish();
      streamed.insert(streamed.end(), tail.begin(), tail.end());
      if (streamed != offline) ++token_mismatch;

      const Tensor<float> g = random_matrix<float>(1, static_cast<std::size_t>(cfg.para_dim), rng);
      const Tensor<float> mel_off = decode_tokens(m, offline, g);
      auto dec = open_decode_stream(m, &g);
      std::vector<float> acc;
      for (std::size_t at = 0; at < offline.size();) {
        const std::size_t n = std::min<std::size_t>(1 + rng.below(12), offline.size() - at);
        const Tensor<float> part = dec->push(std::span<const std::uint32_t>(offline).subspan(at, n));
        acc.insert(acc.end(), part.storage().begin(), part.storage().end());
        at += n;
      }
      const bool same = acc.size() == mel_off.size() &&
                        std::memcmp(acc.data(), mel_off.data(), acc.size() * sizeof(float)) == 0;
      if (!same) ++mel_mismatch;
      ++runs;
    }
  }
  return {token_mismatch == 0 && mel_mismatch == 0,
          std::to_string(runs) + " chunkings (window 250 and 8), " + std::to_string(token_mismatch) +
              " token and " + std::to_string(mel_mismatch) + " mel mismatches"};
}

// ---------------------------------------------------------------------------------------------
// 4. Schedule conformance

Outcome schedule_suite() {
  const ScheduleConfig s;
  const LossWeights a = loss_weights(5000, s), b = loss_weights(25000, s), c = loss_weights(40000, s);
  const bool ok = a.stage == 1 && a.gamma == 0.0 && a.delta == 0.0 && b.stage == 2 && b.gamma == 5e-6 &&
                  b.delta == 5e-6 && c.stage == 2 && c.gamma == 1e-5 && c.delta == 1e-5;
  std::ostringstream d;
  d << "step 5000 stage " << a.stage << "; step 25000 gamma " << b.gamma << " delta " << b.delta
    << "; step 40000 gamma " << c.gamma << " delta " << c.delta;
  return {ok, d.str()};
}

// ---------------------------------------------------------------------------------------------
// 5. Quantizer

Outcome quantizer_suite() {
  CodecConfig cfg = secousti::testing::toy_config();
  cfg.joint_dim = 4;
  cfg.fsq_d = 2;
  cfg.fsq_levels = 3;
  cfg.validate();
  CodecModel<double> m;
  m.config = cfg;
  Rng init_rng(8);
  Initializer<double> init{m.params, init_rng};
  init_quantizer(init, cfg);

  // Utilization under wide Gaussian inputs through the random down-projection.
  Rng rng(1);
  const std::size_t N = 100000;
  std::vector<std::uint32_t> codes;
  {
    Tape<double> tape;
    tape.set_recording(false);
    Scope<double> s(tape, m.params);
    const FsqOutput<double> q = fsq_quantize(s, cfg, s.input(random_matrix<double>(N, 4, rng, 0.0, 2.0), "z"));
    codes = q.codes;
  }
  const Utilization u = utilization(codes, cfg.codebook_size());

  // Straight-through vs the round-free graph for a loss linear in up(q).
  const Tensor<double> z0 = random_matrix<double>(64, 4, rng, 0.0, 2.0);
  const Tensor<double> coef = random_matrix<double>(64, 4, rng);
  auto grads = [&](RoundMode mode) {
    m.params.zero_grad();
    Tape<double> tape;
    Scope<double> s(tape, m.params);
    const Var<double> z = tape.leaf(z0, "z");
    const FsqOutput<double> q = fsq_quantize(s, cfg, z, mode);
    const Var<double> loss = ad::sum(ad::mul(q.s, tape.constant(coef)));
    tape.backward(loss);
    std::vector<Tensor<double>> out{tape.grad_of(z), m.params.grad(std::string(kQuantizer) + ".down.w"),
                                    m.params.grad(std::string(kQuantizer) + ".down.b")};
    return out;
  };
  const auto ste = grads(RoundMode::straight_through);
  const auto ident = grads(RoundMode::identity);
  double max_diff = 0;
  for (std::size_t i = 0; i < ste.size(); ++i) {
    for (std::size_t j = 0; j < ste[i].size(); ++j) max_diff = std::max(max_diff, std::abs(ste[i][j] - ident[i][j]));
  }

  // Every code survives code -> levels -> pre-image -> quantize -> code, and its embedding is
  // the forward one. The down-projection is the identity for the pre-image.
  CodecConfig rc = cfg;
  rc.joint_dim = 2;
  rc.validate();
  CodecModel<double> rm;
  rm.config = rc;
  Rng rrng(9);
  Initializer<double> rinit{rm.params, rrng};
  init_quantizer(rinit, rc);
  Tensor<double>& w = rm.params.value(std::string(kQuantizer) + ".down.w");
  w.fill(0);
  w.at(0, 0) = w.at(1, 1) = 1;
  const std::size_t K = rc.codebook_size();
  std::vector<std::uint32_t> all(K);
  for (std::uint32_t i = 0; i < K; ++i) all[i] = i;
  const Tensor<double> levels = unpack_codes<double>(all, rc.fsq_d, rc.fsq_levels);
  const double half = rc.fsq_levels / 2;
  Tensor<double> pre = levels;
  for (auto& v : pre.storage()) v = std::atanh(0.999 * v / half);
  Tape<double> tape;
  Scope<double> s(tape, rm.params);
  const FsqOutput<double> q = fsq_quantize(s, rc, s.input(pre, "z"));
  const bool round_trip = q.codes == all && pack_codes(levels, rc.fsq_levels) == all &&
                          bit_identical(codes_to_embedding(s, rc, all).value(), q.s.value());

  const bool ok = u.used_fraction == 1.0 && max_diff <= 1e-15 && round_trip;
  return {ok, "utilization " + fmt("%.4f", u.used_fraction) + " of " + std::to_string(cfg.codebook_size()) +
                  " codes; STE vs round-free max |dgrad| " + fmt("%.1e", max_diff) + "; round trip of " +
                  std::to_string(K) + " codes " + (round_trip ? "exact" : "BROKEN")};
}

// ---------------------------------------------------------------------------------------------
// 6 and 8. Desk-scale training and the paralinguistic swap probe

struct TrainedRun {
  bool done = false;
  TrainState state;
  double seconds = 0;
  std::string error;
};

TrainedRun& trained() {
  static TrainedRun run = [] {
    TrainedRun r;
    try {
      const TrainConfig cfg = desk_config();
      CorpusOptions opts;
      opts.mel = cfg.codec.mel;
      opts.vocab_size = cfg.codec.phoneme_vocab;
      const auto corpus = gen_synthetic_corpus(1, 50, opts);
      const auto t0 = Clock::now();
      Trainer tr(init_train_state(cfg), prepare_examples(cfg.codec, corpus));
      tr.run(cfg.schedule.total_steps, [&](const StepRecord& rec) {
        if (rec.step % 1000 == 0) {
          progress("step " + std::to_string(rec.step) + " mel " + fmt("%.4f", rec.mel) + " acoustic " +
                   fmt("%.4f", rec.acoustic) + " (" + fmt("%.0f", seconds_since(t0)) + " s)");
        }
      });
      r.seconds = seconds_since(t0);
      r.state = std::move(tr.state());
      r.done = true;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    return r;
  }();
  return run;
}

double window_mean(const std::vector<StepRecord>& h, long first, long last, double StepRecord::*field) {
  double s = 0;
  long n = 0;
  for (const auto& r : h) {
    if (r.step >= first && r.step <= last) s += r.*field, ++n;
  }
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

Outcome training_suite() {
  TrainedRun& run = trained();
  if (!run.done) return {false, "training failed: " + run.error};
  const TrainConfig& cfg = run.state.config;
  const auto& h = run.state.history;
  const long s1 = cfg.schedule.stage1_end, end = cfg.schedule.total_steps;
  const double mel_first = window_mean(h, 1, 100, &StepRecord::mel);
  const double mel_last = window_mean(h, s1 - 99, s1, &StepRecord::mel);
  const double ac_first = window_mean(h, s1 + 1, s1 + 100, &StepRecord::acoustic);
  const double ac_last = window_mean(h, end - 99, end, &StepRecord::acoustic);
  const double r1 = mel_first / mel_last, r2 = ac_first / ac_last;

  CorpusOptions opts;
  opts.mel = cfg.codec.mel;
  opts.vocab_size = cfg.codec.phoneme_vocab;
  const auto corpus = gen_synthetic_corpus(1, 50, opts);
  std::vector<std::uint32_t> codes;
  for (const auto& u : corpus) {
    const auto c = encode_tokens(run.state.model, u.mel.values);
    codes.insert(codes.end(), c.begin(), c.end());
  }
  const Utilization ut = utilization(codes, cfg.codec.codebook_size());

  const bool ok = s1 <= 5000 && end - s1 <= 10000 && r1 >= 10.0 && r2 >= 3.0 && ut.used_fraction >= 0.9 &&
                  cfg.codec.fsq_d == 2 && cfg.codec.fsq_levels == 5 && run.seconds < 7200.0;
  std::ostringstream d;
  d << "stage 1 mel " << fmt("%.3f", mel_first) << " -> " << fmt("%.3f", mel_last) << " (" << fmt("%.1f", r1)
    << "x); stage 2 acoustic " << fmt("%.3f", ac_first) << " -> " << fmt("%.3f", ac_last) << " (" << fmt("%.1f", r2)
    << "x); utilization " << ut.distinct << "/" << cfg.codec.codebook_size() << " = " << fmt("%.2f", ut.used_fraction)
    << "; " << fmt("%.0f", run.seconds) << " s";
  return {ok, d.str()};
}

// Least-squares slope of the per-band mean log-mel difference against log band centre.
double tilt_slope(const Tensor<float>& a, const Tensor<float>& b, const MelConfig& mc) {
  const Tensor<double> fb = mel_filterbank(mc);
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (std::size_t m = 0; m < a.cols(); ++m) {
    std::size_t peak = 0;
    for (std::size_t k = 0; k < fb.cols(); ++k) {
      if (fb.at(m, k) > fb.at(m, peak)) peak = k;
    }
    const double hz = static_cast<double>(peak) * mc.sample_rate / mc.n_fft;
    if (hz <= 0) continue;
    double d = 0;
    for (std::size_t t = 0; t < a.rows(); ++t) d += static_cast<double>(b.at(t, m)) - a.at(t, m);
    d /= static_cast<double>(a.rows());
    const double x = std::log(hz / 1000.0);
    sx += x, sy += d, sxx += x * x, sxy += x * d, ++n;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

Outcome swap_probe() {
  TrainedRun& run = trained();
  if (!run.done) return {false, "training failed: " + run.error};
  const CodecModel<float>& m = run.state.model;
  const CodecConfig& cfg = m.config;
  CorpusOptions opts;
  opts.mel = cfg.mel;
  opts.vocab_size = cfg.phoneme_vocab;
  // Held out: a different generator seed from the training corpus.
  const auto held = gen_synthetic_corpus(1001, 10, opts);
  int moved = 0;
  std::ostringstream slopes;
  for (std::size_t i = 0; i < held.size(); ++i) {
    std::size_t donor = (i + 1) % held.size();
    while (held[donor].speaker_id == held[i].speaker_id) donor = (donor + 1) % held.size();
    const auto codes = encode_tokens(m, held[i].mel.values);
    const Tensor<float> own = decode_tokens(m, codes, paralinguistic_reference(m, held[i].mel.values));
    const Tensor<float> swap = decode_tokens(m, codes, paralinguistic_reference(m, held[donor].mel.values));
    const double slope = tilt_slope(own, swap, cfg.mel);
    const double want = speaker_tilt(held[donor].speaker_id, opts.num_speakers, opts.max_tilt) -
                        speaker_tilt(held[i].speaker_id, opts.num_speakers, opts.max_tilt);
    if (slope * want > 0) ++moved;
    slopes << (i ? "," : "") << fmt("%+.2f", slope);
  }
  return {moved >= 8, std::to_string(moved) + "/10 held-out utterances move toward the donor tilt (slopes " +
                          slopes.str() + ")"};
}

// ---------------------------------------------------------------------------------------------
// 7. Contrastive analytic values

Outcome contrastive_suite() {
  Rng rng(5);
  double worst = 0;
  bool symmetric = true;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t N = 2 + rng.below(15);
    Tape<double> tape;
    const Tensor<double> c = Tensor<double>::matrix(N, N, rng.uniform(-20.0, 20.0));
    worst = std::max(worst, std::abs(contrastive_loss(tape.constant(c)).value().item() -
                                     std::log(static_cast<double>(N))));
    const Tensor<double> r = random_matrix<double>(N, N, rng, 0.0, 5.0);
    Tensor<double> rt = r;
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) rt.at(i, j) = r.at(j, i);
    if (contrastive_loss(tape.constant(r)).value().item() != contrastive_loss(tape.constant(rt)).value().item()) {
      symmetric = false;
    }
  }
  return {worst <= 1e-6 && symmetric, "max |loss - ln N| " + fmt("%.1e", worst) + " over 100 constant matrices (N = 2..16); " +
                                          "transpose symmetry " + (symmetric ? "exact" : "BROKEN")};
}

// ---------------------------------------------------------------------------------------------
// 9. Formats

TrainState small_trained_state() {
  TrainConfig c;
  c.codec = secousti::testing::toy_config();
  c.schedule.stage1_end = 3;
  c.schedule.kl_start_para = c.schedule.kl_start_semantic = 4;
  c.schedule.kl_end_para = c.schedule.kl_end_semantic = 6;
  c.schedule.total_steps = 6;
  c.schedule.batch_size = 2;
  c.schedule.seed = 4;
  CorpusOptions opts;
  opts.mel = c.codec.mel;
  opts.vocab_size = c.codec.phoneme_vocab;
  opts.min_phonemes = 3;
  opts.max_phonemes = 4;
  Trainer t(init_train_state(c), prepare_examples(c.codec, gen_synthetic_corpus(2, 3, opts)));
  t.run(6);
  return std::move(t.state());
}

void put_le(std::string& s, std::size_t at, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) s[at + static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFF);
}

// Structurally invalid variants of a checkpoint.
std::string mutate_checkpoint(const std::string& good, int kind, Rng& rng) {
  std::string b = good;
  const std::size_t cfg_len = static_cast<unsigned char>(b[5]) | (static_cast<unsigned char>(b[6]) << 8) |
                              (static_cast<unsigned char>(b[7]) << 16) |
                              (static_cast<std::size_t>(static_cast<unsigned char>(b[8])) << 24);
  const std::size_t count_at = 9 + cfg_len;
  const std::size_t rec_at = count_at + 4;
  const std::size_t name_len = static_cast<unsigned char>(b[rec_at]) | (static_cast<unsigned char>(b[rec_at + 1]) << 8);
  const std::size_t tag_at = rec_at + 2 + name_len;
  switch (kind) {
    case 0: b.resize(rng.below(good.size())); break;
    case 1: b += std::string(1 + rng.below(16), static_cast<char>(rng.below(256))); break;
    case 2: b[rng.below(4)] ^= static_cast<char>(1 + rng.below(255)); break;
    case 3: b[4] = static_cast<char>(2 + rng.below(250)); break;
    case 4: put_le(b, 5, 0xFFFFFFF0u + rng.below(15), 4); break;
    case 5: {
      const std::size_t at = b.find("conv_channels", 9);
      b.replace(at, 13, "conv_chanxels");
      break;
    }
    case 6: put_le(b, count_at, cfg_len + 1 + rng.below(1000) + 100000, 4); break;
    case 7: b[tag_at] = static_cast<char>(3 + rng.below(200)); break;
    case 8: put_le(b, tag_at + 2, 0xFFFFFFFFFFull + rng.below(1000), 8); break;
    default: b[rec_at + 2 + rng.below(name_len)] = '\x01'; break;
  }
  return b;
}

// Structurally invalid variants of a token stream (header with G, 2-byte codes).
std::string mutate_tokens(const std::string& good, const SemanticTokens& t, int kind, Rng& rng) {
  std::string b = good;
  const std::size_t count_at = 18 + 4 * t.para_dim;
  switch (kind) {
    case 0: b.resize(rng.below(good.size())); break;
    case 1: b += std::string(1 + rng.below(16), static_cast<char>(rng.below(256))); break;
    case 2: b[rng.below(4)] ^= static_cast<char>(1 + rng.below(255)); break;
    case 3: b[4] = static_cast<char>(2 + rng.below(250)); break;
    case 4: b[5] = static_cast<char>(2 << rng.below(7)); break;
    case 5: put_le(b, 6 + 4 * rng.below(2), 0, 4); break;
    case 6: b[15] = static_cast<char>(2 * (1 + rng.below(100))); break;
    case 7: {
      const float bad = rng.below(2) ? std::numeric_limits<float>::quiet_NaN() : std::numeric_limits<float>::infinity();
      std::memcpy(&b[18 + 4 * rng.below(t.para_dim)], &bad, 4);
      break;
    }
    case 8: put_le(b, count_at, t.codes.size() + 1 + rng.below(100), 8); break;
    default: put_le(b, count_at + 8 + 2 * rng.below(t.codes.size()), t.codebook_size() + rng.below(60000), 2); break;
  }
  return b;
}

Outcome format_suite() {
  const fs::path dir = fs::temp_directory_path() / "secousti_acceptance_formats";
  fs::remove_all(dir);
  fs::create_directories(dir);

  const TrainState st = small_trained_state();
  const fs::path ck = dir / "model.ckpt";
  save_checkpoint(st, ck.string());
  const TrainState back = load_checkpoint(ck.string());
  const std::string bytes = serialize_checkpoint(st);
  const fs::path ck2 = dir / "again.ckpt";
  save_checkpoint(back, ck2.string());
  std::ifstream f1(ck, std::ios::binary), f2(ck2, std::ios::binary);
  const std::string disk1((std::istreambuf_iterator<char>(f1)), {}), disk2((std::istreambuf_iterator<char>(f2)), {});
  bool ckpt_ok = disk1 == bytes && disk2 == bytes && serialize_checkpoint(back) == bytes;

  Rng rng(12);
  const CodecConfig& cc = st.config.codec;
  std::vector<std::uint32_t> codes(40);
  for (auto& c : codes) c = static_cast<std::uint32_t>(rng.below(cc.codebook_size()));
  std::vector<float> g(static_cast<std::size_t>(cc.para_dim));
  for (auto& v : g) v = static_cast<float>(rng.normal());
  const SemanticTokens with_g = make_tokens(cc, codes, g);
  const SemanticTokens without_g = make_tokens(cc, codes);
  CodecConfig wide = cc;
  wide.fsq_d = 8;
  wide.fsq_levels = 5;
  std::vector<std::uint32_t> wide_codes(20);
  for (auto& c : wide_codes) c = static_cast<std::uint32_t>(rng.below(wide.codebook_size()));
  bool sct_ok = true;
  for (const SemanticTokens& t : {with_g, without_g, make_tokens(wide, wide_codes)}) {
    const fs::path p = dir / "t.sct";
    write_tokens(p.string(), t);
    const SemanticTokens r = read_tokens(p.string());
    sct_ok = sct_ok && r == t && serialize_tokens(r) == serialize_tokens(t);
  }

  int rejected = 0, accepted = 0;
  const std::string tok_bytes = serialize_tokens(with_g);
  for (int i = 0; i < 100; ++i) {
    const bool ckpt = i < 50;
    const fs::path p = dir / ("fuzz_" + std::to_string(i) + (ckpt ? ".ckpt" : ".sct"));
    {
      std::ofstream out(p, std::ios::binary);
      const std::string b = ckpt ? mutate_checkpoint(bytes, i % 10, rng) : mutate_tokens(tok_bytes, with_g, i % 10, rng);
      out.write(b.data(), static_cast<std::streamsize>(b.size()));
    }
    try {
      if (ckpt) {
        (void)load_checkpoint(p.string());
      } else {
        (void)read_tokens(p.string());
      }
      ++accepted;
      progress("accepted malformed file " + p.string());
    } catch (const std::exception&) {
      ++rejected;
    }
  }
  fs::remove_all(dir);
  return {ckpt_ok && sct_ok && rejected == 100,
          std::string("checkpoint round trip ") + (ckpt_ok ? "bit-exact" : "BROKEN") + "; .sct round trips " +
              (sct_ok ? "bit-exact" : "BROKEN") + "; fuzzed files rejected " + std::to_string(rejected) + "/100"};
}

// ---------------------------------------------------------------------------------------------
// 10. KL hinge

Outcome kl_suite() {
  Rng rng(10);
  double worst = 0;
  int below = 0, nonzero_grad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t rows = 1 + rng.below(3), cols = 1 + rng.below(6);
    Tensor<double> mu = Tensor<double>::matrix(rows, cols), sg = mu;
    for (auto& v : mu.storage()) v = 0.7 * rng.normal();
    for (auto& v : sg.storage()) v = std::exp(rng.uniform(-0.8, 0.8));
    const double delta = rng.uniform(0.0, 3.0);
    long double kl = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      long double row = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        const long double m = mu.at(r, c), s = sg.at(r, c);
        row += 0.5L * (m * m + s * s - 1.0L - 2.0L * std::log(s));
      }
      kl += row;
    }
    kl /= static_cast<long double>(rows);
    const double expected = static_cast<double>(std::max(0.0L, kl - delta));

    Tape<double> tape;
    const Var<double> vm = tape.leaf(mu, "mu"), vs = tape.leaf(sg, "sigma");
    const Var<double> loss = kl_margin_loss(vm, vs, delta);
    worst = std::max(worst, std::abs(loss.value().item() - expected));
    if (kl < delta) {
      ++below;
      tape.backward(loss);
      for (const Var<double>& v : {vm, vs}) {
        for (double gv : tape.grad_of(v).storage()) {
          if (gv != 0.0) ++nonzero_grad;
        }
      }
    }
  }
  return {worst <= 1e-12 && nonzero_grad == 0 && below > 0,
          "max |loss - closed form| " + fmt("%.1e", worst) + " over 1000 cases; " + std::to_string(below) +
              " inside the margin with " + std::to_string(nonzero_grad) + " nonzero gradient entries"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, gradient_suite}, {2, causality_suite},   {3, streaming_suite}, {4, schedule_suite},
      {5, quantizer_suite}, {6, training_suite},   {7, contrastive_suite}, {8, swap_probe},
      {9, format_suite},    {10, kl_suite},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& [id, fn] : criteria) {
    if (!wanted.empty() && !wanted.count(id)) continue;
    std::cerr << "criterion " << id << " ..." << std::endl;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << o.detail << std::endl;
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
