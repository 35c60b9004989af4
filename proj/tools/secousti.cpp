#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "secousti/audio.hpp"
#include "secousti/codec.hpp"
#include "secousti/frontend.hpp"
#include "secousti/metrics.hpp"
#include "secousti/streaming.hpp"
#include "secousti/trainer.hpp"

namespace fs = std::filesystem;
using namespace secousti;

namespace {

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("SECOUSTI_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0') throw std::invalid_argument(std::string("SECOUSTI_SEED is not an integer: ") + s);
  return v;
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
  if (flag) return *flag;
  if (auto e = env_seed()) return *e;
  return fallback;
}

MelSpectrogram mel_of_wav(const std::string& path, const MelConfig& cfg) {
  const Waveform w = read_wav(path);
  if (w.sample_rate != cfg.sample_rate) {
    throw std::runtime_error(path + ": sample rate " + std::to_string(w.sample_rate) + " Hz, model expects " +
                             std::to_string(cfg.sample_rate) + " Hz");
  }
  return MelExtractor(cfg).compute(w);
}

// Raw mel dump: "SMEL", u32 frames, u32 bands, f32 LE frame-major.
void write_mel(const std::string& path, const Tensor<float>& mel) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  auto u32 = [&f](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) f.put(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  f.write("SMEL", 4);
  u32(static_cast<std::uint32_t>(mel.rows()));
  u32(static_cast<std::uint32_t>(mel.cols()));
  for (float v : mel.storage()) {
    std::uint32_t b;
    std::memcpy(&b, &v, 4);
    u32(b);
  }
  if (!f) throw std::runtime_error("failed writing " + path);
}

void log_config(const TrainConfig& cfg) {
  std::cerr << "# resolved config\n" << to_text(cfg) << "# end config\n";
}

std::string ext_of(const std::string& p) {
  std::string e = fs::path(p).extension().string();
  for (auto& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return e;
}

// ---- subcommands ----

struct TrainArgs {
  std::string config, data, out, resume;
  std::optional<std::uint64_t> seed;
  std::optional<long> steps;
};

int cmd_train(const TrainArgs& a) {
  TrainState st;
  if (!a.resume.empty()) {
    st = load_checkpoint(a.resume);
    if (!a.config.empty()) {
      // Only the schedule length may change on resume; the architecture is fixed by the checkpoint.
      const TrainConfig c = load_config(a.config);
      st.config.schedule.total_steps = c.schedule.total_steps;
    }
    if (a.seed && *a.seed != st.config.schedule.seed) {
      throw std::invalid_argument("--seed differs from the resumed checkpoint's seed");
    }
  } else {
    if (a.config.empty()) throw std::invalid_argument("train needs --config (or --resume)");
    TrainConfig cfg = load_config(a.config);
    cfg.schedule.seed = resolve_seed(a.seed, cfg.schedule.seed);
    st = init_train_state(cfg);
  }
  if (a.steps) st.config.schedule.total_steps = *a.steps;
  log_config(st.config);
  const auto corpus = load_corpus(a.data, st.config.codec.mel);
  std::cerr << "loaded " << corpus.size() << " utterances from " << a.data << "\n";
  auto examples = prepare_examples(st.config.codec, corpus);
  const long total = st.config.schedule.total_steps;
  const long log_every = st.config.schedule.log_every;
  const long ckpt_every = st.config.schedule.checkpoint_every;
  Trainer tr(std::move(st), std::move(examples));
  const auto t0 = std::chrono::steady_clock::now();
  tr.run(total, [&](const StepRecord& r) {
    if (log_every > 0 && (r.step % log_every == 0 || r.step == total)) {
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "step %ld stage %d total %.6g mel %.6g acoustic %.6g contrastive %.6g kl_para %.6g kl_sem %.6g (%.1fs)\n",
                   r.step, r.stage, r.total, r.mel, r.acoustic, r.contrastive, r.kl_para, r.kl_semantic, sec);
    }
    if (ckpt_every > 0 && r.step % ckpt_every == 0) save_checkpoint(tr.state(), a.out);
  });
  save_checkpoint(tr.state(), a.out);
  std::cout << "wrote " << a.out << " at step " << tr.state().step << "\n";
  return 0;
}

int cmd_encode(const std::string& ckpt, const std::string& in, const std::string& out, const std::string& para) {
  const TrainState st = load_checkpoint(ckpt);
  const CodecConfig& cfg = st.model.config;
  const MelSpectrogram mel = mel_of_wav(in, cfg.mel);
  const MelSpectrogram ref = para.empty() ? mel : mel_of_wav(para, cfg.mel);
  auto codes = encode_tokens(st.model, mel.values);
  const Tensor<float> g = paralinguistic_reference(st.model, ref.values);
  write_tokens(out, make_tokens(cfg, std::move(codes), g.storage()));
  const SemanticTokens t = read_tokens(out);
  std::cout << "frames " << mel.frames() << " tokens " << t.codes.size() << " bitrate_bps " << t.bitrate_bps()
            << "\n";
  return 0;
}

int cmd_decode(const std::string& ckpt, const std::string& in, const std::string& out, const std::string& para,
               int phase_iters, std::uint64_t seed) {
  const TrainState st = load_checkpoint(ckpt);
  const CodecConfig& cfg = st.model.config;
  const SemanticTokens t = read_tokens(in);
  const SemanticTokens expect = make_tokens(cfg, {});
  if (t.fsq_d != expect.fsq_d || t.fsq_levels != expect.fsq_levels || t.rate_num != expect.rate_num ||
      t.rate_den != expect.rate_den || t.para_dim != expect.para_dim) {
    throw std::runtime_error(in + ": token header does not match the checkpoint's codec configuration");
  }
  Tensor<float> g;
  if (!para.empty()) {
    g = paralinguistic_reference(st.model, mel_of_wav(para, cfg.mel).values);
  } else if (t.g) {
    g = Tensor<float>(Shape{1, t.g->size()}, *t.g);
  } else {
    throw std::runtime_error(in + ": stream carries no paralinguistic vector; pass --paralinguistic");
  }
  const Tensor<float> mel = decode_tokens(st.model, t.codes, g);
  const std::string e = ext_of(out);
  if (e == ".mel") {
    write_mel(out, mel);
  } else if (e == ".wav") {
    Waveform w;
    w.sample_rate = cfg.mel.sample_rate;
    w.samples = griffin_lim(mel, cfg.mel, phase_iters, seed);
    write_wav(out, w);
  } else {
    throw std::invalid_argument("decode output must end in .wav or .mel: " + out);
  }
  std::cout << "tokens " << t.codes.size() << " frames " << mel.rows() << "\n";
  return 0;
}

int cmd_eval(const std::string& ref, const std::string& deg, bool json) {
  const Waveform r = read_wav(ref);
  const Waveform d = read_wav(deg);
  if (r.sample_rate != d.sample_rate) throw std::runtime_error("reference and degraded sample rates differ");
  MelConfig mc;
  mc.sample_rate = r.sample_rate;
  mc.fmax = std::min(mc.fmax, r.sample_rate / 2.0);
  const MetricReport rep = evaluate_audio(r.samples, d.samples, mc);
  if (json) {
    nlohmann::json j = {{"lsd", rep.lsd},   {"mcd", rep.mcd},         {"msep", rep.msep},
                        {"vuv_mismatch", rep.vuv_mismatch}, {"mel_mse", rep.mel_mse},
                        {"no_common_voiced", rep.no_common_voiced}};
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << format_report(rep);
  }
  return 0;
}

int cmd_codebook_stats(const std::string& ckpt, const std::string& data) {
  const TrainState st = load_checkpoint(ckpt);
  const CodecConfig& cfg = st.model.config;
  const auto corpus = load_corpus(data, cfg.mel);
  std::vector<std::uint32_t> all;
  for (const auto& u : corpus) {
    const auto c = encode_tokens(st.model, u.mel.values);
    all.insert(all.end(), c.begin(), c.end());
  }
  const Utilization ut = utilization(all, cfg.codebook_size());
  std::cout << "utterances\t" << corpus.size() << "\n";
  std::cout << "tokens\t" << ut.total << "\n";
  std::cout << "codebook_size\t" << cfg.codebook_size() << "\n";
  std::cout << "distinct\t" << ut.distinct << "\n";
  std::cout << "used_fraction\t" << ut.used_fraction << "\n";
  std::cout << "max_frequency\t" << ut.max_frequency << "\n";
  // Histogram of per-code frequency, sorted descending, in the style of a rank plot.
  std::vector<double> f = ut.frequency;
  std::sort(f.begin(), f.end(), std::greater<>());
  const double peak = f.empty() ? 0.0 : f.front();
  for (std::size_t i = 0; i < f.size() && f[i] > 0; ++i) {
    const int bar = peak > 0 ? static_cast<int>(std::lround(40.0 * f[i] / peak)) : 0;
    std::printf("rank %4zu\t%.5f\t%s\n", i + 1, f[i], std::string(static_cast<std::size_t>(bar), '#').c_str());
  }
  return 0;
}

int cmd_gen_data(std::uint64_t seed, const std::string& out, int count, int speakers) {
  CorpusOptions opts;
  opts.num_speakers = speakers;
  const auto corpus = gen_synthetic_corpus(seed, count, opts);
  write_corpus(out, corpus);
  std::cout << "wrote " << corpus.size() << " utterances to " << out << "\n";
  return 0;
}

int cmd_info(const std::string& ckpt) {
  const TrainState st = load_checkpoint(ckpt);
  const CodecConfig& cfg = st.model.config;
  std::cout << to_text(st.config);
  const char* modules[] = {kSpeechEncoder, kAcousticProjection, kSpeechDecoder, kSemanticProjection,
                           kQuantizer, kSemanticConnector, kPhonemeEncoder, kParalinguisticEncoder,
                           kContrastive};
  for (const char* m : modules) {
    std::cout << "params." << m << "\t" << st.model.params.parameter_count(std::string(m) + ".") << "\n";
  }
  std::cout << "params.total\t" << st.model.params.parameter_count() << "\n";
  std::cout << "step\t" << st.step << "\n";
  std::cout << "codebook_size\t" << cfg.codebook_size() << "\n";
  std::cout << "token_rate_hz\t" << cfg.token_rate_hz() << "\n";
  std::cout << "bits_per_token\t" << cfg.bits_per_token() << "\n";
  std::cout << "bitrate_bps\t" << cfg.bitrate_bps() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"secousti: semantic speech codec toolkit"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Two-stage training on a corpus directory");
  train->add_option("--config", ta.config, "Config file (key = value)")->check(CLI::ExistingFile);
  train->add_option("--data", ta.data, "Corpus directory with manifest.tsv")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", ta.out, "Output checkpoint")->required();
  train->add_option("--resume", ta.resume, "Resume from checkpoint")->check(CLI::ExistingFile);
  train->add_option("--seed", ta.seed, "Seed (default: SECOUSTI_SEED or the config's seed)");
  train->add_option("--steps", ta.steps, "Override total_steps");

  std::string ckpt, in, out, para, ref, deg, data;
  std::optional<std::uint64_t> seed;
  int phase_iters = 64, count = 50, speakers = 2;
  bool json = false;

  auto* encode = app.add_subcommand("encode", "WAV to semantic tokens (.sct)");
  encode->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  encode->add_option("--in", in)->required()->check(CLI::ExistingFile);
  encode->add_option("--out", out)->required();
  encode->add_option("--paralinguistic", para, "Reference WAV for G (default: the input)")->check(CLI::ExistingFile);

  auto* decode = app.add_subcommand("decode", "Semantic tokens to mel (.mel) or audition WAV");
  decode->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  decode->add_option("--in", in)->required()->check(CLI::ExistingFile);
  decode->add_option("--out", out)->required();
  decode->add_option("--paralinguistic", para, "Override G with this reference WAV")->check(CLI::ExistingFile);
  decode->add_option("--phase-iters", phase_iters, "Phase reconstruction iterations for WAV output")
      ->check(CLI::Range(1, 10000));
  decode->add_option("--seed", seed, "Seed for initial phases");

  auto* eval = app.add_subcommand("eval", "Objective metrics between two WAVs");
  eval->add_option("--ref", ref)->required()->check(CLI::ExistingFile);
  eval->add_option("--deg", deg)->required()->check(CLI::ExistingFile);
  eval->add_flag("--json", json, "Emit JSON instead of key<TAB>value lines");

  auto* stats = app.add_subcommand("codebook-stats", "Token utilization over a corpus");
  stats->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  stats->add_option("--data", data)->required()->check(CLI::ExistingDirectory);

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic two-speaker corpus");
  gen->add_option("--seed", seed, "Seed (default: SECOUSTI_SEED or 1)");
  gen->add_option("--out", out)->required();
  gen->add_option("--count", count, "Number of utterances")->check(CLI::PositiveNumber);
  gen->add_option("--speakers", speakers, "Number of speakers")->check(CLI::PositiveNumber);

  auto* info = app.add_subcommand("info", "Config, parameter counts and bitrate of a checkpoint");
  info->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(ta);
    if (*encode) return cmd_encode(ckpt, in, out, para);
    if (*decode) return cmd_decode(ckpt, in, out, para, phase_iters, resolve_seed(seed, 0));
    if (*eval) return cmd_eval(ref, deg, json);
    if (*stats) return cmd_codebook_stats(ckpt, data);
    if (*gen) return cmd_gen_data(resolve_seed(seed, 1), out, count, speakers);
    if (*info) return cmd_info(ckpt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
