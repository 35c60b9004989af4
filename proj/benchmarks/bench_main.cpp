#include <benchmark/benchmark.h>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "secousti/frontend.hpp"
#include "secousti/streaming.hpp"
#include "secousti/trainer.hpp"

using namespace secousti;

namespace {

TrainConfig desk() { return load_config(std::string(SECOUSTI_SOURCE_DIR) + "/configs/desk.conf"); }

Tensor<float> noise_mel(std::size_t frames, std::size_t bands, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> m = Tensor<float>::matrix(frames, bands);
  for (auto& v : m.storage()) v = static_cast<float>(-5.0 + 2.0 * rng.normal());
  return m;
}

void BM_MelExtraction(benchmark::State& state) {
  const MelConfig cfg;
  MelExtractor ext(cfg);
  std::vector<float> x(static_cast<std::size_t>(state.range(0)) * cfg.sample_rate);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.3f * static_cast<float>(std::sin(2 * std::numbers::pi * 220.0 * i / cfg.sample_rate));
  for (auto _ : state) benchmark::DoNotOptimize(ext.compute(x));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(x.size()));
}
BENCHMARK(BM_MelExtraction)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

// One mel frame in, a token every semantic_rate frames.
void BM_StreamEncodeFrame(benchmark::State& state) {
  const CodecModel<float> m = init_codec(desk().codec, 1);
  const Tensor<float> mel = noise_mel(4096, static_cast<std::size_t>(m.config.mel.n_mels), 2);
  auto enc = open_encode_stream(m);
  std::size_t t = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(enc->push(slice_rows(mel, t % mel.rows(), t % mel.rows() + 1)));
    ++t;
  }
}
BENCHMARK(BM_StreamEncodeFrame)->Unit(benchmark::kMicrosecond);

void BM_StreamDecodeToken(benchmark::State& state) {
  const CodecModel<float> m = init_codec(desk().codec, 1);
  Tensor<float> g = Tensor<float>::matrix(1, static_cast<std::size_t>(m.config.para_dim));
  auto dec = open_decode_stream(m, &g);
  std::uint32_t code = 0;
  const auto size = static_cast<std::uint32_t>(m.config.codebook_size());
  for (auto _ : state) {
    const std::uint32_t c = code++ % size;
    benchmark::DoNotOptimize(dec->push(std::span<const std::uint32_t>(&c, 1)));
  }
}
BENCHMARK(BM_StreamDecodeToken)->Unit(benchmark::kMicrosecond);

void BM_TrainStep(benchmark::State& state) {
  TrainConfig cfg = desk();
  const bool stage2 = state.range(0) == 2;
  CorpusOptions opts;
  opts.mel = cfg.codec.mel;
  opts.vocab_size = cfg.codec.phoneme_vocab;
  Trainer tr(init_train_state(cfg), prepare_examples(cfg.codec, gen_synthetic_corpus(1, 8, opts)));
  if (stage2) {
    cfg.schedule.stage1_end = 1;
    tr.state().config.schedule.stage1_end = 1;
    tr.step();
  }
  for (auto _ : state) benchmark::DoNotOptimize(tr.step());
}
BENCHMARK(BM_TrainStep)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
