#pragma once

#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "secousti/audio.hpp"
#include "secousti/codec.hpp"

namespace secousti {

// Token bitstream (.sct).
struct SemanticTokens {
  std::uint8_t version = 1;
  std::uint32_t rate_num = 22050;
  std::uint32_t rate_den = 1024;
  std::uint8_t fsq_d = 8;
  std::uint8_t fsq_levels = 5;
  std::uint16_t para_dim = 0;
  std::optional<std::vector<float>> g;
  std::vector<std::uint32_t> codes;

  std::uint64_t codebook_size() const;
  double frame_rate() const { return static_cast<double>(rate_num) / rate_den; }
  double bits_per_token() const;
  double bitrate_bps() const { return frame_rate() * bits_per_token(); }
  friend bool operator==(const SemanticTokens&, const SemanticTokens&) = default;
};

SemanticTokens make_tokens(const CodecConfig& cfg, std::vector<std::uint32_t> codes,
                           std::optional<std::vector<float>> g = std::nullopt);
std::string serialize_tokens(const SemanticTokens& tokens);
SemanticTokens deserialize_tokens(const std::string& bytes);
void write_tokens(const std::string& path, const SemanticTokens& tokens);
SemanticTokens read_tokens(const std::string& path);

namespace detail {

// Causal conv with a bounded input history; emits one frame per `stride` inputs.
class StreamConv {
 public:
  StreamConv(const ParameterStore<float>& p, const std::string& name, std::size_t stride, std::size_t dilation);
  // Returns true and fills `out` when an output frame is due.
  bool push(std::span<const float> x, std::vector<float>& out);
  std::size_t out_channels() const { return out_; }

 private:
  const Tensor<float>& w_;
  const Tensor<float>& b_;
  std::size_t K_, in_, out_, stride_, dilation_;
  std::deque<std::vector<float>> hist_;
  std::size_t consumed_ = 0;
};

// Causal transposed conv; every input frame yields `stride` output frames.
class StreamConvTranspose {
 public:
  StreamConvTranspose(const ParameterStore<float>& p, const std::string& name, std::size_t stride);
  void push(std::span<const float> x, std::vector<std::vector<float>>& out);

 private:
  const Tensor<float>& w_;
  const Tensor<float>& b_;
  std::size_t K_, in_, out_, stride_;
  std::deque<std::vector<float>> hist_;
  std::size_t consumed_ = 0;
};

class StreamResidual {
 public:
  StreamResidual(const ParameterStore<float>& p, const std::string& name, std::size_t dilation);
  std::vector<float> push(const std::vector<float>& x);

 private:
  StreamConv conv1_, conv2_;
};

// Transformer with per-layer key/value rings of `window` frames.
class StreamTransformer {
 public:
  StreamTransformer(const ParameterStore<float>& p, const std::string& name, const TransformerSpec& spec);
  std::vector<float> push(std::vector<float> x);

 private:
  struct Layer {
    std::string prefix;
    std::deque<std::vector<float>> keys, values;
  };
  const ParameterStore<float>& p_;
  std::string name_;
  TransformerSpec spec_;
  std::vector<Layer> layers_;
  std::size_t pos_ = 0;
};

}  // namespace detail

class EncodeStream {
 public:
  explicit EncodeStream(const CodecModel<float>& model);
  // mel_chunk [frames x n_mels]; returns the tokens completed by this chunk.
  std::vector<std::uint32_t> push(const Tensor<float>& mel_chunk);
  // Pads a trailing partial semantic frame with silence, emits it, and closes the stream.
  std::vector<std::uint32_t> finish();
  std::size_t frames_consumed() const { return consumed_; }
  std::size_t tokens_emitted() const { return emitted_; }
  bool closed() const { return closed_; }

 private:
  std::optional<std::uint32_t> push_frame(std::span<const float> mel);

  const CodecModel<float>& model_;
  detail::StreamConv in_;
  std::vector<std::vector<detail::StreamResidual>> res_;
  std::vector<detail::StreamConv> down_;
  detail::StreamConv out_;
  std::optional<detail::StreamConv> sem_down_;
  detail::StreamTransformer tf_;
  std::size_t consumed_ = 0, emitted_ = 0;
  bool closed_ = false;
};

class DecodeStream {
 public:
  DecodeStream(const CodecModel<float>& model, const Tensor<float>& g);
  // Returns the mel frames [n x n_mels] produced by these tokens.
  Tensor<float> push(std::span<const std::uint32_t> codes);
  std::size_t tokens_consumed() const { return consumed_; }
  std::size_t frames_emitted() const { return emitted_; }

 private:
  void decode_acoustic_frame(const std::vector<float>& a, std::vector<std::vector<float>>& mel);

  const CodecModel<float>& model_;
  std::vector<float> g_proj_;
  detail::StreamTransformer tf_;
  detail::StreamConv in_;
  std::vector<detail::StreamConvTranspose> up_;
  std::vector<std::vector<detail::StreamResidual>> res_;
  detail::StreamConv out_;
  std::size_t consumed_ = 0, emitted_ = 0;
};

std::unique_ptr<EncodeStream> open_encode_stream(const CodecModel<float>& model);
// g must be present and hold D_g values.
std::unique_ptr<DecodeStream> open_decode_stream(const CodecModel<float>& model, const Tensor<float>* g);

struct LatencyReport {
  double audio_seconds = 0;
  double algorithmic_latency_ms = 0;
  double first_token_ms = 0;
  double initial_latency_ms = 0;
  double encode_rtf = 0;
  double decode_rtf = 0;
};

// Streams `mel` frame by frame through encode and decode and reports wall-clock figures.
LatencyReport measure(const CodecModel<float>& model, const Tensor<float>& mel);

// Audition-only waveform synthesis from log-mel via iterative phase reconstruction.
std::vector<float> griffin_lim(const Tensor<float>& log_mel, const MelConfig& cfg, int iterations,
                               std::uint64_t seed = 0);

}  // namespace secousti
