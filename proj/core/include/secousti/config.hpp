#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace secousti {

struct MelConfig {
  int sample_rate = 22050;
  int n_fft = 1024;
  int win_length = 1024;
  int hop_length = 256;
  int n_mels = 80;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = 1e-5;
};

// Architecture hyperparameters. Defaults are the full-size model; desk-scale runs override
// the widths from a config file.
struct CodecConfig {
  MelConfig mel;

  // Encoder strides; their product is the acoustic downsampling factor r_ac.
  std::vector<int> encoder_strides{2, 2};
  // Semantic downsampling; a multiple of r_ac.
  int semantic_rate = 4;

  // Fixed affine map applied to log-mel at the model boundary: encoders see
  // (mel - mel_offset) / mel_scale and the decoder output is mapped back.
  double mel_offset = 0.0;
  double mel_scale = 1.0;

  int conv_channels = 80;
  int conv_kernel = 7;
  int dilation_base = 2;
  int residual_layers = 1;
  // Residual-unit bottleneck: hidden channels = conv_channels / residual_compress.
  int residual_compress = 2;

  int model_dim = 512;
  int heads = 8;
  int layers = 8;
  int ffn_dim = 2048;
  int attn_window = 250;
  double rope_base = 10000.0;

  int acous_dim = 256;
  int joint_dim = 256;
  int fsq_d = 8;
  int fsq_levels = 5;
  double log_sigma_clamp = 7.0;

  int phoneme_vocab = 32;
  int phoneme_layers = 4;

  int para_dim = 256;  // D_g
  int para_frames = 259;
  int para_channels = 128;
  int para_conv_layers = 6;
  int para_se_blocks = 1;
  int para_se_reduction = 4;

  double kl_margin_para = 1.0;
  double kl_margin_semantic = 1.0;

  double tau_init = 1.0 / 0.07;
  bool learnable_tau = true;
  bool normalize_embeddings = true;

  int acoustic_rate() const;  // r_ac
  // Frames the input must be padded to a multiple of.
  int frame_multiple() const { return semantic_rate; }
  std::uint64_t codebook_size() const;
  double bits_per_token() const;
  double token_rate_hz() const;
  double bitrate_bps() const { return token_rate_hz() * bits_per_token(); }
  // Throws std::invalid_argument naming the first violated invariant.
  void validate() const;
};

struct ScheduleConfig {
  long stage1_end = 10000;
  long kl_start_para = 20000;
  long kl_end_para = 30000;
  double kl_upper_para = 1e-5;
  long kl_start_semantic = 20000;
  long kl_end_semantic = 30000;
  double kl_upper_semantic = 1e-5;
  double alpha = 1.0;
  double beta = 1e-5;

  double learning_rate = 2e-4;
  // Cosine decay within each stage from learning_rate to learning_rate * lr_final_ratio;
  // 1 keeps the rate constant.
  double lr_final_ratio = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  int batch_size = 4;
  long total_steps = 30000;
  long log_every = 100;
  long checkpoint_every = 0;
  std::uint64_t seed = 1;

  void validate() const;
};

struct TrainConfig {
  CodecConfig codec;
  ScheduleConfig schedule;
};

// Line-oriented `key = value` text; '#' starts a comment. Unknown keys are an error.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::string& path);
// Canonical text form listing every key; parse_config(to_text(c)) reproduces c.
std::string to_text(const TrainConfig& cfg);
std::vector<std::string> config_keys();

}  // namespace secousti
