#include "secousti/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace secousti {

int CodecConfig::acoustic_rate() const {
  int r = 1;
  for (int s : encoder_strides) r *= s;
  return r;
}

std::uint64_t CodecConfig::codebook_size() const {
  std::uint64_t n = 1;
  for (int i = 0; i < fsq_d; ++i) n *= static_cast<std::uint64_t>(fsq_levels);
  return n;
}

double CodecConfig::bits_per_token() const {
  return static_cast<double>(fsq_d) * std::log2(static_cast<double>(fsq_levels));
}

double CodecConfig::token_rate_hz() const {
  return static_cast<double>(mel.sample_rate) / (static_cast<double>(mel.hop_length) * semantic_rate);
}

void CodecConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("invalid codec config: " + what);
  };
  require(mel.sample_rate > 0 && mel.hop_length > 0 && mel.n_fft > 0 && mel.n_mels > 0,
          "mel extents must be positive");
  require(mel.win_length > 0 && mel.win_length <= mel.n_fft, "win_length must lie in (0, n_fft]");
  require(mel.log_floor > 0, "log_floor must be positive");
  require(!encoder_strides.empty(), "encoder_strides must be non-empty");
  for (int s : encoder_strides) require(s >= 1, "encoder strides must be >= 1");
  require(semantic_rate >= 1, "semantic_rate must be positive");
  require(semantic_rate % acoustic_rate() == 0,
          "semantic_rate must be a multiple of the acoustic rate (product of encoder_strides)");
  require(mel_scale > 0 && std::isfinite(mel_offset), "mel_scale must be positive and mel_offset finite");
  require(conv_channels > 0 && conv_kernel > 0 && dilation_base > 0, "conv extents must be positive");
  require(residual_layers >= 0, "residual_layers must be >= 0");
  require(residual_compress > 0 && conv_channels % residual_compress == 0,
          "conv_channels must be divisible by residual_compress");
  require(model_dim > 0 && heads > 0 && layers >= 0 && ffn_dim > 0, "transformer extents must be positive");
  require(model_dim % heads == 0 && (model_dim / heads) % 2 == 0,
          "model_dim must split into heads of even width");
  require(attn_window > 0, "attn_window must be positive");
  require(rope_base > 1.0, "rope_base must exceed 1");
  require(acous_dim > 0 && joint_dim > 0, "embedding dims must be positive");
  require(fsq_d > 0, "fsq_d must be positive");
  require(fsq_levels >= 3 && fsq_levels % 2 == 1, "fsq_levels must be odd and >= 3");
  require(std::log2(static_cast<double>(fsq_levels)) * fsq_d < 63.0, "codebook too large");
  require(log_sigma_clamp > 0, "log_sigma_clamp must be positive");
  require(phoneme_vocab > 0 && phoneme_layers >= 0, "phoneme encoder extents invalid");
  require(para_dim > 0 && para_frames > 0 && para_channels > 0, "paralinguistic extents must be positive");
  require(para_conv_layers >= 1 && para_se_blocks >= 0 && para_se_reduction > 0,
          "paralinguistic layer counts invalid");
  require(para_channels / para_se_reduction >= 1, "para_se_reduction too large");
  require(kl_margin_para >= 0 && kl_margin_semantic >= 0, "KL margins must be non-negative");
  require(tau_init > 0, "tau_init must be positive");
}

void ScheduleConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("invalid schedule config: " + what);
  };
  require(stage1_end >= 0, "stage1_end must be >= 0");
  require(kl_start_para < kl_end_para, "kl_start_para must be < kl_end_para");
  require(kl_start_semantic < kl_end_semantic, "kl_start_semantic must be < kl_end_semantic");
  require(kl_upper_para >= 0 && kl_upper_semantic >= 0 && alpha >= 0 && beta >= 0,
          "loss weights must be non-negative");
  require(learning_rate > 0, "learning_rate must be positive");
  require(lr_final_ratio > 0 && lr_final_ratio <= 1, "lr_final_ratio must lie in (0, 1]");
  require(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1, "adam betas must lie in [0,1)");
  require(adam_eps > 0, "adam_eps must be positive");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(total_steps >= 0 && log_every >= 0 && checkpoint_every >= 0, "step counts must be >= 0");
}

namespace {

struct Field {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <class T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if constexpr (std::is_floating_point_v<T>) {
    char* end = nullptr;
    v = static_cast<T>(std::strtod(first, &end));
    if (end != last || s.empty()) throw std::invalid_argument("config key '" + key + "': not a number: " + s);
  } else {
    auto [p, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || p != last) {
      throw std::invalid_argument("config key '" + key + "': not an integer: " + s);
    }
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("config key '" + key + "': not a boolean: " + s);
}

template <class T, class M>
Field number_field(const std::string& key, M member) {
  return {[key, member](TrainConfig& c, const std::string& v) { member(c) = parse_number<T>(key, v); },
          [member](const TrainConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return fmt_double(member(const_cast<TrainConfig&>(c)));
            } else {
              return std::to_string(member(const_cast<TrainConfig&>(c)));
            }
          }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
#define SECOUSTI_NUM(key, type, expr) \
  f[key] = number_field<type>(key, [](TrainConfig& c) -> type& { return expr; })
    SECOUSTI_NUM("sample_rate", int, c.codec.mel.sample_rate);
    SECOUSTI_NUM("n_fft", int, c.codec.mel.n_fft);
    SECOUSTI_NUM("win_length", int, c.codec.mel.win_length);
    SECOUSTI_NUM("hop_length", int, c.codec.mel.hop_length);
    SECOUSTI_NUM("n_mels", int, c.codec.mel.n_mels);
    SECOUSTI_NUM("fmin", double, c.codec.mel.fmin);
    SECOUSTI_NUM("fmax", double, c.codec.mel.fmax);
    SECOUSTI_NUM("log_floor", double, c.codec.mel.log_floor);
    SECOUSTI_NUM("semantic_rate", int, c.codec.semantic_rate);
    SECOUSTI_NUM("mel_offset", double, c.codec.mel_offset);
    SECOUSTI_NUM("mel_scale", double, c.codec.mel_scale);
    SECOUSTI_NUM("conv_channels", int, c.codec.conv_channels);
    SECOUSTI_NUM("conv_kernel", int, c.codec.conv_kernel);
    SECOUSTI_NUM("dilation_base", int, c.codec.dilation_base);
    SECOUSTI_NUM("residual_layers", int, c.codec.residual_layers);
    SECOUSTI_NUM("residual_compress", int, c.codec.residual_compress);
    SECOUSTI_NUM("model_dim", int, c.codec.model_dim);
    SECOUSTI_NUM("heads", int, c.codec.heads);
    SECOUSTI_NUM("layers", int, c.codec.layers);
    SECOUSTI_NUM("ffn_dim", int, c.codec.ffn_dim);
    SECOUSTI_NUM("attn_window", int, c.codec.attn_window);
    SECOUSTI_NUM("rope_base", double, c.codec.rope_base);
    SECOUSTI_NUM("acous_dim", int, c.codec.acous_dim);
    SECOUSTI_NUM("joint_dim", int, c.codec.joint_dim);
    SECOUSTI_NUM("fsq_d", int, c.codec.fsq_d);
    SECOUSTI_NUM("fsq_levels", int, c.codec.fsq_levels);
    SECOUSTI_NUM("log_sigma_clamp", double, c.codec.log_sigma_clamp);
    SECOUSTI_NUM("phoneme_vocab", int, c.codec.phoneme_vocab);
    SECOUSTI_NUM("phoneme_layers", int, c.codec.phoneme_layers);
    SECOUSTI_NUM("para_dim", int, c.codec.para_dim);
    SECOUSTI_NUM("para_frames", int, c.codec.para_frames);
    SECOUSTI_NUM("para_channels", int, c.codec.para_channels);
    SECOUSTI_NUM("para_conv_layers", int, c.codec.para_conv_layers);
    SECOUSTI_NUM("para_se_blocks", int, c.codec.para_se_blocks);
    SECOUSTI_NUM("para_se_reduction", int, c.codec.para_se_reduction);
    SECOUSTI_NUM("kl_margin_para", double, c.codec.kl_margin_para);
    SECOUSTI_NUM("kl_margin_semantic", double, c.codec.kl_margin_semantic);
    SECOUSTI_NUM("tau_init", double, c.codec.tau_init);
    SECOUSTI_NUM("stage1_end", long, c.schedule.stage1_end);
    SECOUSTI_NUM("kl_start_para", long, c.schedule.kl_start_para);
    SECOUSTI_NUM("kl_end_para", long, c.schedule.kl_end_para);
    SECOUSTI_NUM("kl_upper_para", double, c.schedule.kl_upper_para);
    SECOUSTI_NUM("kl_start_semantic", long, c.schedule.kl_start_semantic);
    SECOUSTI_NUM("kl_end_semantic", long, c.schedule.kl_end_semantic);
    SECOUSTI_NUM("kl_upper_semantic", double, c.schedule.kl_upper_semantic);
    SECOUSTI_NUM("alpha", double, c.schedule.alpha);
    SECOUSTI_NUM("beta", double, c.schedule.beta);
    SECOUSTI_NUM("learning_rate", double, c.schedule.learning_rate);
    SECOUSTI_NUM("lr_final_ratio", double, c.schedule.lr_final_ratio);
    SECOUSTI_NUM("adam_beta1", double, c.schedule.adam_beta1);
    SECOUSTI_NUM("adam_beta2", double, c.schedule.adam_beta2);
    SECOUSTI_NUM("adam_eps", double, c.schedule.adam_eps);
    SECOUSTI_NUM("batch_size", int, c.schedule.batch_size);
    SECOUSTI_NUM("total_steps", long, c.schedule.total_steps);
    SECOUSTI_NUM("log_every", long, c.schedule.log_every);
    SECOUSTI_NUM("checkpoint_every", long, c.schedule.checkpoint_every);
    SECOUSTI_NUM("seed", std::uint64_t, c.schedule.seed);
#undef SECOUSTI_NUM
    f["learnable_tau"] = {[](TrainConfig& c, const std::string& v) { c.codec.learnable_tau = parse_bool("learnable_tau", v); },
                          [](const TrainConfig& c) { return std::string(c.codec.learnable_tau ? "true" : "false"); }};
    f["normalize_embeddings"] = {
        [](TrainConfig& c, const std::string& v) { c.codec.normalize_embeddings = parse_bool("normalize_embeddings", v); },
        [](const TrainConfig& c) { return std::string(c.codec.normalize_embeddings ? "true" : "false"); }};
    f["encoder_strides"] = {
        [](TrainConfig& c, const std::string& v) {
          std::vector<int> s;
          std::string item;
          std::istringstream is(v);
          while (std::getline(is, item, ',')) {
            const auto b = item.find_first_not_of(" \t");
            const auto e = item.find_last_not_of(" \t");
            if (b == std::string::npos) throw std::invalid_argument("config key 'encoder_strides': empty item");
            s.push_back(parse_number<int>("encoder_strides", item.substr(b, e - b + 1)));
          }
          c.codec.encoder_strides = s;
        },
        [](const TrainConfig& c) {
          std::string s;
          for (std::size_t i = 0; i < c.codec.encoder_strides.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(c.codec.encoder_strides[i]);
          }
          return s;
        }};
    return f;
  }();
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

TrainConfig parse_config(const std::string& text) {
  TrainConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = fields().find(key);
    if (it == fields().end()) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    it->second.set(cfg, value);
  }
  cfg.codec.validate();
  cfg.schedule.validate();
  return cfg;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + " = " + field.get(cfg) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [key, field] : fields()) keys.push_back(key);
  return keys;
}

}  // namespace secousti
