#include "secousti/streaming.hpp"

#include <chrono>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "secousti/frontend.hpp"
#include "secousti/kernels.hpp"

namespace secousti {

// ---- bitstream ----

std::uint64_t SemanticTokens::codebook_size() const {
  std::uint64_t n = 1;
  for (int i = 0; i < fsq_d; ++i) n *= fsq_levels;
  return n;
}

double SemanticTokens::bits_per_token() const { return fsq_d * std::log2(static_cast<double>(fsq_levels)); }

SemanticTokens make_tokens(const CodecConfig& cfg, std::vector<std::uint32_t> codes,
                           std::optional<std::vector<float>> g) {
  if (cfg.para_dim > 0xFFFF || cfg.fsq_d > 0xFF || cfg.fsq_levels > 0xFF) {
    throw std::invalid_argument("config extents do not fit the token header");
  }
  SemanticTokens t;
  t.rate_num = static_cast<std::uint32_t>(cfg.mel.sample_rate);
  t.rate_den = static_cast<std::uint32_t>(cfg.mel.hop_length * cfg.semantic_rate);
  t.fsq_d = static_cast<std::uint8_t>(cfg.fsq_d);
  t.fsq_levels = static_cast<std::uint8_t>(cfg.fsq_levels);
  t.para_dim = static_cast<std::uint16_t>(cfg.para_dim);
  if (g && g->size() != t.para_dim) {
    throw std::invalid_argument("paralinguistic vector has " + std::to_string(g->size()) + " values, expected " +
                                std::to_string(t.para_dim));
  }
  const std::uint64_t size = t.codebook_size();
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] >= size) {
      throw std::invalid_argument("token " + std::to_string(i) + " has code " + std::to_string(codes[i]) +
                                  " outside a codebook of " + std::to_string(size));
    }
  }
  t.g = std::move(g);
  t.codes = std::move(codes);
  return t;
}

namespace {

constexpr char kTokenMagic[4] = {'S', 'C', 'T', 'K'};

void put(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get(const std::string& in, std::size_t& pos, int bytes, const char* what) {
  if (in.size() - pos < static_cast<std::size_t>(bytes)) {
    throw std::runtime_error(std::string("token stream truncated in ") + what);
  }
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += static_cast<std::size_t>(bytes);
  return v;
}

void validate_header(const SemanticTokens& t) {
  if (t.version != 1) throw std::runtime_error("unsupported token stream version " + std::to_string(t.version));
  if (t.rate_num == 0 || t.rate_den == 0) throw std::runtime_error("token stream has a zero frame rate");
  if (t.fsq_d == 0) throw std::runtime_error("token stream declares fsq_d = 0");
  if (t.fsq_levels < 3 || t.fsq_levels % 2 == 0) {
    throw std::runtime_error("token stream declares invalid level count " + std::to_string(t.fsq_levels));
  }
  std::uint64_t n = 1;
  for (int i = 0; i < t.fsq_d; ++i) {
    n *= t.fsq_levels;
    if (n > (1ull << 32)) throw std::runtime_error("token stream codebook exceeds 32-bit codes");
  }
}

}  // namespace

std::string serialize_tokens(const SemanticTokens& t) {
  validate_header(t);
  if (t.g && t.g->size() != t.para_dim) throw std::invalid_argument("G length disagrees with header D_g");
  const std::uint64_t size = t.codebook_size();
  std::string out(kTokenMagic, 4);
  put(out, t.version, 1);
  put(out, t.g ? 1 : 0, 1);
  put(out, t.rate_num, 4);
  put(out, t.rate_den, 4);
  put(out, t.fsq_d, 1);
  put(out, t.fsq_levels, 1);
  put(out, t.para_dim, 2);
  if (t.g) {
    for (float f : *t.g) {
      std::uint32_t b;
      std::memcpy(&b, &f, 4);
      put(out, b, 4);
    }
  }
  put(out, t.codes.size(), 8);
  const int width = size <= 65536 ? 2 : 4;
  for (std::size_t i = 0; i < t.codes.size(); ++i) {
    if (t.codes[i] >= size) {
      throw std::invalid_argument("code " + std::to_string(t.codes[i]) + " at position " + std::to_string(i) +
                                  " outside codebook of size " + std::to_string(size));
    }
    put(out, t.codes[i], width);
  }
  return out;
}

SemanticTokens deserialize_tokens(const std::string& in) {
  std::size_t pos = 0;
  if (in.size() < 4 || std::memcmp(in.data(), kTokenMagic, 4) != 0) {
    throw std::runtime_error("not a token stream: bad magic");
  }
  pos = 4;
  SemanticTokens t;
  t.version = static_cast<std::uint8_t>(get(in, pos, 1, "version"));
  const auto flags = get(in, pos, 1, "flags");
  if (flags & ~1ull) throw std::runtime_error("token stream has unknown flags " + std::to_string(flags));
  t.rate_num = static_cast<std::uint32_t>(get(in, pos, 4, "frame rate"));
  t.rate_den = static_cast<std::uint32_t>(get(in, pos, 4, "frame rate"));
  t.fsq_d = static_cast<std::uint8_t>(get(in, pos, 1, "fsq_d"));
  t.fsq_levels = static_cast<std::uint8_t>(get(in, pos, 1, "fsq_L"));
  t.para_dim = static_cast<std::uint16_t>(get(in, pos, 2, "D_g"));
  validate_header(t);
  if (flags & 1) {
    std::vector<float> g(t.para_dim);
    for (auto& f : g) {
      const std::uint32_t b = static_cast<std::uint32_t>(get(in, pos, 4, "paralinguistic vector"));
      std::memcpy(&f, &b, 4);
      if (!std::isfinite(f)) throw std::runtime_error("token stream has a non-finite paralinguistic value");
    }
    t.g = std::move(g);
  }
  const std::uint64_t count = get(in, pos, 8, "code count");
  const std::uint64_t size = t.codebook_size();
  const int width = size <= 65536 ? 2 : 4;
  const std::uint64_t remaining = in.size() - pos;
  if (count > remaining / static_cast<std::uint64_t>(width) || count * width != remaining) {
    throw std::runtime_error("token stream declares " + std::to_string(count) + " codes but carries " +
                             std::to_string(remaining) + " payload bytes");
  }
  t.codes.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t c = get(in, pos, width, "codes");
    if (c >= size) {
      throw std::runtime_error("code " + std::to_string(c) + " at position " + std::to_string(i) +
                               " outside codebook of size " + std::to_string(size));
    }
    t.codes[i] = static_cast<std::uint32_t>(c);
  }
  return t;
}

void write_tokens(const std::string& path, const SemanticTokens& tokens) {
  const std::string bytes = serialize_tokens(tokens);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write token file: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing token file: " + path);
}

SemanticTokens read_tokens(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open token file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return deserialize_tokens(bytes);
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

// ---- streaming cells ----

namespace detail {

StreamConv::StreamConv(const ParameterStore<float>& p, const std::string& name, std::size_t stride,
                       std::size_t dilation)
    : w_(p.value(name + ".w")), b_(p.value(name + ".b")), K_(w_.shape()[0]), in_(w_.shape()[1]),
      out_(w_.shape()[2]), stride_(stride), dilation_(dilation) {}

bool StreamConv::push(std::span<const float> x, std::vector<float>& out) {
  hist_.emplace_back(x.begin(), x.end());
  ++consumed_;
  if (hist_.size() > (K_ - 1) * dilation_ + 1) hist_.pop_front();
  if (consumed_ % stride_ != 0) return false;
  const float* taps[64];
  std::vector<const float*> big;
  const float** tp = taps;
  if (K_ > 64) {
    big.resize(K_);
    tp = big.data();
  }
  for (std::size_t j = 0; j < K_; ++j) {
    const std::size_t back = j * dilation_;
    tp[j] = back < consumed_ ? hist_[hist_.size() - 1 - back].data() : nullptr;
  }
  out.resize(out_);
  kernels::conv_frame<float>(std::span<const float* const>(tp, K_), in_, w_.data(), b_.data(), out_, out.data());
  return true;
}

StreamConvTranspose::StreamConvTranspose(const ParameterStore<float>& p, const std::string& name, std::size_t stride)
    : w_(p.value(name + ".w")), b_(p.value(name + ".b")), K_(w_.shape()[0]), in_(w_.shape()[1]),
      out_(w_.shape()[2]), stride_(stride) {}

void StreamConvTranspose::push(std::span<const float> x, std::vector<std::vector<float>>& out) {
  const std::size_t i = consumed_++;
  hist_.emplace_back(x.begin(), x.end());
  if (hist_.size() > (K_ + stride_ - 1) / stride_ + 1) hist_.pop_front();
  std::vector<const float*> taps(K_);
  for (std::size_t r = 0; r < stride_; ++r) {
    const long t = static_cast<long>(i * stride_ + r);
    for (std::size_t j = 0; j < K_; ++j) {
      const long d = t - static_cast<long>(j);
      if (d < 0 || d % static_cast<long>(stride_) != 0) {
        taps[j] = nullptr;
      } else {
        const std::size_t back = i - static_cast<std::size_t>(d) / stride_;
        taps[j] = hist_[hist_.size() - 1 - back].data();
      }
    }
    std::vector<float> y(out_);
    kernels::conv_frame<float>(taps, in_, w_.data(), b_.data(), out_, y.data());
    out.push_back(std::move(y));
  }
}

StreamResidual::StreamResidual(const ParameterStore<float>& p, const std::string& name, std::size_t dilation)
    : conv1_(p, name + ".conv1", 1, dilation), conv2_(p, name + ".conv2", 1, 1) {}

namespace {

std::vector<float> elu_copy(const std::vector<float>& x) {
  std::vector<float> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = kernels::elu(x[i]);
  return y;
}

std::vector<float> affine(const ParameterStore<float>& p, const std::string& name, const std::vector<float>& x) {
  const Tensor<float>& w = p.value(name + ".w");
  const Tensor<float>& b = p.value(name + ".b");
  std::vector<float> y(w.shape()[1]);
  kernels::affine_row(x.data(), w.shape()[0], w.data(), b.data(), w.shape()[1], y.data());
  return y;
}

std::vector<float> layer_norm(const ParameterStore<float>& p, const std::string& name, const std::vector<float>& x) {
  std::vector<float> y(x.size());
  kernels::layer_norm_row(x.data(), x.size(), p.value(name + ".g").data(), p.value(name + ".b").data(), 1e-5f,
                          y.data());
  return y;
}

}  // namespace

std::vector<float> StreamResidual::push(const std::vector<float>& x) {
  std::vector<float> h, h2;
  conv1_.push(elu_copy(x), h);
  conv2_.push(elu_copy(h), h2);
  std::vector<float> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += h2[i];
  return out;
}

StreamTransformer::StreamTransformer(const ParameterStore<float>& p, const std::string& name, const TransformerSpec& spec)
    : p_(p), name_(name), spec_(spec) {
  for (std::size_t l = 0; l < spec.layers; ++l) layers_.push_back({name + ".layer" + std::to_string(l), {}, {}});
}

std::vector<float> StreamTransformer::push(std::vector<float> x) {
  const std::size_t D = spec_.dim, hd = D / spec_.heads;
  std::vector<const float*> kp, vp;
  for (auto& L : layers_) {
    std::vector<float> h = layer_norm(p_, L.prefix + ".ln1", x);
    std::vector<float> q = affine(p_, L.prefix + ".wq", h);
    std::vector<float> k = affine(p_, L.prefix + ".wk", h);
    std::vector<float> v = affine(p_, L.prefix + ".wv", h);
    kernels::rope_row(q.data(), spec_.heads, hd, pos_, spec_.rope_base);
    kernels::rope_row(k.data(), spec_.heads, hd, pos_, spec_.rope_base);
    L.keys.push_back(std::move(k));
    L.values.push_back(std::move(v));
    if (L.keys.size() > spec_.window) {
      L.keys.pop_front();
      L.values.pop_front();
    }
    kp.clear();
    vp.clear();
    for (std::size_t j = 0; j < L.keys.size(); ++j) {
      kp.push_back(L.keys[j].data());
      vp.push_back(L.values[j].data());
    }
    std::vector<float> a(D);
    kernels::attend_row<float>(q.data(), kp, vp, spec_.heads, hd, a.data());
    const std::vector<float> o = affine(p_, L.prefix + ".wo", a);
    for (std::size_t i = 0; i < D; ++i) x[i] += o[i];
    h = layer_norm(p_, L.prefix + ".ln2", x);
    std::vector<float> f = affine(p_, L.prefix + ".ff1", h);
    for (auto& e : f) e = kernels::relu(e);
    const std::vector<float> f2 = affine(p_, L.prefix + ".ff2", f);
    for (std::size_t i = 0; i < D; ++i) x[i] += f2[i];
  }
  ++pos_;
  return layer_norm(p_, name_ + ".ln_f", x);
}

}  // namespace detail

// ---- encode ----

namespace {

std::string stage(const char* module, std::size_t i) { return std::string(module) + ".stage" + std::to_string(i); }

}  // namespace

EncodeStream::EncodeStream(const CodecModel<float>& model)
    : model_(model),
      in_(model.params, std::string(kSpeechEncoder) + ".in", 1, 1),
      out_(model.params, std::string(kSpeechEncoder) + ".out", 1, 1),
      tf_(model.params, std::string(kSemanticProjection) + ".tf", projection_spec(model.config)) {
  const CodecConfig& cfg = model.config;
  for (std::size_t i = 0; i < cfg.encoder_strides.size(); ++i) {
    res_.emplace_back();
    for (int j = 0; j < cfg.residual_layers; ++j) {
      res_.back().emplace_back(model.params, stage(kSpeechEncoder, i) + ".res" + std::to_string(j),
                               residual_dilation(cfg, j));
    }
    down_.emplace_back(model.params, stage(kSpeechEncoder, i) + ".down",
                       static_cast<std::size_t>(cfg.encoder_strides[i]), 1);
  }
  const int f = semantic_factor(cfg);
  if (f > 1) sem_down_.emplace(model.params, std::string(kSemanticProjection) + ".down", static_cast<std::size_t>(f), 1);
}

std::optional<std::uint32_t> EncodeStream::push_frame(std::span<const float> mel) {
  const CodecConfig& cfg = model_.config;
  const auto& P = model_.params;
  ++consumed_;
  std::vector<float> x, y;
  if (cfg.mel_offset != 0.0 || cfg.mel_scale != 1.0) {
    std::vector<float> norm(mel.begin(), mel.end());
    for (auto& v : norm) v = normalize_mel_value(cfg, v);
    in_.push(norm, x);
  } else {
    in_.push(mel, x);
  }
  for (std::size_t i = 0; i < down_.size(); ++i) {
    for (auto& r : res_[i]) x = r.push(x);
    if (!down_[i].push(detail::elu_copy(x), y)) return std::nullopt;
    x = y;
  }
  out_.push(detail::elu_copy(x), y);
  x = y;
  if (sem_down_) {
    if (!sem_down_->push(x, y)) return std::nullopt;
    x = y;
  }
  const std::string sp = kSemanticProjection;
  x = tf_.push(detail::affine(P, sp + ".in", x));
  const std::vector<float> mu = detail::affine(P, sp + ".mu", x);
  std::vector<float> lv = detail::affine(P, std::string(kQuantizer) + ".down", mu);
  const float half = static_cast<float>(cfg.fsq_levels / 2);
  Tensor<float> levels = Tensor<float>::matrix(1, lv.size());
  for (std::size_t i = 0; i < lv.size(); ++i) levels[i] = std::round(std::tanh(lv[i]) * half);
  ++emitted_;
  return pack_codes(levels, cfg.fsq_levels)[0];
}

std::vector<std::uint32_t> EncodeStream::push(const Tensor<float>& mel_chunk) {
  if (closed_) throw std::logic_error("encode stream: push after finish");
  if (mel_chunk.rows() > 0 && mel_chunk.cols() != static_cast<std::size_t>(model_.config.mel.n_mels)) {
    throw std::invalid_argument("encode stream: chunk has " + std::to_string(mel_chunk.cols()) + " bands, expected " +
                                std::to_string(model_.config.mel.n_mels));
  }
  std::vector<std::uint32_t> out;
  for (std::size_t t = 0; t < mel_chunk.rows(); ++t) {
    if (auto c = push_frame(mel_chunk.row(t))) out.push_back(*c);
  }
  return out;
}

std::vector<std::uint32_t> EncodeStream::finish() {
  if (closed_) throw std::logic_error("encode stream: finish called twice");
  std::vector<std::uint32_t> out;
  const std::size_t m = static_cast<std::size_t>(model_.config.frame_multiple());
  const std::vector<float> silence(static_cast<std::size_t>(model_.config.mel.n_mels), static_cast<float>(kSilenceLogMel));
  while (consumed_ % m != 0) {
    if (auto c = push_frame(silence)) out.push_back(*c);
  }
  closed_ = true;
  return out;
}

// ---- decode ----

DecodeStream::DecodeStream(const CodecModel<float>& model, const Tensor<float>& g)
    : model_(model),
      tf_(model.params, std::string(kSemanticConnector) + ".tf", projection_spec(model.config)),
      in_(model.params, std::string(kSpeechDecoder) + ".in", 1, 1),
      out_(model.params, std::string(kSpeechDecoder) + ".out", 1, 1) {
  const CodecConfig& cfg = model.config;
  if (g.size() != static_cast<std::size_t>(cfg.para_dim)) {
    throw std::invalid_argument("decode stream: paralinguistic vector has " + std::to_string(g.size()) +
                                " values, model expects " + std::to_string(cfg.para_dim));
  }
  g_proj_ = detail::affine(model.params, std::string(kSemanticConnector) + ".g_in", g.storage());
  const std::size_t n = cfg.encoder_strides.size();
  for (std::size_t i = 0; i < n; ++i) {
    up_.emplace_back(model.params, stage(kSpeechDecoder, i) + ".up",
                     static_cast<std::size_t>(cfg.encoder_strides[n - 1 - i]));
    res_.emplace_back();
    for (int j = 0; j < cfg.residual_layers; ++j) {
      res_.back().emplace_back(model.params, stage(kSpeechDecoder, i) + ".res" + std::to_string(j),
                               residual_dilation(cfg, j));
    }
  }
}

void DecodeStream::decode_acoustic_frame(const std::vector<float>& a, std::vector<std::vector<float>>& mel) {
  std::vector<float> x;
  in_.push(a, x);
  std::vector<std::vector<float>> frames{x};
  for (std::size_t i = 0; i < up_.size(); ++i) {
    std::vector<std::vector<float>> next;
    for (const auto& fr : frames) {
      std::vector<std::vector<float>> ups;
      up_[i].push(detail::elu_copy(fr), ups);
      for (auto& u : ups) {
        for (auto& r : res_[i]) u = r.push(u);
        next.push_back(std::move(u));
      }
    }
    frames = std::move(next);
  }
  for (const auto& fr : frames) {
    std::vector<float> y;
    out_.push(detail::elu_copy(fr), y);
    const CodecConfig& cfg = model_.config;
    if (cfg.mel_offset != 0.0 || cfg.mel_scale != 1.0) {
      for (auto& v : y) v = denormalize_mel_value(cfg, v);
    }
    mel.push_back(std::move(y));
  }
}

Tensor<float> DecodeStream::push(std::span<const std::uint32_t> codes) {
  const CodecConfig& cfg = model_.config;
  const auto& P = model_.params;
  const std::uint64_t size = cfg.codebook_size();
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] >= size) {
      throw std::invalid_argument("decode stream: invalid code " + std::to_string(codes[i]) + " at position " +
                                  std::to_string(consumed_ + i));
    }
  }
  std::vector<std::vector<float>> mel;
  const int f = semantic_factor(cfg);
  for (std::uint32_t code : codes) {
    const Tensor<float> levels = unpack_codes<float>(std::span<const std::uint32_t>(&code, 1), cfg.fsq_d, cfg.fsq_levels);
    const std::vector<float> s = detail::affine(P, std::string(kQuantizer) + ".up", levels.storage());
    std::vector<float> x = detail::affine(P, std::string(kSemanticConnector) + ".s_in", s);
    for (std::size_t c = 0; c < x.size(); ++c) x[c] += g_proj_[c];
    x = tf_.push(std::move(x));
    const std::vector<float> a = detail::affine(P, std::string(kSemanticConnector) + ".out", x);
    for (int r = 0; r < f; ++r) decode_acoustic_frame(a, mel);
    ++consumed_;
  }
  Tensor<float> out = Tensor<float>::matrix(mel.size(), static_cast<std::size_t>(cfg.mel.n_mels));
  for (std::size_t t = 0; t < mel.size(); ++t) std::copy(mel[t].begin(), mel[t].end(), out.row(t).begin());
  emitted_ += mel.size();
  return out;
}

std::unique_ptr<EncodeStream> open_encode_stream(const CodecModel<float>& model) {
  model.config.validate();
  return std::make_unique<EncodeStream>(model);
}

std::unique_ptr<DecodeStream> open_decode_stream(const CodecModel<float>& model, const Tensor<float>* g) {
  model.config.validate();
  if (!g) throw std::invalid_argument("decode stream needs a paralinguistic vector");
  return std::make_unique<DecodeStream>(model, *g);
}

// ---- measurement ----

LatencyReport measure(const CodecModel<float>& model, const Tensor<float>& mel) {
  using clock = std::chrono::steady_clock;
  const CodecConfig& cfg = model.config;
  LatencyReport r;
  r.audio_seconds = static_cast<double>(mel.rows()) * cfg.mel.hop_length / cfg.mel.sample_rate;
  r.algorithmic_latency_ms = 1000.0 * cfg.semantic_rate * cfg.mel.hop_length / cfg.mel.sample_rate;
  auto enc = open_encode_stream(model);
  std::vector<std::uint32_t> codes;
  const auto t0 = clock::now();
  for (std::size_t t = 0; t < mel.rows(); ++t) {
    const auto out = enc->push(slice_rows(mel, t, t + 1));
    if (!out.empty() && codes.empty()) {
      r.first_token_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    }
    codes.insert(codes.end(), out.begin(), out.end());
  }
  const auto tail = enc->finish();
  codes.insert(codes.end(), tail.begin(), tail.end());
  const double enc_s = std::chrono::duration<double>(clock::now() - t0).count();
  const Tensor<float> g = paralinguistic_reference(model, mel);
  auto dec = open_decode_stream(model, &g);
  const auto t1 = clock::now();
  for (std::uint32_t c : codes) dec->push(std::span<const std::uint32_t>(&c, 1));
  const double dec_s = std::chrono::duration<double>(clock::now() - t1).count();
  r.initial_latency_ms = r.algorithmic_latency_ms + r.first_token_ms;
  r.encode_rtf = r.audio_seconds > 0 ? enc_s / r.audio_seconds : 0;
  r.decode_rtf = r.audio_seconds > 0 ? dec_s / r.audio_seconds : 0;
  return r;
}

// ---- phase reconstruction ----

std::vector<float> griffin_lim(const Tensor<float>& log_mel, const MelConfig& cfg, int iterations, std::uint64_t seed) {
  if (log_mel.rows() == 0) return {};
  MelExtractor ext(cfg);
  const Tensor<double>& fb = ext.filterbank();
  const Stft& stft = ext.stft();
  const std::size_t T = log_mel.rows(), M = fb.rows(), NB = fb.cols();
  if (log_mel.cols() != M) throw std::invalid_argument("griffin_lim: band count mismatch");
  // Non-negative least squares per frame via multiplicative updates.
  std::vector<double> mag(T * NB);
  std::vector<double> ftf_x(NB), fx(M), fte(NB);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> e(M);
    for (std::size_t m = 0; m < M; ++m) e[m] = std::exp(static_cast<double>(log_mel.at(t, m)));
    std::fill(fte.begin(), fte.end(), 0.0);
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t k = 0; k < NB; ++k) fte[k] += fb.at(m, k) * e[m];
    double* x = mag.data() + t * NB;
    for (std::size_t k = 0; k < NB; ++k) x[k] = fte[k];
    for (int it = 0; it < 30; ++it) {
      for (std::size_t m = 0; m < M; ++m) {
        double s = 0;
        for (std::size_t k = 0; k < NB; ++k) s += fb.at(m, k) * x[k];
        fx[m] = s;
      }
      std::fill(ftf_x.begin(), ftf_x.end(), 0.0);
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t k = 0; k < NB; ++k) ftf_x[k] += fb.at(m, k) * fx[m];
      for (std::size_t k = 0; k < NB; ++k) x[k] = ftf_x[k] > 0 ? x[k] * fte[k] / ftf_x[k] : 0.0;
    }
  }
  Rng rng(seed);
  std::vector<std::complex<double>> spec(T * NB);
  for (std::size_t i = 0; i < spec.size(); ++i) spec[i] = std::polar(mag[i], 2.0 * 3.141592653589793 * rng.uniform());
  std::vector<float> y;
  for (int it = 0; it < iterations; ++it) {
    y = stft.synthesize(spec, T);
    const auto re = stft.analyze(y);
    for (std::size_t i = 0; i < spec.size(); ++i) {
      const double a = std::abs(re[i]);
      spec[i] = a > 0 ? mag[i] * re[i] / a : std::complex<double>(mag[i], 0.0);
    }
  }
  y = stft.synthesize(spec, T);
  float peak = 0;
  for (float v : y) peak = std::max(peak, std::abs(v));
  if (peak > 0.99f) {
    for (auto& v : y) v *= 0.99f / peak;
  }
  return y;
}

}  // namespace secousti
