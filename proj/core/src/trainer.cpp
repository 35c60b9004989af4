#include "secousti/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>

namespace secousti {

LossWeights loss_weights(long step, const ScheduleConfig& sched) {
  if (step < 1) throw std::invalid_argument("loss_weights: step must be >= 1, got " + std::to_string(step));
  LossWeights w;
  if (step <= sched.stage1_end) {
    w.stage = 1;
    w.alpha = w.beta = w.gamma = w.delta = 0.0;
    return w;
  }
  auto ramp = [step](long start, long end, double upper) {
    if (step <= start) return 0.0;
    const double ratio = static_cast<double>(step - start) / static_cast<double>(end - start);
    return upper * std::min(1.0, ratio);
  };
  w.stage = 2;
  w.alpha = sched.alpha;
  w.beta = sched.beta;
  w.gamma = ramp(sched.kl_start_para, sched.kl_end_para, sched.kl_upper_para);
  w.delta = ramp(sched.kl_start_semantic, sched.kl_end_semantic, sched.kl_upper_semantic);
  return w;
}

double learning_rate_at(long step, const ScheduleConfig& sched) {
  if (sched.lr_final_ratio >= 1.0) return sched.learning_rate;
  double progress;
  if (step <= sched.stage1_end) {
    progress = sched.stage1_end > 0 ? static_cast<double>(step - 1) / static_cast<double>(sched.stage1_end) : 0.0;
  } else {
    const long len = std::max(1L, sched.total_steps - sched.stage1_end);
    progress = static_cast<double>(step - 1 - sched.stage1_end) / static_cast<double>(len);
  }
  progress = std::clamp(progress, 0.0, 1.0);
  const double c = 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
  return sched.learning_rate * (sched.lr_final_ratio + (1.0 - sched.lr_final_ratio) * c);
}

TrainState init_train_state(const TrainConfig& cfg) {
  cfg.schedule.validate();
  TrainState st;
  st.config = cfg;
  st.model = init_codec(cfg.codec, cfg.schedule.seed);
  for (const auto& [name, e] : st.model.params.entries()) {
    st.adam[name] = AdamSlot{Tensor<float>(e.value.shape()), Tensor<float>(e.value.shape()), 0};
  }
  return st;
}

std::vector<TrainingExample> prepare_examples(const CodecConfig& cfg, const std::vector<Utterance>& corpus) {
  std::vector<TrainingExample> out;
  out.reserve(corpus.size());
  for (const auto& u : corpus) {
    TrainingExample ex;
    ex.mel = u.mel.values;
    ex.frame_ids = pad_frame_ids(cfg, length_regulate(u.phonemes, static_cast<long>(u.mel.frames())));
    out.push_back(std::move(ex));
  }
  return out;
}

Trainer::Trainer(TrainState state, std::vector<TrainingExample> examples)
    : state_(std::move(state)), examples_(std::move(examples)) {
  if (examples_.empty()) throw std::invalid_argument("trainer: empty corpus");
}

std::vector<std::size_t> Trainer::batch_indices(long step) const {
  const std::size_t N = examples_.size();
  const std::size_t B = static_cast<std::size_t>(state_.config.schedule.batch_size);
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < B; ++j) {
    const std::size_t g = static_cast<std::size_t>(step - 1) * B + j;
    const long epoch = static_cast<long>(g / N);
    auto it = epoch_orders_.find(epoch);
    if (it == epoch_orders_.end()) {
      std::vector<std::size_t> perm(N);
      for (std::size_t i = 0; i < N; ++i) perm[i] = i;
      Rng rng(mix_seed(state_.config.schedule.seed ^ 0x9e3779b97f4a7c15ull, static_cast<std::uint64_t>(epoch)));
      for (std::size_t i = N; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
      if (epoch_orders_.size() > 4) epoch_orders_.erase(epoch_orders_.begin());
      it = epoch_orders_.emplace(epoch, std::move(perm)).first;
    }
    out.push_back(it->second[g % N]);
  }
  return out;
}

void Trainer::ensure_stage2_cache() {
  if (!targets_.empty()) return;
  targets_.reserve(examples_.size());
  for (const auto& ex : examples_) targets_.push_back(acoustic_targets(state_.model, ex.mel));
}

void Trainer::apply_adam(bool stage1, double lr) {
  const ScheduleConfig& sc = state_.config.schedule;
  for (auto& [name, e] : state_.model.params.entries()) {
    if (is_stage1_parameter(name) != stage1) continue;
    AdamSlot& slot = state_.adam.at(name);
    ++slot.updates;
    const double c1 = 1.0 - std::pow(sc.adam_beta1, static_cast<double>(slot.updates));
    const double c2 = 1.0 - std::pow(sc.adam_beta2, static_cast<double>(slot.updates));
    const float b1 = static_cast<float>(sc.adam_beta1), b2 = static_cast<float>(sc.adam_beta2);
    const float step_size = static_cast<float>(lr / c1);
    const float rc2 = static_cast<float>(1.0 / std::sqrt(c2));
    const float eps = static_cast<float>(sc.adam_eps);
    float* p = e.value.data();
    const float* g = e.grad.data();
    float* m = slot.m.data();
    float* v = slot.v.data();
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      p[i] -= step_size * m[i] / (std::sqrt(v[i]) * rc2 + eps);
    }
  }
}

StepRecord Trainer::step() {
  const long k = state_.step + 1;
  const CodecConfig& cfg = state_.config.codec;
  const LossWeights w = loss_weights(k, state_.config.schedule);
  Rng rng(mix_seed(state_.config.schedule.seed, static_cast<std::uint64_t>(k)));
  const auto idx = batch_indices(k);
  auto& params = state_.model.params;
  params.zero_grad();
  Tape<float> tape;
  Scope<float> s(tape, params);
  StepRecord rec;
  rec.step = k;
  rec.stage = w.stage;
  auto check = [&](double v) {
    if (!std::isfinite(v)) {
      char buf[256];
      std::snprintf(buf, sizeof(buf),
                    "non-finite loss at step %ld: mel=%g acoustic=%g contrastive=%g kl_para=%g kl_sem=%g", k,
                    rec.mel, rec.acoustic, rec.contrastive, rec.kl_para, rec.kl_semantic);
      throw std::runtime_error(buf);
    }
  };
  if (w.stage == 1) {
    s.frozen = stage2_prefixes();
    std::vector<const Tensor<float>*> mels;
    for (auto i : idx) mels.push_back(&examples_[i].mel);
    Var<float> loss = stage1_loss(s, cfg, mels);
    rec.mel = rec.total = loss.value().item();
    check(rec.total);
    tape.backward(loss);
    apply_adam(true, learning_rate_at(k, state_.config.schedule));
  } else {
    ensure_stage2_cache();
    s.frozen = stage1_prefixes();
    std::vector<Stage2Item<float>> items;
    for (auto i : idx) {
      MelSpectrogram m;
      m.values = examples_[i].mel;
      Tensor<float> window =
          crop_paralinguistic_window(m, static_cast<std::size_t>(cfg.para_frames), rng).values;
      items.push_back({s.input(targets_[i].hidden, "hidden"), s.input(targets_[i].acoustic, "acoustic"),
                       examples_[i].frame_ids, s.input(std::move(window), "para_window")});
    }
    Stage2Losses<float> L = stage2_loss(s, cfg, items, w, true, &rng);
    rec.acoustic = L.acoustic.value().item();
    rec.contrastive = L.contrastive.value().item();
    rec.kl_para = L.kl_para.value().item();
    rec.kl_semantic = L.kl_semantic.value().item();
    rec.total = L.total.value().item();
    check(rec.total);
    check(rec.acoustic + rec.contrastive + rec.kl_para + rec.kl_semantic);
    tape.backward(L.total);
    apply_adam(false, learning_rate_at(k, state_.config.schedule));
  }
  state_.step = k;
  state_.history.push_back(rec);
  return rec;
}

void Trainer::run(long until_step, const std::function<void(const StepRecord&)>& on_step) {
  while (state_.step < until_step) {
    const StepRecord r = step();
    if (on_step) on_step(r);
  }
}

// ---- checkpoint ----

namespace {

constexpr char kMagic[4] = {'S', 'C', 'C', '1'};
constexpr std::uint8_t kVersion = 1;
enum : std::uint8_t { kF32 = 0, kF64 = 1, kI64 = 2 };

struct Writer {
  std::string out;
  void u8(std::uint8_t v) { out.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(const std::string& s) { out += s; }
  void record(const std::string& name, std::uint8_t tag, const Shape& shape) {
    u16(static_cast<std::uint16_t>(name.size()));
    bytes(name);
    u8(tag);
    u8(static_cast<std::uint8_t>(shape.size()));
    for (auto e : shape) u64(e);
  }
  void f32s(const std::string& name, const Tensor<float>& t) {
    record(name, kF32, t.shape());
    for (float f : t.storage()) {
      std::uint32_t b;
      std::memcpy(&b, &f, 4);
      u32(b);
    }
  }
  void i64(const std::string& name, std::int64_t v) {
    record(name, kI64, {});
    u64(static_cast<std::uint64_t>(v));
  }
};

struct Record {
  std::uint8_t tag = 0;
  Shape shape;
  std::vector<float> f32;
  std::vector<double> f64;
  std::vector<std::int64_t> i64;
};

struct Reader {
  const std::string& in;
  std::size_t pos = 0;
  void need(std::size_t n, const char* what) {
    if (in.size() - pos < n) throw std::runtime_error(std::string("checkpoint truncated while reading ") + what);
  }
  std::uint64_t uint(int bytes, const char* what) {
    need(static_cast<std::size_t>(bytes), what);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = in.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

std::string serialize_checkpoint(const TrainState& st) {
  Writer w;
  w.bytes(std::string(kMagic, 4));
  w.u8(kVersion);
  const std::string cfg = to_text(st.config);
  w.u32(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg);
  const auto& params = st.model.params.entries();
  const std::size_t count = params.size() + 3 * st.adam.size() + 3;
  w.u32(static_cast<std::uint32_t>(count));
  for (const auto& [name, e] : params) w.f32s("param/" + name, e.value);
  for (const auto& [name, slot] : st.adam) {
    w.f32s("adam.m/" + name, slot.m);
    w.f32s("adam.v/" + name, slot.v);
    w.i64("adam.t/" + name, slot.updates);
  }
  w.i64("rng/seed", static_cast<std::int64_t>(st.config.schedule.seed));
  w.i64("state/step", st.step);
  w.record("state/history", kF64, {st.history.size(), 8});
  for (const auto& r : st.history) {
    const double row[8] = {static_cast<double>(r.step), static_cast<double>(r.stage), r.mel, r.acoustic,
                           r.contrastive, r.kl_para, r.kl_semantic, r.total};
    for (double d : row) {
      std::uint64_t b;
      std::memcpy(&b, &d, 8);
      w.u64(b);
    }
  }
  return w.out;
}

TrainState deserialize_checkpoint(const std::string& bytes) {
  Reader r{bytes};
  if (r.str(4, "magic") != std::string(kMagic, 4)) throw std::runtime_error("not a checkpoint: bad magic");
  const auto version = r.uint(1, "version");
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  const std::size_t cfg_len = r.uint(4, "config length");
  const TrainConfig cfg = parse_config(r.str(cfg_len, "config"));
  const std::size_t count = r.uint(4, "record count");
  std::map<std::string, Record> records;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t name_len = r.uint(2, "record name length");
    std::string name = r.str(name_len, "record name");
    Record rec;
    rec.tag = static_cast<std::uint8_t>(r.uint(1, "dtype tag"));
    if (rec.tag > kI64) throw std::runtime_error("record " + name + ": unknown dtype tag " + std::to_string(rec.tag));
    const std::size_t rank = r.uint(1, "rank");
    const std::size_t width = rec.tag == kF32 ? 4 : 8;
    std::size_t n = 1;
    for (std::size_t d = 0; d < rank; ++d) {
      const std::uint64_t e = r.uint(8, "extent");
      if (e != 0 && n > (bytes.size() - r.pos) / width / e) {
        throw std::runtime_error("record " + name + ": extents exceed file size");
      }
      rec.shape.push_back(static_cast<std::size_t>(e));
      n *= static_cast<std::size_t>(e);
    }
    r.need(n * width, "record payload");
    for (std::size_t j = 0; j < n; ++j) {
      const std::uint64_t b = r.uint(static_cast<int>(width), "payload");
      if (rec.tag == kF32) {
        const std::uint32_t b32 = static_cast<std::uint32_t>(b);
        float f;
        std::memcpy(&f, &b32, 4);
        rec.f32.push_back(f);
      } else if (rec.tag == kF64) {
        double d;
        std::memcpy(&d, &b, 8);
        rec.f64.push_back(d);
      } else {
        rec.i64.push_back(static_cast<std::int64_t>(b));
      }
    }
    if (!records.emplace(std::move(name), std::move(rec)).second) {
      throw std::runtime_error("duplicate checkpoint record");
    }
  }
  if (r.pos != bytes.size()) throw std::runtime_error("trailing bytes after checkpoint records");

  auto take = [&](const std::string& name, std::uint8_t tag) -> Record& {
    auto it = records.find(name);
    if (it == records.end()) throw std::runtime_error("checkpoint missing record " + name);
    if (it->second.tag != tag) throw std::runtime_error("checkpoint record " + name + " has wrong dtype");
    return it->second;
  };
  auto tensor = [&](const std::string& name, const Shape& expected) {
    Record& rec = take(name, kF32);
    if (rec.shape != expected) {
      throw std::runtime_error("checkpoint record " + name + " has shape " + shape_to_string(rec.shape) +
                               ", config expects " + shape_to_string(expected));
    }
    return Tensor<float>(rec.shape, std::move(rec.f32));
  };
  auto scalar_i64 = [&](const std::string& name) {
    Record& rec = take(name, kI64);
    if (!rec.shape.empty()) throw std::runtime_error("checkpoint record " + name + " is not a scalar");
    return rec.i64.at(0);
  };

  TrainState st = init_train_state(cfg);
  for (auto& [name, e] : st.model.params.entries()) e.value = tensor("param/" + name, e.value.shape());
  for (auto& [name, slot] : st.adam) {
    slot.m = tensor("adam.m/" + name, slot.m.shape());
    slot.v = tensor("adam.v/" + name, slot.v.shape());
    slot.updates = scalar_i64("adam.t/" + name);
  }
  if (static_cast<std::uint64_t>(scalar_i64("rng/seed")) != cfg.schedule.seed) {
    throw std::runtime_error("checkpoint rng seed disagrees with embedded config");
  }
  st.step = scalar_i64("state/step");
  if (st.step < 0) throw std::runtime_error("checkpoint has negative step");
  Record& hist = take("state/history", kF64);
  if (hist.shape.size() != 2 || hist.shape[1] != 8) throw std::runtime_error("checkpoint history has bad shape");
  for (std::size_t i = 0; i < hist.shape[0]; ++i) {
    const double* row = hist.f64.data() + i * 8;
    StepRecord rec;
    rec.step = static_cast<long>(row[0]);
    rec.stage = static_cast<int>(row[1]);
    rec.mel = row[2];
    rec.acoustic = row[3];
    rec.contrastive = row[4];
    rec.kl_para = row[5];
    rec.kl_semantic = row[6];
    rec.total = row[7];
    st.history.push_back(rec);
  }
  const std::size_t expected = st.model.params.entries().size() + 3 * st.adam.size() + 3;
  if (records.size() != expected) {
    throw std::runtime_error("checkpoint has " + std::to_string(records.size()) + " records, expected " +
                             std::to_string(expected));
  }
  return st;
}

void save_checkpoint(const TrainState& state, const std::string& path) {
  const std::string bytes = serialize_checkpoint(state);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("failed writing checkpoint: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return deserialize_checkpoint(bytes);
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

std::uint64_t parameter_checksum(const ParameterStore<float>& params,
                                 const std::function<bool(const std::string&)>& select) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ull;
  };
  for (const auto& [name, e] : params.entries()) {
    if (!select(name)) continue;
    mix(name.data(), name.size());
    mix(e.value.data(), e.value.size() * sizeof(float));
  }
  return h;
}

}  // namespace secousti
