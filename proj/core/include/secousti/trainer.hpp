#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "secousti/codec.hpp"
#include "secousti/config.hpp"
#include "secousti/frontend.hpp"

namespace secousti {

// Stage gating and the linear KL warm-ups of the multi-stage schedule.
LossWeights loss_weights(long step, const ScheduleConfig& sched);

// Learning rate at `step`, restarting the cosine decay at the stage boundary.
double learning_rate_at(long step, const ScheduleConfig& sched);

struct StepRecord {
  long step = 0;
  int stage = 1;
  double mel = 0;
  double acoustic = 0;
  double contrastive = 0;
  double kl_para = 0;
  double kl_semantic = 0;
  double total = 0;
};

struct AdamSlot {
  Tensor<float> m;
  Tensor<float> v;
  std::int64_t updates = 0;
};

struct TrainState {
  TrainConfig config;
  CodecModel<float> model;
  std::map<std::string, AdamSlot> adam;
  long step = 0;
  std::vector<StepRecord> history;
};

TrainState init_train_state(const TrainConfig& cfg);

// One utterance prepared for training: padded mel and padded frame-level phoneme ids.
struct TrainingExample {
  Tensor<float> mel;          // unpadded log-mel
  std::vector<int> frame_ids; // padded to a whole number of semantic frames
};

std::vector<TrainingExample> prepare_examples(const CodecConfig& cfg, const std::vector<Utterance>& corpus);

class Trainer {
 public:
  Trainer(TrainState state, std::vector<TrainingExample> examples);

  // Runs step state().step + 1 and returns its loss breakdown. Throws on a non-finite loss.
  StepRecord step();
  void run(long until_step, const std::function<void(const StepRecord&)>& on_step = {});

  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  // Utterance indices of the batch used at `step` (1-based).
  std::vector<std::size_t> batch_indices(long step) const;

 private:
  void ensure_stage2_cache();
  void apply_adam(bool stage1, double lr);

  TrainState state_;
  std::vector<TrainingExample> examples_;
  std::vector<AcousticTargets<float>> targets_;
  mutable std::map<long, std::vector<std::size_t>> epoch_orders_;
};

// Checkpoint: magic SCC1, version, config text, named tensor records (parameters, Adam
// moments and counters, step, seed, loss history). Writes go through a temp file + rename.
std::string serialize_checkpoint(const TrainState& state);
TrainState deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

// Order-independent digest of a parameter subset (names by prefix predicate), for freezing checks.
std::uint64_t parameter_checksum(const ParameterStore<float>& params, const std::function<bool(const std::string&)>& select);

}  // namespace secousti
