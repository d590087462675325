#pragma once

// Adam, warmup schedule, clipping, the training loop and checkpoints.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aclam/model.hpp"
#include "aclam/rng.hpp"
#include "aclam/sampling.hpp"
#include "aclam/synthworld.hpp"

namespace aclam::train {

using lam::AcForm;
using lam::ModelParams;
using lam::Placement;

struct StabilityThresholds {
  double explode_factor = 10.0;    // mean |z| above this multiple of step 0
  double collapse_fraction = 0.05; // final-window mean |z| below this fraction of step 0
  double final_window = 0.1;       // trailing fraction of steps
};

struct TrainConfig {
  std::uint64_t seed = 0;
  int steps = 5000;
  int batch_pairs = 64;
  int batch_triples = 64;
  double base_lr = 3e-4;
  int warmup_steps = 200;
  double clip_norm = 1.0;
  lam::LossWeights weights;
  AcForm ac_form = AcForm::kFdm;
  Placement vq_placement = Placement::kPostVq;
  int eval_every = 500;
  /// Codebook rows unused this many consecutive steps are re-seeded; 0 disables.
  int dead_code_steps = 500;
  double holdout_fraction = 0.2;
  sampling::SampleSpec sampling;
  StabilityThresholds stability;
  lam::ModelConfig model;

  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& cfg);
/// Inverse of to_json; missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);

double lr_at(int step, const TrainConfig& cfg);

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Scales every gradient by max_norm / |g| when the global L2 norm exceeds
/// max_norm. Returns the factor applied. Throws NonFiniteError on NaN/inf.
double clip_grad_norm(std::vector<ad::Tensor<float>>& params, double max_norm);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptState {
  std::vector<std::vector<T>> m, v;
  long long step = 0;

  static OptState for_params(const std::vector<ad::Tensor<T>>& params);
};

/// One bias-corrected Adam update using each parameter's accumulated gradient.
template <typename T>
void adam_step(std::vector<ad::Tensor<T>>& params, OptState<T>& state, double lr,
               const AdamConfig& cfg = {});

enum class Stability { kStable, kCollapse, kExplode };
std::string to_string(Stability s);
Stability parse_stability(const std::string& s);

struct StepRecord {
  int step = 0;
  double loss_total = 0, loss_rec = 0, loss_vq = 0, loss_ac = 0, loss_proprio = 0;
  double mean_z_norm = 0;
  double lr = 0;
};

struct StepLog {
  std::vector<StepRecord> records;
  Stability status = Stability::kStable;
};

std::string encode_step_log(const StepLog& log);
void write_step_log(const StepLog& log, const std::string& path);
/// Parses the CSV written by write_step_log (footer included).
StepLog parse_step_log(const std::string& text);
StepLog read_step_log(const std::string& path);

/// Throws std::invalid_argument on an empty log.
Stability classify_stability(const std::vector<StepRecord>& records,
                             const StabilityThresholds& th = {});

/// Pair and triple batches drawn from the listed trajectories: a trajectory is
/// chosen uniformly, then indices within it.
struct Batches {
  lam::PairBatch<float> pairs;
  lam::TripleBatch<float> triples;
};
Batches sample_batches(const world::Dataset& ds, const std::vector<std::size_t>& trajs,
                       const TrainConfig& cfg, Rng& rng);

struct Checkpoint {
  ModelParams<float> params;
  nlohmann::ordered_json config_snapshot;
};

std::vector<char> encode_checkpoint(const ModelParams<float>& params,
                                    const nlohmann::ordered_json& config_snapshot);
void save_checkpoint(const ModelParams<float>& params, const nlohmann::ordered_json& config_snapshot,
                     const std::string& path);
/// Shapes are rebuilt from the snapshot's model section. When `expected` is
/// given, arrays must match its shapes (CheckpointMismatchError otherwise).
Checkpoint decode_checkpoint(const std::vector<char>& bytes,
                             const std::optional<lam::ModelConfig>& expected = std::nullopt);
Checkpoint load_checkpoint(const std::string& path,
                           const std::optional<lam::ModelConfig>& expected = std::nullopt);

struct TrainOutputs {
  std::string checkpoint_path;  // empty: no checkpoint files
  std::string step_log_path;    // empty: log kept in memory only
};

struct TrainResult {
  ModelParams<float> params;
  StepLog log;
  bool aborted = false;  // stopped early on a non-finite loss or gradient
};

/// Trains on the non-held-out trajectories of `ds`.
TrainResult train(const world::Dataset& ds, const TrainConfig& cfg, const TrainOutputs& out = {},
                  const std::function<void(const StepRecord&)>& on_step = {});

}  // namespace aclam::train
