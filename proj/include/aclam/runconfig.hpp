#pragma once

// Flat `key = value` run configuration shared by every CLI command.
// Lines starting with '#' are comments. Unknown keys are rejected.

#include <cstdint>
#include <string>
#include <vector>

#include "aclam/metrics.hpp"
#include "aclam/synthworld.hpp"
#include "aclam/training.hpp"

namespace aclam::run {

struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 0;
  std::string out_dir = ".";

  world::DatasetConfig data;
  train::TrainConfig train;
  metrics::EvalSpec eval;
  lam::Placement placement = lam::Placement::kPostVq;  // latents used by eval/probe
  int norm_traj_count = 3;
  int transfer_count = 5;

  RunConfig();
  /// Throws ConfigError naming the first bad key.
  void validate() const;
};

/// Every accepted key, in the order they are written.
const std::vector<std::string>& keys();

/// Sets one key from its text value. Throws ConfigError for unknown keys or
/// unparsable values.
void set(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get(const RunConfig& cfg, const std::string& key);

void apply_text(RunConfig& cfg, const std::string& text);
void apply_file(RunConfig& cfg, const std::string& path);

/// The fully resolved configuration, one `key = value` line per key.
std::string encode(const RunConfig& cfg);

}  // namespace aclam::run
