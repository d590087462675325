#pragma once

// Design grid over loss form, VQ placement and the lambda_ac = 0 control.
// Every cell trains single-threaded and is evaluated on held-out trajectories
// when it finishes stable.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "aclam/metrics.hpp"
#include "aclam/training.hpp"

namespace aclam::ablation {

struct Design {
  std::string name;
  lam::AcForm form = lam::AcForm::kFdm;
  lam::Placement placement = lam::Placement::kPostVq;
  double lambda_ac = 1.0;
};

/// fdm-post (the default), fdm-pre, idm-no-sg, idm-sg-zik, idm-sg-sum, no-ac.
const std::vector<Design>& designs();
const Design& design(const std::string& name);

/// `base` with the design's form, placement and lambda applied.
train::TrainConfig apply(const train::TrainConfig& base, const Design& d, std::uint64_t seed);

struct Cell {
  std::string design;
  std::uint64_t seed = 0;
  train::Stability stability = train::Stability::kStable;
  bool evaluated = false;
  metrics::MetricsReport report;
  lam::ModelParams<float> params;
};

Cell run_cell(const world::Dataset& ds, const train::TrainConfig& base, const metrics::EvalSpec& spec,
              const Design& d, std::uint64_t seed, std::uint64_t eval_seed);

std::vector<Cell> run_grid(const world::Dataset& ds, const train::TrainConfig& base,
                           const metrics::EvalSpec& spec, const std::vector<std::uint64_t>& seeds,
                           std::uint64_t eval_seed,
                           const std::function<void(const Cell&)>& on_cell = {});

/// Median over evaluated cells with an ok value; nullopt when there are none.
std::optional<double> median_of(const std::vector<Cell>& cells, const std::string& design,
                                metrics::Value metrics::MetricsReport::*field);

/// Columns design,seed,norm_ac,pearson_r,stability; one row per cell, then one
/// `median` row per design. Unevaluated metrics are written as "undefined".
std::string encode_csv(const std::vector<Cell>& cells);

}  // namespace aclam::ablation
