#pragma once

// Structured-latent evaluation: composition, identity, inverse and cycle
// residuals, displacement correlation, probes, norm traces and motion transfer.
//
// Each metric has a "core" overload over explicit latent vectors, used by the
// sampling front ends and tested against naive references.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aclam/model.hpp"
#include "aclam/rng.hpp"
#include "aclam/sampling.hpp"
#include "aclam/synthworld.hpp"

namespace aclam::metrics {

using Vec = std::vector<double>;

/// A metric value, or the reason it has none.
struct Value {
  enum class Kind { kOk, kDegenerate, kUndefined };
  Kind kind = Kind::kOk;
  double value = 0;

  static Value ok(double v) { return {Kind::kOk, v}; }
  static Value degenerate() { return {Kind::kDegenerate, 0}; }
  static Value undefined() { return {Kind::kUndefined, 0}; }
  bool is_ok() const { return kind == Kind::kOk; }
};

struct PairQuery {
  std::size_t traj = 0;
  int i = 0, j = 0;
};

/// Latents for a batch of (trajectory, i, j) queries.
struct LatentFn {
  int dim = 0;
  std::function<std::vector<Vec>(std::span<const PairQuery>)> fn;

  std::vector<Vec> operator()(std::span<const PairQuery> q) const { return fn(q); }
};

/// z = s_j - s_i from the recorded states.
LatentFn oracle_latents(const world::Dataset& ds);
/// Trained model latents at the given placement, evaluated in batches.
LatentFn model_latents(const lam::ModelParams<float>& params, const world::Dataset& ds,
                       lam::Placement placement, std::size_t batch = 256);

double sq_norm(const Vec& v);
double norm(const Vec& v);

// ---- core computations over explicit latents ----

/// mean |z_ik - z_ij - z_jk|^2 / mean over {z_ij, z_jk, z_ik} of |z|^2.
Value norm_ac(const std::vector<Vec>& z_ij, const std::vector<Vec>& z_jk,
              const std::vector<Vec>& z_ik);
/// mean |z_ii| / mean |z_ij|.
Value norm_identity(const std::vector<Vec>& z_ii, const std::vector<Vec>& z_ij);
/// mean |z_ij + z_ji| / mean |z_ij|.
Value delta_inv(const std::vector<Vec>& z_ij, const std::vector<Vec>& z_ji);
/// Each cycle lists its edge latents in order; mean |sum of edges| / mean |edge|.
Value cycle_residual(const std::vector<std::vector<Vec>>& cycles);
/// Pearson correlation; undefined when either series has zero variance.
Value pearson(const std::vector<double>& x, const std::vector<double>& y);

/// Linear-interpolated percentile (q in [0, 100]) of an unsorted sample.
double percentile(std::vector<double> v, double q);
/// Maps each value to (v - p1) / (p99 - p1) clipped to [0, 1], percentiles
/// taken over the sample itself.
std::vector<double> percentile_rescale(const std::vector<double>& v);

// ---- sampling front ends ----

struct EvalSpec {
  sampling::SampleSpec sampling;
  int n = 4096;        // instances per metric
  int cycle_len = 3;   // frames (and edges) per cycle
  int probe_per_env = 512;
  int probe_iters = 500;
  double probe_lr = 0.5;
  double probe_test_fraction = 0.2;
};

/// `trajs` restricts sampling to those trajectories (all when empty).
Value norm_ac(const LatentFn& f, const world::Dataset& ds, std::span<const std::size_t> trajs,
              const EvalSpec& spec, Rng& rng);
/// Pearson r between |z| and |s_j - s_i|, both percentile-rescaled.
Value displacement_corr(const LatentFn& f, const world::Dataset& ds,
                        std::span<const std::size_t> trajs, const EvalSpec& spec, Rng& rng);
Value norm_identity(const LatentFn& f, const world::Dataset& ds,
                    std::span<const std::size_t> trajs, const EvalSpec& spec, Rng& rng);
Value delta_inv(const LatentFn& f, const world::Dataset& ds, std::span<const std::size_t> trajs,
                const EvalSpec& spec, Rng& rng);
Value cycle_residual(const LatentFn& f, const world::Dataset& ds,
                     std::span<const std::size_t> trajs, const EvalSpec& spec, Rng& rng);

// ---- probes ----

struct ProbeDataset {
  std::vector<Vec> latents;
  std::vector<int> env_labels;
  std::vector<Vec> start_states;  // s_i
  std::vector<Vec> goal_states;   // s_j
};

/// probe_per_env random within-horizon pairs from each environment.
ProbeDataset build_probe_dataset(const LatentFn& f, const world::Dataset& ds,
                                 std::span<const std::size_t> trajs, const EvalSpec& spec, Rng& rng);

/// Seeded split stratified by label: `test_fraction` of each class is held out.
struct Split {
  std::vector<std::size_t> train, test;
};
Split stratified_split(const std::vector<int>& labels, double test_fraction, Rng& rng);

/// Multinomial logistic regression, standardized features, zero init,
/// full-batch gradient descent. Returns held-out accuracy.
/// Throws std::invalid_argument when a class has fewer than 5 samples.
double logistic_probe(const std::vector<Vec>& x, const std::vector<int>& labels,
                      const EvalSpec& spec, Rng& rng);

/// Least squares with intercept. Falls back to ridge (1e-6) on a singular
/// normal matrix and reports it through `ridge`.
struct LinearFit {
  std::vector<Vec> coef;  // [features + 1][targets], intercept first
  bool ridge = false;
  Vec predict(const Vec& x) const;
};
LinearFit fit_linear(const std::vector<Vec>& x, const std::vector<Vec>& y);

struct GoalProbe {
  double r2 = 0;
  bool ridge = false;
};
/// Goal content of z beyond motion: predict the displacement from z, remove
/// what that prediction explains of s_j, then report held-out R^2 (clamped
/// at 0) of predicting the remainder from z.
GoalProbe goal_probe(const std::vector<Vec>& z, const std::vector<Vec>& s_i,
                     const std::vector<Vec>& s_j, const EvalSpec& spec, Rng& rng);

// ---- traces and transfer ----

struct NormTracePoint {
  int t = 0;
  double z_norm = 0, z_norm_normalized = 0, ds_norm = 0, ds_norm_normalized = 0;
};
struct NormTrace {
  std::vector<NormTracePoint> points;
  bool degenerate = false;  // all latent norms zero
};
NormTrace norm_trajectory(const LatentFn& f, const world::Dataset& ds, std::size_t traj);
std::string encode_norm_trace_csv(const NormTrace& trace);

struct Transfer {
  std::vector<float> direct;    // F(o'_i, z_ik)
  std::vector<float> composed;  // F(o'_i, z_ij + z_jk)
  double mse = 0;
};
Transfer motion_transfer(const lam::ModelParams<float>& params, lam::Placement placement,
                         const world::Trajectory& src, const sampling::Triple& triple,
                         std::span<const float> target_frame);

/// A source triple applied to a frame of another trajectory.
struct TransferCase {
  std::size_t src = 0;
  sampling::Triple triple;
  std::size_t target = 0;
  int target_frame = 0;
};
/// Targets come from another environment when the listed trajectories span
/// more than one, otherwise from another trajectory. Needs two trajectories.
std::vector<TransferCase> sample_transfer_cases(const world::Dataset& ds,
                                                std::span<const std::size_t> trajs,
                                                const sampling::SampleSpec& spec, int n, Rng& rng);
Transfer motion_transfer(const lam::ModelParams<float>& params, lam::Placement placement,
                         const world::Dataset& ds, const TransferCase& c);

/// 8-bit binary PPM of an [h x w x 3] image in [0, 1].
std::string encode_ppm(std::span<const float> rgb, int h, int w);
void write_ppm(const std::string& path, std::span<const float> rgb, int h, int w);
void write_raw_f32(const std::string& path, std::span<const float> values);

// ---- report ----

struct MetricsReport {
  Value norm_ac, pearson_r, norm_identity, delta_inv, cycle_residual, env_probe_acc, goal_probe_r2;
  int n_instances = 0;
  std::uint64_t seed = 0;
  lam::Placement placement = lam::Placement::kPostVq;
};

/// Key order is fixed; non-ok values are written as "degenerate" or "undefined".
nlohmann::ordered_json to_json(const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& j);

/// Runs every metric on the listed trajectories with independent derived streams.
MetricsReport evaluate(const LatentFn& f, const world::Dataset& ds,
                       std::span<const std::size_t> trajs, const EvalSpec& spec, std::uint64_t seed,
                       lam::Placement placement);

}  // namespace aclam::metrics
