#pragma once

// Index samplers over single trajectories, plus the magnitude-stratified pair
// sampler used for displacement correlation.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "aclam/rng.hpp"
#include "aclam/synthworld.hpp"

namespace aclam::sampling {

struct SampleSpec {
  int horizon = 10;  // max index span k - i
  int n_buckets = 8;
  double rotation_threshold = 0.5;  // radians; only meaningful for worlds with heading

  void validate() const;
};

struct Pair {
  int i = 0, j = 0;
  bool operator==(const Pair&) const = default;
};

struct Triple {
  int i = 0, j = 0, k = 0;
  bool operator==(const Triple&) const = default;
};

/// i uniform over valid starts, then j uniform over i < j <= min(i + H, T - 1).
/// Throws std::invalid_argument when T < 2.
Pair sample_pair(int length, const SampleSpec& spec, Rng& rng);
Pair sample_pair(const world::Trajectory& traj, const SampleSpec& spec, Rng& rng);

/// Uniform over all i < j < k with k - i <= H. Draws (i, k) from sample_pair,
/// accepts with probability proportional to how under-represented that pair
/// is, then draws j strictly between. Throws std::invalid_argument when T < 3.
Triple sample_triple(int length, const SampleSpec& spec, Rng& rng);
Triple sample_triple(const world::Trajectory& traj, const SampleSpec& spec, Rng& rng);

/// Heading of the agent at time t, for worlds that have one.
using HeadingFn = std::function<double(int t)>;

/// Keep the triple unless the summed absolute heading change over [i, k]
/// exceeds the threshold. With no heading (translation-only world) every
/// triple is kept.
bool rotation_filter(const Triple& triple, double threshold, const HeadingFn& heading = {});
bool rotation_filter(const world::Trajectory& traj, const Triple& triple, double threshold);

struct PairRef {
  std::size_t traj = 0;
  int i = 0, j = 0;
  bool operator==(const PairRef&) const = default;
};

struct Candidate {
  PairRef pair;
  double magnitude = 0;  // |s_j - s_i|
};

struct StratifiedSample {
  std::vector<PairRef> pairs;
  std::vector<int> buckets;   // bucket of each pair, -1 when degenerate
  std::vector<double> edges;  // n_buckets + 1 boundaries
  /// All candidates fell into one bucket; pairs were drawn without stratification.
  bool degenerate = false;
};

/// Bucket of a magnitude for equal-width bins over [lo, hi]; the top edge is
/// included in the last bucket.
int bucket_of(double magnitude, double lo, double hi, int n_buckets);

/// Draws ceil(n / n_buckets) candidates per equal-width magnitude bucket,
/// without replacement; an exhausted bucket contributes what it has.
StratifiedSample stratified_pairs(std::span<const Candidate> candidates, int n,
                                  const SampleSpec& spec, Rng& rng);

/// Every within-horizon pair of the listed trajectories (all trajectories when
/// `trajs` is empty).
std::vector<Candidate> horizon_candidates(const world::Dataset& ds, const SampleSpec& spec,
                                          std::span<const std::size_t> trajs = {});

StratifiedSample stratified_pairs_by_magnitude(const world::Dataset& ds, int n,
                                               const SampleSpec& spec, Rng& rng,
                                               std::span<const std::size_t> trajs = {});

}  // namespace aclam::sampling
