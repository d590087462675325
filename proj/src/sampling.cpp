#include "aclam/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace aclam::sampling {

namespace {

int ends_after(int i, int length, int horizon) { return std::min(horizon, length - 1 - i); }

constexpr int kAcceptTries = 100000;

}  // namespace

void SampleSpec::validate() const {
  if (horizon < 2) {
    throw std::invalid_argument("horizon must be >= 2, got " + std::to_string(horizon));
  }
  if (n_buckets < 2) {
    throw std::invalid_argument("n_buckets must be >= 2, got " + std::to_string(n_buckets));
  }
}

Pair sample_pair(int length, const SampleSpec& spec, Rng& rng) {
  spec.validate();
  if (length < 2) {
    throw std::invalid_argument("sample_pair: trajectory of length " + std::to_string(length));
  }
  const int i = static_cast<int>(rng.below(static_cast<std::uint64_t>(length - 1)));
  const int j = i + 1 + static_cast<int>(rng.below(
                            static_cast<std::uint64_t>(ends_after(i, length, spec.horizon))));
  return {i, j};
}

Pair sample_pair(const world::Trajectory& traj, const SampleSpec& spec, Rng& rng) {
  return sample_pair(traj.length(), spec, rng);
}

Triple sample_triple(int length, const SampleSpec& spec, Rng& rng) {
  spec.validate();
  if (length < 3) {
    throw std::invalid_argument("sample_triple: trajectory of length " + std::to_string(length));
  }
  // P(i, k) from sample_pair is 1 / ((T - 1) * ends(i)), and each (i, k) carries
  // k - i - 1 triples, so accepting with weight (k - i - 1) * ends(i) flattens
  // the distribution over triples.
  const int h = std::min(spec.horizon, length - 1);
  const double max_weight = static_cast<double>(h - 1) * h;
  for (int attempt = 0; attempt < kAcceptTries; ++attempt) {
    const Pair p = sample_pair(length, spec, rng);
    const int gap = p.j - p.i;
    if (gap < 2) {
      continue;
    }
    const double weight = static_cast<double>(gap - 1) * ends_after(p.i, length, spec.horizon);
    if (rng.uniform() * max_weight < weight) {
      const int j = p.i + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(gap - 1)));
      return {p.i, j, p.j};
    }
  }
  throw std::runtime_error("sample_triple: acceptance loop did not terminate");
}

Triple sample_triple(const world::Trajectory& traj, const SampleSpec& spec, Rng& rng) {
  return sample_triple(traj.length(), spec, rng);
}

bool rotation_filter(const Triple& triple, double threshold, const HeadingFn& heading) {
  if (!heading) {
    return true;
  }
  double turned = 0;
  for (int t = triple.i; t < triple.k; ++t) {
    double d = heading(t + 1) - heading(t);
    d = std::remainder(d, 2 * M_PI);
    turned += std::abs(d);
  }
  return turned <= threshold;
}

bool rotation_filter(const world::Trajectory&, const Triple& triple, double threshold) {
  return rotation_filter(triple, threshold, {});
}

int bucket_of(double magnitude, double lo, double hi, int n_buckets) {
  if (!(hi > lo)) {
    return 0;
  }
  const int b = static_cast<int>(std::floor((magnitude - lo) / (hi - lo) * n_buckets));
  return std::clamp(b, 0, n_buckets - 1);
}

StratifiedSample stratified_pairs(std::span<const Candidate> candidates, int n,
                                  const SampleSpec& spec, Rng& rng) {
  spec.validate();
  if (candidates.empty()) {
    throw std::invalid_argument("stratified_pairs: no candidates");
  }
  if (n < spec.n_buckets) {
    throw std::invalid_argument("stratified_pairs: n must be >= n_buckets");
  }
  const auto [lo_it, hi_it] = std::minmax_element(
      candidates.begin(), candidates.end(),
      [](const Candidate& a, const Candidate& b) { return a.magnitude < b.magnitude; });
  const double lo = lo_it->magnitude, hi = hi_it->magnitude;
  const int nb = spec.n_buckets;

  StratifiedSample out;
  for (int b = 0; b <= nb; ++b) {
    out.edges.push_back(lo + (hi - lo) * b / nb);
  }

  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(nb));
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    members[static_cast<std::size_t>(bucket_of(candidates[c].magnitude, lo, hi, nb))].push_back(c);
  }
  const auto populated = std::count_if(members.begin(), members.end(),
                                       [](const auto& m) { return !m.empty(); });

  // Partial Fisher-Yates: the first `take` entries become a uniform draw
  // without replacement.
  auto draw = [&](std::vector<std::size_t>& pool, std::size_t take, int bucket) {
    take = std::min(take, pool.size());
    for (std::size_t t = 0; t < take; ++t) {
      const std::size_t r = t + static_cast<std::size_t>(rng.below(pool.size() - t));
      std::swap(pool[t], pool[r]);
      out.pairs.push_back(candidates[pool[t]].pair);
      out.buckets.push_back(bucket);
    }
  };

  if (populated <= 1) {
    out.degenerate = true;
    std::vector<std::size_t> all(candidates.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    draw(all, static_cast<std::size_t>(n), -1);
    return out;
  }
  const auto per_bucket = static_cast<std::size_t>((n + nb - 1) / nb);
  for (int b = 0; b < nb; ++b) {
    draw(members[static_cast<std::size_t>(b)], per_bucket, b);
  }
  return out;
}

std::vector<Candidate> horizon_candidates(const world::Dataset& ds, const SampleSpec& spec,
                                          std::span<const std::size_t> trajs) {
  std::vector<std::size_t> ids(trajs.begin(), trajs.end());
  if (ids.empty()) {
    ids.resize(ds.trajectories.size());
    std::iota(ids.begin(), ids.end(), std::size_t{0});
  }
  std::vector<Candidate> out;
  for (std::size_t id : ids) {
    const auto& st = ds.trajectories.at(id).states;
    const int len = static_cast<int>(st.size());
    for (int i = 0; i < len; ++i) {
      for (int j = i + 1; j < len && j - i <= spec.horizon; ++j) {
        const double dx = static_cast<double>(st[j].p[0]) - st[i].p[0];
        const double dy = static_cast<double>(st[j].p[1]) - st[i].p[1];
        out.push_back({{id, i, j}, std::hypot(dx, dy)});
      }
    }
  }
  return out;
}

StratifiedSample stratified_pairs_by_magnitude(const world::Dataset& ds, int n,
                                               const SampleSpec& spec, Rng& rng,
                                               std::span<const std::size_t> trajs) {
  if (ds.trajectories.empty()) {
    throw std::invalid_argument("stratified_pairs_by_magnitude: empty dataset");
  }
  const auto candidates = horizon_candidates(ds, spec, trajs);
  return stratified_pairs(candidates, n, spec, rng);
}

}  // namespace aclam::sampling
