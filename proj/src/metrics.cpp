#include "aclam/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "aclam/errors.hpp"
#include "binary_io.hpp"

namespace aclam::metrics {

namespace {

std::vector<std::size_t> resolve(const world::Dataset& ds, std::span<const std::size_t> trajs) {
  if (!trajs.empty()) {
    return {trajs.begin(), trajs.end()};
  }
  std::vector<std::size_t> all(ds.trajectories.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return all;
}

std::size_t pick(const std::vector<std::size_t>& ids, Rng& rng) {
  if (ids.empty()) {
    throw std::invalid_argument("metrics: no trajectories to sample from");
  }
  return ids[static_cast<std::size_t>(rng.below(ids.size()))];
}

Vec state(const world::Trajectory& t, int idx) {
  const auto& p = t.states[static_cast<std::size_t>(idx)].p;
  return {static_cast<double>(p[0]), static_cast<double>(p[1])};
}

Vec displacement(const world::Trajectory& t, int i, int j) {
  const Vec a = state(t, i), b = state(t, j);
  return {b[0] - a[0], b[1] - a[1]};
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) {
    s += x;
  }
  return v.empty() ? 0 : s / static_cast<double>(v.size());
}

// Solves a symmetric positive (semi)definite system by Gaussian elimination
// with partial pivoting. Returns false on a (near-)singular matrix.
bool solve(std::vector<Vec> a, std::vector<Vec> b, std::vector<Vec>& x) {
  const std::size_t n = a.size();
  const std::size_t m = b.front().size();
  double scale = 0;
  for (std::size_t r = 0; r < n; ++r) {
    scale = std::max(scale, std::abs(a[r][r]));
  }
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r) {
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) {
        piv = r;
      }
    }
    if (std::abs(a[piv][c]) <= 1e-12 * std::max(scale, 1.0)) {
      return false;
    }
    std::swap(a[c], a[piv]);
    std::swap(b[c], b[piv]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < n; ++k) {
        a[r][k] -= f * a[c][k];
      }
      for (std::size_t k = 0; k < m; ++k) {
        b[r][k] -= f * b[c][k];
      }
    }
  }
  x.assign(n, Vec(m, 0.0));
  for (std::size_t r = n; r-- > 0;) {
    for (std::size_t k = 0; k < m; ++k) {
      double s = b[r][k];
      for (std::size_t c = r + 1; c < n; ++c) {
        s -= a[r][c] * x[c][k];
      }
      x[r][k] = s / a[r][r];
    }
  }
  return true;
}

template <typename Pred>
double r2_score(const std::vector<Vec>& y, const std::vector<std::size_t>& rows, Pred predict) {
  const std::size_t d = y.front().size();
  Vec mu(d, 0.0);
  for (std::size_t r : rows) {
    for (std::size_t k = 0; k < d; ++k) {
      mu[k] += y[r][k] / static_cast<double>(rows.size());
    }
  }
  double sse = 0, sst = 0;
  for (std::size_t r : rows) {
    const Vec p = predict(r);
    for (std::size_t k = 0; k < d; ++k) {
      sse += (y[r][k] - p[k]) * (y[r][k] - p[k]);
      sst += (y[r][k] - mu[k]) * (y[r][k] - mu[k]);
    }
  }
  if (sst <= 0) {
    return 0;
  }
  return 1 - sse / sst;
}

std::vector<Vec> subset(const std::vector<Vec>& v, const std::vector<std::size_t>& rows) {
  std::vector<Vec> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) {
    out.push_back(v[r]);
  }
  return out;
}

nlohmann::ordered_json value_json(const Value& v) {
  switch (v.kind) {
    case Value::Kind::kOk: return v.value;
    case Value::Kind::kDegenerate: return "degenerate";
    case Value::Kind::kUndefined: return "undefined";
  }
  return nullptr;
}

Value value_from_json(const nlohmann::json& j) {
  if (j.is_number()) {
    return Value::ok(j.get<double>());
  }
  const auto s = j.get<std::string>();
  if (s == "degenerate") {
    return Value::degenerate();
  }
  if (s == "undefined") {
    return Value::undefined();
  }
  throw FormatError("report: unknown sentinel '" + s + "'");
}

}  // namespace

LatentFn oracle_latents(const world::Dataset& ds) {
  return {2, [&ds](std::span<const PairQuery> qs) {
            std::vector<Vec> out;
            out.reserve(qs.size());
            for (const auto& q : qs) {
              out.push_back(displacement(ds.trajectories.at(q.traj), q.i, q.j));
            }
            return out;
          }};
}

LatentFn model_latents(const lam::ModelParams<float>& params, const world::Dataset& ds,
                       lam::Placement placement, std::size_t batch) {
  return {params.config.latent_dim(), [&params, &ds, placement, batch](std::span<const PairQuery> qs) {
            std::vector<Vec> out;
            out.reserve(qs.size());
            const auto fs = static_cast<std::size_t>(params.config.image_dim());
            for (std::size_t start = 0; start < qs.size(); start += batch) {
              const std::size_t b = std::min(batch, qs.size() - start);
              std::vector<float> oi, oj;
              oi.reserve(b * fs);
              oj.reserve(b * fs);
              for (std::size_t n = 0; n < b; ++n) {
                const auto& q = qs[start + n];
                const auto& t = ds.trajectories.at(q.traj);
                if (t.frame_size() != fs) {
                  throw ConfigError("model.image_h", "dataset frames do not match the model");
                }
                const auto fi = t.frame(q.i), fj = t.frame(q.j);
                oi.insert(oi.end(), fi.begin(), fi.end());
                oj.insert(oj.end(), fj.begin(), fj.end());
              }
              const auto z = lam::latent(params, ad::Tensor<float>::from({b, fs}, std::move(oi)),
                                         ad::Tensor<float>::from({b, fs}, std::move(oj)), placement);
              const std::size_t d = z.dim(1);
              for (std::size_t n = 0; n < b; ++n) {
                out.emplace_back(z.data().begin() + static_cast<long>(n * d),
                                 z.data().begin() + static_cast<long>((n + 1) * d));
              }
            }
            return out;
          }};
}

double sq_norm(const Vec& v) {
  double s = 0;
  for (double x : v) {
    s += x * x;
  }
  return s;
}

double norm(const Vec& v) { return std::sqrt(sq_norm(v)); }

Value norm_ac(const std::vector<Vec>& z_ij, const std::vector<Vec>& z_jk,
              const std::vector<Vec>& z_ik) {
  if (z_ij.empty() || z_ij.size() != z_jk.size() || z_ij.size() != z_ik.size()) {
    throw std::invalid_argument("norm_ac: need equal, non-empty latent lists");
  }
  double num = 0, den = 0;
  for (std::size_t n = 0; n < z_ij.size(); ++n) {
    Vec r = z_ik[n];
    for (std::size_t k = 0; k < r.size(); ++k) {
      r[k] -= z_ij[n][k] + z_jk[n][k];
    }
    num += sq_norm(r);
    den += sq_norm(z_ij[n]) + sq_norm(z_jk[n]) + sq_norm(z_ik[n]);
  }
  num /= static_cast<double>(z_ij.size());
  den /= static_cast<double>(3 * z_ij.size());
  if (!(den > 0)) {
    return Value::degenerate();
  }
  return Value::ok(num / den);
}

Value norm_identity(const std::vector<Vec>& z_ii, const std::vector<Vec>& z_ij) {
  if (z_ii.empty() || z_ij.empty()) {
    throw std::invalid_argument("norm_identity: empty latent list");
  }
  double num = 0, den = 0;
  for (const auto& z : z_ii) {
    num += norm(z);
  }
  for (const auto& z : z_ij) {
    den += norm(z);
  }
  num /= static_cast<double>(z_ii.size());
  den /= static_cast<double>(z_ij.size());
  if (!(den > 0)) {
    return Value::degenerate();
  }
  return Value::ok(num / den);
}

Value delta_inv(const std::vector<Vec>& z_ij, const std::vector<Vec>& z_ji) {
  if (z_ij.empty() || z_ij.size() != z_ji.size()) {
    throw std::invalid_argument("delta_inv: need equal, non-empty latent lists");
  }
  double num = 0, den = 0;
  for (std::size_t n = 0; n < z_ij.size(); ++n) {
    Vec s = z_ij[n];
    for (std::size_t k = 0; k < s.size(); ++k) {
      s[k] += z_ji[n][k];
    }
    num += norm(s);
    den += norm(z_ij[n]);
  }
  if (!(den > 0)) {
    return Value::degenerate();
  }
  return Value::ok(num / den);
}

Value cycle_residual(const std::vector<std::vector<Vec>>& cycles) {
  if (cycles.empty()) {
    throw std::invalid_argument("cycle_residual: no cycles");
  }
  double num = 0, den = 0;
  std::size_t edges = 0;
  for (const auto& cyc : cycles) {
    Vec s(cyc.front().size(), 0.0);
    for (const auto& z : cyc) {
      for (std::size_t k = 0; k < s.size(); ++k) {
        s[k] += z[k];
      }
      den += norm(z);
      ++edges;
    }
    num += norm(s);
  }
  num /= static_cast<double>(cycles.size());
  den /= static_cast<double>(edges);
  if (!(den > 0)) {
    return Value::degenerate();
  }
  return Value::ok(num / den);
}

Value pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("pearson: need two equal series of length >= 2");
  }
  const double mx = mean(x), my = mean(y);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t n = 0; n < x.size(); ++n) {
    sxy += (x[n] - mx) * (y[n] - my);
    sxx += (x[n] - mx) * (x[n] - mx);
    syy += (y[n] - my) * (y[n] - my);
  }
  if (!(sxx > 0) || !(syy > 0)) {
    return Value::undefined();
  }
  return Value::ok(std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0));
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) {
    throw std::invalid_argument("percentile of an empty sample");
  }
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::vector<double> percentile_rescale(const std::vector<double>& v) {
  const double lo = percentile(v, 1), hi = percentile(v, 99);
  std::vector<double> out;
  out.reserve(v.size());
  for (double x : v) {
    out.push_back(hi > lo ? std::clamp((x - lo) / (hi - lo), 0.0, 1.0) : 0.0);
  }
  return out;
}

Value norm_ac(const LatentFn& f, const world::Dataset& ds, std::span<const std::size_t> trajs,
              const EvalSpec& spec, Rng& rng) {
  const auto ids = resolve(ds, trajs);
  std::vector<PairQuery> ij, jk, ik;
  for (int n = 0; n < spec.n; ++n) {
    const std::size_t t = pick(ids, rng);
    const auto tr = sampling::sample_triple(ds.trajectories[t], spec.sampling, rng);
    ij.push_back({t, tr.i, tr.j});
    jk.push_back({t, tr.j, tr.k});
    ik.push_back({t, tr.i, tr.k});
  }
  return norm_ac(f(ij), f(jk), f(ik));
}

Value displacement_corr(const LatentFn& f, const world::Dataset& ds,
                        std::span<const std::size_t> trajs, const EvalSpec& spec, Rng& rng) {
  if (spec.n < 3) {
    throw std::invalid_argument("displacement_corr: need n >= 3");
  }
  const auto ids = resolve(ds, trajs);
  const auto candidates = sampling::horizon_candidates(ds, spec.sampling, ids);
  const auto sample = sampling::stratified_pairs(candidates, std::max(spec.n, spec.sampling.n_buckets),
                                                 spec.sampling, rng);
  std::vector<PairQuery> qs;
  std::vector<double> mags;
  for (const auto& p : sample.pairs) {
    qs.push_back({p.traj, p.i, p.j});
    mags.push_back(norm(displacement(ds.trajectories[p.traj], p.i, p.j)));
  }
  mags = percentile_rescale(mags);
  const auto z = f(qs);
  std::vector<double> zn;
  zn.reserve(z.size());
  for (const auto& v : z) {
    zn.push_back(norm(v));
  }
  return pearson(percentile_rescale(zn), mags);
}

Value norm_identity(const LatentFn& f, const world::Dataset& ds,
                    std::span<const std::size_t> trajs, const EvalSpec& spec, Rng& rng) {
  const auto ids = resolve(ds, trajs);
  std::vector<PairQuery> same, pairs;
  for (int n = 0; n < spec.n; ++n) {
    const std::size_t t = pick(ids, rng);
    const int i = static_cast<int>(rng.below(static_cast<std::uint64_t>(ds.trajectories[t].length())));
    same.push_back({t, i, i});
  }
  for (int n = 0; n < spec.n; ++n) {
    const std::size_t t = pick(ids, rng);
    const auto p = sampling::sample_pair(ds.trajectories[t], spec.sampling, rng);
    pairs.push_back({t, p.i, p.j});
  }
  return norm_identity(f(same), f(pairs));
}

Value delta_inv(const LatentFn& f, const world::Dataset& ds, std::span<const std::size_t> trajs,
                const EvalSpec& spec, Rng& rng) {
  const auto ids = resolve(ds, trajs);
  std::vector<PairQuery> fwd, back;
  for (int n = 0; n < spec.n; ++n) {
    const std::size_t t = pick(ids, rng);
    const auto p = sampling::sample_pair(ds.trajectories[t], spec.sampling, rng);
    fwd.push_back({t, p.i, p.j});
    back.push_back({t, p.j, p.i});
  }
  return delta_inv(f(fwd), f(back));
}

Value cycle_residual(const LatentFn& f, const world::Dataset& ds,
                     std::span<const std::size_t> trajs, const EvalSpec& spec, Rng& rng) {
  const int m = spec.cycle_len;
  if (m < 3) {
    throw std::invalid_argument("cycle_residual: cycle length must be >= 3");
  }
  if (spec.sampling.horizon < m - 1) {
    throw std::invalid_argument("cycle_residual: horizon too short for the cycle length");
  }
  const auto ids = resolve(ds, trajs);
  std::vector<PairQuery> edges;
  for (int n = 0; n < spec.n; ++n) {
    const std::size_t t = pick(ids, rng);
    const int len = ds.trajectories[t].length();
    if (len < m) {
      throw std::invalid_argument("cycle_residual: trajectory shorter than the cycle");
    }
    // Start frame plus m - 1 distinct later frames within the horizon.
    std::vector<int> frames;
    for (;;) {
      const int i0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(len)));
      const int last = std::min(i0 + spec.sampling.horizon, len - 1);
      if (last - i0 < m - 1) {
        continue;
      }
      std::vector<int> pool;
      for (int x = i0 + 1; x <= last; ++x) {
        pool.push_back(x);
      }
      for (int s = 0; s < m - 1; ++s) {
        const std::size_t r = static_cast<std::size_t>(s) + rng.below(pool.size() - static_cast<std::size_t>(s));
        std::swap(pool[static_cast<std::size_t>(s)], pool[r]);
      }
      frames = {i0};
      frames.insert(frames.end(), pool.begin(), pool.begin() + (m - 1));
      std::sort(frames.begin() + 1, frames.end());
      break;
    }
    for (int e = 0; e < m; ++e) {
      edges.push_back({t, frames[static_cast<std::size_t>(e)],
                       frames[static_cast<std::size_t>((e + 1) % m)]});
    }
  }
  const auto z = f(edges);
  std::vector<std::vector<Vec>> cycles;
  for (std::size_t c = 0; c < static_cast<std::size_t>(spec.n); ++c) {
    cycles.emplace_back(z.begin() + static_cast<long>(c * static_cast<std::size_t>(m)),
                        z.begin() + static_cast<long>((c + 1) * static_cast<std::size_t>(m)));
  }
  return cycle_residual(cycles);
}

ProbeDataset build_probe_dataset(const LatentFn& f, const world::Dataset& ds,
                                 std::span<const std::size_t> trajs, const EvalSpec& spec,
                                 Rng& rng) {
  const auto ids = resolve(ds, trajs);
  ProbeDataset out;
  std::vector<PairQuery> qs;
  for (int env = 0; env < ds.header.env_count; ++env) {
    std::vector<std::size_t> env_ids;
    for (std::size_t id : ids) {
      if (ds.trajectories[id].env_id == env) {
        env_ids.push_back(id);
      }
    }
    if (env_ids.empty()) {
      continue;
    }
    for (int n = 0; n < spec.probe_per_env; ++n) {
      const std::size_t t = pick(env_ids, rng);
      const auto p = sampling::sample_pair(ds.trajectories[t], spec.sampling, rng);
      qs.push_back({t, p.i, p.j});
      out.env_labels.push_back(env);
      out.start_states.push_back(state(ds.trajectories[t], p.i));
      out.goal_states.push_back(state(ds.trajectories[t], p.j));
    }
  }
  out.latents = f(qs);
  return out;
}

Split stratified_split(const std::vector<int>& labels, double test_fraction, Rng& rng) {
  Split s;
  const int classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  for (int c = 0; c < classes; ++c) {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < labels.size(); ++r) {
      if (labels[r] == c) {
        rows.push_back(r);
      }
    }
    for (std::size_t n = rows.size(); n > 1; --n) {
      std::swap(rows[n - 1], rows[static_cast<std::size_t>(rng.below(n))]);
    }
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(rows.size())));
    s.test.insert(s.test.end(), rows.begin(), rows.begin() + static_cast<long>(n_test));
    s.train.insert(s.train.end(), rows.begin() + static_cast<long>(n_test), rows.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

double logistic_probe(const std::vector<Vec>& x, const std::vector<int>& labels,
                      const EvalSpec& spec, Rng& rng) {
  if (x.size() != labels.size() || x.empty()) {
    throw std::invalid_argument("logistic_probe: features and labels differ in length");
  }
  const int classes = *std::max_element(labels.begin(), labels.end()) + 1;
  if (classes < 2) {
    throw std::invalid_argument("logistic_probe: need at least 2 classes");
  }
  for (int c = 0; c < classes; ++c) {
    if (std::count(labels.begin(), labels.end(), c) < 5) {
      throw std::invalid_argument("logistic_probe: class " + std::to_string(c) +
                                  " has fewer than 5 samples");
    }
  }
  const Split split = stratified_split(labels, spec.probe_test_fraction, rng);
  const std::size_t d = x.front().size();
  const auto nc = static_cast<std::size_t>(classes);

  Vec mu(d, 0.0), sd(d, 0.0);
  for (std::size_t r : split.train) {
    for (std::size_t k = 0; k < d; ++k) {
      mu[k] += x[r][k];
    }
  }
  for (double& m : mu) {
    m /= static_cast<double>(split.train.size());
  }
  for (std::size_t r : split.train) {
    for (std::size_t k = 0; k < d; ++k) {
      sd[k] += (x[r][k] - mu[k]) * (x[r][k] - mu[k]);
    }
  }
  for (double& s : sd) {
    s = std::sqrt(s / static_cast<double>(split.train.size()));
    if (!(s > 1e-12)) {
      s = 1;
    }
  }
  auto feat = [&](std::size_t r) {
    Vec v(d + 1, 1.0);
    for (std::size_t k = 0; k < d; ++k) {
      v[k + 1] = (x[r][k] - mu[k]) / sd[k];
    }
    return v;
  };
  std::vector<Vec> w(d + 1, Vec(nc, 0.0));
  auto logits = [&](const Vec& v) {
    Vec out(nc, 0.0);
    for (std::size_t k = 0; k <= d; ++k) {
      for (std::size_t c = 0; c < nc; ++c) {
        out[c] += v[k] * w[k][c];
      }
    }
    return out;
  };
  std::vector<Vec> train_x;
  for (std::size_t r : split.train) {
    train_x.push_back(feat(r));
  }
  for (int it = 0; it < spec.probe_iters; ++it) {
    std::vector<Vec> grad(d + 1, Vec(nc, 0.0));
    for (std::size_t n = 0; n < train_x.size(); ++n) {
      Vec p = logits(train_x[n]);
      const double mx = *std::max_element(p.begin(), p.end());
      double z = 0;
      for (double& v : p) {
        v = std::exp(v - mx);
        z += v;
      }
      for (std::size_t c = 0; c < nc; ++c) {
        const double g = p[c] / z - (labels[split.train[n]] == static_cast<int>(c) ? 1.0 : 0.0);
        for (std::size_t k = 0; k <= d; ++k) {
          grad[k][c] += g * train_x[n][k];
        }
      }
    }
    const double step = spec.probe_lr / static_cast<double>(train_x.size());
    for (std::size_t k = 0; k <= d; ++k) {
      for (std::size_t c = 0; c < nc; ++c) {
        w[k][c] -= step * grad[k][c];
      }
    }
  }
  std::size_t correct = 0;
  for (std::size_t r : split.test) {
    const Vec p = logits(feat(r));
    const auto best = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    correct += best == labels[r] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(split.test.size());
}

Vec LinearFit::predict(const Vec& x) const {
  Vec out = coef.front();
  for (std::size_t k = 0; k < x.size(); ++k) {
    for (std::size_t t = 0; t < out.size(); ++t) {
      out[t] += x[k] * coef[k + 1][t];
    }
  }
  return out;
}

LinearFit fit_linear(const std::vector<Vec>& x, const std::vector<Vec>& y) {
  if (x.empty() || x.size() != y.size()) {
    throw std::invalid_argument("fit_linear: need equal, non-empty design and targets");
  }
  const std::size_t d = x.front().size() + 1;
  const std::size_t m = y.front().size();
  std::vector<Vec> xtx(d, Vec(d, 0.0)), xty(d, Vec(m, 0.0));
  for (std::size_t n = 0; n < x.size(); ++n) {
    Vec row(d, 1.0);
    for (std::size_t k = 1; k < d; ++k) {
      row[k] = x[n][k - 1];
    }
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) {
        xtx[a][b] += row[a] * row[b];
      }
      for (std::size_t t = 0; t < m; ++t) {
        xty[a][t] += row[a] * y[n][t];
      }
    }
  }
  LinearFit fit;
  if (!solve(xtx, xty, fit.coef)) {
    fit.ridge = true;
    for (std::size_t a = 0; a < d; ++a) {
      xtx[a][a] += 1e-6;
    }
    if (!solve(xtx, xty, fit.coef)) {
      throw std::runtime_error("fit_linear: ridge system is singular");
    }
  }
  return fit;
}

GoalProbe goal_probe(const std::vector<Vec>& z, const std::vector<Vec>& s_i,
                     const std::vector<Vec>& s_j, const EvalSpec& spec, Rng& rng) {
  if (z.size() != s_i.size() || z.size() != s_j.size() || z.size() < 10) {
    throw std::invalid_argument("goal_probe: need at least 10 aligned samples");
  }
  const Split split = stratified_split(std::vector<int>(z.size(), 0), spec.probe_test_fraction, rng);
  std::vector<Vec> ds(z.size());
  for (std::size_t n = 0; n < z.size(); ++n) {
    ds[n] = {s_j[n][0] - s_i[n][0], s_j[n][1] - s_i[n][1]};
  }
  const auto ztr = subset(z, split.train);

  // Motion content: best linear displacement estimate from z.
  const LinearFit motion = fit_linear(ztr, subset(ds, split.train));
  std::vector<Vec> ds_hat(z.size());
  for (std::size_t n = 0; n < z.size(); ++n) {
    ds_hat[n] = motion.predict(z[n]);
  }
  // Remove what that estimate explains of the goal.
  const LinearFit goal_from_motion = fit_linear(subset(ds_hat, split.train), subset(s_j, split.train));
  std::vector<Vec> rest(z.size());
  for (std::size_t n = 0; n < z.size(); ++n) {
    const Vec g = goal_from_motion.predict(ds_hat[n]);
    rest[n] = {s_j[n][0] - g[0], s_j[n][1] - g[1]};
  }
  const LinearFit leak = fit_linear(ztr, subset(rest, split.train));
  const double r2 = r2_score(rest, split.test, [&](std::size_t r) { return leak.predict(z[r]); });
  return {std::max(0.0, r2), motion.ridge || goal_from_motion.ridge || leak.ridge};
}

NormTrace norm_trajectory(const LatentFn& f, const world::Dataset& ds, std::size_t traj) {
  const auto& t = ds.trajectories.at(traj);
  if (t.length() < 2) {
    throw std::invalid_argument("norm_trajectory: trajectory too short");
  }
  std::vector<PairQuery> qs;
  for (int s = 1; s < t.length(); ++s) {
    qs.push_back({traj, 0, s});
  }
  const auto z = f(qs);
  NormTrace out;
  double zmax = 0, dmax = 0;
  for (std::size_t n = 0; n < qs.size(); ++n) {
    NormTracePoint p;
    p.t = qs[n].j;
    p.z_norm = norm(z[n]);
    p.ds_norm = norm(displacement(t, 0, qs[n].j));
    zmax = std::max(zmax, p.z_norm);
    dmax = std::max(dmax, p.ds_norm);
    out.points.push_back(p);
  }
  out.degenerate = !(zmax > 0);
  for (auto& p : out.points) {
    p.z_norm_normalized = zmax > 0 ? p.z_norm / zmax : 0;
    p.ds_norm_normalized = dmax > 0 ? p.ds_norm / dmax : 0;
  }
  return out;
}

std::string encode_norm_trace_csv(const NormTrace& trace) {
  std::string out = "t,z_norm,z_norm_normalized,ds_norm,ds_norm_normalized\n";
  char buf[160];
  for (const auto& p : trace.points) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g\n", p.t, p.z_norm, p.z_norm_normalized,
                  p.ds_norm, p.ds_norm_normalized);
    out += buf;
  }
  return out;
}

Transfer motion_transfer(const lam::ModelParams<float>& params, lam::Placement placement,
                         const world::Trajectory& src, const sampling::Triple& triple,
                         std::span<const float> target_frame) {
  const auto fs = static_cast<std::size_t>(params.config.image_dim());
  if (src.frame_size() != fs || target_frame.size() != fs) {
    throw ad::ShapeError("motion_transfer: frame size does not match the model");
  }
  auto frame = [&](std::span<const float> f) {
    return ad::Tensor<float>::from({1, fs}, std::vector<float>(f.begin(), f.end()));
  };
  const auto oi = frame(src.frame(triple.i)), oj = frame(src.frame(triple.j)),
             ok = frame(src.frame(triple.k));
  const auto z_ij = lam::latent(params, oi, oj, placement);
  const auto z_jk = lam::latent(params, oj, ok, placement);
  const auto z_ik = lam::latent(params, oi, ok, placement);
  ad::Graph<float> g(false);
  const auto target = frame(target_frame);
  const auto direct = lam::fdm_img(g, params, target, z_ik);
  const auto composed = lam::fdm_img(g, params, target, g.add(z_ij, z_jk));
  Transfer out;
  out.direct.assign(direct.data().begin(), direct.data().end());
  out.composed.assign(composed.data().begin(), composed.data().end());
  double se = 0;
  for (std::size_t n = 0; n < fs; ++n) {
    const double d = static_cast<double>(out.direct[n]) - out.composed[n];
    se += d * d;
  }
  out.mse = se / static_cast<double>(fs);
  return out;
}

std::vector<TransferCase> sample_transfer_cases(const world::Dataset& ds,
                                                std::span<const std::size_t> trajs,
                                                const sampling::SampleSpec& spec, int n, Rng& rng) {
  const auto ids = resolve(ds, trajs);
  if (ids.size() < 2) {
    throw std::invalid_argument("sample_transfer_cases: need at least two trajectories");
  }
  std::vector<TransferCase> out;
  for (int c = 0; c < n; ++c) {
    TransferCase tc;
    tc.src = pick(ids, rng);
    const auto& src = ds.trajectories[tc.src];
    tc.triple = sampling::sample_triple(src, spec, rng);
    std::vector<std::size_t> others, other_env;
    for (std::size_t id : ids) {
      if (id == tc.src) {
        continue;
      }
      others.push_back(id);
      if (ds.trajectories[id].env_id != src.env_id) {
        other_env.push_back(id);
      }
    }
    tc.target = pick(other_env.empty() ? others : other_env, rng);
    tc.target_frame = static_cast<int>(rng.below(static_cast<std::uint64_t>(ds.trajectories[tc.target].length())));
    out.push_back(tc);
  }
  return out;
}

Transfer motion_transfer(const lam::ModelParams<float>& params, lam::Placement placement,
                         const world::Dataset& ds, const TransferCase& c) {
  return motion_transfer(params, placement, ds.trajectories.at(c.src), c.triple,
                         ds.trajectories.at(c.target).frame(c.target_frame));
}

std::string encode_ppm(std::span<const float> rgb, int h, int w) {
  if (rgb.size() != static_cast<std::size_t>(h * w * 3)) {
    throw std::invalid_argument("encode_ppm: image size mismatch");
  }
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (float v : rgb) {
    const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  return out;
}

void write_ppm(const std::string& path, std::span<const float> rgb, int h, int w) {
  const auto text = encode_ppm(rgb, h, w);
  detail::write_file(path, std::vector<char>(text.begin(), text.end()));
}

void write_raw_f32(const std::string& path, std::span<const float> values) {
  detail::ByteWriter wr;
  wr.f32s(values);
  detail::write_file(path, wr.buffer());
}

nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["norm_ac"] = value_json(r.norm_ac);
  j["pearson_r"] = value_json(r.pearson_r);
  j["norm_identity"] = value_json(r.norm_identity);
  j["delta_inv"] = value_json(r.delta_inv);
  j["cycle_residual"] = value_json(r.cycle_residual);
  j["env_probe_acc"] = value_json(r.env_probe_acc);
  j["goal_probe_r2"] = value_json(r.goal_probe_r2);
  j["n_instances"] = r.n_instances;
  j["seed"] = r.seed;
  j["placement"] = lam::to_string(r.placement);
  return j;
}

MetricsReport report_from_json(const nlohmann::json& j) {
  static const char* kKeys[] = {"norm_ac",       "pearson_r",     "norm_identity", "delta_inv",
                                "cycle_residual", "env_probe_acc", "goal_probe_r2", "n_instances",
                                "seed",          "placement"};
  for (const char* k : kKeys) {
    if (!j.contains(k)) {
      throw FormatError(std::string("report: missing key ") + k);
    }
  }
  if (j.size() != std::size(kKeys)) {
    throw FormatError("report: unexpected extra keys");
  }
  MetricsReport r;
  r.norm_ac = value_from_json(j.at("norm_ac"));
  r.pearson_r = value_from_json(j.at("pearson_r"));
  r.norm_identity = value_from_json(j.at("norm_identity"));
  r.delta_inv = value_from_json(j.at("delta_inv"));
  r.cycle_residual = value_from_json(j.at("cycle_residual"));
  r.env_probe_acc = value_from_json(j.at("env_probe_acc"));
  r.goal_probe_r2 = value_from_json(j.at("goal_probe_r2"));
  r.n_instances = j.at("n_instances").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.placement = lam::parse_placement(j.at("placement").get<std::string>());
  return r;
}

MetricsReport evaluate(const LatentFn& f, const world::Dataset& ds,
                       std::span<const std::size_t> trajs, const EvalSpec& spec, std::uint64_t seed,
                       lam::Placement placement) {
  auto stream = [seed](std::uint64_t k) { return Rng(hash_ids({seed, 0xe7a1, k})); };
  MetricsReport r;
  r.seed = seed;
  r.placement = placement;
  r.n_instances = spec.n;
  Rng r1 = stream(1), r2 = stream(2), r3 = stream(3), r4 = stream(4), r5 = stream(5),
      r6 = stream(6), r7 = stream(7), r8 = stream(8);
  r.norm_ac = norm_ac(f, ds, trajs, spec, r1);
  r.pearson_r = displacement_corr(f, ds, trajs, spec, r2);
  r.norm_identity = norm_identity(f, ds, trajs, spec, r3);
  r.delta_inv = delta_inv(f, ds, trajs, spec, r4);
  r.cycle_residual = cycle_residual(f, ds, trajs, spec, r5);
  const auto probe = build_probe_dataset(f, ds, trajs, spec, r6);
  try {
    r.env_probe_acc = Value::ok(logistic_probe(probe.latents, probe.env_labels, spec, r7));
  } catch (const std::invalid_argument&) {
    r.env_probe_acc = Value::undefined();
  }
  r.goal_probe_r2 = Value::ok(goal_probe(probe.latents, probe.start_states, probe.goal_states, spec, r8).r2);
  return r;
}

}  // namespace aclam::metrics
