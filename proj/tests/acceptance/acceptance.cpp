// Acceptance suite: one PASS/FAIL line per criterion, detail lines indented.
// Exit status is nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "aclam/ablation.hpp"
#include "aclam/errors.hpp"
#include "aclam/gradcheck.hpp"
#include "aclam/metrics.hpp"
#include "aclam/training.hpp"
#include "../micro_model.hpp"
#include "../op_sweep.hpp"

using namespace aclam;
using namespace aclam::micro;
using ad::Graph;
using ad::ScalarFn;
using lam::AcForm;
using lam::LossWeights;
using lam::Placement;
using metrics::Vec;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void verdict(const char* id, bool ok, const std::string& what) {
  std::printf("%s %s  %s\n", id, ok ? "PASS" : "FAIL", what.c_str());
  std::fflush(stdout);
  if (!ok) {
    ++failures;
  }
}

template <typename... A>
void note(const char* fmt, A... a) {
  std::printf("    ");
  std::printf(fmt, a...);
  std::printf("\n");
  std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::vector<Tensor<double>> mlp_params(std::initializer_list<lam::Mlp<double>*> mlps) {
  std::vector<Tensor<double>> out;
  for (auto* m : mlps) {
    for (auto& layer : m->layers) {
      out.push_back(layer.weight);
      out.push_back(layer.bias);
    }
  }
  return out;
}

// ---- P1 ----------------------------------------------------------------------

void p1() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_op = 0;
  std::string worst_name;
  for (const auto& c : sweep::op_cases<double>()) {
    const double e = sweep::worst_error(c, 100, 0xa11, 1e-6);
    if (e > worst_op) {
      worst_op = e;
      worst_name = c.name;
    }
  }
  note("ops: worst relative error %.3g (%s), 100 cases per op", worst_op, worst_name.c_str());

  // Full objective on the micro-model. The identity bottleneck keeps the
  // encoder path differentiable; the quantizer terms are checked on the real
  // quantizer where their gradient is exact.
  double worst_loss = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(hash_ids({0xf11, s}));
    auto cfg = micro_config();
    cfg.vq_identity = true;
    auto params = ModelParams<double>::init(cfg, s);
    auto pairs = random_pairs<double>(cfg, 3, rng);
    auto tri = random_triples<double>(cfg, 3, rng);
    LossWeights w;
    w.w_codebook = 0;
    w.beta_commit = 0;
    for (AcForm form : {AcForm::kFdm, AcForm::kIdmNoSg}) {
      for (Placement pl : {Placement::kPostVq, Placement::kPreVq}) {
        ScalarFn<double> f = [&](Graph<double>& g) {
          return total_loss(g, params, pairs, tri, w, form, pl).total;
        };
        worst_loss = std::max(worst_loss, ad::finite_diff_check(f, all_params(params), 1e-6));
      }
    }
    LossWeights full;
    for (AcForm form : {AcForm::kIdmSgZik, AcForm::kIdmSgSum}) {
      ScalarFn<double> f = [&](Graph<double>& g) {
        return total_loss(g, params, pairs, tri, full, form, Placement::kPostVq).total;
      };
      worst_loss = std::max(worst_loss,
                            ad::finite_diff_check(f, mlp_params({&params.fdm_img, &params.fdm_proprio}), 1e-6));
    }

    auto qcfg = micro_config();
    auto qp = ModelParams<double>::init(qcfg, s + 1000);
    LossWeights cb;
    cb.beta_commit = 0;
    ScalarFn<double> fc = [&](Graph<double>& g) {
      return loss_vq(g, encode(g, qp, pairs.o_i, pairs.o_j), qcfg.code_dim, cb);
    };
    worst_loss = std::max(worst_loss, ad::finite_diff_check(fc, {qp.codebook}, 1e-6));
    LossWeights cm;
    cm.w_codebook = 0;
    ScalarFn<double> fm = [&](Graph<double>& g) {
      return loss_vq(g, encode(g, qp, pairs.o_i, pairs.o_j), qcfg.code_dim, cm);
    };
    worst_loss = std::max(worst_loss, ad::finite_diff_check(fm, mlp_params({&qp.idm}), 1e-6));
    ScalarFn<double> fd = [&](Graph<double>& g) {
      return total_loss(g, qp, pairs, tri, full, AcForm::kFdm, Placement::kPostVq).total;
    };
    worst_loss = std::max(worst_loss,
                          ad::finite_diff_check(fd, mlp_params({&qp.fdm_img, &qp.fdm_proprio}), 1e-6));
  }
  note("micro-model objective: worst relative error %.3g over 100 seeds", worst_loss);
  const double secs = seconds_since(t0);
  note("runtime %.1f s", secs);
  char buf[160];
  std::snprintf(buf, sizeof buf, "autodiff vs central differences: ops %.2g, objective %.2g (< 1e-5), %.1f s (< 60 s)",
                worst_op, worst_loss, secs);
  verdict("P1", worst_op < 1e-5 && worst_loss < 1e-5 && secs < 60, buf);
}

// ---- P2 ----------------------------------------------------------------------

// Lowest index among the minimum squared distances.
std::size_t naive_nearest(const std::vector<double>& cb, std::size_t rows, std::size_t cd, const double* x) {
  std::size_t best = 0;
  double best_d = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    double d = 0;
    for (std::size_t c = 0; c < cd; ++c) {
      d += (x[c] - cb[r * cd + c]) * (x[c] - cb[r * cd + c]);
    }
    if (r == 0 || d < best_d) {
      best_d = d;
      best = r;
    }
  }
  return best;
}

void p2() {
  int nearest_bad = 0, ties = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    Rng rng(hash_ids({0xb02, s}));
    const std::size_t rows = 2 + rng.below(7), cd = 1 + rng.below(3), tokens = 1 + rng.below(3);
    const std::size_t b = 1 + rng.below(4);
    std::vector<double> cb(rows * cd);
    for (double& v : cb) {
      // Small integer grid so exact ties occur.
      v = static_cast<double>(rng.below(3));
    }
    std::vector<double> x(b * tokens * cd);
    for (double& v : x) {
      v = rng.below(2) ? static_cast<double>(rng.below(5)) * 0.5 : rng.uniform(-1, 3);
    }
    Graph<double> g(false);
    auto lat = lam::vq_quantize(g, Tensor<double>::from({b, tokens * cd}, x),
                                Tensor<double>::from({rows, cd}, cb), static_cast<int>(tokens));
    for (std::size_t t = 0; t < b * tokens; ++t) {
      const std::size_t want = naive_nearest(cb, rows, cd, &x[t * cd]);
      // Count queries where another row sits at the same distance.
      for (std::size_t r = want + 1; r < rows; ++r) {
        double d0 = 0, d1 = 0;
        for (std::size_t c = 0; c < cd; ++c) {
          d0 += std::pow(x[t * cd + c] - cb[want * cd + c], 2);
          d1 += std::pow(x[t * cd + c] - cb[r * cd + c], 2);
        }
        if (d0 == d1) {
          ++ties;
          break;
        }
      }
      bool ok = lat.indices[t] == want;
      for (std::size_t c = 0; c < cd; ++c) {
        ok = ok && lat.z[t * cd + c] == cb[want * cd + c];
      }
      nearest_bad += ok ? 0 : 1;
    }
  }
  note("nearest code: %d mismatches over 1000 problems (%d tied queries)", nearest_bad, ties);

  double st_worst = 0;
  int leaked = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(hash_ids({0xb03, s}));
    const auto cfg = micro_config();
    auto params = ModelParams<double>::init(cfg, s);
    auto pairs = random_pairs<double>(cfg, 4, rng);
    auto z_pre = random_batch<double>(4, 4, rng, -1, 1);
    z_pre.set_requires_grad(true);
    Graph<double> g1;
    auto lat = lam::vq_quantize(g1, z_pre, params.codebook, cfg.n_tokens);
    g1.backward(g1.mse(pairs.o_j, fdm_img(g1, params, pairs.o_i, lat.z)));
    const auto through = z_pre.grad_or_zeros();
    auto z_leaf = Tensor<double>::from(lat.z.shape(), {lat.z.data().begin(), lat.z.data().end()}, true);
    params.zero_grad();
    Graph<double> g2;
    g2.backward(g2.mse(pairs.o_j, fdm_img(g2, params, pairs.o_i, z_leaf)));
    const auto ident = z_leaf.grad_or_zeros();
    for (std::size_t i = 0; i < ident.size(); ++i) {
      st_worst = std::max(st_worst, std::abs(through[i] - ident[i]));
    }

    // Unselected rows under the full objective.
    params.zero_grad();
    auto tri = random_triples<double>(cfg, 4, rng);
    Graph<double> g3;
    LossWeights w;
    auto br = total_loss(g3, params, pairs, tri, w, AcForm::kFdm, Placement::kPostVq);
    g3.backward(br.total);
    Graph<double> g4(false);
    const auto used = encode(g4, params, pairs.o_i, pairs.o_j).indices;
    const auto grad = params.codebook.grad_or_zeros();
    const std::size_t cd = static_cast<std::size_t>(cfg.code_dim);
    for (std::size_t r = 0; r < params.codebook.dim(0); ++r) {
      if (std::find(used.begin(), used.end(), r) != used.end()) {
        continue;
      }
      for (std::size_t c = 0; c < cd; ++c) {
        leaked += grad[r * cd + c] != 0.0 ? 1 : 0;
      }
    }
  }
  note("straight-through vs identity bottleneck: worst |diff| %.3g over 100 seeds", st_worst);
  note("unselected codebook entries with nonzero gradient: %d", leaked);
  char buf[160];
  std::snprintf(buf, sizeof buf, "quantizer: %d nearest mismatches, ST diff %.2g (< 1e-7), %d leaked rows",
                nearest_bad, st_worst, leaked);
  verdict("P2", nearest_bad == 0 && ties > 0 && st_worst < 1e-7 && leaked == 0, buf);
}

// ---- P3 ----------------------------------------------------------------------

// References written from the definitions with plain loops.
double r_sq(const Vec& a) {
  double s = 0;
  for (double x : a) {
    s += x * x;
  }
  return s;
}

double r_mean_len(const std::vector<Vec>& v) {
  double s = 0;
  for (const auto& x : v) {
    s += std::sqrt(r_sq(x));
  }
  return s / static_cast<double>(v.size());
}

double r_norm_ac(const std::vector<Vec>& ij, const std::vector<Vec>& jk, const std::vector<Vec>& ik) {
  double num = 0, den = 0;
  for (std::size_t n = 0; n < ij.size(); ++n) {
    Vec d(ij[n].size());
    for (std::size_t c = 0; c < d.size(); ++c) {
      d[c] = ik[n][c] - ij[n][c] - jk[n][c];
    }
    num += r_sq(d);
    den += r_sq(ij[n]) + r_sq(jk[n]) + r_sq(ik[n]);
  }
  return (num / ij.size()) / (den / (3.0 * ij.size()));
}

double r_delta_inv(const std::vector<Vec>& ij, const std::vector<Vec>& ji) {
  std::vector<Vec> s = ij;
  for (std::size_t n = 0; n < s.size(); ++n) {
    for (std::size_t c = 0; c < s[n].size(); ++c) {
      s[n][c] += ji[n][c];
    }
  }
  return r_mean_len(s) / r_mean_len(ij);
}

double r_cycle(const std::vector<std::vector<Vec>>& cycles) {
  std::vector<Vec> sums, edges;
  for (const auto& cyc : cycles) {
    Vec s(cyc[0].size(), 0.0);
    for (const auto& e : cyc) {
      for (std::size_t c = 0; c < s.size(); ++c) {
        s[c] += e[c];
      }
      edges.push_back(e);
    }
    sums.push_back(s);
  }
  return r_mean_len(sums) / r_mean_len(edges);
}

double r_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

std::vector<Vec> gauss(std::size_t n, std::size_t d, Rng& rng) {
  std::vector<Vec> v(n, Vec(d));
  for (auto& r : v) {
    for (double& x : r) {
      x = rng.normal();
    }
  }
  return v;
}

std::vector<Vec> times(std::vector<Vec> v, double c) {
  for (auto& r : v) {
    for (double& x : r) {
      x *= c;
    }
  }
  return v;
}

void p3() {
  double worst_ref = 0, worst_scale = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    Rng rng(hash_ids({0xc03, s}));
    const std::size_t n = 2 + rng.below(30), d = 1 + rng.below(16);
    const auto a = gauss(n, d, rng), b = gauss(n, d, rng), c = gauss(n, d, rng);
    std::vector<std::vector<Vec>> cycles;
    for (std::size_t k = 0; k < n; ++k) {
      cycles.push_back({a[k], b[k], c[k]});
    }
    std::vector<double> x, y;
    for (std::size_t k = 0; k < n; ++k) {
      x.push_back(std::sqrt(r_sq(a[k])));
      y.push_back(std::sqrt(r_sq(b[k])) + 0.3 * x.back());
    }
    const double got[5] = {metrics::norm_ac(a, b, c).value, metrics::norm_identity(a, b).value,
                           metrics::delta_inv(a, b).value, metrics::cycle_residual(cycles).value,
                           metrics::pearson(x, y).value};
    const double want[5] = {r_norm_ac(a, b, c), r_mean_len(a) / r_mean_len(b), r_delta_inv(a, b), r_cycle(cycles),
                            r_pearson(x, y)};
    for (int m = 0; m < 5; ++m) {
      worst_ref = std::max(worst_ref, std::abs(got[m] - want[m]));
    }

    const double k = std::exp(rng.uniform(-4, 4));
    const auto as = times(a, k), bs = times(b, k), cs = times(c, k);
    std::vector<std::vector<Vec>> cyc_s;
    for (const auto& cy : cycles) {
      cyc_s.push_back(times(cy, k));
    }
    std::vector<double> xs = x;
    for (double& v : xs) {
      v *= k;
    }
    const double scaled[5] = {metrics::norm_ac(as, bs, cs).value, metrics::norm_identity(as, bs).value,
                              metrics::delta_inv(as, bs).value, metrics::cycle_residual(cyc_s).value,
                              metrics::pearson(xs, y).value};
    for (int m = 0; m < 5; ++m) {
      worst_scale = std::max(worst_scale, std::abs(scaled[m] - got[m]));
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "metrics vs brute force: worst %.2g, scale invariance worst %.2g (< 1e-6)", worst_ref,
                worst_scale);
  verdict("P3", worst_ref < 1e-6 && worst_scale < 1e-6, buf);
}

// ---- P4 ----------------------------------------------------------------------

void p4() {
  world::DatasetConfig dc;
  dc.seed = 44;
  dc.traj_per_env = 10;
  dc.steps = 50;
  dc.world.image_h = dc.world.image_w = 16;
  dc.world.interior_bias = 1.0;
  const auto ds = world::gen_dataset(dc);
  // Clamp-free: every recorded step is exactly p + a.
  int clamped = 0;
  for (const auto& tr : ds.trajectories) {
    for (std::size_t t = 0; t + 1 < tr.states.size(); ++t) {
      for (int c = 0; c < 2; ++c) {
        const float want = tr.states[t].p[c] + tr.actions[t][c];
        clamped += std::abs(tr.states[t + 1].p[c] - want) > 1e-6f ? 1 : 0;
      }
    }
  }
  const auto f = metrics::oracle_latents(ds);
  metrics::EvalSpec spec;
  Rng rng(4);
  const auto nac = metrics::norm_ac(f, ds, {}, spec, rng).value;
  const auto nid = metrics::norm_identity(f, ds, {}, spec, rng).value;
  const auto dinv = metrics::delta_inv(f, ds, {}, spec, rng).value;
  const auto cyc = metrics::cycle_residual(f, ds, {}, spec, rng).value;
  const auto r = metrics::displacement_corr(f, ds, {}, spec, rng).value;
  const auto probe = metrics::build_probe_dataset(f, ds, {}, spec, rng);
  const auto goal = metrics::goal_probe(probe.latents, probe.start_states, probe.goal_states, spec, rng).r2;
  note("clamped steps %d; norm_ac %.3g, norm_identity %.3g, delta_inv %.3g, cycle %.3g, r %.6f, goal R2 %.4f",
       clamped, nac, nid, dinv, cyc, r, goal);
  const bool ok = clamped == 0 && nac < 1e-6 && nid == 0 && dinv == 0 && cyc < 1e-6 && r > 0.999 && goal < 0.05;
  verdict("P4", ok, "oracle latents on clamp-free data meet every bound");
}

// ---- P5 to P8 ----------------------------------------------------------------

struct Desk {
  world::Dataset ds;
  std::vector<std::size_t> heldout;
  train::TrainConfig base;
  metrics::EvalSpec spec;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::uint64_t eval_seed = 0;
};

Desk desk() {
  Desk d;
  world::DatasetConfig dc;
  dc.seed = 1;
  dc.traj_per_env = 25;
  dc.steps = 50;
  dc.world.image_h = dc.world.image_w = 16;
  d.ds = world::gen_dataset(dc);
  d.base.steps = 1500;
  d.base.base_lr = 1e-3;
  d.base.warmup_steps = 150;
  d.base.batch_pairs = d.base.batch_triples = 32;
  d.base.model.image_h = d.base.model.image_w = 16;
  d.base.model.idm_hidden = {128, 128};
  d.base.model.fdm_hidden = {128, 128};
  d.heldout = world::split_holdout(d.ds, d.base.holdout_fraction).heldout;
  return d;
}

std::vector<double> values(const std::vector<ablation::Cell>& cells, const std::string& design,
                           metrics::Value metrics::MetricsReport::*field) {
  std::vector<double> v;
  for (const auto& c : cells) {
    if (c.design == design && c.evaluated && (c.report.*field).is_ok()) {
      v.push_back((c.report.*field).value);
    }
  }
  return v;
}

void p5(const std::vector<ablation::Cell>& cells, double secs) {
  using R = metrics::MetricsReport;
  struct Row {
    const char* name;
    metrics::Value R::*field;
    bool lower_better;
  };
  const Row rows[] = {{"norm_ac", &R::norm_ac, true},
                      {"delta_inv", &R::delta_inv, true},
                      {"norm_identity", &R::norm_identity, true},
                      {"pearson_r", &R::pearson_r, false}};
  bool ok = secs < 1800;
  for (const auto& row : rows) {
    const auto a = values(cells, "fdm-post", row.field), b = values(cells, "no-ac", row.field);
    if (a.size() != 3 || b.size() != 3) {
      note("%s: only %zu/%zu seeds evaluated", row.name, a.size(), b.size());
      ok = false;
      continue;
    }
    const double ma = median(a), mb = median(b);
    const bool dir = row.lower_better ? ma < mb : ma > mb;
    note("%-14s AC %.4f  no-AC %.4f  %s", row.name, ma, mb, dir ? "ok" : "wrong direction");
    ok = ok && dir;
  }
  note("6 training runs and evaluations: %.0f s", secs);
  verdict("P5", ok, "seed-median structure metrics favour the composition term on held-out data");
}

void p6(const Desk& d, const std::vector<ablation::Cell>& cells) {
  using R = metrics::MetricsReport;
  const auto a = values(cells, "fdm-post", &R::env_probe_acc), b = values(cells, "no-ac", &R::env_probe_acc);
  bool ok = a.size() == 3 && b.size() == 3;
  double ma = 0, mb = 0;
  if (ok) {
    ma = median(a);
    mb = median(b);
    ok = ma <= mb + 0.02;
  }
  note("env probe accuracy: AC %.4f, no-AC %.4f (bound no-AC + 0.02)", ma, mb);

  // Shuffled-label control on the AC model of the first seed.
  const auto& cell = cells.front();
  const auto f = metrics::model_latents(cell.params, d.ds, Placement::kPostVq);
  Rng rng(hash_ids({d.eval_seed, 0x5f6}));
  auto probe = metrics::build_probe_dataset(f, d.ds, d.heldout, d.spec, rng);
  auto labels = probe.env_labels;
  for (std::size_t i = labels.size(); i > 1; --i) {
    std::swap(labels[i - 1], labels[rng.below(i)]);
  }
  const double shuffled = metrics::logistic_probe(probe.latents, labels, d.spec, rng);
  const double chance = 1.0 / d.ds.header.env_count;
  note("shuffled-label control %.4f, chance %.4f", shuffled, chance);
  ok = ok && std::abs(shuffled - chance) <= 0.10;
  verdict("P6", ok, "environment leakage no higher than the control, shuffled labels at chance");
}

void p7(const std::vector<ablation::Cell>& cells) {
  std::map<std::string, int> count;
  for (const auto& c : cells) {
    ++count[c.design];
    note("%-11s seed %llu  %-8s norm_ac %s  r %s", c.design.c_str(), static_cast<unsigned long long>(c.seed),
         train::to_string(c.stability).c_str(),
         c.evaluated ? std::to_string(c.report.norm_ac.value).c_str() : "undefined",
         c.evaluated ? std::to_string(c.report.pearson_r.value).c_str() : "undefined");
  }
  bool complete = true;
  for (const auto& d : ablation::designs()) {
    complete = complete && count[d.name] == 3;
  }
  bool default_stable = true;
  for (const auto& c : cells) {
    if (c.design == "fdm-post") {
      default_stable = default_stable && c.stability == train::Stability::kStable;
    }
  }

  using R = metrics::MetricsReport;
  auto med = [&](const std::string& name, metrics::Value R::*f) {
    const auto v = ablation::median_of(cells, name, f);
    return v ? std::to_string(*v) : std::string("undefined");
  };
  auto majority = [&](const std::string& name) {
    std::map<train::Stability, int> n;
    for (const auto& c : cells) {
      if (c.design == name) {
        ++n[c.stability];
      }
    }
    return train::to_string(std::max_element(n.begin(), n.end(), [](auto& a, auto& b) {
                              return a.second < b.second;
                            })->first);
  };
  note("expected: fdm-pre r above fdm-post | observed r %s vs %s", med("fdm-pre", &R::pearson_r).c_str(),
       med("fdm-post", &R::pearson_r).c_str());
  note("expected: fdm-pre norm_ac above fdm-post | observed %s vs %s", med("fdm-pre", &R::norm_ac).c_str(),
       med("fdm-post", &R::norm_ac).c_str());
  note("expected: idm-no-sg collapse | observed %s", majority("idm-no-sg").c_str());
  note("expected: idm-sg-sum explode | observed %s", majority("idm-sg-sum").c_str());

  std::ofstream("acceptance_ablation.csv") << ablation::encode_csv(cells);
  note("grid written to acceptance_ablation.csv");
  verdict("P7", complete && default_stable, "ablation grid complete with a stable default cell");
}

void p8(const Desk& d, const std::vector<ablation::Cell>& cells) {
  Rng rng(hash_ids({d.eval_seed, 0x7a5f}));
  const auto cases = metrics::sample_transfer_cases(d.ds, d.heldout, d.base.sampling, 20, rng);
  std::vector<double> ac, ctl;
  for (const auto& c : cells) {
    if (c.design != "fdm-post" && c.design != "no-ac") {
      continue;
    }
    std::vector<double> mse;
    for (const auto& tc : cases) {
      mse.push_back(metrics::motion_transfer(c.params, Placement::kPostVq, d.ds, tc).mse);
    }
    (c.design == "fdm-post" ? ac : ctl).push_back(median(mse));
  }
  const double ma = median(ac), mb = median(ctl);
  note("median transfer MSE over %zu held-out cases: AC %.6g, no-AC %.6g", cases.size(), ma, mb);
  verdict("P8", cases.size() == 20 && ma < mb, "composed and direct transfer agree more closely with the composition term");
}

// ---- P9 ----------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void p9() {
  const auto dir = fs::temp_directory_path() / "aclam_acceptance_p9";
  fs::remove_all(dir);
  fs::create_directories(dir);
  bool ok = true;
  auto check = [&](bool cond, const char* what) {
    note("%-48s %s", what, cond ? "ok" : "FAILED");
    ok = ok && cond;
  };

  world::DatasetConfig dc;
  dc.seed = 9;
  dc.traj_per_env = 5;
  dc.steps = 20;
  dc.world.image_h = dc.world.image_w = 16;
  world::save_dataset(world::gen_dataset(dc), (dir / "a.aclamds").string());
  world::save_dataset(world::gen_dataset(dc), (dir / "b.aclamds").string());
  const auto ds_bytes = slurp(dir / "a.aclamds");
  check(ds_bytes == slurp(dir / "b.aclamds"), "dataset rerun byte-identical");
  const auto ds = world::load_dataset((dir / "a.aclamds").string());
  const auto re = world::encode_dataset(ds);
  check(std::string(re.begin(), re.end()) == ds_bytes, "ACLAMDS1 decode/encode byte-exact");

  train::TrainConfig tc;
  tc.steps = 30;
  tc.warmup_steps = 3;
  tc.batch_pairs = tc.batch_triples = 8;
  tc.eval_every = 10;
  tc.model.image_h = tc.model.image_w = 16;
  tc.model.idm_hidden = {16};
  tc.model.fdm_hidden = {16};
  tc.model.proprio_hidden = {8};
  metrics::EvalSpec spec;
  spec.n = 128;
  spec.probe_per_env = 32;
  std::string reports[2];
  for (int run = 0; run < 2; ++run) {
    const std::string stem = (dir / ("run" + std::to_string(run))).string();
    auto res = train::train(ds, tc, {stem + ".aclamck", stem + ".steplog.csv"});
    const auto held = world::split_holdout(ds, tc.holdout_fraction).heldout;
    const auto rep = metrics::evaluate(metrics::model_latents(res.params, ds, Placement::kPostVq), ds, held, spec, 5,
                                       Placement::kPostVq);
    reports[run] = metrics::to_json(rep).dump(2);
  }
  const auto ck = slurp(dir / "run0.aclamck");
  check(!ck.empty() && ck == slurp(dir / "run1.aclamck"), "checkpoint rerun byte-identical");
  check(slurp(dir / "run0.steplog.csv") == slurp(dir / "run1.steplog.csv"), "step log rerun byte-identical");
  check(reports[0] == reports[1], "report rerun byte-identical");
  const auto loaded = train::load_checkpoint((dir / "run0.aclamck").string());
  const auto ck2 = train::encode_checkpoint(loaded.params, loaded.config_snapshot);
  check(std::string(ck2.begin(), ck2.end()) == ck, "ACLAMCK1 decode/encode byte-exact");

  auto throws_format = [](auto&& fn) {
    try {
      fn();
    } catch (const FormatError&) {
      return true;
    } catch (...) {
      return false;
    }
    return false;
  };
  auto throws_truncated = [](auto&& fn) {
    try {
      fn();
    } catch (const TruncatedError&) {
      return true;
    } catch (...) {
      return false;
    }
    return false;
  };
  std::vector<char> bad(ds_bytes.begin(), ds_bytes.end());
  bad[0] = 'X';
  check(throws_format([&] { world::decode_dataset(bad); }), "dataset bad magic -> format error");
  std::vector<char> cut(ds_bytes.begin(), ds_bytes.end() - 7);
  check(throws_truncated([&] { world::decode_dataset(cut); }), "dataset truncation -> truncated error");
  std::vector<char> badck(ck.begin(), ck.end());
  badck[3] = '?';
  check(throws_format([&] { train::decode_checkpoint(badck); }), "checkpoint bad magic -> format error");
  std::vector<char> cutck(ck.begin(), ck.end() - 5);
  check(throws_truncated([&] { train::decode_checkpoint(cutck); }), "checkpoint truncation -> truncated error");
  fs::remove_all(dir);
  verdict("P9", ok, "deterministic reruns, byte-exact round trips, corrupt files rejected");
}

}  // namespace

int main() {
  p1();
  p2();
  p3();
  p4();
  p9();

  const auto d = desk();
  std::vector<ablation::Cell> cells;
  const auto t0 = std::chrono::steady_clock::now();
  for (const char* name : {"fdm-post", "no-ac"}) {
    for (auto s : d.seeds) {
      cells.push_back(ablation::run_cell(d.ds, d.base, d.spec, ablation::design(name), s, d.eval_seed));
    }
  }
  p5(cells, seconds_since(t0));
  p6(d, cells);
  p8(d, cells);
  for (const auto& design : ablation::designs()) {
    if (design.name == "fdm-post" || design.name == "no-ac") {
      continue;
    }
    for (auto s : d.seeds) {
      cells.push_back(ablation::run_cell(d.ds, d.base, d.spec, design, s, d.eval_seed));
    }
  }
  p7(cells);

  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
