#include "aclam/ablation.hpp"

#include <algorithm>
#include <cstdio>
#include <stdexcept>

namespace aclam::ablation {

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string cell_value(const Cell& c, metrics::Value metrics::MetricsReport::*field) {
  if (!c.evaluated) {
    return "undefined";
  }
  const metrics::Value& v = c.report.*field;
  if (v.kind == metrics::Value::Kind::kDegenerate) {
    return "degenerate";
  }
  if (v.kind == metrics::Value::Kind::kUndefined) {
    return "undefined";
  }
  return num(v.value);
}

int severity(train::Stability s) {
  switch (s) {
    case train::Stability::kStable: return 0;
    case train::Stability::kCollapse: return 1;
    case train::Stability::kExplode: return 2;
  }
  return 2;
}

}  // namespace

const std::vector<Design>& designs() {
  static const std::vector<Design> d{
      {"fdm-post", lam::AcForm::kFdm, lam::Placement::kPostVq, 1.0},
      {"fdm-pre", lam::AcForm::kFdm, lam::Placement::kPreVq, 1.0},
      {"idm-no-sg", lam::AcForm::kIdmNoSg, lam::Placement::kPostVq, 1.0},
      {"idm-sg-zik", lam::AcForm::kIdmSgZik, lam::Placement::kPostVq, 1.0},
      {"idm-sg-sum", lam::AcForm::kIdmSgSum, lam::Placement::kPostVq, 1.0},
      {"no-ac", lam::AcForm::kFdm, lam::Placement::kPostVq, 0.0},
  };
  return d;
}

const Design& design(const std::string& name) {
  for (const auto& d : designs()) {
    if (d.name == name) {
      return d;
    }
  }
  throw std::invalid_argument("unknown design '" + name + "'");
}

train::TrainConfig apply(const train::TrainConfig& base, const Design& d, std::uint64_t seed) {
  train::TrainConfig c = base;
  c.seed = seed;
  c.ac_form = d.form;
  c.vq_placement = d.placement;
  c.weights.lambda_ac = d.lambda_ac;
  return c;
}

Cell run_cell(const world::Dataset& ds, const train::TrainConfig& base, const metrics::EvalSpec& spec,
              const Design& d, std::uint64_t seed, std::uint64_t eval_seed) {
  const auto cfg = apply(base, d, seed);
  auto res = train::train(ds, cfg);
  Cell cell;
  cell.design = d.name;
  cell.seed = seed;
  cell.stability = res.log.status;
  if (cell.stability == train::Stability::kStable) {
    const auto heldout = world::split_holdout(ds, cfg.holdout_fraction).heldout;
    const auto f = metrics::model_latents(res.params, ds, cfg.vq_placement);
    cell.report = metrics::evaluate(f, ds, heldout, spec, eval_seed, cfg.vq_placement);
    cell.evaluated = true;
  }
  cell.params = std::move(res.params);
  return cell;
}

std::vector<Cell> run_grid(const world::Dataset& ds, const train::TrainConfig& base,
                           const metrics::EvalSpec& spec, const std::vector<std::uint64_t>& seeds,
                           std::uint64_t eval_seed, const std::function<void(const Cell&)>& on_cell) {
  std::vector<Cell> cells;
  for (const auto& d : designs()) {
    for (std::uint64_t s : seeds) {
      cells.push_back(run_cell(ds, base, spec, d, s, eval_seed));
      if (on_cell) {
        on_cell(cells.back());
      }
    }
  }
  return cells;
}

std::optional<double> median_of(const std::vector<Cell>& cells, const std::string& design,
                                metrics::Value metrics::MetricsReport::*field) {
  std::vector<double> v;
  for (const auto& c : cells) {
    if (c.design == design && c.evaluated && (c.report.*field).is_ok()) {
      v.push_back((c.report.*field).value);
    }
  }
  if (v.empty()) {
    return std::nullopt;
  }
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::string encode_csv(const std::vector<Cell>& cells) {
  using R = metrics::MetricsReport;
  std::string out = "design,seed,norm_ac,pearson_r,stability\n";
  std::vector<std::string> order;
  for (const auto& c : cells) {
    out += c.design + "," + std::to_string(c.seed) + "," + cell_value(c, &R::norm_ac) + "," +
           cell_value(c, &R::pearson_r) + "," + train::to_string(c.stability) + "\n";
    if (std::find(order.begin(), order.end(), c.design) == order.end()) {
      order.push_back(c.design);
    }
  }
  for (const auto& name : order) {
    std::vector<train::Stability> st;
    for (const auto& c : cells) {
      if (c.design == name) {
        st.push_back(c.stability);
      }
    }
    // Middle class by severity: stable < collapse < explode.
    std::sort(st.begin(), st.end(), [](auto a, auto b) { return severity(a) < severity(b); });
    const auto nac = median_of(cells, name, &R::norm_ac);
    const auto r = median_of(cells, name, &R::pearson_r);
    out += name + ",median," + (nac ? num(*nac) : "undefined") + "," + (r ? num(*r) : "undefined") + "," +
           train::to_string(st[(st.size() - 1) / 2]) + "\n";
  }
  return out;
}

}  // namespace aclam::ablation
