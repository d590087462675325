#include "aclam/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "aclam/errors.hpp"
#include "binary_io.hpp"

namespace aclam::train {

namespace {

constexpr char kMagic[] = "ACLAMCK1";
constexpr const char* kLogHeader = "step,loss_total,loss_rec,loss_vq,loss_ac,loss_proprio,mean_z_norm,lr";

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (steps < 1 || warmup_steps < 0 || steps <= warmup_steps) {
    throw ConfigError("steps", "need steps > warmup_steps >= 0");
  }
  if (batch_pairs < 1) {
    throw ConfigError("batch_pairs", "must be >= 1");
  }
  if (batch_triples < 1) {
    throw ConfigError("batch_triples", "must be >= 1");
  }
  if (!(base_lr > 0) || !std::isfinite(base_lr)) {
    throw ConfigError("base_lr", "must be positive");
  }
  if (!(clip_norm > 0)) {
    throw ConfigError("clip_norm", "must be positive");
  }
  if (eval_every < 0 || dead_code_steps < 0) {
    throw ConfigError("eval_every", "must be >= 0");
  }
  if (!(holdout_fraction >= 0 && holdout_fraction < 1)) {
    throw ConfigError("holdout_fraction", "must be in [0, 1)");
  }
  try {
    weights.validate();
    sampling.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("train", e.what());
  }
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["steps"] = c.steps;
  j["batch_pairs"] = c.batch_pairs;
  j["batch_triples"] = c.batch_triples;
  j["base_lr"] = c.base_lr;
  j["warmup_steps"] = c.warmup_steps;
  j["clip_norm"] = c.clip_norm;
  j["lambda_ac"] = c.weights.lambda_ac;
  j["beta_commit"] = c.weights.beta_commit;
  j["w_codebook"] = c.weights.w_codebook;
  j["w_proprio"] = c.weights.w_proprio;
  j["ac_proprio"] = c.weights.ac_proprio;
  j["ac_form"] = lam::to_string(c.ac_form);
  j["vq_placement"] = lam::to_string(c.vq_placement);
  j["eval_every"] = c.eval_every;
  j["dead_code_steps"] = c.dead_code_steps;
  j["holdout_fraction"] = c.holdout_fraction;
  j["horizon"] = c.sampling.horizon;
  j["n_buckets"] = c.sampling.n_buckets;
  j["rotation_threshold"] = c.sampling.rotation_threshold;
  j["explode_factor"] = c.stability.explode_factor;
  j["collapse_fraction"] = c.stability.collapse_fraction;
  j["final_window"] = c.stability.final_window;
  nlohmann::ordered_json m;
  m["image_h"] = c.model.image_h;
  m["image_w"] = c.model.image_w;
  m["idm_hidden"] = c.model.idm_hidden;
  m["fdm_hidden"] = c.model.fdm_hidden;
  m["proprio_hidden"] = c.model.proprio_hidden;
  m["codebook_size"] = c.model.codebook_size;
  m["code_dim"] = c.model.code_dim;
  m["n_tokens"] = c.model.n_tokens;
  j["model"] = m;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  auto get = [&](const nlohmann::json& obj, const char* key, auto& dst) {
    if (obj.contains(key)) {
      dst = obj.at(key).get<std::decay_t<decltype(dst)>>();
    }
  };
  get(j, "seed", c.seed);
  get(j, "steps", c.steps);
  get(j, "batch_pairs", c.batch_pairs);
  get(j, "batch_triples", c.batch_triples);
  get(j, "base_lr", c.base_lr);
  get(j, "warmup_steps", c.warmup_steps);
  get(j, "clip_norm", c.clip_norm);
  get(j, "lambda_ac", c.weights.lambda_ac);
  get(j, "beta_commit", c.weights.beta_commit);
  get(j, "w_codebook", c.weights.w_codebook);
  get(j, "w_proprio", c.weights.w_proprio);
  get(j, "ac_proprio", c.weights.ac_proprio);
  if (j.contains("ac_form")) {
    c.ac_form = lam::parse_ac_form(j.at("ac_form").get<std::string>());
  }
  if (j.contains("vq_placement")) {
    c.vq_placement = lam::parse_placement(j.at("vq_placement").get<std::string>());
  }
  get(j, "eval_every", c.eval_every);
  get(j, "dead_code_steps", c.dead_code_steps);
  get(j, "holdout_fraction", c.holdout_fraction);
  get(j, "horizon", c.sampling.horizon);
  get(j, "n_buckets", c.sampling.n_buckets);
  get(j, "rotation_threshold", c.sampling.rotation_threshold);
  get(j, "explode_factor", c.stability.explode_factor);
  get(j, "collapse_fraction", c.stability.collapse_fraction);
  get(j, "final_window", c.stability.final_window);
  if (j.contains("model")) {
    const auto& m = j.at("model");
    get(m, "image_h", c.model.image_h);
    get(m, "image_w", c.model.image_w);
    get(m, "idm_hidden", c.model.idm_hidden);
    get(m, "fdm_hidden", c.model.fdm_hidden);
    get(m, "proprio_hidden", c.model.proprio_hidden);
    get(m, "codebook_size", c.model.codebook_size);
    get(m, "code_dim", c.model.code_dim);
    get(m, "n_tokens", c.model.n_tokens);
  }
  return c;
}

double lr_at(int step, const TrainConfig& cfg) {
  if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) {
    return cfg.base_lr;
  }
  return cfg.base_lr * static_cast<double>(std::max(step, 0)) / cfg.warmup_steps;
}

double clip_grad_norm(std::vector<ad::Tensor<float>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    if (!p.has_grad()) {
      continue;
    }
    for (float g : p.grad()) {
      sq += static_cast<double>(g) * g;
    }
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) {
    throw NonFiniteError("non-finite gradient norm");
  }
  if (norm <= max_norm) {
    return 1.0;
  }
  const double factor = max_norm / norm;
  for (auto& p : params) {
    if (!p.has_grad()) {
      continue;
    }
    for (float& g : p.mutable_grad()) {
      g = static_cast<float>(g * factor);
    }
  }
  return factor;
}

template <typename T>
OptState<T> OptState<T>::for_params(const std::vector<ad::Tensor<T>>& params) {
  OptState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.size(), T(0));
    s.v.emplace_back(p.size(), T(0));
  }
  return s;
}

template <typename T>
void adam_step(std::vector<ad::Tensor<T>>& params, OptState<T>& state, double lr,
               const AdamConfig& cfg) {
  if (state.m.size() != params.size()) {
    throw ad::ShapeError("adam_step: optimizer state has " + std::to_string(state.m.size()) +
                         " slots for " + std::to_string(params.size()) + " parameters");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t n = 0; n < params.size(); ++n) {
    auto& p = params[n];
    auto& m = state.m[n];
    auto& v = state.v[n];
    if (m.size() != p.size()) {
      throw ad::ShapeError("adam_step: state size mismatch for parameter " + std::to_string(n));
    }
    if (!p.has_grad()) {
      // Moments still decay on a zero gradient.
      for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = static_cast<T>(cfg.beta1 * m[i]);
        v[i] = static_cast<T>(cfg.beta2 * v[i]);
      }
    }
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (p.has_grad()) {
        const double g = p.grad()[i];
        m[i] = static_cast<T>(cfg.beta1 * m[i] + (1 - cfg.beta1) * g);
        v[i] = static_cast<T>(cfg.beta2 * v[i] + (1 - cfg.beta2) * g * g);
      }
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      data[i] = static_cast<T>(data[i] - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template struct OptState<float>;
template struct OptState<double>;
template void adam_step(std::vector<ad::Tensor<float>>&, OptState<float>&, double,
                        const AdamConfig&);
template void adam_step(std::vector<ad::Tensor<double>>&, OptState<double>&, double,
                        const AdamConfig&);

std::string to_string(Stability s) {
  switch (s) {
    case Stability::kStable: return "stable";
    case Stability::kCollapse: return "collapse";
    case Stability::kExplode: return "explode";
  }
  return "?";
}

Stability parse_stability(const std::string& s) {
  for (Stability v : {Stability::kStable, Stability::kCollapse, Stability::kExplode}) {
    if (s == to_string(v)) {
      return v;
    }
  }
  throw FormatError("unknown stability class '" + s + "'");
}

std::string encode_step_log(const StepLog& log) {
  std::string out = std::string(kLogHeader) + "\n";
  for (const auto& r : log.records) {
    out += std::to_string(r.step) + "," + num(r.loss_total) + "," + num(r.loss_rec) + "," +
           num(r.loss_vq) + "," + num(r.loss_ac) + "," + num(r.loss_proprio) + "," +
           num(r.mean_z_norm) + "," + num(r.lr) + "\n";
  }
  out += "status," + to_string(log.status) + "\n";
  return out;
}

void write_step_log(const StepLog& log, const std::string& path) {
  const std::string text = encode_step_log(log);
  detail::write_file(path, std::vector<char>(text.begin(), text.end()));
}

StepLog parse_step_log(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kLogHeader) {
    throw FormatError("step log: missing or unexpected header");
  }
  StepLog log;
  bool footer = false;
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    if (line.rfind("status,", 0) == 0) {
      log.status = parse_stability(line.substr(7));
      footer = true;
      continue;
    }
    if (footer) {
      throw FormatError("step log: rows after the status footer");
    }
    StepRecord r;
    std::istringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) {
      cells.push_back(cell);
    }
    if (cells.size() != 8) {
      throw FormatError("step log: expected 8 columns in '" + line + "'");
    }
    try {
      r.step = std::stoi(cells[0]);
      double* dst[] = {&r.loss_total, &r.loss_rec, &r.loss_vq, &r.loss_ac,
                       &r.loss_proprio, &r.mean_z_norm, &r.lr};
      for (int c = 0; c < 7; ++c) {
        *dst[c] = std::strtod(cells[static_cast<std::size_t>(c + 1)].c_str(), nullptr);
      }
    } catch (const std::exception&) {
      throw FormatError("step log: bad number in '" + line + "'");
    }
    log.records.push_back(r);
  }
  if (!footer) {
    throw FormatError("step log: missing status footer");
  }
  return log;
}

StepLog read_step_log(const std::string& path) {
  const auto bytes = detail::read_file(path);
  return parse_step_log(std::string(bytes.begin(), bytes.end()));
}

Stability classify_stability(const std::vector<StepRecord>& records, const StabilityThresholds& th) {
  if (records.empty()) {
    throw std::invalid_argument("classify_stability: empty step log");
  }
  const double z0 = records.front().mean_z_norm;
  for (const auto& r : records) {
    if (!std::isfinite(r.loss_total) || !std::isfinite(r.mean_z_norm)) {
      return Stability::kExplode;
    }
    if (r.mean_z_norm > th.explode_factor * z0) {
      return Stability::kExplode;
    }
  }
  const auto window = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(th.final_window * static_cast<double>(records.size()))));
  double tail = 0;
  for (std::size_t n = records.size() - window; n < records.size(); ++n) {
    tail += records[n].mean_z_norm;
  }
  tail /= static_cast<double>(window);
  if (tail < th.collapse_fraction * z0) {
    return Stability::kCollapse;
  }
  return Stability::kStable;
}

Batches sample_batches(const world::Dataset& ds, const std::vector<std::size_t>& trajs,
                       const TrainConfig& cfg, Rng& rng) {
  if (trajs.empty()) {
    throw std::invalid_argument("sample_batches: no trajectories");
  }
  const auto fs = ds.trajectories.at(trajs.front()).frame_size();
  if (fs != static_cast<std::size_t>(cfg.model.image_dim())) {
    throw ConfigError("model.image_h", "dataset frames are " + std::to_string(fs) +
                                           " floats, model expects " +
                                           std::to_string(cfg.model.image_dim()));
  }
  struct Cols {
    std::vector<float> o, s;
    void add(const world::Trajectory& t, int idx) {
      const auto f = t.frame(idx);
      o.insert(o.end(), f.begin(), f.end());
      s.insert(s.end(), t.states[static_cast<std::size_t>(idx)].p.begin(),
               t.states[static_cast<std::size_t>(idx)].p.end());
    }
  };
  auto frames = [&](Cols& c, std::size_t b) {
    return ad::Tensor<float>::from({b, fs}, std::move(c.o));
  };
  auto states = [](Cols& c, std::size_t b) { return ad::Tensor<float>::from({b, 2}, std::move(c.s)); };
  auto pick = [&]() -> const world::Trajectory& {
    return ds.trajectories[trajs[static_cast<std::size_t>(rng.below(trajs.size()))]];
  };

  Batches out;
  const auto bp = static_cast<std::size_t>(cfg.batch_pairs);
  Cols pi, pj;
  for (std::size_t b = 0; b < bp; ++b) {
    const auto& t = pick();
    const auto p = sampling::sample_pair(t, cfg.sampling, rng);
    pi.add(t, p.i);
    pj.add(t, p.j);
  }
  out.pairs = {frames(pi, bp), frames(pj, bp), states(pi, bp), states(pj, bp)};

  const auto bt = static_cast<std::size_t>(cfg.batch_triples);
  Cols ti, tj, tk;
  for (std::size_t b = 0; b < bt; ++b) {
    const auto& t = pick();
    sampling::Triple tr = sampling::sample_triple(t, cfg.sampling, rng);
    while (!sampling::rotation_filter(t, tr, cfg.sampling.rotation_threshold)) {
      tr = sampling::sample_triple(t, cfg.sampling, rng);
    }
    ti.add(t, tr.i);
    tj.add(t, tr.j);
    tk.add(t, tr.k);
  }
  out.triples = {frames(ti, bt), frames(tj, bt), frames(tk, bt),
                 states(ti, bt), states(tj, bt), states(tk, bt)};
  return out;
}

std::vector<char> encode_checkpoint(const ModelParams<float>& params,
                                    const nlohmann::ordered_json& config_snapshot) {
  nlohmann::ordered_json header;
  header["format_version"] = 1;
  auto arrays = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  const auto named = params.named();
  for (const auto& [name, t] : named) {
    nlohmann::ordered_json a;
    a["name"] = name;
    a["shape"] = t.shape();
    a["offset"] = offset;
    arrays.push_back(a);
    offset += t.size() * sizeof(float);
  }
  header["arrays"] = arrays;
  header["config_snapshot"] = config_snapshot;
  const std::string text = header.dump();

  detail::ByteWriter w;
  w.bytes(std::string_view(kMagic, 8));
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  for (const auto& [name, t] : named) {
    w.f32s(t.data());
  }
  return w.buffer();
}

void save_checkpoint(const ModelParams<float>& params, const nlohmann::ordered_json& config_snapshot,
                     const std::string& path) {
  detail::write_file(path, encode_checkpoint(params, config_snapshot));
}

Checkpoint decode_checkpoint(const std::vector<char>& bytes,
                             const std::optional<lam::ModelConfig>& expected) {
  const std::string what = "checkpoint";
  detail::ByteReader r(bytes, what);
  if (r.size() < 8 || r.bytes(8) != std::string(kMagic, 8)) {
    throw FormatError("checkpoint: bad magic (expected ACLAMCK1)");
  }
  const std::uint32_t len = r.u32();
  const std::string text = r.bytes(len);
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
  if (!header.contains("format_version") || header["format_version"] != 1 ||
      !header.contains("arrays") || !header.contains("config_snapshot")) {
    throw FormatError("checkpoint: unsupported header");
  }

  Checkpoint ck;
  ck.config_snapshot = header["config_snapshot"];
  lam::ModelConfig stored;
  try {
    stored = train_config_from_json(ck.config_snapshot).model;
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint: bad config snapshot: ") + e.what());
  }
  ck.params = ModelParams<float>::init(expected ? *expected : stored, 0);

  const auto named = ck.params.named();
  const auto& arrays = header["arrays"];
  if (arrays.size() != named.size()) {
    throw CheckpointMismatchError("checkpoint holds " + std::to_string(arrays.size()) +
                                  " arrays, configuration expects " + std::to_string(named.size()));
  }
  std::size_t offset = 0;
  for (std::size_t n = 0; n < named.size(); ++n) {
    const auto& a = arrays[n];
    const auto& [name, t] = named[n];
    const auto shape = a.at("shape").get<ad::Shape>();
    if (a.at("name").get<std::string>() != name || shape != t.shape()) {
      throw CheckpointMismatchError("checkpoint array " + a.at("name").get<std::string>() + " " +
                                    ad::shape_str(shape) + " does not match expected " + name +
                                    " " + ad::shape_str(t.shape()));
    }
    if (a.at("offset").get<std::size_t>() != offset) {
      throw FormatError("checkpoint: array offsets are not contiguous");
    }
    auto dst = ad::Tensor<float>(t).mutable_data();
    r.f32s(dst);
    offset += dst.size_bytes();
  }
  if (r.remaining() != 0) {
    throw FormatError("checkpoint: trailing bytes after payload");
  }
  return ck;
}

Checkpoint load_checkpoint(const std::string& path, const std::optional<lam::ModelConfig>& expected) {
  return decode_checkpoint(detail::read_file(path), expected);
}

namespace {

std::vector<ad::Tensor<float>> param_list(const ModelParams<float>& p) {
  std::vector<ad::Tensor<float>> out;
  for (const auto& [name, t] : p.named()) {
    out.push_back(t);
  }
  return out;
}

}  // namespace

TrainResult train(const world::Dataset& ds, const TrainConfig& cfg, const TrainOutputs& out,
                  const std::function<void(const StepRecord&)>& on_step) {
  cfg.validate();
  const auto split = world::split_holdout(ds, cfg.holdout_fraction);
  TrainResult res;
  res.params = ModelParams<float>::init(cfg.model, hash_ids({cfg.seed, 0x1a17}));
  auto params = param_list(res.params);
  auto opt = OptState<float>::for_params(params);
  Rng data_rng(hash_ids({cfg.seed, 0xba7c}));
  Rng reseed_rng(hash_ids({cfg.seed, 0xdead}));
  const auto snapshot = to_json(cfg);

  const auto k = static_cast<std::size_t>(cfg.model.codebook_size);
  const auto cd = static_cast<std::size_t>(cfg.model.code_dim);
  std::vector<int> last_used(k, 0);
  std::size_t codebook_slot = 0;
  const auto named = res.params.named();
  while (named[codebook_slot].first != "codebook") {
    ++codebook_slot;
  }

  auto finish = [&](Stability status) {
    res.log.status = status;
    if (!out.step_log_path.empty()) {
      write_step_log(res.log, out.step_log_path);
    }
    if (!out.checkpoint_path.empty()) {
      save_checkpoint(res.params, snapshot, out.checkpoint_path);
    }
  };

  for (int step = 0; step < cfg.steps; ++step) {
    const Batches batches = sample_batches(ds, split.train, cfg, data_rng);
    res.params.zero_grad();
    ad::Graph<float> g;
    const auto br = lam::total_loss(g, res.params, batches.pairs, batches.triples, cfg.weights,
                                    cfg.ac_form, cfg.vq_placement);
    StepRecord rec;
    rec.step = step;
    rec.loss_total = br.total.item();
    rec.loss_rec = br.rec;
    rec.loss_vq = br.vq;
    rec.loss_ac = br.ac;
    rec.loss_proprio = br.proprio;
    rec.mean_z_norm = br.mean_z_norm;
    rec.lr = lr_at(step, cfg);
    res.log.records.push_back(rec);
    if (on_step) {
      on_step(rec);
    }
    if (!std::isfinite(rec.loss_total) || !std::isfinite(rec.mean_z_norm)) {
      res.aborted = true;
      finish(Stability::kExplode);
      return res;
    }
    g.backward(br.total);
    try {
      clip_grad_norm(params, cfg.clip_norm);
    } catch (const NonFiniteError&) {
      res.aborted = true;
      finish(Stability::kExplode);
      return res;
    }
    adam_step(params, opt, rec.lr);

    if (cfg.dead_code_steps > 0) {
      for (std::size_t idx : br.pair_indices) {
        last_used[idx] = step;
      }
      auto book = res.params.codebook.mutable_data();
      const std::size_t slices = br.pair_z_pre.size() / cd;
      for (std::size_t r = 0; r < k; ++r) {
        if (step - last_used[r] >= cfg.dead_code_steps) {
          const std::size_t s = static_cast<std::size_t>(reseed_rng.below(slices));
          std::copy_n(br.pair_z_pre.begin() + static_cast<long>(s * cd), cd,
                      book.begin() + static_cast<long>(r * cd));
          std::fill_n(opt.m[codebook_slot].begin() + static_cast<long>(r * cd), cd, 0.f);
          std::fill_n(opt.v[codebook_slot].begin() + static_cast<long>(r * cd), cd, 0.f);
          last_used[r] = step;
        }
      }
    }

    if (cfg.eval_every > 0 && !out.checkpoint_path.empty() && (step + 1) % cfg.eval_every == 0 &&
        step + 1 < cfg.steps) {
      save_checkpoint(res.params, snapshot, out.checkpoint_path);
    }
  }
  finish(classify_stability(res.log.records, cfg.stability));
  return res;
}

}  // namespace aclam::train
