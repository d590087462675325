#include "aclam/runconfig.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "aclam/errors.hpp"

namespace aclam::run {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) {
    return "";
  }
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || v.empty()) {
    throw ConfigError(key, "cannot parse '" + v + "' as a number");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") {
    return true;
  }
  if (v == "false" || v == "0") {
    return false;
  }
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

std::vector<int> parse_widths(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) {
    out.push_back(parse_number<int>(key, trim(part)));
  }
  return out;
}

template <typename N>
std::string fmt(N v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string fmt_widths(const std::vector<int>& w) {
  std::string s;
  for (std::size_t i = 0; i < w.size(); ++i) {
    s += (i ? "," : "") + std::to_string(w[i]);
  }
  return s;
}

struct Entry {
  std::function<void(RunConfig&, const std::string& key, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename N, typename Ref>
Entry number(Ref ref) {
  return {[ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_number<N>(k, v); },
          [ref](const RunConfig& c) { return fmt<N>(ref(c)); }};
}

template <typename Ref>
Entry widths(Ref ref) {
  return {[ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_widths(k, v); },
          [ref](const RunConfig& c) { return fmt_widths(ref(c)); }};
}

using Table = std::vector<std::pair<std::string, Entry>>;

const Table& table() {
  static const Table t = [] {
    Table t;
    auto add = [&t](const char* k, Entry e) { t.emplace_back(k, std::move(e)); };
    add("seed", number<std::uint64_t>([](auto& c) -> auto& { return c.seed; }));
    add("threads", number<int>([](auto& c) -> auto& { return c.threads; }));
    add("out_dir", {[](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; },
                    [](const RunConfig& c) { return c.out_dir; }});
    // dataset
    add("envs", number<int>([](auto& c) -> auto& { return c.data.world.env_count; }));
    add("traj_per_env", number<int>([](auto& c) -> auto& { return c.data.traj_per_env; }));
    add("steps_per_traj", number<int>([](auto& c) -> auto& { return c.data.steps; }));
    add("image_size", {[](RunConfig& c, const std::string& k, const std::string& v) {
                         c.data.world.image_h = c.data.world.image_w = parse_number<int>(k, v);
                       },
                       [](const RunConfig& c) { return std::to_string(c.data.world.image_h); }});
    add("step_max", number<float>([](auto& c) -> auto& { return c.data.world.step_max; }));
    add("min_step", number<float>([](auto& c) -> auto& { return c.data.world.min_step; }));
    add("interior_bias", number<double>([](auto& c) -> auto& { return c.data.world.interior_bias; }));
    // training
    add("steps", number<int>([](auto& c) -> auto& { return c.train.steps; }));
    add("batch_pairs", number<int>([](auto& c) -> auto& { return c.train.batch_pairs; }));
    add("batch_triples", number<int>([](auto& c) -> auto& { return c.train.batch_triples; }));
    add("base_lr", number<double>([](auto& c) -> auto& { return c.train.base_lr; }));
    add("warmup_steps", number<int>([](auto& c) -> auto& { return c.train.warmup_steps; }));
    add("clip_norm", number<double>([](auto& c) -> auto& { return c.train.clip_norm; }));
    add("lambda_ac", number<double>([](auto& c) -> auto& { return c.train.weights.lambda_ac; }));
    add("beta_commit", number<double>([](auto& c) -> auto& { return c.train.weights.beta_commit; }));
    add("w_codebook", number<double>([](auto& c) -> auto& { return c.train.weights.w_codebook; }));
    add("w_proprio", number<double>([](auto& c) -> auto& { return c.train.weights.w_proprio; }));
    add("ac_proprio", {[](RunConfig& c, const std::string& k, const std::string& v) {
                         c.train.weights.ac_proprio = parse_bool(k, v);
                       },
                       [](const RunConfig& c) { return std::string(c.train.weights.ac_proprio ? "true" : "false"); }});
    add("ac_form", {[](RunConfig& c, const std::string& k, const std::string& v) {
                      try {
                        c.train.ac_form = lam::parse_ac_form(v);
                      } catch (const std::invalid_argument& e) {
                        throw ConfigError(k, e.what());
                      }
                    },
                    [](const RunConfig& c) { return lam::to_string(c.train.ac_form); }});
    add("vq_placement", {[](RunConfig& c, const std::string& k, const std::string& v) {
                           try {
                             c.train.vq_placement = lam::parse_placement(v);
                           } catch (const std::invalid_argument& e) {
                             throw ConfigError(k, e.what());
                           }
                         },
                         [](const RunConfig& c) { return lam::to_string(c.train.vq_placement); }});
    add("eval_every", number<int>([](auto& c) -> auto& { return c.train.eval_every; }));
    add("dead_code_steps", number<int>([](auto& c) -> auto& { return c.train.dead_code_steps; }));
    add("holdout_fraction", number<double>([](auto& c) -> auto& { return c.train.holdout_fraction; }));
    add("horizon", number<int>([](auto& c) -> auto& { return c.train.sampling.horizon; }));
    add("n_buckets", number<int>([](auto& c) -> auto& { return c.train.sampling.n_buckets; }));
    add("rotation_threshold",
        number<double>([](auto& c) -> auto& { return c.train.sampling.rotation_threshold; }));
    add("explode_factor", number<double>([](auto& c) -> auto& { return c.train.stability.explode_factor; }));
    add("collapse_fraction",
        number<double>([](auto& c) -> auto& { return c.train.stability.collapse_fraction; }));
    add("final_window", number<double>([](auto& c) -> auto& { return c.train.stability.final_window; }));
    add("idm_hidden", widths([](auto& c) -> auto& { return c.train.model.idm_hidden; }));
    add("fdm_hidden", widths([](auto& c) -> auto& { return c.train.model.fdm_hidden; }));
    add("proprio_hidden", widths([](auto& c) -> auto& { return c.train.model.proprio_hidden; }));
    add("codebook_size", number<int>([](auto& c) -> auto& { return c.train.model.codebook_size; }));
    add("code_dim", number<int>([](auto& c) -> auto& { return c.train.model.code_dim; }));
    add("n_tokens", number<int>([](auto& c) -> auto& { return c.train.model.n_tokens; }));
    // evaluation
    add("eval_n", number<int>([](auto& c) -> auto& { return c.eval.n; }));
    add("cycle_len", number<int>([](auto& c) -> auto& { return c.eval.cycle_len; }));
    add("probe_per_env", number<int>([](auto& c) -> auto& { return c.eval.probe_per_env; }));
    add("probe_iters", number<int>([](auto& c) -> auto& { return c.eval.probe_iters; }));
    add("probe_lr", number<double>([](auto& c) -> auto& { return c.eval.probe_lr; }));
    add("probe_test_fraction", number<double>([](auto& c) -> auto& { return c.eval.probe_test_fraction; }));
    add("placement", {[](RunConfig& c, const std::string& k, const std::string& v) {
                        try {
                          c.placement = lam::parse_placement(v);
                        } catch (const std::invalid_argument& e) {
                          throw ConfigError(k, e.what());
                        }
                      },
                      [](const RunConfig& c) { return lam::to_string(c.placement); }});
    add("norm_traj_count", number<int>([](auto& c) -> auto& { return c.norm_traj_count; }));
    add("transfer_count", number<int>([](auto& c) -> auto& { return c.transfer_count; }));
    return t;
  }();
  return t;
}

const Entry& entry(const std::string& key) {
  for (const auto& [k, e] : table()) {
    if (k == key) {
      return e;
    }
  }
  throw ConfigError(key, "unknown configuration key");
}

}  // namespace

RunConfig::RunConfig() { eval.sampling = train.sampling; }

void RunConfig::validate() const {
  auto need = [](bool ok, const char* key, const char* what) {
    if (!ok) {
      throw ConfigError(key, what);
    }
  };
  need(threads >= 0, "threads", "must be >= 0");
  need(data.world.env_count >= 1, "envs", "must be >= 1");
  need(data.traj_per_env >= 1, "traj_per_env", "must be >= 1");
  need(data.steps >= 2, "steps_per_traj", "must be >= 2");
  need(data.world.image_h >= 16, "image_size", "must be >= 16");
  need(data.world.step_max > data.world.min_step && data.world.min_step >= 0, "step_max",
       "need step_max > min_step >= 0");
  need(data.world.interior_bias >= 0 && data.world.interior_bias <= 1, "interior_bias", "must be in [0, 1]");
  train.validate();
  need(eval.n >= 1, "eval_n", "must be >= 1");
  need(eval.cycle_len >= 2, "cycle_len", "must be >= 2");
  need(eval.probe_per_env >= 5, "probe_per_env", "must be >= 5");
  need(eval.probe_iters >= 1, "probe_iters", "must be >= 1");
  need(eval.probe_lr > 0, "probe_lr", "must be positive");
  need(eval.probe_test_fraction > 0 && eval.probe_test_fraction < 1, "probe_test_fraction",
       "must be in (0, 1)");
  need(norm_traj_count >= 0, "norm_traj_count", "must be >= 0");
  need(transfer_count >= 0, "transfer_count", "must be >= 0");
  for (const auto& [key, w] : {std::pair{"idm_hidden", &train.model.idm_hidden},
                               std::pair{"fdm_hidden", &train.model.fdm_hidden},
                               std::pair{"proprio_hidden", &train.model.proprio_hidden}}) {
    for (int v : *w) {
      need(v >= 1, key, "widths must be >= 1");
    }
  }
}

const std::vector<std::string>& keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [name, e] : table()) {
      out.push_back(name);
    }
    return out;
  }();
  return k;
}

void set(RunConfig& cfg, const std::string& key, const std::string& value) {
  entry(key).set(cfg, key, value);
  // Metric sampling follows the training sampler.
  cfg.eval.sampling = cfg.train.sampling;
}

std::string get(const RunConfig& cfg, const std::string& key) { return entry(key).get(cfg); }

void apply_text(RunConfig& cfg, const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  int n = 0;
  while (std::getline(ss, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) {
      line.resize(hash);
    }
    line = trim(line);
    if (line.empty()) {
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(n), "expected key = value");
    }
    set(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void apply_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open config " + path);
  }
  std::stringstream ss;
  ss << in.rdbuf();
  apply_text(cfg, ss.str());
}

std::string encode(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, e] : table()) {
    out += k + " = " + e.get(cfg) + "\n";
  }
  return out;
}

}  // namespace aclam::run
