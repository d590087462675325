// aclam: dataset generation, training, evaluation, ablation grid and probes.
//
// Exit codes: 0 ok, 2 configuration error, 3 I/O or format error, 4 training
// exploded, 5 checkpoint does not match the dataset or config, 6 a probe class
// is under-populated.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "aclam/ablation.hpp"
#include "aclam/errors.hpp"
#include "aclam/runconfig.hpp"

namespace fs = std::filesystem;
using namespace aclam;

namespace {

enum Exit { kOk = 0, kConfig = 2, kIo = 3, kExplode = 4, kMismatch = 5, kProbeClass = 6 };

struct ProbeClassError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flag values are kept as text and applied over the config file.
struct Flags {
  std::map<std::string, std::string> text;
  std::vector<std::pair<CLI::Option*, std::string>> bound;

  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    bound.emplace_back(app->add_option(flag, text[key], help), key);
  }
  void apply(run::RunConfig& cfg) const {
    for (const auto& [opt, key] : bound) {
      if (opt->count() > 0) {
        run::set(cfg, key, text.at(key));
      }
    }
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) {
    throw IoError("cannot write " + path);
  }
}

std::string in_out_dir(const run::RunConfig& cfg, const std::string& given, const std::string& name) {
  if (!given.empty()) {
    return given;
  }
  return (fs::path(cfg.out_dir) / name).string();
}

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) {
    std::error_code ec;
    fs::create_directories(parent, ec);
    if (ec) {
      throw IoError("cannot create directory " + parent.string() + ": " + ec.message());
    }
  }
}

void write_config(const run::RunConfig& cfg, const std::string& output) {
  const auto path = output + ".config";
  write_text(path, run::encode(cfg));
  std::cout << path << "\n";
}

std::string sibling(const std::string& path, const std::string& suffix) {
  fs::path p(path);
  return (p.parent_path() / (p.stem().string() + suffix)).string();
}

// Loads a checkpoint and checks it against the dataset frames.
train::Checkpoint load_for(const std::string& path, const world::Dataset& ds) {
  auto ck = train::load_checkpoint(path);
  const auto& m = ck.params.config;
  if (m.image_h != ds.header.image_h || m.image_w != ds.header.image_w) {
    throw CheckpointMismatchError("checkpoint expects " + std::to_string(m.image_h) + "x" +
                                  std::to_string(m.image_w) + " frames, dataset has " +
                                  std::to_string(ds.header.image_h) + "x" +
                                  std::to_string(ds.header.image_w));
  }
  return ck;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

int cmd_gen_data(run::RunConfig cfg, const std::string& out_arg) {
  const auto out = in_out_dir(cfg, out_arg, "dataset.aclamds");
  ensure_parent(out);
  cfg.data.seed = cfg.seed;
  const auto ds = world::gen_dataset(cfg.data);
  world::save_dataset(ds, out);
  std::cout << out << "\n";
  write_config(cfg, out);
  const auto& h = ds.header;
  std::cerr << "ACLAMDS1 v" << h.format_version << ": " << h.env_count << " envs, " << h.traj_count
            << " trajectories x " << h.steps_per_traj << " steps, " << h.image_h << "x" << h.image_w
            << "x" << h.channels << ", seed " << h.seed << "\n";
  return kOk;
}

int cmd_train(run::RunConfig cfg, const std::string& data, const std::string& out_arg) {
  const auto ds = world::load_dataset(data);
  auto tc = cfg.train;
  tc.seed = cfg.seed;
  tc.model.image_h = ds.header.image_h;
  tc.model.image_w = ds.header.image_w;
  cfg.train = tc;
  tc.validate();
  const auto ck = in_out_dir(cfg, out_arg, "checkpoint.aclamck");
  ensure_parent(ck);
  const auto log = sibling(ck, ".steplog.csv");
  const auto res = train::train(ds, tc, {ck, log});
  std::cout << ck << "\n" << log << "\n";
  write_config(cfg, ck);
  const auto& last = res.log.records.back();
  std::cerr << "step " << last.step << ": total " << fmt(last.loss_total) << ", rec " << fmt(last.loss_rec)
            << ", proprio " << fmt(last.loss_proprio) << ", vq " << fmt(last.loss_vq) << ", ac "
            << fmt(last.loss_ac) << ", mean |z| " << fmt(last.mean_z_norm) << "\n"
            << "stability: " << train::to_string(res.log.status) << "\n";
  return res.aborted || res.log.status == train::Stability::kExplode ? kExplode : kOk;
}

int cmd_eval(run::RunConfig cfg, const std::string& data, const std::string& checkpoint,
             const std::string& out_arg) {
  const auto ds = world::load_dataset(data);
  const auto ck = load_for(checkpoint, ds);
  const auto tc = train::train_config_from_json(ck.config_snapshot);
  const auto heldout = world::split_holdout(ds, tc.holdout_fraction).heldout;
  if (heldout.empty()) {
    throw ConfigError("holdout_fraction", "the dataset has no held-out trajectories");
  }
  const auto out = in_out_dir(cfg, out_arg, "report.json");
  ensure_parent(out);
  const auto dir = fs::path(out).parent_path();

  const auto f = metrics::model_latents(ck.params, ds, cfg.placement);
  const auto report = metrics::evaluate(f, ds, heldout, cfg.eval, cfg.seed, cfg.placement);
  write_text(out, metrics::to_json(report).dump(2) + "\n");
  std::cout << out << "\n";

  const auto k = std::min<std::size_t>(static_cast<std::size_t>(cfg.norm_traj_count), heldout.size());
  for (std::size_t n = 0; n < k; ++n) {
    const auto path = (dir / ("norm_traj_" + std::to_string(heldout[n]) + ".csv")).string();
    write_text(path, metrics::encode_norm_trace_csv(metrics::norm_trajectory(f, ds, heldout[n])));
    std::cout << path << "\n";
  }

  if (cfg.transfer_count > 0) {
    Rng rng(hash_ids({cfg.seed, 0x7a5f}));
    const auto cases = metrics::sample_transfer_cases(ds, heldout, cfg.eval.sampling, cfg.transfer_count, rng);
    std::string summary = "case,src_traj,i,j,k,target_traj,target_frame,mse\n";
    const int h = ds.header.image_h, w = ds.header.image_w;
    for (std::size_t n = 0; n < cases.size(); ++n) {
      const auto& c = cases[n];
      const auto t = metrics::motion_transfer(ck.params, cfg.placement, ds, c);
      const auto stem = (dir / ("transfer_" + std::to_string(n))).string();
      for (const auto& [tag, img] : {std::pair{"_direct", &t.direct}, std::pair{"_composed", &t.composed}}) {
        metrics::write_ppm(stem + tag + ".ppm", *img, h, w);
        metrics::write_raw_f32(stem + tag + ".f32", *img);
        std::cout << stem << tag << ".ppm\n" << stem << tag << ".f32\n";
      }
      summary += std::to_string(n) + "," + std::to_string(c.src) + "," + std::to_string(c.triple.i) + "," +
                 std::to_string(c.triple.j) + "," + std::to_string(c.triple.k) + "," +
                 std::to_string(c.target) + "," + std::to_string(c.target_frame) + "," + fmt(t.mse) + "\n";
    }
    const auto path = (dir / "transfer.csv").string();
    write_text(path, summary);
    std::cout << path << "\n";
  }
  write_config(cfg, out);
  return kOk;
}

int cmd_ablate(run::RunConfig cfg, const std::string& data, const std::string& out_arg) {
  const auto ds = world::load_dataset(data);
  auto tc = cfg.train;
  tc.model.image_h = ds.header.image_h;
  tc.model.image_w = ds.header.image_w;
  tc.validate();
  const auto out = in_out_dir(cfg, out_arg, "ablation.csv");
  ensure_parent(out);
  const auto cells = ablation::run_grid(ds, tc, cfg.eval, {0, 1, 2}, cfg.seed, [](const ablation::Cell& c) {
    std::cerr << c.design << " seed " << c.seed << ": " << train::to_string(c.stability);
    if (c.evaluated) {
      std::cerr << ", norm_ac " << fmt(c.report.norm_ac.value) << ", r " << fmt(c.report.pearson_r.value);
    }
    std::cerr << "\n";
  });
  write_text(out, ablation::encode_csv(cells));
  std::cout << out << "\n";
  write_config(cfg, out);
  return kOk;
}

int cmd_probe(run::RunConfig cfg, const std::string& data, const std::string& checkpoint,
              const std::string& out_arg) {
  const auto ds = world::load_dataset(data);
  const auto ck = load_for(checkpoint, ds);
  const auto tc = train::train_config_from_json(ck.config_snapshot);
  const auto heldout = world::split_holdout(ds, tc.holdout_fraction).heldout;
  const auto f = metrics::model_latents(ck.params, ds, cfg.placement);
  auto stream = [&](std::uint64_t k) { return Rng(hash_ids({cfg.seed, 0x9b0e, k})); };
  Rng r1 = stream(1), r2 = stream(2), r3 = stream(3), r4 = stream(4), r5 = stream(5);

  std::vector<int> held_per_env(static_cast<std::size_t>(ds.header.env_count), 0);
  for (std::size_t t : heldout) {
    ++held_per_env[static_cast<std::size_t>(ds.trajectories[t].env_id)];
  }
  for (std::size_t e = 0; e < held_per_env.size(); ++e) {
    if (held_per_env[e] == 0) {
      throw ProbeClassError("environment " + std::to_string(e) + " has no held-out trajectories");
    }
  }
  const auto probe = metrics::build_probe_dataset(f, ds, heldout, cfg.eval, r1);
  std::vector<int> counts(static_cast<std::size_t>(ds.header.env_count), 0);
  for (int l : probe.env_labels) {
    ++counts[static_cast<std::size_t>(l)];
  }
  for (std::size_t e = 0; e < counts.size(); ++e) {
    if (counts[e] < 5) {
      throw ProbeClassError("environment " + std::to_string(e) + " has " + std::to_string(counts[e]) +
                            " held-out probe samples (need 5)");
    }
  }
  const double acc = metrics::logistic_probe(probe.latents, probe.env_labels, cfg.eval, r2);
  auto shuffled = probe.env_labels;
  for (std::size_t n = shuffled.size(); n > 1; --n) {
    std::swap(shuffled[n - 1], shuffled[static_cast<std::size_t>(r3.below(n))]);
  }
  const double control = metrics::logistic_probe(probe.latents, shuffled, cfg.eval, r4);
  const auto goal = metrics::goal_probe(probe.latents, probe.start_states, probe.goal_states, cfg.eval, r5);

  nlohmann::ordered_json j;
  j["env_probe_acc"] = acc;
  j["shuffled_control_acc"] = control;
  j["chance"] = 1.0 / static_cast<double>(counts.size());
  j["goal_probe_r2"] = goal.r2;
  j["goal_probe_ridge"] = goal.ridge;
  j["class_counts"] = counts;
  j["seed"] = cfg.seed;
  j["placement"] = lam::to_string(cfg.placement);
  const auto out = in_out_dir(cfg, out_arg, "probe.json");
  ensure_parent(out);
  write_text(out, j.dump(2) + "\n");
  std::cout << out << "\n";
  write_config(cfg, out);
  std::cerr << "env probe " << fmt(acc) << " (shuffled " << fmt(control) << ", chance " << fmt(j["chance"])
            << "), goal R^2 " << fmt(goal.r2) << ", class counts";
  for (int c : counts) {
    std::cerr << " " << c;
  }
  std::cerr << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"aclam: additively compositional latent action lab"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags flags;
  std::string config_path;
  app.add_option("--config", config_path, "flat key = value config file");
  flags.add(&app, "--seed", "seed", "seed for the command's random streams");
  flags.add(&app, "--out-dir", "out_dir", "directory for default output paths");
  flags.add(&app, "--threads", "threads", "0 = deterministic single thread (runs are always single-threaded)");

  std::string out, data, checkpoint;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  flags.add(gen, "--envs", "envs", "number of environments");
  flags.add(gen, "--traj-per-env", "traj_per_env", "trajectories per environment");
  flags.add(gen, "--steps", "steps_per_traj", "frames per trajectory");
  flags.add(gen, "--image-size", "image_size", "frame height and width");
  gen->add_option("--out", out, "dataset path");

  auto* tr = app.add_subcommand("train", "train a latent action model");
  tr->add_option("--data", data, "dataset path")->required();
  flags.add(tr, "--steps", "steps", "training steps");
  flags.add(tr, "--lambda-ac", "lambda_ac", "weight of the composition term");
  flags.add(tr, "--ac-form", "ac_form", "fdm | idm-no-sg | idm-sg-zik | idm-sg-sum");
  flags.add(tr, "--vq-placement", "vq_placement", "post | pre");
  tr->add_option("--out", out, "checkpoint path");

  auto* ev = app.add_subcommand("eval", "metrics report, norm traces and motion transfer");
  ev->add_option("--data", data, "dataset path")->required();
  ev->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
  flags.add(ev, "--placement", "placement", "post | pre");
  flags.add(ev, "--norm-traj-count", "norm_traj_count", "held-out trajectories with norm traces");
  flags.add(ev, "--transfer-count", "transfer_count", "motion-transfer cases");
  ev->add_option("--out", out, "report path");

  auto* ab = app.add_subcommand("ablate", "design grid over seeds 0, 1, 2");
  ab->add_option("--data", data, "dataset path")->required();
  flags.add(ab, "--steps", "steps", "training steps per cell");
  ab->add_option("--out", out, "CSV path");

  auto* pr = app.add_subcommand("probe", "environment and goal probes");
  pr->add_option("--data", data, "dataset path")->required();
  pr->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
  flags.add(pr, "--placement", "placement", "post | pre");
  pr->add_option("--out", out, "probe JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    run::RunConfig cfg;
    if (!config_path.empty()) {
      run::apply_file(cfg, config_path);
    }
    flags.apply(cfg);
    cfg.validate();
    if (gen->parsed()) {
      return cmd_gen_data(cfg, out);
    }
    if (tr->parsed()) {
      return cmd_train(cfg, data, out);
    }
    if (ev->parsed()) {
      return cmd_eval(cfg, data, checkpoint, out);
    }
    if (ab->parsed()) {
      return cmd_ablate(cfg, data, out);
    }
    return cmd_probe(cfg, data, checkpoint, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const CheckpointMismatchError& e) {
    std::cerr << "checkpoint mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const ProbeClassError& e) {
    std::cerr << "probe: " << e.what() << "\n";
    return kProbeClass;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
