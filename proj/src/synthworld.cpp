#include "aclam/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "aclam/errors.hpp"
#include "aclam/rng.hpp"
#include "binary_io.hpp"

namespace aclam::world {
namespace {

constexpr char kMagic[] = "ACLAMDS1";
constexpr int kMaxSceneAttempts = 10000;

Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = v - c;
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

void check_env(int env_id, int env_count) {
  if (env_count < 1) {
    throw std::invalid_argument("env_count must be >= 1, got " + std::to_string(env_count));
  }
  if (env_id < 0 || env_id >= env_count) {
    throw std::invalid_argument("env_id " + std::to_string(env_id) + " outside [0, " +
                                std::to_string(env_count) + ")");
  }
}

}  // namespace

Rgb env_background(int env_id, int env_count) {
  check_env(env_id, env_count);
  return hsv((env_id + 0.5) / env_count, 0.45, 0.5);
}

SceneSpec make_scene(std::uint64_t seed, int env_id, const WorldConfig& cfg) {
  check_env(env_id, cfg.env_count);
  Rng rng(hash_ids({seed, static_cast<std::uint64_t>(env_id), 0x5CE9EULL}));
  SceneSpec scene;
  scene.env_id = env_id;
  scene.background = env_background(env_id, cfg.env_count);

  // Distractors share a color family: hues opposite the background hue.
  const double family_hue = (env_id + 0.5) / cfg.env_count + 0.5;
  const int count = static_cast<int>(rng.between(2, 5));
  int attempts = 0;
  while (static_cast<int>(scene.distractors.size()) < count) {
    if (++attempts > kMaxSceneAttempts) {
      throw std::runtime_error("make_scene: distractor placement exceeded " +
                               std::to_string(kMaxSceneAttempts) + " attempts");
    }
    Distractor d;
    d.radius = static_cast<float>(rng.uniform(0.04, 0.10));
    d.center = {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform())};
    d.color = hsv(family_hue + rng.uniform(-0.08, 0.08), rng.uniform(0.5, 0.8), rng.uniform(0.6, 0.9));
    const bool clear = std::all_of(scene.distractors.begin(), scene.distractors.end(),
                                   [&](const Distractor& o) {
                                     const double dx = o.center[0] - d.center[0];
                                     const double dy = o.center[1] - d.center[1];
                                     return std::sqrt(dx * dx + dy * dy) >= o.radius + d.radius;
                                   });
    if (clear) {
      scene.distractors.push_back(d);
    }
  }
  return scene;
}

Image render(const SceneSpec& scene, const WorldState& state, int h, int w) {
  if (h < 16 || w < 16) {
    throw std::invalid_argument("render: image extents must be >= 16");
  }
  Image img{h, w, std::vector<float>(static_cast<std::size_t>(h * w * 3))};
  auto paint = [&](float cx, float cy, float r, const Rgb& color) {
    const float r2 = r * r;
    for (int y = 0; y < h; ++y) {
      const float py = (static_cast<float>(y) + 0.5f) / static_cast<float>(h);
      for (int x = 0; x < w; ++x) {
        const float px = (static_cast<float>(x) + 0.5f) / static_cast<float>(w);
        const float dx = px - cx;
        const float dy = py - cy;
        if (dx * dx + dy * dy <= r2) {
          std::copy(color.begin(), color.end(), img.pixels.begin() + (y * w + x) * 3);
        }
      }
    }
  };
  for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
    std::copy(scene.background.begin(), scene.background.end(), img.pixels.begin() + i);
  }
  for (const auto& d : scene.distractors) {
    paint(d.center[0], d.center[1], d.radius, d.color);
  }
  paint(state.p[0], state.p[1], scene.agent_radius, scene.agent_color);
  return img;
}

float margin(const SceneSpec& scene) { return scene.agent_radius; }

WorldState clamp_state(const SceneSpec& scene, WorldState s) {
  const float lo = margin(scene);
  const float hi = 1.f - lo;
  for (float& c : s.p) {
    c = std::clamp(c, lo, hi);
  }
  return s;
}

bool would_clamp(const SceneSpec& scene, const WorldState& s, const Vec2& action) {
  const float lo = margin(scene);
  const float hi = 1.f - lo;
  for (int d = 0; d < 2; ++d) {
    const float v = s.p[d] + action[d];
    if (v < lo || v > hi) {
      return true;
    }
  }
  return false;
}

WorldState step(const SceneSpec& scene, const WorldState& state, const Vec2& action,
                const WorldConfig& cfg) {
  const double norm = std::hypot(static_cast<double>(action[0]), static_cast<double>(action[1]));
  if (norm > static_cast<double>(cfg.step_max) + 1e-6) {
    throw std::invalid_argument("step: action norm " + std::to_string(norm) + " exceeds step_max " +
                                std::to_string(cfg.step_max));
  }
  return clamp_state(scene, WorldState{{state.p[0] + action[0], state.p[1] + action[1]}});
}

Trajectory gen_trajectory(const SceneSpec& scene, std::uint64_t seed, int steps,
                          const WorldConfig& cfg) {
  if (steps < 3) {
    throw std::invalid_argument("gen_trajectory: T must be >= 3");
  }
  Rng rng(hash_ids({seed, 0x7A4EULL}));
  Trajectory traj;
  traj.env_id = scene.env_id;
  traj.image_h = cfg.image_h;
  traj.image_w = cfg.image_w;
  traj.scene = scene;

  const float lo = margin(scene);
  WorldState s{{static_cast<float>(rng.uniform(lo, 1.0 - lo)),
                static_cast<float>(rng.uniform(lo, 1.0 - lo))}};
  s = clamp_state(scene, s);

  auto draw_action = [&]() -> Vec2 {
    const double angle = rng.uniform(0.0, 2.0 * M_PI);
    const double mag = rng.uniform(cfg.min_step, cfg.step_max);
    // Stay strictly inside the step bound after rounding to float.
    const double safe = std::min(mag, static_cast<double>(cfg.step_max) * (1.0 - 1e-6));
    return {static_cast<float>(safe * std::cos(angle)), static_cast<float>(safe * std::sin(angle))};
  };

  traj.states.push_back(s);
  for (int t = 0; t + 1 < steps; ++t) {
    Vec2 a = draw_action();
    if (would_clamp(scene, s, a) && rng.uniform() < cfg.interior_bias) {
      for (int retry = 0; retry < 32 && would_clamp(scene, s, a); ++retry) {
        a = draw_action();
      }
    }
    s = step(scene, s, a, cfg);
    traj.actions.push_back(a);
    traj.states.push_back(s);
  }

  traj.frames.reserve(traj.frame_size() * static_cast<std::size_t>(steps));
  for (const auto& st : traj.states) {
    const Image img = render(scene, st, cfg.image_h, cfg.image_w);
    traj.frames.insert(traj.frames.end(), img.pixels.begin(), img.pixels.end());
  }
  return traj;
}

// ---- datasets --------------------------------------------------------------

const Trajectory& Dataset::at(int env_id, int index) const {
  int seen = 0;
  for (const auto& t : trajectories) {
    if (t.env_id == env_id) {
      if (seen == index) {
        return t;
      }
      ++seen;
    }
  }
  throw std::out_of_range("no trajectory " + std::to_string(index) + " for env " +
                          std::to_string(env_id));
}

int Dataset::count_for_env(int env_id) const {
  return static_cast<int>(std::count_if(trajectories.begin(), trajectories.end(),
                                        [env_id](const Trajectory& t) { return t.env_id == env_id; }));
}

DatasetSplit split_holdout(const Dataset& ds, double holdout_fraction) {
  DatasetSplit split;
  for (int env = 0; env < ds.header.env_count; ++env) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
      if (ds.trajectories[i].env_id == env) {
        idx.push_back(i);
      }
    }
    const auto n = idx.size();
    auto held = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(n)));
    if (n >= 2) {
      held = std::clamp<std::size_t>(held, 1, n - 1);
    } else {
      held = 0;
    }
    split.train.insert(split.train.end(), idx.begin(), idx.end() - static_cast<long>(held));
    split.heldout.insert(split.heldout.end(), idx.end() - static_cast<long>(held), idx.end());
  }
  return split;
}

Dataset gen_dataset(const DatasetConfig& cfg) {
  if (cfg.world.env_count < 1) {
    throw ConfigError("envs", "must be >= 1");
  }
  if (cfg.traj_per_env < 1) {
    throw ConfigError("traj_per_env", "must be >= 1");
  }
  if (cfg.steps < 3) {
    throw ConfigError("steps", "must be >= 3");
  }
  if (cfg.world.image_h < 16 || cfg.world.image_w < 16) {
    throw ConfigError("image_hw", "extents must be >= 16");
  }
  Dataset ds;
  ds.header.image_h = cfg.world.image_h;
  ds.header.image_w = cfg.world.image_w;
  ds.header.env_count = cfg.world.env_count;
  ds.header.traj_count = cfg.world.env_count * cfg.traj_per_env;
  ds.header.steps_per_traj = cfg.steps;
  ds.header.seed = cfg.seed;
  for (int env = 0; env < cfg.world.env_count; ++env) {
    for (int i = 0; i < cfg.traj_per_env; ++i) {
      const std::uint64_t stream =
          hash_ids({cfg.seed, static_cast<std::uint64_t>(env), static_cast<std::uint64_t>(i)});
      const SceneSpec scene = make_scene(stream, env, cfg.world);
      ds.trajectories.push_back(gen_trajectory(scene, stream, cfg.steps, cfg.world));
    }
  }
  return ds;
}

std::vector<char> encode_dataset(const Dataset& ds) {
  nlohmann::ordered_json header;
  header["format_version"] = ds.header.format_version;
  header["image_hw"] = {ds.header.image_h, ds.header.image_w};
  header["channels"] = ds.header.channels;
  header["env_count"] = ds.header.env_count;
  header["traj_count"] = ds.header.traj_count;
  header["steps_per_traj"] = ds.header.steps_per_traj;
  header["seed"] = ds.header.seed;
  header["dtype"] = "f32";
  const std::string text = header.dump();

  detail::ByteWriter w;
  w.bytes(std::string_view(kMagic, 8));
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  for (const auto& t : ds.trajectories) {
    w.u32(static_cast<std::uint32_t>(t.env_id));
    w.u32(static_cast<std::uint32_t>(t.length()));
    w.f32s(t.frames);
    std::vector<float> flat;
    for (const auto& s : t.states) {
      flat.insert(flat.end(), s.p.begin(), s.p.end());
    }
    w.f32s(flat);
    flat.clear();
    for (const auto& a : t.actions) {
      flat.insert(flat.end(), a.begin(), a.end());
    }
    w.f32s(flat);
  }
  return w.buffer();
}

void save_dataset(const Dataset& ds, const std::string& path) {
  detail::write_file(path, encode_dataset(ds));
}

Dataset gen_dataset_file(const DatasetConfig& cfg, const std::string& path) {
  Dataset ds = gen_dataset(cfg);
  save_dataset(ds, path);
  return ds;
}

Dataset decode_dataset(std::vector<char> bytes, const std::string& what) {
  detail::ByteReader r(std::move(bytes), what);
  if (r.size() < 8 || r.bytes(8) != std::string(kMagic, 8)) {
    throw FormatError(what + ": bad magic (expected ACLAMDS1)");
  }
  const std::uint32_t header_len = r.u32();
  const std::string text = r.bytes(header_len);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": header is not valid JSON: " + e.what());
  }

  Dataset ds;
  try {
    ds.header.format_version = header.at("format_version").get<int>();
    ds.header.image_h = header.at("image_hw").at(0).get<int>();
    ds.header.image_w = header.at("image_hw").at(1).get<int>();
    ds.header.channels = header.at("channels").get<int>();
    ds.header.env_count = header.at("env_count").get<int>();
    ds.header.traj_count = header.at("traj_count").get<int>();
    ds.header.steps_per_traj = header.at("steps_per_traj").get<int>();
    ds.header.seed = header.at("seed").get<std::uint64_t>();
    if (header.at("dtype").get<std::string>() != "f32") {
      throw FormatError(what + ": unsupported dtype");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": header field error: " + e.what());
  }
  if (ds.header.format_version != 1 || ds.header.channels != 3 || ds.header.image_h < 1 ||
      ds.header.image_w < 1 || ds.header.traj_count < 0) {
    throw FormatError(what + ": unsupported header values");
  }

  const std::size_t frame_size = static_cast<std::size_t>(ds.header.image_h * ds.header.image_w * 3);
  for (int n = 0; n < ds.header.traj_count; ++n) {
    Trajectory t;
    t.image_h = ds.header.image_h;
    t.image_w = ds.header.image_w;
    t.env_id = static_cast<int>(r.u32());
    const std::uint32_t steps = r.u32();
    if (t.env_id >= ds.header.env_count || steps < 2) {
      throw FormatError(what + ": trajectory " + std::to_string(n) + " record disagrees with header");
    }
    t.frames.resize(frame_size * steps);
    r.f32s(t.frames);
    std::vector<float> flat(2 * static_cast<std::size_t>(steps));
    r.f32s(flat);
    for (std::uint32_t i = 0; i < steps; ++i) {
      t.states.push_back(WorldState{{flat[2 * i], flat[2 * i + 1]}});
    }
    flat.assign(2 * static_cast<std::size_t>(steps - 1), 0.f);
    r.f32s(flat);
    for (std::uint32_t i = 0; i + 1 < steps; ++i) {
      t.actions.push_back(Vec2{flat[2 * i], flat[2 * i + 1]});
    }
    ds.trajectories.push_back(std::move(t));
  }
  if (r.remaining() != 0) {
    throw FormatError(what + ": " + std::to_string(r.remaining()) +
                      " trailing bytes after the last trajectory (header/payload mismatch)");
  }
  return ds;
}

Dataset load_dataset(const std::string& path) {
  return decode_dataset(detail::read_file(path), path);
}

}  // namespace aclam::world
