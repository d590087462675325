#pragma once

// Deterministic 2-D tabletop world: a disk-shaped agent translating over a
// static scene of colored distractor disks. The agent position is the
// proprioceptive state; images are rendered without anti-aliasing so every
// frame is a pure function of (scene, state).

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace aclam::world {

using Rgb = std::array<float, 3>;
using Vec2 = std::array<float, 2>;

struct Distractor {
  Vec2 center{};
  float radius = 0.f;
  Rgb color{};

  bool operator==(const Distractor&) const = default;
};

struct SceneSpec {
  int env_id = 0;
  Rgb background{};
  std::vector<Distractor> distractors;
  float agent_radius = 0.06f;
  Rgb agent_color{1.f, 1.f, 1.f};

  bool operator==(const SceneSpec&) const = default;
};

struct WorldState {
  Vec2 p{};

  bool operator==(const WorldState&) const = default;
};

struct WorldConfig {
  int env_count = 4;
  float step_max = 0.12f;
  float min_step = 0.01f;
  /// Probability that a step which would hit the boundary is redrawn.
  double interior_bias = 0.97;
  int image_h = 32;
  int image_w = 32;
};

/// H x W x 3 image, row-major, channels last, values in [0, 1].
struct Image {
  int h = 0;
  int w = 0;
  std::vector<float> pixels;

  std::span<const float> pixel(int y, int x) const {
    return std::span<const float>(pixels).subspan(static_cast<std::size_t>((y * w + x) * 3), 3);
  }
  bool operator==(const Image&) const = default;
};

struct Trajectory {
  int env_id = 0;
  int image_h = 0;
  int image_w = 0;
  /// Present for generated trajectories; not stored in dataset files.
  std::optional<SceneSpec> scene;
  std::vector<WorldState> states;
  std::vector<Vec2> actions;
  /// T frames of image_h * image_w * 3 floats, concatenated.
  std::vector<float> frames;

  int length() const { return static_cast<int>(states.size()); }
  std::size_t frame_size() const { return static_cast<std::size_t>(image_h * image_w * 3); }
  std::span<const float> frame(int t) const {
    return std::span<const float>(frames).subspan(static_cast<std::size_t>(t) * frame_size(),
                                                  frame_size());
  }
};

SceneSpec make_scene(std::uint64_t seed, int env_id, const WorldConfig& cfg = {});

/// Background color assigned to an environment.
Rgb env_background(int env_id, int env_count);

Image render(const SceneSpec& scene, const WorldState& state, int h, int w);

float margin(const SceneSpec& scene);
WorldState clamp_state(const SceneSpec& scene, WorldState s);
bool would_clamp(const SceneSpec& scene, const WorldState& s, const Vec2& action);

/// p' = clamp(p + action). Throws std::invalid_argument when |action| > step_max.
WorldState step(const SceneSpec& scene, const WorldState& state, const Vec2& action,
                const WorldConfig& cfg = {});

Trajectory gen_trajectory(const SceneSpec& scene, std::uint64_t seed, int steps,
                          const WorldConfig& cfg = {});

// ---- datasets --------------------------------------------------------------

struct DatasetConfig {
  std::uint64_t seed = 0;
  int traj_per_env = 25;
  int steps = 50;
  WorldConfig world;
};

struct DatasetHeader {
  int format_version = 1;
  int image_h = 32;
  int image_w = 32;
  int channels = 3;
  int env_count = 0;
  int traj_count = 0;
  int steps_per_traj = 0;
  std::uint64_t seed = 0;
};

struct Dataset {
  DatasetHeader header;
  /// Stored env-major: all trajectories of env 0, then env 1, ...
  std::vector<Trajectory> trajectories;

  const Trajectory& at(int env_id, int index) const;
  int count_for_env(int env_id) const;
};

/// Trajectory indices of a per-environment split: the last `holdout_fraction`
/// of every environment's trajectories are held out.
struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> heldout;
};
DatasetSplit split_holdout(const Dataset& ds, double holdout_fraction = 0.2);

Dataset gen_dataset(const DatasetConfig& cfg);
std::vector<char> encode_dataset(const Dataset& ds);
void save_dataset(const Dataset& ds, const std::string& path);
/// Generates and writes in one go; returns the in-memory dataset.
Dataset gen_dataset_file(const DatasetConfig& cfg, const std::string& path);
Dataset decode_dataset(std::vector<char> bytes, const std::string& what = "dataset");
Dataset load_dataset(const std::string& path);

}  // namespace aclam::world
