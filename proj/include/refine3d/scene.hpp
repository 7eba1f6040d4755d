#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "refine3d/config.hpp"
#include "refine3d/geometry.hpp"

namespace refine3d {

/// Combines two seeds into a well-spread 64-bit seed.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

struct Scene {
  std::vector<Vec3> points;
  std::vector<Roi> boxes;
};

struct ObjectClass {
  std::string name;
  Vec3 size;               // mean size, meters
  double size_sigma = 0.0;  // log-space spread of each dimension
};

/// Synthetic scene distribution: a ground plane at z = 0 with boxes standing
/// on it, sampled on their upper five faces.
struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t boxes_min = 3;
  std::size_t boxes_max = 6;
  std::vector<ObjectClass> classes{
      {"car", {4.0, 1.8, 1.6}, 0.05},
      {"pedestrian", {0.8, 0.8, 1.7}, 0.05},
  };
  std::vector<double> class_weights{0.7, 0.3};
  std::size_t points_min = 150;
  std::size_t points_max = 300;
  std::size_t ground_points = 1500;
  double noise = 0.02;
  /// Boxes and ground are placed inside [area_min, area_max] (x, y).
  Vec3 area_min{2.0, -14.0, 0.0};
  Vec3 area_max{30.0, 14.0, 0.0};
  std::size_t max_attempts = 10000;

  void validate() const;
  static SceneSpec from_config(const Config& cfg, std::uint64_t seed);
};

/// Deterministic in (spec.seed, index). Throws ConfigError when boxes cannot
/// be placed without overlap within spec.max_attempts draws.
Scene generate_scene(const SceneSpec& spec, std::size_t index);

/// Writes scene_0000.json ... into `dir`; returns the written paths.
std::vector<std::filesystem::path> gen_scenes(const SceneSpec& spec, std::size_t count,
                                              const std::filesystem::path& dir);

std::string scene_to_json(const Scene& scene);
Scene scene_from_json(const std::string& text);
void save_scene(const Scene& scene, const std::filesystem::path& path);
Scene load_scene(const std::filesystem::path& path);
/// All scene_*.json files of a directory in name order.
std::vector<Scene> load_scene_dir(const std::filesystem::path& dir);

struct ProposalJitter {
  Vec3 translation_sigma{0.3, 0.3, 0.3};
  double size_sigma = 0.05;  // log-space
  double yaw_sigma = 0.1;
  double drop_rate = 0.0;
  /// Chance, per ground-truth box, of adding one spurious box.
  double spurious_rate = 0.0;
  Vec3 area_min{2.0, -14.0, 0.0};
  Vec3 area_max{30.0, 14.0, 0.0};

  void validate() const;
  static ProposalJitter from_config(const Config& cfg);
};

/// Perturbs every kept gt box and injects spurious boxes. Gt-derived
/// proposals get confidence in [0.5, 1), spurious ones in [0, 0.5).
std::vector<Roi> jitter_proposals(std::span<const Roi> gts, const ProposalJitter& jitter,
                                  std::uint64_t seed, std::span<const ObjectClass> classes = {});

}  // namespace refine3d
