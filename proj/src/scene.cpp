#include "refine3d/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "refine3d/tensor.hpp"

namespace refine3d {

using json = nlohmann::json;

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

namespace {

// Shrinks surface samples slightly so rounding in the frame transforms can
// never push a noise-free point outside its box.
constexpr double kSurfaceInset = 0.999;

Vec3 sample_surface(const Roi& box, std::mt19937_64& rng) {
  const double hx = 0.5 * box.size.x * kSurfaceInset;
  const double hy = 0.5 * box.size.y * kSurfaceInset;
  const double hz = 0.5 * box.size.z * kSurfaceInset;
  // Top face plus four sides, area-weighted.
  const double areas[5] = {4 * hx * hy, 4 * hx * hz, 4 * hx * hz, 4 * hy * hz, 4 * hy * hz};
  std::discrete_distribution<int> face(std::begin(areas), std::end(areas));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double a = u(rng), b = u(rng);
  Vec3 c;
  switch (face(rng)) {
    case 0: c = {a * hx, b * hy, hz}; break;
    case 1: c = {a * hx, hy, b * hz}; break;
    case 2: c = {a * hx, -hy, b * hz}; break;
    case 3: c = {hx, a * hy, b * hz}; break;
    default: c = {-hx, a * hy, b * hz}; break;
  }
  return from_canonical(c, box);
}

}  // namespace

void SceneSpec::validate() const {
  if (boxes_min > boxes_max) throw ConfigError("scene.boxes_min exceeds scene.boxes_max");
  if (points_min > points_max) throw ConfigError("scene.points_min exceeds scene.points_max");
  if (!(noise >= 0.0)) throw ConfigError("scene.noise must be non-negative");
  if (classes.empty() || classes.size() != class_weights.size()) {
    throw ConfigError("scene classes and class weights must be non-empty and aligned");
  }
  for (const auto& c : classes) {
    if (!(c.size.x > 0 && c.size.y > 0 && c.size.z > 0) || c.size_sigma < 0.0) {
      throw ConfigError("scene class " + c.name + " has an invalid size");
    }
  }
  if (!(area_max.x > area_min.x && area_max.y > area_min.y)) {
    throw ConfigError("scene area is empty");
  }
}

SceneSpec SceneSpec::from_config(const Config& cfg, std::uint64_t seed) {
  SceneSpec s;
  s.seed = seed;
  s.boxes_min = cfg.get_size("scene.boxes_min", s.boxes_min);
  s.boxes_max = cfg.get_size("scene.boxes_max", s.boxes_max);
  s.points_min = cfg.get_size("scene.points_min", s.points_min);
  s.points_max = cfg.get_size("scene.points_max", s.points_max);
  s.ground_points = cfg.get_size("scene.ground_points", s.ground_points);
  s.noise = cfg.get_double("scene.noise", s.noise);
  s.area_min = cfg.get_vec3("scene.area_min", s.area_min);
  s.area_max = cfg.get_vec3("scene.area_max", s.area_max);
  s.max_attempts = cfg.get_size("scene.max_attempts", s.max_attempts);
  s.class_weights = cfg.get_doubles("scene.class_weights", s.class_weights);
  s.validate();
  return s;
}

Scene generate_scene(const SceneSpec& spec, std::size_t index) {
  spec.validate();
  std::mt19937_64 rng(mix_seed(spec.seed, index));
  std::uniform_int_distribution<std::size_t> nbox(spec.boxes_min, spec.boxes_max);
  std::discrete_distribution<std::size_t> cls(spec.class_weights.begin(),
                                              spec.class_weights.end());
  std::uniform_real_distribution<double> ux(spec.area_min.x, spec.area_max.x);
  std::uniform_real_distribution<double> uy(spec.area_min.y, spec.area_max.y);
  std::uniform_real_distribution<double> uyaw(-std::numbers::pi, std::numbers::pi);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Scene scene;
  const auto target = nbox(rng);
  std::size_t attempts = 0;
  while (scene.boxes.size() < target) {
    if (++attempts > spec.max_attempts) {
      throw ConfigError("could not place " + std::to_string(target) +
                        " non-overlapping boxes in " +
                        std::to_string(spec.max_attempts) + " attempts");
    }
    const auto c = cls(rng);
    const auto& oc = spec.classes[c];
    Roi box;
    box.cls = static_cast<int>(c);
    box.size = {oc.size.x * std::exp(oc.size_sigma * gauss(rng)),
                oc.size.y * std::exp(oc.size_sigma * gauss(rng)),
                oc.size.z * std::exp(oc.size_sigma * gauss(rng))};
    box.center = {ux(rng), uy(rng), 0.5 * box.size.z};
    box.yaw = wrap_angle(uyaw(rng));
    // Keep a small gap between footprints.
    Roi grown = box;
    grown.size = box.size + Vec3{0.5, 0.5, 0.0};
    bool overlaps = false;
    for (const auto& other : scene.boxes) {
      if (bev_intersection_area(grown, other) > 0.0) {
        overlaps = true;
        break;
      }
    }
    if (!overlaps) scene.boxes.push_back(box);
  }

  std::uniform_int_distribution<std::size_t> npts(spec.points_min, spec.points_max);
  for (const auto& box : scene.boxes) {
    const auto n = npts(rng);
    for (std::size_t i = 0; i < n; ++i) {
      Vec3 p = sample_surface(box, rng);
      if (spec.noise > 0.0) {
        p = p + Vec3{gauss(rng), gauss(rng), gauss(rng)} * spec.noise;
      }
      scene.points.push_back(p);
    }
  }
  for (std::size_t i = 0; i < spec.ground_points; ++i) {
    const Vec3 p{ux(rng), uy(rng), spec.noise * gauss(rng)};
    bool under_box = false;
    for (const auto& box : scene.boxes) {
      const Vec3 q = to_canonical(p, box);
      if (std::abs(q.x) <= 0.5 * box.size.x && std::abs(q.y) <= 0.5 * box.size.y) {
        under_box = true;
        break;
      }
    }
    if (!under_box) scene.points.push_back(p);
  }
  return scene;
}

std::vector<std::filesystem::path> gen_scenes(const SceneSpec& spec, std::size_t count,
                                              const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (count == 0) return out;
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%04zu.json", i);
    out.push_back(dir / name);
    save_scene(generate_scene(spec, i), out.back());
  }
  return out;
}

std::string scene_to_json(const Scene& scene) {
  json j;
  j["points"] = json::array();
  for (const auto& p : scene.points) j["points"].push_back({p.x, p.y, p.z});
  j["boxes"] = json::array();
  for (const auto& b : scene.boxes) {
    j["boxes"].push_back({{"center", {b.center.x, b.center.y, b.center.z}},
                          {"size", {b.size.x, b.size.y, b.size.z}},
                          {"yaw", b.yaw},
                          {"cls", b.cls}});
  }
  return j.dump();
}

Scene scene_from_json(const std::string& text) {
  Scene scene;
  try {
    const auto j = json::parse(text);
    for (const auto& p : j.at("points")) {
      scene.points.push_back({p.at(0).get<double>(), p.at(1).get<double>(),
                              p.at(2).get<double>()});
    }
    for (const auto& b : j.at("boxes")) {
      Roi r;
      const auto& c = b.at("center");
      const auto& s = b.at("size");
      r.center = {c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>()};
      r.size = {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
      r.yaw = wrap_angle(b.at("yaw").get<double>());
      r.cls = b.at("cls").get<int>();
      validate(r);
      scene.boxes.push_back(r);
    }
  } catch (const json::exception& e) {
    throw ContractError(std::string("malformed scene file: ") + e.what());
  }
  return scene;
}

void save_scene(const Scene& scene, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write " + path.string());
  out << scene_to_json(scene) << '\n';
}

Scene load_scene(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return scene_from_json(ss.str());
}

std::vector<Scene> load_scene_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  if (!std::filesystem::is_directory(dir)) {
    throw ContractError("scene directory " + dir.string() + " does not exist");
  }
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("scene_", 0) == 0 && e.path().extension() == ".json") {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<Scene> scenes;
  for (const auto& f : files) scenes.push_back(load_scene(f));
  return scenes;
}

void ProposalJitter::validate() const {
  if (translation_sigma.x < 0 || translation_sigma.y < 0 || translation_sigma.z < 0 ||
      size_sigma < 0 || yaw_sigma < 0) {
    throw ConfigError("jitter sigmas must be non-negative");
  }
  if (drop_rate < 0 || drop_rate > 1 || spurious_rate < 0 || spurious_rate > 1) {
    throw ConfigError("jitter rates must be in [0, 1]");
  }
}

ProposalJitter ProposalJitter::from_config(const Config& cfg) {
  ProposalJitter j;
  j.translation_sigma = cfg.get_vec3("jitter.translation", j.translation_sigma);
  j.size_sigma = cfg.get_double("jitter.size", j.size_sigma);
  j.yaw_sigma = cfg.get_double("jitter.yaw", j.yaw_sigma);
  j.drop_rate = cfg.get_double("jitter.drop", j.drop_rate);
  j.spurious_rate = cfg.get_double("jitter.spurious", j.spurious_rate);
  j.area_min = cfg.get_vec3("scene.area_min", j.area_min);
  j.area_max = cfg.get_vec3("scene.area_max", j.area_max);
  j.validate();
  return j;
}

std::vector<Roi> jitter_proposals(std::span<const Roi> gts, const ProposalJitter& jitter,
                                  std::uint64_t seed, std::span<const ObjectClass> classes) {
  jitter.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Roi> out;
  for (const auto& gt : gts) {
    // Draw every variate even for dropped boxes so the stream does not
    // depend on the drop outcome.
    const double drop = unit(rng);
    const Vec3 dt{gauss(rng) * jitter.translation_sigma.x,
                  gauss(rng) * jitter.translation_sigma.y,
                  gauss(rng) * jitter.translation_sigma.z};
    const Vec3 ds{gauss(rng) * jitter.size_sigma, gauss(rng) * jitter.size_sigma,
                  gauss(rng) * jitter.size_sigma};
    const double dyaw = gauss(rng) * jitter.yaw_sigma;
    const double conf = 0.5 + 0.5 * unit(rng);
    const double spurious = unit(rng);
    Roi spur;
    spur.center = {jitter.area_min.x + unit(rng) * (jitter.area_max.x - jitter.area_min.x),
                   jitter.area_min.y + unit(rng) * (jitter.area_max.y - jitter.area_min.y),
                   0.0};
    spur.yaw = wrap_angle((2.0 * unit(rng) - 1.0) * std::numbers::pi);
    spur.confidence = 0.5 * unit(rng);

    if (drop >= jitter.drop_rate) {
      Roi p = gt;
      p.center = gt.center + dt;
      p.size = {gt.size.x * std::exp(ds.x), gt.size.y * std::exp(ds.y),
                gt.size.z * std::exp(ds.z)};
      p.yaw = wrap_angle(gt.yaw + dyaw);
      p.confidence = conf;
      out.push_back(p);
    }
    if (spurious < jitter.spurious_rate) {
      if (classes.empty()) {
        spur.size = gt.size;
        spur.cls = gt.cls;
      } else {
        const auto c = static_cast<std::size_t>(unit(rng) * classes.size()) % classes.size();
        spur.size = classes[c].size;
        spur.cls = static_cast<int>(c);
      }
      spur.center.z = 0.5 * spur.size.z;
      out.push_back(spur);
    }
  }
  return out;
}

}  // namespace refine3d
