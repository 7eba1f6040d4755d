#include "refine3d/voxel.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "refine3d/ops.hpp"

namespace refine3d {

void GridSpec::validate() const {
  for (std::size_t a = 0; a < 3; ++a) {
    const double extent = range_max[a] - range_min[a];
    if (!(extent > 0.0)) throw ConfigError("grid range_max must exceed range_min");
    if (!(voxel[a] > 0.0)) throw ConfigError("grid voxel sizes must be positive");
    const double cells = extent / voxel[a];
    if (std::abs(cells - std::round(cells)) > 1e-6) {
      throw ConfigError("grid range is not a whole number of voxels");
    }
  }
}

Vec3 GridSpec::voxel_size(std::size_t scale) const {
  if (scale < 1 || scale > kNumScales) throw ContractError("scale must be 1..4");
  return voxel * static_cast<double>(1u << (scale - 1));
}

std::array<std::int64_t, 3> GridSpec::dims(std::size_t scale) const {
  if (scale < 1 || scale > kNumScales) throw ContractError("scale must be 1..4");
  std::array<std::int64_t, 3> d{};
  for (std::size_t a = 0; a < 3; ++a) {
    d[a] = static_cast<std::int64_t>(std::llround((range_max[a] - range_min[a]) / voxel[a]));
  }
  for (std::size_t s = 1; s < scale; ++s)
    for (auto& v : d) v = (v + 1) / 2;
  return d;
}

Occupancy voxelize(std::span<const Vec3> points, const GridSpec& spec) {
  spec.validate();
  const auto dims = spec.dims(1);
  struct Acc {
    Vec3 sum;
    std::size_t count = 0;
  };
  std::map<VoxelIndex, Acc> cells;
  for (const auto& p : points) {
    if (!(p.x >= spec.range_min.x && p.x < spec.range_max.x &&
          p.y >= spec.range_min.y && p.y < spec.range_max.y &&
          p.z >= spec.range_min.z && p.z < spec.range_max.z)) {
      continue;
    }
    const VoxelIndex v{
        static_cast<std::int64_t>(std::floor((p.z - spec.range_min.z) / spec.voxel.z)),
        static_cast<std::int64_t>(std::floor((p.y - spec.range_min.y) / spec.voxel.y)),
        static_cast<std::int64_t>(std::floor((p.x - spec.range_min.x) / spec.voxel.x))};
    if (v.w >= dims[0] || v.h >= dims[1] || v.d >= dims[2]) continue;
    auto& acc = cells[v];
    acc.sum = acc.sum + (p - voxel_center(v, spec.voxel, spec.range_min));
    ++acc.count;
  }
  Occupancy occ;
  occ.keys.reserve(cells.size());
  occ.stats.reserve(cells.size());
  for (const auto& [key, acc] : cells) {
    const double n = static_cast<double>(acc.count);
    occ.keys.push_back(key);
    occ.stats.push_back({acc.sum.x / n, acc.sum.y / n, acc.sum.z / n,
                         std::min(1.0, n / 16.0)});
  }
  return occ;
}

std::size_t SparseFeatureMap::channels() const {
  return features.defined() ? features.size(1) : 0;
}

VoxelIndex parent_of(const VoxelIndex& child) {
  // Keys are non-negative, so integer halving is the floor.
  return {child.d / 2, child.h / 2, child.w / 2};
}

MultiscaleEncoder MultiscaleEncoder::create(ParamStore& store,
                                            const std::string& path,
                                            Initializer& init) {
  MultiscaleEncoder enc;
  std::size_t in = 4;
  for (std::size_t s = 0; s < kNumScales; ++s) {
    enc.layers[s] = LinearLayer::create(store, path + ".scale" + std::to_string(s + 1),
                                        in, kScaleChannels[s], init);
    in = kScaleChannels[s];
  }
  return enc;
}

std::array<SparseFeatureMap, kNumScales> MultiscaleEncoder::forward(
    const Occupancy& occ, const GridSpec& spec) const {
  std::array<SparseFeatureMap, kNumScales> maps;
  std::vector<double> raw;
  raw.reserve(occ.stats.size() * 4);
  for (const auto& s : occ.stats) raw.insert(raw.end(), s.begin(), s.end());
  Tensor input({occ.keys.size(), 4}, std::move(raw));

  maps[0].scale = 1;
  maps[0].voxel_size = spec.voxel_size(1);
  maps[0].keys = occ.keys;
  maps[0].features = ops::relu(layers[0].forward(input));

  for (std::size_t s = 1; s < kNumScales; ++s) {
    const auto& child = maps[s - 1];
    auto& parent = maps[s];
    parent.scale = s + 1;
    parent.voxel_size = spec.voxel_size(s + 1);
    std::vector<std::size_t> group(child.keys.size());
    // Children are sorted (d,h,w); parents are collected then sorted.
    std::map<VoxelIndex, std::size_t> slot;
    for (const auto& k : child.keys) slot.emplace(parent_of(k), 0);
    std::size_t next = 0;
    for (auto& [k, idx] : slot) {
      idx = next++;
      parent.keys.push_back(k);
    }
    for (std::size_t i = 0; i < child.keys.size(); ++i) {
      group[i] = slot.at(parent_of(child.keys[i]));
    }
    if (child.keys.empty()) {
      parent.features = Tensor::zeros({0, kScaleChannels[s]});
      continue;
    }
    auto pooled = ops::group_max(child.features, group, parent.keys.size());
    parent.features = ops::relu(layers[s].forward(pooled));
  }
  return maps;
}

Vec3 voxel_center(const VoxelIndex& v, Vec3 voxel_size, Vec3 range_min) {
  return {(static_cast<double>(v.w) + 0.5) * voxel_size.x + range_min.x,
          (static_cast<double>(v.h) + 0.5) * voxel_size.y + range_min.y,
          (static_cast<double>(v.d) + 0.5) * voxel_size.z + range_min.z};
}

PointSet interpret(const SparseFeatureMap& map, const GridSpec& spec) {
  PointSet out;
  out.scale = map.scale;
  out.positions.reserve(map.keys.size());
  for (const auto& k : map.keys) {
    out.positions.push_back(voxel_center(k, map.voxel_size, spec.range_min));
  }
  out.features = map.features;
  return out;
}

AuxTargets make_aux_targets(std::span<const Vec3> points,
                            std::span<const Roi> gt_boxes) {
  for (const auto& b : gt_boxes) validate(b);
  AuxTargets t;
  const auto n = points.size();
  t.foreground.assign(n, 0.0);
  t.offset.assign(n, {0.0, 0.0, 0.0});
  t.part.assign(n, {0.0, 0.0, 0.0});
  t.box.assign(n, -1);
  for (std::size_t k = 0; k < n; ++k) {
    const Vec3 p = points[k];
    double best = 0.0;
    for (std::size_t b = 0; b < gt_boxes.size(); ++b) {
      if (!contains(p, gt_boxes[b])) continue;
      const double dist = norm(gt_boxes[b].center - p);
      if (t.box[k] < 0 || dist < best) {
        t.box[k] = static_cast<int>(b);
        best = dist;
      }
    }
    if (t.box[k] < 0) continue;
    const Roi& g = gt_boxes[static_cast<std::size_t>(t.box[k])];
    t.foreground[k] = 1.0;
    ++t.positives;
    const Vec3 o = g.center - p;
    t.offset[k] = {o.x, o.y, o.z};
    const Vec3 c = to_canonical(p, g);
    t.part[k] = {std::clamp(c.x / g.size.x + 0.5, 0.0, 1.0),
                 std::clamp(c.y / g.size.y + 0.5, 0.0, 1.0),
                 std::clamp(c.z / g.size.z + 0.5, 0.0, 1.0)};
  }
  return t;
}

}  // namespace refine3d
