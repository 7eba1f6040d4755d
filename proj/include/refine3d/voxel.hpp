#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "refine3d/geometry.hpp"
#include "refine3d/nn.hpp"
#include "refine3d/tensor.hpp"

namespace refine3d {

inline constexpr std::size_t kNumScales = 4;
inline constexpr std::array<std::size_t, kNumScales> kScaleChannels{16, 32, 64, 64};

struct GridSpec {
  Vec3 range_min{0.0, -40.0, -3.0};
  Vec3 range_max{70.4, 40.0, 1.0};
  Vec3 voxel{0.05, 0.05, 0.1};

  /// Throws ConfigError on a non-positive extent/voxel or a range that is not
  /// a whole number of base voxels.
  void validate() const;
  /// Voxel size at scale 1..4 (base size times 2^(scale-1)).
  Vec3 voxel_size(std::size_t scale) const;
  /// Grid extent (w, h, d) = (X, Y, Z) cells at a scale.
  std::array<std::int64_t, 3> dims(std::size_t scale) const;
};

/// Grid coordinate, ordered (d, h, w) = (Z, Y, X).
struct VoxelIndex {
  std::int64_t d = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;
  auto operator<=>(const VoxelIndex&) const = default;
};

/// Scale-1 occupancy: sorted occupied voxels with raw per-voxel statistics.
struct Occupancy {
  std::vector<VoxelIndex> keys;
  /// Row per key: mean point offset from the voxel center (3, meters) and
  /// point count / 16 clamped to 1.
  std::vector<std::array<double, 4>> stats;
};

/// Drops points outside [range_min, range_max).
Occupancy voxelize(std::span<const Vec3> points, const GridSpec& spec);

/// One scale of sparse features; keys sorted, `features` row-aligned.
struct SparseFeatureMap {
  std::size_t scale = 1;
  Vec3 voxel_size;
  std::vector<VoxelIndex> keys;
  Tensor features;  // [N, C]

  std::size_t channels() const;
  std::size_t size() const { return keys.size(); }
};

/// Learnable stand-in for the sparse-convolution backbone: a linear+ReLU on
/// the raw statistics at scale 1, then per scale a channel-wise max over the
/// (up to 8) child voxels followed by linear+ReLU.
struct MultiscaleEncoder {
  std::array<LinearLayer, kNumScales> layers;

  static MultiscaleEncoder create(ParamStore& store, const std::string& path,
                                  Initializer& init);
  std::array<SparseFeatureMap, kNumScales> forward(const Occupancy& occ,
                                                   const GridSpec& spec) const;
};

/// Parent cell of a child voxel one scale up.
VoxelIndex parent_of(const VoxelIndex& child);

/// Point-wise features interpreted from a map, positions in the LiDAR frame.
struct PointSet {
  std::size_t scale = 1;
  std::vector<Vec3> positions;
  Tensor features;  // [N, C], row-aligned with positions
};

/// Position of a voxel's center: ([w, h, d] + 0.5) · voxel + range_min.
Vec3 voxel_center(const VoxelIndex& v, Vec3 voxel_size, Vec3 range_min);
PointSet interpret(const SparseFeatureMap& map, const GridSpec& spec);

struct AuxTargets {
  std::vector<double> foreground;            // per point, 0/1
  std::vector<std::array<double, 3>> offset;  // gt center - point; fg only
  std::vector<std::array<double, 3>> part;    // in [0,1]^3; fg only
  std::vector<int> box;                       // assigned gt index or -1
  std::size_t positives = 0;
};

/// Labels for auxiliary supervision. A point inside several boxes goes to the
/// one whose center is nearest.
AuxTargets make_aux_targets(std::span<const Vec3> points,
                            std::span<const Roi> gt_boxes);

}  // namespace refine3d
