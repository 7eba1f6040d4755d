#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "refine3d/voxel.hpp"

using namespace refine3d;

namespace {

GridSpec small_grid() {
  GridSpec g;
  g.range_min = {0.0, -8.0, -2.0};
  g.range_max = {16.0, 8.0, 2.0};
  g.voxel = {0.25, 0.25, 0.5};
  return g;
}

std::vector<Vec3> random_cloud(std::mt19937_64& rng, const GridSpec& g, std::size_t n) {
  std::uniform_real_distribution<double> x(g.range_min.x, g.range_max.x),
      y(g.range_min.y, g.range_max.y), z(g.range_min.z, g.range_max.z);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = {x(rng), y(rng), z(rng)};
  return pts;
}

}  // namespace

TEST(GridSpec, RejectsFractionalCells) {
  GridSpec g = small_grid();
  g.voxel.x = 0.3;
  EXPECT_THROW(g.validate(), ConfigError);
  g = small_grid();
  g.range_max.y = g.range_min.y;
  EXPECT_THROW(g.validate(), ConfigError);
}

TEST(GridSpec, VoxelSizeDoublesPerScale) {
  const auto g = small_grid();
  EXPECT_DOUBLE_EQ(g.voxel_size(4).x, 2.0);
  EXPECT_DOUBLE_EQ(g.voxel_size(3).z, 2.0);
  EXPECT_EQ(g.dims(1), (std::array<std::int64_t, 3>{64, 64, 8}));
  EXPECT_EQ(g.dims(4), (std::array<std::int64_t, 3>{8, 8, 1}));
}

TEST(Voxelize, PointAtCenter) {
  const auto g = small_grid();
  const std::vector<Vec3> pts{voxel_center({2, 5, 7}, g.voxel, g.range_min)};
  const auto occ = voxelize(pts, g);
  ASSERT_EQ(occ.keys.size(), 1u);
  EXPECT_EQ(occ.keys[0], (VoxelIndex{2, 5, 7}));
  EXPECT_NEAR(occ.stats[0][0], 0.0, 1e-15);
  EXPECT_NEAR(occ.stats[0][1], 0.0, 1e-15);
  EXPECT_NEAR(occ.stats[0][2], 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(occ.stats[0][3], 1.0 / 16.0);
}

TEST(Voxelize, SymmetricPairHasZeroOffset) {
  const auto g = small_grid();
  const Vec3 c = voxel_center({1, 1, 1}, g.voxel, g.range_min);
  const Vec3 d{0.05, -0.07, 0.1};
  const std::vector<Vec3> pts{c + d, c - d};
  const auto occ = voxelize(pts, g);
  ASSERT_EQ(occ.keys.size(), 1u);
  for (int a = 0; a < 3; ++a) EXPECT_NEAR(occ.stats[0][a], 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(occ.stats[0][3], 2.0 / 16.0);
}

TEST(Voxelize, EmptyAndOutOfRange) {
  const auto g = small_grid();
  EXPECT_TRUE(voxelize(std::vector<Vec3>{}, g).keys.empty());
  const std::vector<Vec3> outside{{-0.1, 0, 0}, {16.0, 0, 0}, {1, 8.0, 0}, {1, 0, 2.0}};
  EXPECT_TRUE(voxelize(outside, g).keys.empty());
}

TEST(Voxelize, CountSaturates) {
  const auto g = small_grid();
  const std::vector<Vec3> pts(40, voxel_center({0, 0, 0}, g.voxel, g.range_min));
  EXPECT_DOUBLE_EQ(voxelize(pts, g).stats[0][3], 1.0);
}

TEST(Voxelize, MatchesFloorDivisionOracle) {
  const auto g = small_grid();
  std::mt19937_64 rng(1);
  const auto pts = random_cloud(rng, g, 5000);
  std::set<VoxelIndex> want;
  for (const auto& p : pts) {
    want.insert({static_cast<std::int64_t>(std::floor((p.z - g.range_min.z) / g.voxel.z)),
                 static_cast<std::int64_t>(std::floor((p.y - g.range_min.y) / g.voxel.y)),
                 static_cast<std::int64_t>(std::floor((p.x - g.range_min.x) / g.voxel.x))});
  }
  const auto occ = voxelize(pts, g);
  EXPECT_EQ(std::set<VoxelIndex>(occ.keys.begin(), occ.keys.end()), want);
  EXPECT_TRUE(std::is_sorted(occ.keys.begin(), occ.keys.end()));
}

TEST(Encoder, SingleVoxelAtEveryScale) {
  const auto g = small_grid();
  ParamStore store;
  Initializer init(2);
  const auto enc = MultiscaleEncoder::create(store, "enc", init);
  const std::vector<Vec3> pts{{3.3, 1.2, 0.4}};
  const auto maps = enc.forward(voxelize(pts, g), g);
  for (std::size_t s = 0; s < kNumScales; ++s) {
    EXPECT_EQ(maps[s].size(), 1u);
    EXPECT_EQ(maps[s].channels(), kScaleChannels[s]);
  }
}

TEST(Encoder, ParentSetsFollowFloorHalving) {
  const auto g = small_grid();
  ParamStore store;
  Initializer init(3);
  const auto enc = MultiscaleEncoder::create(store, "enc", init);
  std::mt19937_64 rng(4);
  const auto maps = enc.forward(voxelize(random_cloud(rng, g, 3000), g), g);
  for (std::size_t s = 1; s < kNumScales; ++s) {
    std::set<VoxelIndex> want;
    for (const auto& k : maps[s - 1].keys) want.insert({k.d / 2, k.h / 2, k.w / 2});
    EXPECT_EQ(std::set<VoxelIndex>(maps[s].keys.begin(), maps[s].keys.end()), want);
    EXPECT_LE(maps[s].size(), maps[s - 1].size());
    for (const auto& k : maps[s - 1].keys) EXPECT_EQ(parent_of(k), (VoxelIndex{k.d / 2, k.h / 2, k.w / 2}));
  }
}

TEST(Interpret, VoxelCenterExamples) {
  EXPECT_EQ(voxel_center({0, 0, 0}, {1, 1, 1}, {0, 0, 0}), (Vec3{0.5, 0.5, 0.5}));
  const Vec3 p = voxel_center({1, 2, 3}, {0.05, 0.05, 0.1}, {0.0, -40.0, -3.0});
  EXPECT_NEAR(p.x, 0.175, 1e-12);
  EXPECT_NEAR(p.y, -39.875, 1e-12);
  EXPECT_NEAR(p.z, -2.85, 1e-12);
}

TEST(Interpret, CellMembershipAndCardinality) {
  const auto g = small_grid();
  ParamStore store;
  Initializer init(5);
  const auto enc = MultiscaleEncoder::create(store, "enc", init);
  std::mt19937_64 rng(6);
  const auto maps = enc.forward(voxelize(random_cloud(rng, g, 2000), g), g);
  for (const auto& map : maps) {
    const auto pts = interpret(map, g);
    ASSERT_EQ(pts.positions.size(), map.size());
    EXPECT_EQ(pts.features.node(), map.features.node());
    const Vec3 v = g.voxel_size(map.scale);
    for (std::size_t i = 0; i < map.size(); ++i) {
      const Vec3 rel = pts.positions[i] - g.range_min;
      EXPECT_EQ(std::floor(rel.x / v.x), map.keys[i].w);
      EXPECT_EQ(std::floor(rel.y / v.y), map.keys[i].h);
      EXPECT_EQ(std::floor(rel.z / v.z), map.keys[i].d);
    }
  }
}

TEST(Interpret, TranslationByCoarseVoxels) {
  const auto g = small_grid();
  ParamStore store;
  Initializer init(7);
  const auto enc = MultiscaleEncoder::create(store, "enc", init);
  std::mt19937_64 rng(8);
  GridSpec half = g;
  half.range_max = {8.0, 0.0, 2.0};
  const auto pts = random_cloud(rng, half, 800);
  const Vec3 shift = Vec3{2.0, 4.0, 0.0};  // one and two scale-4 voxels
  std::vector<Vec3> moved;
  for (const auto& p : pts) moved.push_back(p + shift);
  const auto a = enc.forward(voxelize(pts, g), g);
  const auto b = enc.forward(voxelize(moved, g), g);
  for (std::size_t s = 0; s < kNumScales; ++s) {
    const auto pa = interpret(a[s], g), pb = interpret(b[s], g);
    ASSERT_EQ(pa.positions.size(), pb.positions.size());
    for (std::size_t i = 0; i < pa.positions.size(); ++i) {
      EXPECT_NEAR(norm(pb.positions[i] - pa.positions[i] - shift), 0.0, 1e-9);
    }
    for (std::size_t i = 0; i < pa.features.numel(); ++i)
      EXPECT_NEAR(pa.features.data()[i], pb.features.data()[i], 1e-12);
  }
}

TEST(AuxTargets, CenterVertexAndOutside) {
  Roi box;
  box.center = {4, 1, 0.8};
  box.size = {4, 2, 1.6};
  box.yaw = 0.4;
  const auto v7 = box.center + (box_vertices_lidar(box)[7] - box.center) * (1.0 - 1e-12);
  const std::vector<Vec3> pts{box.center, v7, {20, 20, 0}};
  const std::vector<Roi> gts{box};
  const auto t = make_aux_targets(pts, gts);
  EXPECT_EQ(t.positives, 2u);
  EXPECT_EQ(t.foreground, (std::vector<double>{1, 1, 0}));
  for (int a = 0; a < 3; ++a) {
    EXPECT_NEAR(t.offset[0][a], 0.0, 1e-15);
    EXPECT_NEAR(t.part[0][a], 0.5, 1e-12);
    EXPECT_NEAR(t.part[1][a], 1.0, 1e-9);
  }
  EXPECT_EQ(t.box[2], -1);
}

TEST(AuxTargets, OverlapGoesToNearestCenter) {
  Roi a, b;
  a.size = b.size = {4, 4, 4};
  b.center = {1.5, 0, 0};
  const std::vector<Vec3> pts{{1.0, 0, 0}, {0.2, 0, 0}};
  const std::vector<Roi> gts{a, b};
  const auto t = make_aux_targets(pts, gts);
  EXPECT_EQ(t.box[0], 1);
  EXPECT_EQ(t.box[1], 0);
}
