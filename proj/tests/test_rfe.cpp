#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <iterator>
#include <numbers>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "refine3d/ops.hpp"
#include "refine3d/rfe.hpp"

using namespace refine3d;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<double> d(shape_size(shape));
  for (auto& x : d) x = u(rng);
  return Tensor(std::move(shape), std::move(d));
}

RfeConfig small_config(AttentionKind kind = AttentionKind::kVector) {
  RfeConfig cfg;
  cfg.d_a = 8;
  cfg.hidden = 16;
  cfg.repeats = 2;
  cfg.budgets = {16, 16, 16};
  cfg.attention = kind;
  cfg.heads = 2;
  return cfg;
}

struct UnitFixture {
  ParamStore store;
  RfeConfig cfg = small_config();
  RfeUnit unit;
  explicit UnitFixture(std::uint64_t seed, std::size_t in = 5) {
    Initializer init(seed);
    unit = RfeUnit::create(store, "u", in, cfg, init);
  }
};

PointSet random_points(std::mt19937_64& rng, std::size_t n, std::size_t channels,
                       double spread) {
  std::uniform_real_distribution<double> u(-spread, spread);
  PointSet ps;
  for (std::size_t i = 0; i < n; ++i) ps.positions.push_back({u(rng), u(rng), u(rng) * 0.5});
  ps.features = random_tensor({n, channels}, rng);
  return ps;
}

}  // namespace

TEST(Pool, FarRoiIsEmpty) {
  std::mt19937_64 rng(1);
  const auto ps = random_points(rng, 200, 4, 3.0);
  Roi far;
  far.center = {100, 100, 0};
  EXPECT_TRUE(pool(ps, far, {0.5, 0.5, 0.5}, 64, 1).empty());
}

TEST(Pool, KeepsAllInteriorPointsUnderBudget) {
  PointSet ps;
  ps.positions = {{0, 0, 0}, {0.4, 0.1, 0}, {-0.4, 0, 0.2}, {0, -0.9, 0}, {0.2, 0.2, -0.4},
                  {5, 5, 5}};
  ps.features = Tensor::zeros({6, 2});
  Roi r;
  r.size = {1, 2, 1};
  r.yaw = 0.3;
  const auto pooled = pool(ps, r, {}, 64, 9);
  ASSERT_EQ(pooled.size(), 5u);
  for (const auto& p : pooled.positions) {
    EXPECT_LE(std::abs(p.x), 0.5);
    EXPECT_LE(std::abs(p.y), 1.0);
    EXPECT_LE(std::abs(p.z), 0.5);
  }
}

TEST(Pool, MatchesBruteForceAndSeededSample) {
  std::mt19937_64 rng(2);
  const auto ps = random_points(rng, 3000, 4, 4.0);
  Roi r;
  r.center = {0.5, -0.3, 0.1};
  r.size = {3, 2, 1.5};
  r.yaw = -1.1;
  const Vec3 enlarge{0.5, 0.5, 0.5};
  std::vector<std::size_t> inside;
  for (std::size_t j = 0; j < ps.positions.size(); ++j)
    if (oracle::half_space_inside(ps.positions[j], r, enlarge)) inside.push_back(j);
  ASSERT_GT(inside.size(), 64u);
  std::vector<std::size_t> want;
  std::mt19937_64 sampler(77);
  std::sample(inside.begin(), inside.end(), std::back_inserter(want), 64, sampler);
  const auto pooled = pool(ps, r, enlarge, 64, 77, 3);
  EXPECT_EQ(pooled.rows, want);
  EXPECT_EQ(pooled.roi_index, 3u);
  for (std::size_t k = 0; k < want.size(); ++k) {
    const Vec3 c = to_canonical(ps.positions[want[k]], r);
    EXPECT_EQ(pooled.positions[k], c);
    EXPECT_LE(std::abs(c.x), (r.size.x + enlarge.x) / 2);
  }
}

TEST(Pool, SeedsDifferAcrossVisits) {
  EXPECT_NE(pool_seed(1, 0, 4, 0), pool_seed(1, 1, 4, 0));
  EXPECT_NE(pool_seed(1, 0, 4, 0), pool_seed(1, 0, 3, 0));
  EXPECT_NE(pool_seed(1, 0, 4, 0), pool_seed(1, 0, 4, 1));
  EXPECT_EQ(pool_seed(5, 2, 1, 2), pool_seed(5, 2, 1, 2));
}

TEST(PositionEncoding, AugmentedCoordLayout) {
  Roi r;
  r.size = {4, 2, 1.5};
  const Vec3 p{0.3, -0.2, 0.1};
  const auto a = augmented_coord(p, r);
  EXPECT_EQ(a[0], p.x);
  EXPECT_EQ(a[1], p.y);
  EXPECT_EQ(a[2], p.z);
  const auto v = box_vertices(r);
  for (std::size_t k = 0; k < 8; ++k) {
    EXPECT_DOUBLE_EQ(a[3 + 3 * k], p.x - v[k].x);
    EXPECT_DOUBLE_EQ(a[5 + 3 * k], p.z - v[k].z);
  }
}

TEST(PositionEncoding, RelativeCoordIsNegatedPointNineTimes) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2, 2);
  Roi r;
  r.size = {3.9, 1.7, 1.5};
  for (int i = 0; i < 100; ++i) {
    const Vec3 p{u(rng), u(rng), u(rng)};
    const auto rel = relative_coord(p, r);
    for (std::size_t k = 0; k < 9; ++k) {
      EXPECT_NEAR(rel[3 * k], -p.x, 1e-12);
      EXPECT_NEAR(rel[3 * k + 1], -p.y, 1e-12);
      EXPECT_NEAR(rel[3 * k + 2], -p.z, 1e-12);
    }
  }
  const auto zero = relative_coord({}, r);
  for (double v : zero) EXPECT_EQ(v, 0.0);
}

TEST(PositionEncoding, CenterPointsShareMlpOfZero) {
  UnitFixture fx(4);
  PooledSet pooled;
  pooled.positions = {{0, 0, 0}, {0, 0, 0}};
  pooled.rows = {0, 1};
  Roi r;
  const auto zeta = position_encoding(pooled, r, fx.unit.position);
  const auto want = oracle::mlp(fx.unit.position, oracle::Row(27, 0.0));
  for (std::size_t c = 0; c < fx.cfg.d_a; ++c) {
    EXPECT_NEAR(zeta.at(0, c), want[c], 1e-14);
    EXPECT_EQ(zeta.at(0, c), zeta.at(1, c));
  }
}

TEST(VectorAttention, SinglePointReturnsValuePlusZeta) {
  UnitFixture fx(5, 8);
  std::mt19937_64 rng(6);
  const auto r = random_tensor({8}, rng);
  const auto f = random_tensor({1, 8}, rng);
  const auto z = random_tensor({1, 8}, rng);
  const auto out = vector_attention(r, f, z, fx.unit);
  const auto v = oracle::linear(fx.unit.value, oracle::row(f, 0));
  for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.at(c), v[c] + z.at(0, c), 1e-14);
}

TEST(VectorAttention, IdenticalPointsSplitEvenly) {
  UnitFixture fx(7, 8);
  std::mt19937_64 rng(8);
  const auto r = random_tensor({1, 8}, rng);
  const auto f1 = random_tensor({1, 8}, rng), z1 = random_tensor({1, 8}, rng);
  const std::vector<std::size_t> twice{0, 0}, offsets{0, 2};
  const auto res = vector_attention(r, ops::gather_rows(f1, twice), ops::gather_rows(z1, twice),
                                    offsets, fx.unit);
  for (double w : res.weights.data()) EXPECT_DOUBLE_EQ(w, 0.5);
  const auto single = vector_attention(ops::reshape(r, {8}), f1, z1, fx.unit);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(res.output.at(0, c), single.at(c), 1e-14);
}

TEST(VectorAttention, MatchesLoopOracleAcrossSegments) {
  UnitFixture fx(9, 8);
  std::mt19937_64 rng(10);
  const std::vector<std::size_t> offsets{0, 3, 4, 11};
  const auto q = random_tensor({3, 8}, rng);
  const auto f = random_tensor({11, 8}, rng, 2.0);
  const auto z = random_tensor({11, 8}, rng, 2.0);
  const auto res = vector_attention(q, f, z, offsets, fx.unit);
  for (std::size_t s = 0; s < 3; ++s) {
    std::vector<oracle::Row> fs, zs;
    for (auto j = offsets[s]; j < offsets[s + 1]; ++j) {
      fs.push_back(oracle::row(f, j));
      zs.push_back(oracle::row(z, j));
    }
    const auto want = oracle::vector_attention(oracle::row(q, s), fs, zs, fx.unit);
    for (std::size_t c = 0; c < 8; ++c) {
      EXPECT_NEAR(res.output.at(s, c), want.output[c], 1e-12);
      double sum = 0.0;
      for (auto j = offsets[s]; j < offsets[s + 1]; ++j) {
        EXPECT_NEAR(res.weights.at(j, c), want.weights[j - offsets[s]][c], 1e-12);
        sum += res.weights.at(j, c);
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(VectorAttention, PermutationInvariant) {
  UnitFixture fx(11, 8);
  std::mt19937_64 rng(12);
  const auto r = random_tensor({8}, rng);
  const auto f = random_tensor({9, 8}, rng), z = random_tensor({9, 8}, rng);
  std::vector<std::size_t> perm{4, 0, 8, 2, 7, 1, 3, 6, 5};
  const auto a = vector_attention(r, f, z, fx.unit);
  const auto b = vector_attention(r, ops::gather_rows(f, perm), ops::gather_rows(z, perm), fx.unit);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(a.at(c), b.at(c), 1e-12);
}

TEST(VectorAttention, ChannelsIndependentUnderIdentityGamma) {
  UnitFixture fx(13, 8);
  // γ = identity: one 8×8 identity layer.
  fx.unit.gamma.layers.resize(1);
  std::vector<double> eye(64, 0.0);
  for (std::size_t i = 0; i < 8; ++i) eye[i * 9] = 1.0;
  fx.unit.gamma.layers[0].weight = Tensor({8, 8}, eye);
  fx.unit.gamma.layers[0].bias = Tensor::zeros({8});
  // ψ = identity too, so a feature channel feeds exactly one logit channel.
  fx.unit.key.weight = Tensor({8, 8}, eye);
  fx.unit.key.bias = Tensor::zeros({8});
  std::mt19937_64 rng(14);
  const auto r = random_tensor({1, 8}, rng);
  auto f = random_tensor({2, 8}, rng);
  const auto z = random_tensor({2, 8}, rng);
  const std::vector<std::size_t> offsets{0, 2};
  const auto a = vector_attention(r, f, z, offsets, fx.unit);
  auto g = f.clone();
  g.mutable_data()[8 + 3] += 0.7;  // second point, channel 3
  const auto b = vector_attention(r, g, z, offsets, fx.unit);
  for (std::size_t c = 0; c < 8; ++c) {
    for (std::size_t j = 0; j < 2; ++j) {
      if (c == 3) {
        EXPECT_NE(a.weights.at(j, c), b.weights.at(j, c));
      } else {
        EXPECT_EQ(a.weights.at(j, c), b.weights.at(j, c));
      }
    }
  }
}

TEST(MultiheadAttention, SinglePointReturnsValue) {
  UnitFixture fx(15, 8);
  std::mt19937_64 rng(16);
  const auto q = random_tensor({1, 8}, rng);
  const auto f = random_tensor({1, 8}, rng), z = random_tensor({1, 8}, rng);
  const std::vector<std::size_t> offsets{0, 1};
  const auto res = multihead_attention(q, f, z, offsets, fx.unit, 2);
  const auto v = oracle::linear(fx.unit.value, oracle::row(f, 0));
  for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(res.output.at(0, c), v[c] + z.at(0, c), 1e-14);
}

TEST(MultiheadAttention, EqualKeysGiveUniformWeights) {
  UnitFixture fx(17, 8);
  std::mt19937_64 rng(18);
  const auto q = random_tensor({1, 8}, rng);
  const auto f1 = random_tensor({1, 8}, rng), z1 = random_tensor({1, 8}, rng);
  const std::vector<std::size_t> rows{0, 0, 0, 0}, offsets{0, 4};
  const auto res = multihead_attention(q, ops::gather_rows(f1, rows), ops::gather_rows(z1, rows),
                                       offsets, fx.unit, 4);
  for (double w : res.weights.data()) EXPECT_DOUBLE_EQ(w, 0.25);
}

TEST(MultiheadAttention, MatchesLoopOracle) {
  UnitFixture fx(19, 8);
  std::mt19937_64 rng(20);
  const std::vector<std::size_t> offsets{0, 5, 12};
  const auto q = random_tensor({2, 8}, rng);
  const auto f = random_tensor({12, 8}, rng, 2.0), z = random_tensor({12, 8}, rng, 2.0);
  for (std::size_t heads : {1u, 2u, 4u, 8u}) {
    const auto res = multihead_attention(q, f, z, offsets, fx.unit, heads);
    for (std::size_t s = 0; s < 2; ++s) {
      std::vector<oracle::Row> fs, zs;
      for (auto j = offsets[s]; j < offsets[s + 1]; ++j) {
        fs.push_back(oracle::row(f, j));
        zs.push_back(oracle::row(z, j));
      }
      const auto want =
          oracle::multihead_attention(oracle::row(q, s), fs, zs, fx.unit, heads);
      for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(res.output.at(s, c), want.output[c], 1e-12);
    }
  }
}

TEST(MultiheadAttention, IndivisibleHeadsThrow) {
  UnitFixture fx(21, 8);
  const auto q = Tensor::zeros({1, 8});
  const auto f = Tensor::zeros({1, 8});
  const std::vector<std::size_t> offsets{0, 1};
  EXPECT_THROW(multihead_attention(q, f, f, offsets, fx.unit, 3), ConfigError);
  RfeConfig cfg = small_config(AttentionKind::kMultihead);
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Attention, EmptySegmentIsAContractError) {
  UnitFixture fx(22, 8);
  const auto q = Tensor::zeros({2, 8});
  const auto f = Tensor::zeros({1, 8});
  const std::vector<std::size_t> offsets{0, 0, 1};
  EXPECT_THROW(vector_attention(q, f, f, offsets, fx.unit), ContractError);
}

TEST(RfeBlock, EmptyPooledSetIsIdentity) {
  UnitFixture fx(23, 4);
  std::mt19937_64 rng(24);
  const auto r = random_tensor({2, 8}, rng);
  std::vector<PooledSet> pooled(2);
  std::vector<Roi> rois(2);
  const auto out = rfe_block(r, pooled, rois, Tensor::zeros({0, 4}), fx.unit, fx.cfg, false);
  for (std::size_t i = 0; i < r.numel(); ++i) EXPECT_EQ(out.data()[i], r.data()[i]);
}

TEST(RfeBlock, ZeroAttentionLeavesNormResidualPath) {
  UnitFixture fx(25, 4);
  // α = 0, ζ = 0 ⇒ attention output is 0 whatever the weights.
  for (auto* t : {&fx.unit.value.weight, &fx.unit.value.bias}) {
    for (auto& v : t->mutable_data()) v = 0.0;
  }
  for (auto& layer : fx.unit.position.layers) {
    for (auto& v : layer.weight.mutable_data()) v = 0.0;
    for (auto& v : layer.bias.mutable_data()) v = 0.0;
  }
  std::mt19937_64 rng(26);
  const auto r = random_tensor({1, 8}, rng);
  PooledSet pooled;
  pooled.positions = {{0.1, 0.2, 0.0}};
  pooled.rows = {0};
  std::vector<PooledSet> sets{pooled};
  std::vector<Roi> rois(1);
  const auto feats = random_tensor({1, 4}, rng);
  const auto out = rfe_block(r, sets, rois, feats, fx.unit, fx.cfg, false);
  auto h = fx.unit.norm1.forward(r, false);
  h = fx.unit.norm2.forward(ops::add(h, fx.unit.block_mlp.forward(h)), false);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.at(0, c), h.at(0, c), 1e-14);
}

namespace {

struct RfeFixture {
  ParamStore store;
  RfeConfig cfg;
  RfeParams params;
  ScalePoints points;
  RfeFixture(AttentionKind kind, std::uint64_t seed) : cfg(small_config(kind)) {
    Initializer init(seed);
    params = RfeParams::create(store, "rfe", cfg, init);
    std::mt19937_64 rng(seed + 1);
    for (std::size_t s : {1u, 3u, 4u}) {
      points[s - 1] = random_points(rng, 60, kScaleChannels[s - 1], 4.0);
      points[s - 1].scale = s;
    }
  }
};

}  // namespace

TEST(RoiFeatures, ZeroRoisGiveEmptyOutput) {
  RfeFixture fx(AttentionKind::kVector, 30);
  const auto out = compute_roi_features(fx.points, {}, fx.params, fx.cfg, 1, false);
  EXPECT_EQ(out.size(0), 0u);
}

TEST(RoiFeatures, RoiWithoutPointsKeepsTheta) {
  RfeFixture fx(AttentionKind::kVector, 31);
  Roi far;
  far.center = {500, 0, 0};
  const std::vector<Roi> rois{far};
  const auto out = compute_roi_features(fx.points, rois, fx.params, fx.cfg, 1, false);
  for (std::size_t c = 0; c < fx.cfg.d_a; ++c) EXPECT_EQ(out.at(0, c), fx.params.theta.at(c));
}

TEST(RoiFeatures, PermutingRoisPermutesOutputs) {
  for (auto kind : {AttentionKind::kVector, AttentionKind::kMultihead}) {
    RfeFixture fx(kind, 32);
    fx.cfg.budgets = {1000, 1000, 1000};  // no subsampling, so visit seeds do not matter
    std::vector<Roi> rois(4);
    for (std::size_t i = 0; i < 4; ++i) {
      rois[i].center = {-2.0 + 1.3 * i, 0.5 * i, 0};
      rois[i].size = {2.5, 1.5, 1.5};
      rois[i].yaw = 0.4 * i;
    }
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    std::vector<Roi> shuffled;
    for (auto p : perm) shuffled.push_back(rois[p]);
    const auto a = compute_roi_features(fx.points, rois, fx.params, fx.cfg, 7, false);
    const auto b = compute_roi_features(fx.points, shuffled, fx.params, fx.cfg, 7, false);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t c = 0; c < fx.cfg.d_a; ++c)
        EXPECT_NEAR(b.at(i, c), a.at(perm[i], c), 1e-12);
  }
}

TEST(RoiFeatures, TraceCountsWeights) {
  RfeFixture fx(AttentionKind::kVector, 33);
  std::vector<Roi> rois(2);
  rois[0].size = rois[1].size = {3, 3, 3};
  rois[1].center = {1, 1, 0};
  RfeTrace trace;
  compute_roi_features(fx.points, rois, fx.params, fx.cfg, 3, false, &trace);
  EXPECT_EQ(trace.attention_weight_elements, trace.pooled_points * fx.cfg.d_a);
  for (const auto& w : trace.attention_weights) {
    EXPECT_EQ(w.size(1), fx.cfg.d_a);
  }
}
