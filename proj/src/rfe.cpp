#include "refine3d/rfe.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <random>

#include "refine3d/ops.hpp"

namespace refine3d {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

AttentionKind parse_attention_kind(const std::string& name) {
  if (name == "vector") return AttentionKind::kVector;
  if (name == "multihead") return AttentionKind::kMultihead;
  throw ConfigError("unknown attention kind '" + name + "' (expected vector|multihead)");
}

std::string to_string(AttentionKind kind) {
  return kind == AttentionKind::kVector ? "vector" : "multihead";
}

void RfeConfig::validate() const {
  if (d_a == 0 || hidden == 0) throw ConfigError("rfe.d_a and rfe.hidden must be positive");
  if (repeats == 0) throw ConfigError("rfe.repeats must be at least 1");
  if (scale_order.empty()) throw ConfigError("rfe.scale_order must not be empty");
  for (auto s : scale_order)
    if (s < 1 || s > kNumScales) throw ConfigError("rfe.scale_order entries must be 1..4");
  if (budgets.size() != scale_order.size()) {
    throw ConfigError("rfe.budgets needs one entry per rfe.scale_order entry");
  }
  for (auto b : budgets)
    if (b == 0) throw ConfigError("rfe.budgets entries must be positive");
  if (enlargement.x < 0.0 || enlargement.y < 0.0 || enlargement.z < 0.0) {
    throw ConfigError("rfe.enlargement must be non-negative");
  }
  if (attention == AttentionKind::kMultihead && (heads == 0 || d_a % heads != 0)) {
    throw ConfigError("rfe.heads must divide rfe.d_a");
  }
}

std::uint64_t pool_seed(std::uint64_t global_seed, std::size_t roi_index,
                        std::size_t scale, std::size_t repeat) {
  std::uint64_t h = splitmix64(global_seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(roi_index));
  h = splitmix64(h ^ (static_cast<std::uint64_t>(scale) << 32));
  return splitmix64(h ^ (static_cast<std::uint64_t>(repeat) << 48));
}

PooledSet pool(const PointSet& points, const Roi& roi, Vec3 enlargement,
               std::size_t budget, std::uint64_t seed, std::size_t roi_index) {
  if (budget == 0) throw ContractError("pool: budget must be positive");
  PooledSet out;
  out.roi_index = roi_index;
  out.scale = points.scale;
  const double reach = 0.5 * norm(roi.size + enlargement);
  std::vector<std::size_t> inside;
  for (std::size_t j = 0; j < points.positions.size(); ++j) {
    const Vec3 p = points.positions[j];
    if (std::abs(p.x - roi.center.x) > reach || std::abs(p.y - roi.center.y) > reach ||
        std::abs(p.z - roi.center.z) > reach) {
      continue;
    }
    if (contains(p, roi, enlargement)) inside.push_back(j);
  }
  if (inside.size() > budget) {
    std::vector<std::size_t> kept;
    kept.reserve(budget);
    std::mt19937_64 rng(seed);
    std::sample(inside.begin(), inside.end(), std::back_inserter(kept), budget, rng);
    inside = std::move(kept);
  }
  out.rows = std::move(inside);
  out.positions.reserve(out.rows.size());
  for (auto j : out.rows) out.positions.push_back(to_canonical(points.positions[j], roi));
  return out;
}

PooledSet pool(const SparseFeatureMap& map, const GridSpec& spec, const Roi& roi,
               Vec3 enlargement, std::size_t budget, std::uint64_t seed,
               std::size_t roi_index) {
  return pool(interpret(map, spec), roi, enlargement, budget, seed, roi_index);
}

AugmentedCoord augmented_coord(Vec3 canonical, const Roi& roi) {
  AugmentedCoord a{};
  a[0] = canonical.x;
  a[1] = canonical.y;
  a[2] = canonical.z;
  const auto vertices = box_vertices(roi);
  for (std::size_t k = 0; k < 8; ++k) {
    const Vec3 d = canonical - vertices[k];
    a[3 + 3 * k] = d.x;
    a[4 + 3 * k] = d.y;
    a[5 + 3 * k] = d.z;
  }
  return a;
}

AugmentedCoord relative_coord(Vec3 canonical, const Roi& roi) {
  const auto c = augmented_coord(Vec3{}, roi);
  const auto p = augmented_coord(canonical, roi);
  AugmentedCoord out{};
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c[i] - p[i];
  return out;
}

RfeUnit RfeUnit::create(ParamStore& store, const std::string& path,
                        std::size_t in_channels, const RfeConfig& cfg,
                        Initializer& init) {
  const auto d = cfg.d_a, h = cfg.hidden;
  RfeUnit u;
  u.input_proj = LinearLayer::create(store, path + ".input_proj", in_channels, d, init);
  u.query = LinearLayer::create(store, path + ".query", d, d, init);
  u.key = LinearLayer::create(store, path + ".key", d, d, init);
  u.value = LinearLayer::create(store, path + ".value", d, d, init);
  u.gamma = Mlp::create(store, path + ".gamma", {d, h, d}, init);
  u.position = Mlp::create(store, path + ".position", {27, h, d}, init);
  u.block_mlp = Mlp::create(store, path + ".block_mlp", {d, h, d}, init);
  u.norm1 = NormLayer::create(store, path + ".norm1", d, cfg.norm);
  u.norm2 = NormLayer::create(store, path + ".norm2", d, cfg.norm);
  return u;
}

RfeParams RfeParams::create(ParamStore& store, const std::string& path,
                            const RfeConfig& cfg, Initializer& init) {
  cfg.validate();
  RfeParams p;
  p.theta = store.add(path + ".theta", init.uniform({cfg.d_a}, cfg.d_a));
  for (std::size_t n = 0; n < cfg.repeats; ++n) {
    for (std::size_t slot = 0; slot < cfg.scale_order.size(); ++slot) {
      const auto scale = cfg.scale_order[slot];
      p.units.push_back(RfeUnit::create(
          store, path + ".r" + std::to_string(n) + ".s" + std::to_string(scale),
          kScaleChannels[scale - 1], cfg, init));
    }
  }
  return p;
}

RfeUnit& RfeParams::unit(std::size_t repeat, std::size_t slot, const RfeConfig& cfg) {
  return units.at(repeat * cfg.scale_order.size() + slot);
}

const RfeUnit& RfeParams::unit(std::size_t repeat, std::size_t slot,
                               const RfeConfig& cfg) const {
  return units.at(repeat * cfg.scale_order.size() + slot);
}

Tensor position_encoding(const PooledSet& pooled, const Roi& roi,
                         const Mlp& position_mlp) {
  std::vector<double> rel;
  rel.reserve(pooled.size() * 27);
  for (const auto& p : pooled.positions) {
    const auto r = relative_coord(p, roi);
    rel.insert(rel.end(), r.begin(), r.end());
  }
  return position_mlp.forward(Tensor({pooled.size(), 27}, std::move(rel)));
}

namespace {

std::vector<std::size_t> segment_ids(std::span<const std::size_t> offsets) {
  std::vector<std::size_t> seg(offsets.back());
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    if (offsets[s] == offsets[s + 1]) {
      throw ContractError("attention over an empty pooled set");
    }
    std::fill(seg.begin() + static_cast<std::ptrdiff_t>(offsets[s]),
              seg.begin() + static_cast<std::ptrdiff_t>(offsets[s + 1]), s);
  }
  return seg;
}

void check_attention_inputs(const Tensor& queries, const Tensor& features,
                            const Tensor& zeta,
                            std::span<const std::size_t> offsets) {
  if (queries.dim() != 2 || features.dim() != 2 || zeta.shape() != features.shape()) {
    throw DimensionError("attention: expected queries [S,d], features/zeta [P,d]");
  }
  if (offsets.size() != queries.size(0) + 1 || offsets.front() != 0 ||
      offsets.back() != features.size(0)) {
    throw DimensionError("attention: offsets do not match queries/features");
  }
}

}  // namespace

AttentionResult vector_attention(const Tensor& queries, const Tensor& features,
                                 const Tensor& zeta,
                                 std::span<const std::size_t> offsets,
                                 const RfeUnit& unit) {
  check_attention_inputs(queries, features, zeta, offsets);
  const auto seg = segment_ids(offsets);
  const Tensor q = ops::gather_rows(unit.query.forward(queries), seg);
  const Tensor k = unit.key.forward(features);
  const Tensor v = unit.value.forward(features);
  const Tensor logits = unit.gamma.forward(ops::add(ops::sub(q, k), zeta));
  AttentionResult res;
  res.weights = ops::segment_softmax(logits, offsets);
  res.output = ops::segment_sum(ops::mul(res.weights, ops::add(v, zeta)), offsets);
  return res;
}

AttentionResult multihead_attention(const Tensor& queries, const Tensor& features,
                                    const Tensor& zeta,
                                    std::span<const std::size_t> offsets,
                                    const RfeUnit& unit, std::size_t heads) {
  check_attention_inputs(queries, features, zeta, offsets);
  const auto d = features.size(1);
  if (heads == 0 || d % heads != 0) throw ConfigError("heads must divide d_a");
  const auto dh = d / heads;
  // head_sum[c, h] = 1 when channel c belongs to head h.
  std::vector<double> sum_map(d * heads, 0.0), expand_map(heads * d, 0.0);
  for (std::size_t c = 0; c < d; ++c) {
    sum_map[c * heads + c / dh] = 1.0;
    expand_map[(c / dh) * d + c] = 1.0;
  }
  const Tensor head_sum({d, heads}, std::move(sum_map));
  const Tensor head_expand({heads, d}, std::move(expand_map));

  const auto seg = segment_ids(offsets);
  const Tensor q = ops::gather_rows(unit.query.forward(queries), seg);
  const Tensor k = ops::add(unit.key.forward(features), zeta);
  const Tensor v = ops::add(unit.value.forward(features), zeta);
  const Tensor scores = ops::scale(ops::matmul(ops::mul(q, k), head_sum),
                                   1.0 / std::sqrt(static_cast<double>(dh)));
  AttentionResult res;
  res.weights = ops::segment_softmax(scores, offsets);
  res.output = ops::segment_sum(ops::mul(ops::matmul(res.weights, head_expand), v),
                                offsets);
  return res;
}

Tensor vector_attention(const Tensor& r, const Tensor& features, const Tensor& zeta,
                        const RfeUnit& unit) {
  const std::size_t offsets[] = {0, features.size(0)};
  auto res = vector_attention(ops::reshape(r, {1, r.numel()}), features, zeta,
                              offsets, unit);
  return ops::reshape(res.output, {r.numel()});
}

Tensor rfe_block(const Tensor& r, std::span<const PooledSet> pooled,
                 std::span<const Roi> rois, const Tensor& point_features,
                 RfeUnit& unit, const RfeConfig& cfg, bool training,
                 RfeTrace* trace) {
  if (pooled.size() != r.size(0) || rois.size() != r.size(0)) {
    throw DimensionError("rfe_block: one pooled set and ROI per feature row");
  }
  std::vector<std::size_t> active;
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> rows;
  for (std::size_t m = 0; m < pooled.size(); ++m) {
    if (pooled[m].empty()) continue;
    active.push_back(m);
    rows.insert(rows.end(), pooled[m].rows.begin(), pooled[m].rows.end());
    offsets.push_back(rows.size());
  }
  if (active.empty()) return r;

  // Position encodings for all active ROIs in one MLP call.
  std::vector<double> rel;
  rel.reserve(rows.size() * 27);
  for (auto m : active) {
    for (const auto& p : pooled[m].positions) {
      const auto c = relative_coord(p, rois[m]);
      rel.insert(rel.end(), c.begin(), c.end());
    }
  }
  const Tensor zeta = unit.position.forward(Tensor({rows.size(), 27}, std::move(rel)));
  const Tensor feats =
      unit.input_proj.forward(ops::gather_rows(point_features, rows));
  const Tensor r_active = ops::gather_rows(r, active);

  AttentionResult att = cfg.attention == AttentionKind::kVector
                            ? vector_attention(r_active, feats, zeta, offsets, unit)
                            : multihead_attention(r_active, feats, zeta, offsets,
                                                  unit, cfg.heads);
  if (trace) {
    trace->attention_weight_elements += att.weights.numel();
    trace->pooled_points += rows.size();
    trace->attention_weights.push_back(att.weights);
  }
  Tensor h = unit.norm1.forward(ops::add(r_active, att.output), training);
  h = unit.norm2.forward(ops::add(h, unit.block_mlp.forward(h)), training);
  return ops::scatter_rows(r, active, h);
}

Tensor compute_roi_features(const ScalePoints& points, std::span<const Roi> rois,
                            RfeParams& params, const RfeConfig& cfg,
                            std::uint64_t seed, bool training, RfeTrace* trace) {
  cfg.validate();
  const auto m = rois.size();
  const std::vector<std::size_t> zero_rows(m, 0);
  Tensor r = ops::gather_rows(ops::reshape(params.theta, {1, cfg.d_a}), zero_rows);
  if (m == 0) return r;
  std::vector<PooledSet> pooled(m);
  for (std::size_t n = 0; n < cfg.repeats; ++n) {
    for (std::size_t slot = 0; slot < cfg.scale_order.size(); ++slot) {
      const auto scale = cfg.scale_order[slot];
      const auto& source = points[scale - 1];
      for (std::size_t i = 0; i < m; ++i) {
        pooled[i] = pool(source, rois[i], cfg.enlargement, cfg.budgets[slot],
                         pool_seed(seed, i, scale, n), i);
      }
      if (source.positions.empty()) continue;
      r = rfe_block(r, pooled, rois, source.features, params.unit(n, slot, cfg), cfg,
                    training, trace);
    }
  }
  return r;
}

}  // namespace refine3d
