#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "refine3d/geometry.hpp"
#include "refine3d/nn.hpp"
#include "refine3d/tensor.hpp"
#include "refine3d/voxel.hpp"

namespace refine3d {

enum class AttentionKind { kVector, kMultihead };

AttentionKind parse_attention_kind(const std::string& name);
std::string to_string(AttentionKind kind);

struct RfeConfig {
  std::size_t d_a = 128;
  std::size_t hidden = 256;
  std::size_t repeats = 3;
  /// Scales visited in each repeat, largest voxels first.
  std::vector<std::size_t> scale_order{4, 3, 1};
  /// Pool budget per entry of scale_order.
  std::vector<std::size_t> budgets{64, 128, 256};
  Vec3 enlargement{0.5, 0.5, 0.5};
  AttentionKind attention = AttentionKind::kVector;
  NormKind norm = NormKind::kLayer;
  std::size_t heads = 4;

  void validate() const;
};

/// Points of one scale that fall in one (enlarged) ROI.
struct PooledSet {
  std::size_t roi_index = 0;
  std::size_t scale = 1;
  std::vector<Vec3> positions;    // canonical frame of the ROI
  std::vector<std::size_t> rows;  // rows of the source PointSet features

  std::size_t size() const { return rows.size(); }
  bool empty() const { return rows.empty(); }
};

/// Keeps points with contains(p, roi, enlargement), moves them to the ROI's
/// canonical frame and, above `budget`, keeps a seeded uniform subsample
/// (std::sample over mt19937_64, input order preserved).
PooledSet pool(const PointSet& points, const Roi& roi, Vec3 enlargement,
               std::size_t budget, std::uint64_t seed, std::size_t roi_index = 0);
PooledSet pool(const SparseFeatureMap& map, const GridSpec& spec, const Roi& roi,
               Vec3 enlargement, std::size_t budget, std::uint64_t seed,
               std::size_t roi_index = 0);

/// Subsampling seed for one (roi, scale, repeat) visit.
std::uint64_t pool_seed(std::uint64_t global_seed, std::size_t roi_index,
                        std::size_t scale, std::size_t repeat);

using AugmentedCoord = std::array<double, 27>;

/// [p, p - v_1, ..., p - v_8] for a canonical point p and the ROI's canonical
/// vertices v_k.
AugmentedCoord augmented_coord(Vec3 canonical, const Roi& roi);
/// c̃ - p̃ for the ROI center c (the canonical origin).
AugmentedCoord relative_coord(Vec3 canonical, const Roi& roi);

/// Parameters of one (repeat, scale) encoder.
struct RfeUnit {
  LinearLayer input_proj;  // C_i -> d_a
  LinearLayer query;       // φ
  LinearLayer key;         // ψ
  LinearLayer value;       // α
  Mlp gamma;               // d_a -> hidden -> d_a
  Mlp position;            // 27 -> hidden -> d_a
  Mlp block_mlp;           // d_a -> hidden -> d_a
  NormLayer norm1;
  NormLayer norm2;

  static RfeUnit create(ParamStore& store, const std::string& path,
                        std::size_t in_channels, const RfeConfig& cfg,
                        Initializer& init);
};

struct RfeParams {
  Tensor theta;  // [d_a] initial ROI feature
  /// units[repeat * scale_order.size() + position in scale_order]
  std::vector<RfeUnit> units;

  static RfeParams create(ParamStore& store, const std::string& path,
                          const RfeConfig& cfg, Initializer& init);
  RfeUnit& unit(std::size_t repeat, std::size_t slot, const RfeConfig& cfg);
  const RfeUnit& unit(std::size_t repeat, std::size_t slot, const RfeConfig& cfg) const;
};

/// ζ for every pooled point: MLP(c̃ - p̃_j). Returns [N, d_a].
Tensor position_encoding(const PooledSet& pooled, const Roi& roi,
                         const Mlp& position_mlp);

struct AttentionResult {
  Tensor output;   // [S, d_a], one row per segment
  Tensor weights;  // [P, d_a] (vector) or [P, heads] (multihead)
};

/// Batched attention over S non-empty segments of P pooled points.
///   queries:  [S, d_a] running ROI features
///   features: [P, d_a] projected point features
///   zeta:     [P, d_a] position encodings
///   offsets:  S+1 segment boundaries into the P rows
/// Vector form: Σ_j softmax_j(γ(φ(r) - ψ(f_j) + ζ_j)) ⊙ (α(f_j) + ζ_j), the
/// softmax taken over the points of a segment separately per channel.
AttentionResult vector_attention(const Tensor& queries, const Tensor& features,
                                 const Tensor& zeta,
                                 std::span<const std::size_t> offsets,
                                 const RfeUnit& unit);

/// Scaled dot-product cross attention with ζ added to keys and values; one
/// weight per point per head.
AttentionResult multihead_attention(const Tensor& queries, const Tensor& features,
                                    const Tensor& zeta,
                                    std::span<const std::size_t> offsets,
                                    const RfeUnit& unit, std::size_t heads);

/// Single-ROI vector attention: r [d_a], features/zeta [N, d_a] -> [d_a].
Tensor vector_attention(const Tensor& r, const Tensor& features,
                        const Tensor& zeta, const RfeUnit& unit);

/// Per-visit diagnostics collected by compute_roi_features.
struct RfeTrace {
  std::vector<Tensor> attention_weights;
  std::size_t attention_weight_elements = 0;
  std::size_t pooled_points = 0;
};

/// Attention module on a batch of ROIs. ROIs whose pooled set is empty keep
/// their feature; the rest go through
///   r <- Norm(r + Attention(r, P_r)); r <- Norm(r + MLP(r)).
/// `point_features` are the source rows referenced by `pooled`.
Tensor rfe_block(const Tensor& r, std::span<const PooledSet> pooled,
                 std::span<const Roi> rois, const Tensor& point_features,
                 RfeUnit& unit, const RfeConfig& cfg, bool training,
                 RfeTrace* trace = nullptr);

/// Point sets indexed by scale - 1; scales absent from scale_order may be
/// left empty.
using ScalePoints = std::array<PointSet, kNumScales>;

/// Starts every ROI at Θ and runs repeats × scale_order pool+block visits.
/// Returns [M, d_a].
Tensor compute_roi_features(const ScalePoints& points, std::span<const Roi> rois,
                            RfeParams& params, const RfeConfig& cfg,
                            std::uint64_t seed, bool training,
                            RfeTrace* trace = nullptr);

}  // namespace refine3d
