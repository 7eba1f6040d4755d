#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "refine3d/geometry.hpp"
#include "refine3d/nn.hpp"
#include "refine3d/tensor.hpp"
#include "refine3d/voxel.hpp"

namespace refine3d {

/// How x*/y* residues are normalized.
enum class DiagonalMode {
  kBaseDiagonal,  // √(dx² + dy²) of the ROI footprint
  kCenterNorm,    // √(x² + y²) of the ROI center
};

/// Frame of the x*/y* residues: the ROI's canonical frame (offsets along
/// and across the heading) or the LiDAR frame.
enum class ResidueFrame { kCanonical, kLidar };

/// What the regression gate of the refine loss compares to χ_reg.
enum class RegressionGate { kRawIou, kNormalizedIou };

struct RefineConfig {
  double fg_threshold = 0.75;   // χ_H
  double bg_threshold = 0.25;   // χ_L
  double reg_threshold = 0.55;  // χ_reg
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double huber_delta = 1.0;
  DiagonalMode diagonal = DiagonalMode::kBaseDiagonal;
  RegressionGate gate = RegressionGate::kRawIou;
  ResidueFrame frame = ResidueFrame::kCanonical;
  IouMode iou_mode = IouMode::k3d;

  void validate() const;
};

using ResidueVector = std::array<double, 7>;

/// 1 above χ_H, 0 below χ_L, linear in between.
double normalized_iou(double iou, const RefineConfig& cfg);

ResidueVector encode_residue(const Roi& roi, const Roi& gt,
                             DiagonalMode mode = DiagonalMode::kBaseDiagonal);
Roi decode_residue(const Roi& roi, const ResidueVector& delta,
                   DiagonalMode mode = DiagonalMode::kBaseDiagonal);

/// encode_residue/decode_residue in cfg.frame; the head regresses these.
ResidueVector encode_target(const Roi& roi, const Roi& gt, const RefineConfig& cfg);
Roi decode_prediction(const Roi& roi, const ResidueVector& delta, const RefineConfig& cfg);

/// Scalar forms of the element-wise losses, for targets and tests.
double focal_loss(double prob, double target, double alpha, double gamma);
double smooth_l1(std::span<const double> pred, std::span<const double> target,
                 double delta);
double bce(std::span<const double> prob, std::span<const double> target);

struct RoiMatch {
  int gt = -1;  // -1 when there is no gt with positive overlap
  double iou = 0.0;
};

/// Best-overlap ground truth per ROI, ties by lower gt index.
std::vector<RoiMatch> match_rois(std::span<const Roi> rois, std::span<const Roi> gts,
                                 IouMode mode = IouMode::k3d);

struct RefineTargets {
  std::vector<double> confidence;        // c*
  std::vector<ResidueVector> residue;    // δ*, zero when unmatched
  std::vector<double> regression_mask;   // 1 where the regression term applies
};

RefineTargets make_refine_targets(std::span<const Roi> rois,
                                  std::span<const RoiMatch> matches,
                                  std::span<const Roi> gts,
                                  const RefineConfig& cfg);

/// Shared two-hidden-layer MLP with confidence (sigmoid) and 7-d refinement
/// outputs.
struct DetectionHead {
  Mlp shared;
  LinearLayer confidence;
  LinearLayer refinement;

  static DetectionHead create(ParamStore& store, const std::string& path,
                              std::size_t d_a, std::size_t hidden,
                              Initializer& init);

  struct Output {
    Tensor confidence;  // [M, 1] probabilities
    Tensor residue;     // [M, 7]
  };
  Output forward(const Tensor& roi_features) const;
};

/// Per-point MLP predicting foreground probability, center offset and part
/// location.
struct AuxHead {
  Mlp mlp;  // C -> h -> h -> 7

  static AuxHead create(ParamStore& store, const std::string& path,
                        std::size_t channels, std::size_t hidden,
                        Initializer& init);

  struct Output {
    Tensor foreground;  // [P, 1] probabilities
    Tensor offset;      // [P, 3]
    Tensor part;        // [P, 3] probabilities
  };
  Output forward(const Tensor& point_features) const;
};

/// (1/M) Σ_r [focal(c_r, c*_r) + gate_r · smooth_l1(δ_r, δ*_r)].
/// Throws ContractError when there are no ROIs.
Tensor refine_loss(const Tensor& confidence, const Tensor& residue,
                   const RefineTargets& targets, const RefineConfig& cfg);

/// (1/P₊)[Σ_k focal(f_k, f*_k) + Σ_{fg} (smooth_l1(o_k, o*_k) + bce(p_k, p*_k))];
/// zero when there are no foreground points.
Tensor aux_loss(const AuxHead::Output& pred, const AuxTargets& targets,
                const RefineConfig& cfg);

struct LossTerms {
  Tensor refine;
  Tensor aux;
};

struct LossToggles {
  bool refine = true;
  bool aux = true;
};

/// Sum of enabled terms; a scalar zero when none are enabled.
Tensor total_loss(const LossTerms& terms, const LossToggles& toggles);

}  // namespace refine3d
