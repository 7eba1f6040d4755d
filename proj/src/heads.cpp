#include "refine3d/heads.hpp"

#include <algorithm>
#include <cmath>

#include "refine3d/ops.hpp"

namespace refine3d {

void RefineConfig::validate() const {
  if (!(0.0 <= bg_threshold && bg_threshold < reg_threshold &&
        reg_threshold <= fg_threshold && fg_threshold <= 1.0)) {
    throw ConfigError("thresholds must satisfy 0 <= chi_L < chi_reg <= chi_H <= 1");
  }
  if (!(huber_delta > 0.0)) throw ConfigError("loss.huber_delta must be positive");
  if (focal_alpha < 0.0 || focal_alpha > 1.0 || focal_gamma < 0.0) {
    throw ConfigError("focal alpha must be in [0,1] and gamma non-negative");
  }
}

double normalized_iou(double iou, const RefineConfig& cfg) {
  if (iou > cfg.fg_threshold) return 1.0;
  if (iou < cfg.bg_threshold) return 0.0;
  return (iou - cfg.bg_threshold) / (cfg.fg_threshold - cfg.bg_threshold);
}

namespace {

double diagonal(const Roi& roi, DiagonalMode mode) {
  const double d = mode == DiagonalMode::kBaseDiagonal
                       ? std::hypot(roi.size.x, roi.size.y)
                       : std::hypot(roi.center.x, roi.center.y);
  if (!(d > 0.0)) throw ContractError("residue normalizer must be positive");
  return d;
}

}  // namespace

ResidueVector encode_residue(const Roi& roi, const Roi& gt, DiagonalMode mode) {
  validate(roi);
  validate(gt);
  const double d = diagonal(roi, mode);
  return {(gt.center.x - roi.center.x) / d,
          (gt.center.y - roi.center.y) / d,
          (gt.center.z - roi.center.z) / roi.size.z,
          std::log(gt.size.x / roi.size.x),
          std::log(gt.size.y / roi.size.y),
          std::log(gt.size.z / roi.size.z),
          wrap_angle(gt.yaw - roi.yaw)};
}

Roi decode_residue(const Roi& roi, const ResidueVector& delta, DiagonalMode mode) {
  const double d = diagonal(roi, mode);
  Roi out = roi;
  out.center = {roi.center.x + delta[0] * d, roi.center.y + delta[1] * d,
                roi.center.z + delta[2] * roi.size.z};
  out.size = {roi.size.x * std::exp(delta[3]), roi.size.y * std::exp(delta[4]),
              roi.size.z * std::exp(delta[5])};
  out.yaw = wrap_angle(roi.yaw + delta[6]);
  return out;
}

namespace {

Roi yaw_free(const Roi& roi) {
  Roi r = roi;
  r.yaw = 0.0;
  return r;
}

}  // namespace

ResidueVector encode_target(const Roi& roi, const Roi& gt, const RefineConfig& cfg) {
  if (cfg.frame == ResidueFrame::kLidar) return encode_residue(roi, gt, cfg.diagonal);
  validate(roi);
  Roi local = gt;
  local.center = roi.center + to_canonical(gt.center, roi);
  local.yaw = wrap_angle(gt.yaw - roi.yaw);
  return encode_residue(yaw_free(roi), local, cfg.diagonal);
}

Roi decode_prediction(const Roi& roi, const ResidueVector& delta, const RefineConfig& cfg) {
  if (cfg.frame == ResidueFrame::kLidar) return decode_residue(roi, delta, cfg.diagonal);
  Roi out = decode_residue(yaw_free(roi), delta, cfg.diagonal);
  out.center = from_canonical(out.center - roi.center, roi);
  out.yaw = wrap_angle(out.yaw + roi.yaw);
  return out;
}

double focal_loss(double prob, double target, double alpha, double gamma) {
  const double p = std::clamp(prob, ops::kProbClamp, 1.0 - ops::kProbClamp);
  return -alpha * target * std::pow(1.0 - p, gamma) * std::log(p) -
         (1.0 - alpha) * (1.0 - target) * std::pow(p, gamma) * std::log(1.0 - p);
}

double smooth_l1(std::span<const double> pred, std::span<const double> target,
                 double delta) {
  if (pred.size() != target.size()) throw DimensionError("smooth_l1: size mismatch");
  if (pred.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double a = std::abs(pred[i] - target[i]);
    s += a < delta ? 0.5 * a * a / delta : a - 0.5 * delta;
  }
  return s / static_cast<double>(pred.size());
}

double bce(std::span<const double> prob, std::span<const double> target) {
  if (prob.size() != target.size()) throw DimensionError("bce: size mismatch");
  if (prob.empty()) return 0.0;
  Tensor p = Tensor::vector({prob.begin(), prob.end()});
  return ops::mean(ops::bce(p, target)).item();
}

std::vector<RoiMatch> match_rois(std::span<const Roi> rois, std::span<const Roi> gts,
                                 IouMode mode) {
  std::vector<RoiMatch> out(rois.size());
  for (std::size_t r = 0; r < rois.size(); ++r) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(rois[r], gts[g], mode);
      if (v > out[r].iou) out[r] = {static_cast<int>(g), v};
    }
  }
  return out;
}

RefineTargets make_refine_targets(std::span<const Roi> rois,
                                  std::span<const RoiMatch> matches,
                                  std::span<const Roi> gts,
                                  const RefineConfig& cfg) {
  if (matches.size() != rois.size()) throw DimensionError("one match per ROI");
  RefineTargets t;
  t.confidence.resize(rois.size());
  t.residue.resize(rois.size(), ResidueVector{});
  t.regression_mask.resize(rois.size(), 0.0);
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const auto& m = matches[r];
    t.confidence[r] = normalized_iou(m.iou, cfg);
    if (m.gt < 0) continue;
    t.residue[r] = encode_target(rois[r], gts[static_cast<std::size_t>(m.gt)], cfg);
    const double gate_value =
        cfg.gate == RegressionGate::kRawIou ? m.iou : t.confidence[r];
    t.regression_mask[r] = gate_value >= cfg.reg_threshold ? 1.0 : 0.0;
  }
  return t;
}

DetectionHead DetectionHead::create(ParamStore& store, const std::string& path,
                                    std::size_t d_a, std::size_t hidden,
                                    Initializer& init) {
  DetectionHead h;
  h.shared = Mlp::create(store, path + ".shared", {d_a, hidden, hidden}, init);
  h.confidence = LinearLayer::create(store, path + ".confidence", hidden, 1, init);
  h.refinement = LinearLayer::create(store, path + ".refinement", hidden, 7, init);
  return h;
}

DetectionHead::Output DetectionHead::forward(const Tensor& roi_features) const {
  const Tensor h = ops::relu(shared.forward(roi_features));
  return {ops::sigmoid(confidence.forward(h)), refinement.forward(h)};
}

AuxHead AuxHead::create(ParamStore& store, const std::string& path,
                        std::size_t channels, std::size_t hidden,
                        Initializer& init) {
  return {Mlp::create(store, path, {channels, hidden, hidden, 7}, init)};
}

AuxHead::Output AuxHead::forward(const Tensor& point_features) const {
  const Tensor out = mlp.forward(point_features);
  return {ops::sigmoid(ops::slice_cols(out, 0, 1)), ops::slice_cols(out, 1, 3),
          ops::sigmoid(ops::slice_cols(out, 4, 3))};
}

Tensor refine_loss(const Tensor& confidence, const Tensor& residue,
                   const RefineTargets& targets, const RefineConfig& cfg) {
  const auto m = targets.confidence.size();
  if (m == 0) throw ContractError("refine_loss needs at least one ROI");
  if (confidence.numel() != m || residue.numel() != 7 * m) {
    throw DimensionError("refine_loss: predictions do not match targets");
  }
  const double inv_m = 1.0 / static_cast<double>(m);
  const Tensor cls = ops::focal_loss(confidence, targets.confidence, cfg.focal_alpha,
                                     cfg.focal_gamma);
  std::vector<double> flat(7 * m), weights(7 * m);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < 7; ++j) {
      flat[r * 7 + j] = targets.residue[r][j];
      // smooth_l1 is a mean over the 7 residue terms.
      weights[r * 7 + j] = targets.regression_mask[r] * inv_m / 7.0;
    }
  const Tensor reg = ops::smooth_l1(residue, flat, cfg.huber_delta);
  return ops::add(ops::scale(ops::sum(cls), inv_m), ops::weighted_sum(reg, weights));
}

Tensor aux_loss(const AuxHead::Output& pred, const AuxTargets& targets,
                const RefineConfig& cfg) {
  const auto n = targets.foreground.size();
  if (pred.foreground.numel() != n || pred.offset.numel() != 3 * n ||
      pred.part.numel() != 3 * n) {
    throw DimensionError("aux_loss: predictions do not match targets");
  }
  if (targets.positives == 0) return Tensor::scalar(0.0);
  const double inv_p = 1.0 / static_cast<double>(targets.positives);
  const Tensor cls = ops::focal_loss(pred.foreground, targets.foreground,
                                     cfg.focal_alpha, cfg.focal_gamma);
  std::vector<double> offset(3 * n), part(3 * n), weights(3 * n);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < 3; ++j) {
      offset[k * 3 + j] = targets.offset[k][j];
      part[k * 3 + j] = targets.part[k][j];
      weights[k * 3 + j] = targets.foreground[k] * inv_p / 3.0;
    }
  const Tensor reg = ops::smooth_l1(pred.offset, offset, cfg.huber_delta);
  const Tensor prt = ops::bce(pred.part, part);
  return ops::add(ops::scale(ops::sum(cls), inv_p),
                  ops::add(ops::weighted_sum(reg, weights),
                           ops::weighted_sum(prt, weights)));
}

Tensor total_loss(const LossTerms& terms, const LossToggles& toggles) {
  Tensor total = Tensor::scalar(0.0);
  if (toggles.refine && terms.refine.defined()) total = ops::add(total, terms.refine);
  if (toggles.aux && terms.aux.defined()) total = ops::add(total, terms.aux);
  return total;
}

}  // namespace refine3d
