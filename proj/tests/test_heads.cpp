#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "refine3d/heads.hpp"
#include "refine3d/ops.hpp"

using namespace refine3d;

namespace {

Roi random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(-30, 30), size(0.5, 5), yaw(-3.1, 3.1);
  Roi r;
  r.center = {pos(rng), pos(rng), pos(rng) / 10};
  r.size = {size(rng), size(rng), size(rng)};
  r.yaw = yaw(rng);
  return r;
}

void expect_box_near(const Roi& a, const Roi& b, double tol) {
  EXPECT_NEAR(a.center.x, b.center.x, tol);
  EXPECT_NEAR(a.center.y, b.center.y, tol);
  EXPECT_NEAR(a.center.z, b.center.z, tol);
  EXPECT_NEAR(a.size.x, b.size.x, tol);
  EXPECT_NEAR(a.size.y, b.size.y, tol);
  EXPECT_NEAR(a.size.z, b.size.z, tol);
  EXPECT_NEAR(wrap_angle(a.yaw - b.yaw), 0.0, tol);
}

}  // namespace

TEST(NormalizedIou, Ramp) {
  RefineConfig cfg;
  EXPECT_EQ(normalized_iou(0.8, cfg), 1.0);
  EXPECT_EQ(normalized_iou(0.75, cfg), 1.0);
  EXPECT_NEAR(normalized_iou(0.5, cfg), 0.5, 1e-15);
  EXPECT_EQ(normalized_iou(0.25, cfg), 0.0);
  EXPECT_EQ(normalized_iou(0.1, cfg), 0.0);
  double prev = 0.0;
  for (int i = 0; i <= 100; ++i) {
    const double v = normalized_iou(i / 100.0, cfg);
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(RefineConfig, RejectsUnorderedThresholds) {
  RefineConfig cfg;
  cfg.bg_threshold = 0.6;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = RefineConfig{};
  cfg.huber_delta = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Residue, Examples) {
  Roi roi;
  roi.size = {3, 4, 1};
  Roi gt = roi;
  gt.center.x = 1.0;
  auto d = encode_residue(roi, gt);
  EXPECT_NEAR(d[0], 0.2, 1e-15);
  for (int j = 1; j < 7; ++j) EXPECT_EQ(d[j], 0.0);
  gt = roi;
  gt.size.z = 2.0;
  d = encode_residue(roi, gt);
  EXPECT_NEAR(d[5], std::log(2.0), 1e-15);
  EXPECT_NEAR(decode_residue(roi, d).size.z, 2.0, 1e-15);
  EXPECT_EQ(encode_residue(roi, roi), ResidueVector{});
}

TEST(Residue, CenterNormMode) {
  Roi roi;
  roi.center = {3, 4, 0};
  Roi gt = roi;
  gt.center.y = 5.0;
  EXPECT_NEAR(encode_residue(roi, gt, DiagonalMode::kCenterNorm)[1], 0.2, 1e-15);
  roi.center = {0, 0, 0};
  EXPECT_THROW(encode_residue(roi, gt, DiagonalMode::kCenterNorm), ContractError);
}

TEST(Residue, RoundTripBothFrames) {
  std::mt19937_64 rng(1);
  for (auto frame : {ResidueFrame::kLidar, ResidueFrame::kCanonical}) {
    RefineConfig cfg;
    cfg.frame = frame;
    for (int i = 0; i < 10000; ++i) {
      const Roi roi = random_box(rng), gt = random_box(rng);
      expect_box_near(decode_prediction(roi, encode_target(roi, gt, cfg), cfg), gt, 1e-9);
    }
  }
}

TEST(Residue, CanonicalTargetIgnoresCommonRotation) {
  std::mt19937_64 rng(2);
  RefineConfig cfg;
  std::uniform_real_distribution<double> ang(-3, 3);
  for (int i = 0; i < 200; ++i) {
    Roi roi = random_box(rng);
    Roi gt = roi;
    gt.center = gt.center + Vec3{0.4, -0.3, 0.1};
    gt.yaw += 0.2;
    const auto a = encode_target(roi, gt, cfg);
    const double t = ang(rng), c = std::cos(t), s = std::sin(t);
    for (Roi* b : {&roi, &gt}) {
      b->center = {c * b->center.x - s * b->center.y, s * b->center.x + c * b->center.y,
                   b->center.z};
      b->yaw = wrap_angle(b->yaw + t);
    }
    const auto b = encode_target(roi, gt, cfg);
    for (int j = 0; j < 7; ++j) EXPECT_NEAR(a[j], b[j], 1e-9);
  }
}

TEST(Residue, CanonicalOffsetAlongHeading) {
  Roi roi;
  roi.size = {3, 4, 1};
  roi.yaw = std::numbers::pi / 2;
  Roi gt = roi;
  gt.center.y = 1.0;  // straight ahead along the heading
  RefineConfig cfg;
  const auto d = encode_target(roi, gt, cfg);
  EXPECT_NEAR(d[0], 0.2, 1e-12);
  EXPECT_NEAR(d[1], 0.0, 1e-12);
}

TEST(ScalarLosses, Focal) {
  EXPECT_NEAR(focal_loss(0.5, 1.0, 0.25, 2.0), 0.25 * 0.25 * std::log(2.0), 1e-15);
  EXPECT_NEAR(focal_loss(0.5, 0.0, 0.25, 2.0), 0.75 * 0.25 * std::log(2.0), 1e-15);
  EXPECT_LT(focal_loss(0.99, 1.0, 0.25, 2.0), focal_loss(0.6, 1.0, 0.25, 2.0));
  EXPECT_TRUE(std::isfinite(focal_loss(0.0, 1.0, 0.25, 2.0)));
  // γ = 0, α = 0.5 reduces to half the cross-entropy.
  EXPECT_NEAR(focal_loss(0.3, 1.0, 0.5, 0.0), -0.5 * std::log(0.3), 1e-15);
}

TEST(ScalarLosses, SmoothL1) {
  const std::vector<double> zero(7, 0.0);
  std::vector<double> p(7, 0.0);
  EXPECT_EQ(smooth_l1(p, zero, 1.0), 0.0);
  p[0] = 0.5;
  EXPECT_NEAR(smooth_l1(p, zero, 1.0), 0.125 / 7, 1e-15);
  p[0] = 3.0;
  EXPECT_NEAR(smooth_l1(p, zero, 1.0), 2.5 / 7, 1e-15);
  EXPECT_THROW(smooth_l1(p, std::vector<double>(3), 1.0), DimensionError);
}

TEST(ScalarLosses, BceIsZeroAtTheTarget) {
  const std::vector<double> t{0.2, 0.5, 0.9};
  EXPECT_NEAR(bce(t, t), 0.0, 1e-12);
  const std::vector<double> p{0.5};
  EXPECT_NEAR(bce(p, std::vector<double>{1.0}), std::log(2.0), 1e-15);
  EXPECT_GT(bce(std::vector<double>{0.4, 0.5, 0.9}, t), 0.0);
}

TEST(MatchRois, BestOverlapAndTies) {
  Roi gt_a, gt_b;
  gt_b.center = {0.5, 0, 0};
  Roi roi;
  roi.center = {0.25, 0, 0};  // equal overlap with both
  Roi far;
  far.center = {10, 0, 0};
  const std::vector<Roi> rois{roi, gt_b, far};
  const std::vector<Roi> gts{gt_a, gt_b};
  const auto m = match_rois(rois, gts);
  EXPECT_EQ(m[0].gt, 0);
  EXPECT_EQ(m[1].gt, 1);
  EXPECT_NEAR(m[1].iou, 1.0, 1e-12);
  EXPECT_EQ(m[2].gt, -1);
  EXPECT_EQ(m[2].iou, 0.0);
}

TEST(RefineTargets, GateAndConfidence) {
  Roi gt;
  gt.size = {4, 2, 2};
  std::vector<Roi> rois(3, gt);
  rois[1].center.x = 1.0;   // IoU 3/5 = 0.6
  rois[2].center.x = 2.5;   // IoU 1.5/6.5 ≈ 0.23
  const std::vector<Roi> gts{gt};
  RefineConfig cfg;
  const auto m = match_rois(rois, gts);
  const auto t = make_refine_targets(rois, m, gts, cfg);
  EXPECT_EQ(t.confidence[0], 1.0);
  EXPECT_NEAR(t.confidence[1], (0.6 - 0.25) / 0.5, 1e-12);
  EXPECT_EQ(t.confidence[2], 0.0);
  EXPECT_EQ(t.regression_mask, (std::vector<double>{1, 1, 0}));
  cfg.gate = RegressionGate::kNormalizedIou;
  const auto n = make_refine_targets(rois, m, gts, cfg);
  EXPECT_EQ(n.regression_mask, (std::vector<double>{1, 1, 0}));
}

TEST(RefineLoss, ManualThreeRois) {
  RefineConfig cfg;
  RefineTargets t;
  t.confidence = {1.0, 0.4, 0.0};
  t.residue = {ResidueVector{0.1, 0, 0, 0, 0, 0, 0}, ResidueVector{0, 2.0, 0, 0, 0, 0, 0},
               ResidueVector{}};
  t.regression_mask = {1.0, 1.0, 0.0};
  const Tensor conf({3, 1}, {0.7, 0.5, 0.2});
  const Tensor res = Tensor::zeros({3, 7});
  const double want =
      (focal_loss(0.7, 1.0, 0.25, 2.0) + 0.005 / 7 + focal_loss(0.5, 0.4, 0.25, 2.0) + 1.5 / 7 +
       focal_loss(0.2, 0.0, 0.25, 2.0)) /
      3.0;
  EXPECT_NEAR(refine_loss(conf, res, t, cfg).item(), want, 1e-14);
}

TEST(RefineLoss, LowOverlapHasNoRegressionTerm) {
  Roi gt;
  Roi roi = gt;
  roi.center.x = 0.7;  // IoU 0.3/1.7
  const std::vector<Roi> rois{roi}, gts{gt};
  RefineConfig cfg;
  const auto t = make_refine_targets(rois, match_rois(rois, gts), gts, cfg);
  const Tensor conf({1, 1}, {0.3});
  Tensor res({1, 7}, std::vector<double>(7, 5.0), true);
  const auto loss = refine_loss(conf, res, t, cfg);
  EXPECT_NEAR(loss.item(), focal_loss(0.3, t.confidence[0], 0.25, 2.0), 1e-14);
  backward(loss);
  for (double g : res.grad()) EXPECT_EQ(g, 0.0);
}

TEST(RefineLoss, NoRoisThrows) {
  EXPECT_THROW(refine_loss(Tensor::zeros({0, 1}), Tensor::zeros({0, 7}), RefineTargets{},
                           RefineConfig{}),
               ContractError);
}

TEST(AuxLoss, NoPositivesIsZero) {
  AuxTargets t;
  t.foreground = {0, 0};
  t.offset.resize(2);
  t.part.resize(2);
  t.box = {-1, -1};
  AuxHead::Output p{Tensor({2, 1}, {0.3, 0.6}), Tensor::zeros({2, 3}),
                    Tensor({2, 3}, std::vector<double>(6, 0.5))};
  EXPECT_EQ(aux_loss(p, t, RefineConfig{}).item(), 0.0);
}

TEST(AuxLoss, ManualOnePositive) {
  AuxTargets t;
  t.foreground = {1, 0};
  t.offset = {{0.5, 0, 0}, {0, 0, 0}};
  t.part = {{0.5, 0.5, 0.5}, {0, 0, 0}};
  t.box = {0, -1};
  t.positives = 1;
  AuxHead::Output p{Tensor({2, 1}, {0.8, 0.1}), Tensor::zeros({2, 3}),
                    Tensor({2, 3}, {0.5, 0.5, 0.5, 0.9, 0.9, 0.9})};
  RefineConfig cfg;
  const double want = focal_loss(0.8, 1, 0.25, 2) + focal_loss(0.1, 0, 0.25, 2) + 0.125 / 3;
  EXPECT_NEAR(aux_loss(p, t, cfg).item(), want, 1e-12);
}

TEST(TotalLoss, Toggles) {
  const LossTerms terms{Tensor::scalar(2.0), Tensor::scalar(0.5)};
  EXPECT_EQ(total_loss(terms, {true, true}).item(), 2.5);
  EXPECT_EQ(total_loss(terms, {true, false}).item(), 2.0);
  EXPECT_EQ(total_loss(terms, {false, true}).item(), 0.5);
  EXPECT_EQ(total_loss(terms, {false, false}).item(), 0.0);
}

TEST(DetectionHead, OutputShapesAndRange) {
  ParamStore store;
  Initializer init(3);
  const auto head = DetectionHead::create(store, "head", 8, 16, init);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 3);
  std::vector<double> d(5 * 8);
  for (auto& x : d) x = n(rng);
  const auto out = head.forward(Tensor({5, 8}, d));
  EXPECT_EQ(out.confidence.shape(), (Shape{5, 1}));
  EXPECT_EQ(out.residue.shape(), (Shape{5, 7}));
  for (double c : out.confidence.data()) {
    EXPECT_GT(c, 0.0);
    EXPECT_LT(c, 1.0);
  }
}
