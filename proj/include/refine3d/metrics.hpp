#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "refine3d/geometry.hpp"

namespace refine3d {

struct ScoredMatch {
  double confidence = 0.0;
  bool true_positive = false;
};

inline constexpr std::size_t kRecallPositions = 40;

/// Interpolated AP over recall positions k/40, k = 1..40, in [0, 100]:
/// each position takes the best precision reached at recall >= k/40.
/// Matches are ranked by descending confidence (stable). nullopt without
/// ground truth.
std::optional<double> average_precision(std::span<const ScoredMatch> matches,
                                        std::size_t num_gt);

/// Greedy matching of one class across scenes. Detections are visited by
/// descending confidence; each takes the unmatched gt of its scene with the
/// highest overlap, a true positive when that overlap reaches `threshold`.
std::vector<ScoredMatch> match_detections(std::span<const std::vector<Roi>> detections,
                                          std::span<const std::vector<Roi>> gts,
                                          double threshold, IouMode mode = IouMode::k3d);

struct CalibrationBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double mean_confidence = 0.0;
  double hit_rate = 0.0;  // fraction of true positives
};

std::vector<CalibrationBin> calibration_table(std::span<const ScoredMatch> matches,
                                              std::size_t bins);

}  // namespace refine3d
