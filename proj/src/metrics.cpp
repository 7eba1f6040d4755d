#include "refine3d/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "refine3d/tensor.hpp"

namespace refine3d {

std::optional<double> average_precision(std::span<const ScoredMatch> matches,
                                        std::size_t num_gt) {
  if (num_gt == 0) return std::nullopt;
  std::vector<std::size_t> order(matches.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return matches[a].confidence > matches[b].confidence;
  });

  // Best precision at recall >= k/40, filled from the tail of the ranking.
  std::vector<std::size_t> tp_at(order.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (matches[order[i]].true_positive) ++tp;
    tp_at[i] = tp;
  }
  if (tp > num_gt) throw ContractError("average_precision: more true positives than gt");
  double sum = 0.0;
  for (std::size_t k = 1; k <= kRecallPositions; ++k) {
    double best = 0.0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (tp_at[i] * kRecallPositions >= k * num_gt) {
        best = std::max(best, static_cast<double>(tp_at[i]) / static_cast<double>(i + 1));
      }
    }
    sum += best;
  }
  return 100.0 * sum / static_cast<double>(kRecallPositions);
}

std::vector<ScoredMatch> match_detections(std::span<const std::vector<Roi>> detections,
                                          std::span<const std::vector<Roi>> gts,
                                          double threshold, IouMode mode) {
  if (detections.size() != gts.size()) {
    throw DimensionError("match_detections: detections and gts cover different scenes");
  }
  struct Ref {
    std::size_t scene;
    std::size_t index;
  };
  std::vector<Ref> refs;
  for (std::size_t s = 0; s < detections.size(); ++s)
    for (std::size_t i = 0; i < detections[s].size(); ++i) refs.push_back({s, i});
  std::stable_sort(refs.begin(), refs.end(), [&](const Ref& a, const Ref& b) {
    return detections[a.scene][a.index].confidence > detections[b.scene][b.index].confidence;
  });

  std::vector<std::vector<bool>> taken(gts.size());
  for (std::size_t s = 0; s < gts.size(); ++s) taken[s].assign(gts[s].size(), false);
  std::vector<ScoredMatch> out;
  out.reserve(refs.size());
  for (const auto& r : refs) {
    const Roi& det = detections[r.scene][r.index];
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < gts[r.scene].size(); ++g) {
      if (taken[r.scene][g]) continue;
      const double v = iou(det, gts[r.scene][g], mode);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    const bool hit = best >= 0 && best_iou >= threshold;
    if (hit) taken[r.scene][static_cast<std::size_t>(best)] = true;
    out.push_back({det.confidence, hit});
  }
  return out;
}

std::vector<CalibrationBin> calibration_table(std::span<const ScoredMatch> matches,
                                              std::size_t bins) {
  if (bins == 0) throw ContractError("calibration_table: bins must be positive");
  std::vector<CalibrationBin> table(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    table[b].lo = static_cast<double>(b) / static_cast<double>(bins);
    table[b].hi = static_cast<double>(b + 1) / static_cast<double>(bins);
  }
  for (const auto& m : matches) {
    auto b = static_cast<std::size_t>(std::clamp(m.confidence, 0.0, 1.0) *
                                      static_cast<double>(bins));
    b = std::min(b, bins - 1);
    auto& bin = table[b];
    ++bin.count;
    bin.mean_confidence += m.confidence;
    bin.hit_rate += m.true_positive ? 1.0 : 0.0;
  }
  for (auto& bin : table) {
    if (bin.count == 0) continue;
    bin.mean_confidence /= static_cast<double>(bin.count);
    bin.hit_rate /= static_cast<double>(bin.count);
  }
  return table;
}

}  // namespace refine3d
