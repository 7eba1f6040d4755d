#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "refine3d/config.hpp"
#include "refine3d/rfe.hpp"

namespace refine3d {

struct BenchConfig {
  std::vector<std::size_t> rois{10, 100, 512};
  std::vector<std::size_t> points{64, 256};
  std::vector<AttentionKind> attentions{AttentionKind::kVector, AttentionKind::kMultihead};
  std::size_t d_a = 128;
  std::size_t hidden = 256;
  std::size_t heads = 4;
  std::size_t repeats = 3;

  static BenchConfig from_config(const Config& cfg);
};

struct BenchRow {
  AttentionKind attention = AttentionKind::kVector;
  std::size_t rois = 0;
  std::size_t points = 0;  // N_r, points pooled per ROI
  std::size_t d_a = 0;
  double mean_seconds = 0.0;
  double min_seconds = 0.0;
  /// Coefficient of variation of the wall-clock over repeats.
  double cv = 0.0;
  std::size_t weight_elements = 0;
  /// Peak tensor storage above the pre-call baseline, in doubles.
  std::size_t peak_doubles = 0;
  bool finite = true;
};

/// Inference-mode compute_roi_features on synthetic ROIs that each pool
/// exactly N_r points of one scale.
BenchRow bench_case(AttentionKind attention, std::size_t rois, std::size_t points,
                    std::size_t d_a, std::size_t hidden, std::size_t heads,
                    std::size_t repeats, std::uint64_t seed);

std::vector<BenchRow> bench(const BenchConfig& cfg, std::uint64_t seed);

std::string bench_csv(const std::vector<BenchRow>& rows);

}  // namespace refine3d
