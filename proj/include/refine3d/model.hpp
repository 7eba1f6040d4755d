#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "refine3d/config.hpp"
#include "refine3d/heads.hpp"
#include "refine3d/nn.hpp"
#include "refine3d/rfe.hpp"
#include "refine3d/voxel.hpp"

namespace refine3d {

struct ModelConfig {
  GridSpec grid;
  RfeConfig rfe;
  RefineConfig refine;
  std::size_t head_hidden = 256;
  std::size_t aux_hidden = 64;
  /// Feature maps that receive auxiliary supervision.
  std::vector<std::size_t> aux_scales{3, 4};
  LossToggles losses;

  void validate() const;
  static ModelConfig from_config(const Config& cfg);
};

/// Surrogate encoder, ROI feature encoder and heads with one parameter store.
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  /// Normalization layers keyed by parameter path prefix.
  std::vector<std::pair<std::string, NormLayer*>> norm_layers();
  std::vector<std::pair<std::string, const NormLayer*>> norm_layers() const;

  struct Output {
    ScalePoints points;
    Tensor roi_features;           // [M, d_a]
    DetectionHead::Output head;    // confidence [M,1], residue [M,7]
    std::vector<AuxHead::Output> aux;  // one per aux scale
  };

  Output forward(const Occupancy& occ, std::span<const Roi> rois,
                 std::uint64_t pool_seed, bool training, RfeTrace* trace = nullptr);

  struct Losses {
    Tensor total;
    Tensor refine;
    Tensor aux;
    double refine_value = 0.0;
    double aux_value = 0.0;
  };

  /// Targets are built from `rois` against `gts`; aux targets from the
  /// interpreted aux-scale points.
  Losses loss(const Output& out, std::span<const Roi> rois, std::span<const Roi> gts) const;

  /// Decoded refined boxes with predicted confidences.
  std::vector<Roi> refined_boxes(const Output& out, std::span<const Roi> rois) const;

 private:
  ModelConfig cfg_;
  ParamStore params_;
  MultiscaleEncoder encoder_;
  RfeParams rfe_;
  DetectionHead head_;
  std::vector<AuxHead> aux_heads_;
};

/// Writes parameters, batch-norm statistics and (optionally) optimizer state
/// as one JSON object mapping paths to {"shape": [...], "data": [...]}.
void save_checkpoint(const Model& model, const AdamState* optimizer,
                     const std::filesystem::path& path);
/// Loads into an already-constructed model of the same configuration.
void load_checkpoint(Model& model, AdamState* optimizer, const std::filesystem::path& path);

}  // namespace refine3d
