#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "refine3d/config.hpp"
#include "refine3d/metrics.hpp"
#include "refine3d/model.hpp"
#include "refine3d/nn.hpp"
#include "refine3d/scene.hpp"

namespace refine3d {

struct TrainConfig {
  std::size_t epochs = 1;
  /// Overrides epochs × scenes when nonzero.
  std::size_t max_steps = 0;
  std::size_t rois_per_scene = 128;
  std::size_t proposal_cap = 512;
  std::size_t max_jitter_rounds = 256;
  AdamConfig adam;
  bool one_cycle = false;
  double max_lr = 0.01;
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
  /// Epochs between checkpoints; 0 writes only the final one.
  std::size_t checkpoint_every = 1;
  ProposalJitter jitter;

  void validate() const;
  static TrainConfig from_config(const Config& cfg);
  std::size_t total_steps(std::size_t scenes) const;
  /// Learning rate for 0-based `step` of `total`.
  double lr_at(std::size_t step, std::size_t total) const;
};

/// Jitter rounds over the scene's gts until `rois_per_scene` proposals exist
/// (fewer only when rounds run out, e.g. no gts and no spurious boxes).
std::vector<Roi> sample_training_rois(std::span<const Roi> gts, const TrainConfig& cfg,
                                      std::uint64_t seed,
                                      std::span<const ObjectClass> classes = {});

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t scene = 0;
  std::size_t rois = 0;
  double total = 0.0;
  double refine = 0.0;
  double aux = 0.0;
  double lr = 0.0;
};

struct TrainOutput {
  /// Empty: keep everything in memory.
  std::filesystem::path dir;
};

/// Adam on total_loss, one scene per step in scene order, each epoch
/// visiting every scene once. Starts at optimizer.step, so a state loaded
/// from a checkpoint resumes where it stopped. With dir set, appends to
/// dir/loss.csv, writes dir/checkpoint.json (and checkpoint_epoch_NNNN.json)
/// every checkpoint_every epochs, and on a non-finite value writes
/// dir/nan_dump.json before rethrowing.
std::vector<StepRecord> train(Model& model, AdamState& optimizer,
                              std::span<const Scene> scenes, const TrainConfig& cfg,
                              std::uint64_t seed, const TrainOutput& output = {},
                              std::span<const ObjectClass> classes = {});

std::string loss_csv_header();
std::string loss_csv_row(const StepRecord& r);

struct EvalConfig {
  ProposalJitter jitter;
  double proposal_nms = 0.7;
  std::size_t proposal_cap = 100;
  double detection_nms = 0.1;
  std::size_t detection_cap = 100;
  /// AP overlap threshold per class name; classes absent here use
  /// 0.7 for "car" and 0.5 otherwise.
  std::vector<std::pair<std::string, double>> class_iou;
  std::size_t calibration_bins = 10;
  /// Independent proposal draws per scene; AP treats each draw as its own
  /// copy of the scene.
  std::size_t rounds = 1;

  double iou_threshold(const std::string& class_name) const;
  static EvalConfig from_config(const Config& cfg, std::span<const ObjectClass> classes);
};

struct ClassAp {
  std::string name;
  std::size_t num_gt = 0;
  std::size_t num_detections = 0;
  double iou_threshold = 0.0;
  std::optional<double> ap;  // absent without ground truth
};

struct EvalReport {
  std::vector<ClassAp> classes;
  /// Over proposals with an overlapping gt: IoU of the proposal and of its
  /// refined box with that gt.
  double proposal_mean_iou = 0.0;
  double refined_mean_iou = 0.0;
  std::size_t matched_proposals = 0;
  std::vector<CalibrationBin> calibration;

  std::string to_json() const;
};

/// Jittered proposals, proposal NMS, RFE and heads, decode, NMS, AP.
EvalReport evaluate(Model& model, std::span<const Scene> scenes,
                    std::span<const ObjectClass> classes, const EvalConfig& cfg,
                    std::uint64_t seed);

struct OverfitResult {
  double proposal_mean_iou = 0.0;
  double refined_mean_iou = 0.0;
  double gain = 0.0;
  std::size_t steps = 0;
  double seconds = 0.0;
  std::vector<StepRecord> trace;
};

/// Trains a fresh model on `scenes` and evaluates on the same scenes with
/// proposals from an unseen jitter seed.
OverfitResult run_overfit(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                          const EvalConfig& eval_cfg, std::span<const Scene> scenes,
                          std::span<const ObjectClass> classes, std::uint64_t seed);

struct AblationRow {
  std::uint64_t seed = 0;
  OverfitResult vector;
  OverfitResult multihead;
};

/// Paired vector/multihead overfit runs, one pair per seed; scenes are
/// generated from each seed.
std::vector<AblationRow> ablate(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                                const EvalConfig& eval_cfg, const SceneSpec& scenes,
                                std::size_t scene_count, std::span<const std::uint64_t> seeds);

}  // namespace refine3d
