#include "refine3d/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "refine3d/voxel.hpp"

namespace refine3d {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (epochs == 0 && max_steps == 0) throw ConfigError("train.epochs must be positive");
  if (rois_per_scene == 0) throw ConfigError("train.rois_per_scene must be positive");
  if (proposal_cap == 0) throw ConfigError("train.proposal_cap must be positive");
  if (!(adam.lr >= 0.0) || !std::isfinite(adam.lr)) throw ConfigError("train.lr must be >= 0");
  if (one_cycle && !(max_lr > 0.0)) throw ConfigError("train.max_lr must be positive");
  if (!(pct_start > 0.0 && pct_start < 1.0)) throw ConfigError("train.pct_start must be in (0,1)");
  if (!(div_factor > 0.0) || !(final_div_factor > 0.0)) {
    throw ConfigError("one-cycle div factors must be positive");
  }
  jitter.validate();
}

TrainConfig TrainConfig::from_config(const Config& c) {
  TrainConfig t;
  t.epochs = c.get_size("train.epochs", t.epochs);
  t.max_steps = c.get_size("train.steps", t.max_steps);
  t.rois_per_scene = c.get_size("train.rois_per_scene", t.rois_per_scene);
  t.proposal_cap = c.get_size("train.proposal_cap", t.proposal_cap);
  t.adam.lr = c.get_double("train.lr", t.adam.lr);
  t.adam.beta1 = c.get_double("train.beta1", t.adam.beta1);
  t.adam.beta2 = c.get_double("train.beta2", t.adam.beta2);
  const auto schedule = c.get_string("train.schedule", "constant");
  if (schedule == "constant") {
    t.one_cycle = false;
  } else if (schedule == "one_cycle") {
    t.one_cycle = true;
  } else {
    throw ConfigError("train.schedule must be constant|one_cycle");
  }
  t.max_lr = c.get_double("train.max_lr", t.max_lr);
  t.pct_start = c.get_double("train.pct_start", t.pct_start);
  t.checkpoint_every = c.get_size("train.checkpoint_every", t.checkpoint_every);
  t.jitter = ProposalJitter::from_config(c);
  t.validate();
  return t;
}

std::size_t TrainConfig::total_steps(std::size_t scenes) const {
  return max_steps > 0 ? max_steps : epochs * scenes;
}

double TrainConfig::lr_at(std::size_t step, std::size_t total) const {
  if (!one_cycle) return adam.lr;
  const auto anneal = [](double from, double to, double pct) {
    return to + 0.5 * (from - to) * (1.0 + std::cos(std::numbers::pi * pct));
  };
  const double initial = max_lr / div_factor;
  const double final_lr = initial / final_div_factor;
  const double up = std::max(1.0, pct_start * static_cast<double>(total) - 1.0);
  const double s = static_cast<double>(step);
  if (s <= up) return anneal(initial, max_lr, s / up);
  const double down = std::max(1.0, static_cast<double>(total) - 1.0 - up);
  return anneal(max_lr, final_lr, std::min(1.0, (s - up) / down));
}

std::vector<Roi> sample_training_rois(std::span<const Roi> gts, const TrainConfig& cfg,
                                      std::uint64_t seed,
                                      std::span<const ObjectClass> classes) {
  std::vector<Roi> out;
  const auto want = std::min(cfg.rois_per_scene, cfg.proposal_cap);
  for (std::size_t round = 0; round < cfg.max_jitter_rounds && out.size() < want; ++round) {
    const auto batch = jitter_proposals(gts, cfg.jitter, mix_seed(seed, round), classes);
    if (batch.empty() && gts.empty()) break;
    out.insert(out.end(), batch.begin(), batch.end());
  }
  if (out.size() > want) out.resize(want);
  return out;
}

std::string loss_csv_header() { return "step,epoch,scene,rois,total,refine,aux,lr"; }

std::string loss_csv_row(const StepRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%zu,%.17g,%.17g,%.17g,%.17g", r.step, r.epoch,
                r.scene, r.rois, r.total, r.refine, r.aux, r.lr);
  return buf;
}

namespace {

json roi_json(const Roi& r) {
  return {{"center", {r.center.x, r.center.y, r.center.z}},
          {"size", {r.size.x, r.size.y, r.size.z}},
          {"yaw", r.yaw},
          {"cls", r.cls},
          {"confidence", r.confidence}};
}

void write_nan_dump(const std::filesystem::path& path, std::size_t step, std::size_t scene,
                    const Scene& s, std::span<const Roi> rois, const std::string& what) {
  json doc;
  doc["step"] = step;
  doc["scene"] = scene;
  doc["error"] = what;
  doc["points"] = s.points.size();
  doc["gts"] = json::array();
  for (const auto& g : s.boxes) doc["gts"].push_back(roi_json(g));
  doc["rois"] = json::array();
  for (const auto& r : rois) doc["rois"].push_back(roi_json(r));
  std::ofstream out(path);
  out << doc.dump(2) << '\n';
}

}  // namespace

std::vector<StepRecord> train(Model& model, AdamState& optimizer,
                              std::span<const Scene> scenes, const TrainConfig& cfg,
                              std::uint64_t seed, const TrainOutput& output,
                              std::span<const ObjectClass> classes) {
  cfg.validate();
  if (scenes.empty()) throw ContractError("train: need at least one scene");
  const auto n = scenes.size();
  const auto total = cfg.total_steps(n);
  const auto& grid = model.config().grid;
  std::vector<Occupancy> occupancy;
  occupancy.reserve(n);
  for (const auto& s : scenes) occupancy.push_back(voxelize(s.points, grid));

  std::ofstream csv;
  if (!output.dir.empty()) {
    std::filesystem::create_directories(output.dir);
    const auto path = output.dir / "loss.csv";
    const bool append = optimizer.step > 0 && std::filesystem::exists(path);
    csv.open(path, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw ContractError("cannot write " + path.string());
    if (!append) csv << loss_csv_header() << '\n';
  }

  std::vector<StepRecord> trace;
  for (std::size_t step = optimizer.step; step < total; ++step) {
    const auto scene_idx = step % n;
    const auto& scene = scenes[scene_idx];
    const auto step_seed = mix_seed(seed, step);
    const auto rois = sample_training_rois(scene.boxes, cfg, mix_seed(step_seed, 1), classes);

    StepRecord rec;
    rec.step = step;
    rec.epoch = step / n;
    rec.scene = scene_idx;
    rec.rois = rois.size();
    model.params().zero_grad();
    try {
      auto out = model.forward(occupancy[scene_idx], rois, mix_seed(step_seed, 2), true);
      auto losses = model.loss(out, rois, scene.boxes);
      rec.total = losses.total.item();
      rec.refine = losses.refine_value;
      rec.aux = losses.aux_value;
      check_finite(std::span<const double>(&rec.total, 1), "total loss");
      backward(losses.total);
    } catch (const NumericError& e) {
      std::string where;
      if (!output.dir.empty()) {
        const auto dump = output.dir / "nan_dump.json";
        write_nan_dump(dump, step, scene_idx, scene, rois, e.what());
        where = " (batch dumped to " + dump.string() + ")";
      }
      throw NumericError("non-finite value at step " + std::to_string(step) + ", scene " +
                         std::to_string(scene_idx) + ": " + e.what() + where);
    }

    rec.lr = cfg.lr_at(step, total);
    if (rec.lr > 0.0) {
      AdamConfig adam = cfg.adam;
      adam.lr = rec.lr;
      adam_step(model.params(), optimizer, adam);
    } else {
      ++optimizer.step;
    }
    trace.push_back(rec);
    if (csv.is_open()) csv << loss_csv_row(rec) << '\n' << std::flush;

    const bool epoch_end = (step + 1) % n == 0;
    const auto epoch = step / n + 1;
    if (!output.dir.empty() &&
        ((epoch_end && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) ||
         step + 1 == total)) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_epoch_%04zu.json", epoch);
      save_checkpoint(model, &optimizer, output.dir / name);
      save_checkpoint(model, &optimizer, output.dir / "checkpoint.json");
    }
  }
  return trace;
}

double EvalConfig::iou_threshold(const std::string& class_name) const {
  for (const auto& [name, value] : class_iou)
    if (name == class_name) return value;
  return class_name == "car" ? 0.7 : 0.5;
}

EvalConfig EvalConfig::from_config(const Config& c, std::span<const ObjectClass> classes) {
  EvalConfig e;
  e.jitter = ProposalJitter::from_config(c);
  e.proposal_nms = c.get_double("eval.proposal_nms", e.proposal_nms);
  e.proposal_cap = c.get_size("eval.proposal_cap", e.proposal_cap);
  e.detection_nms = c.get_double("eval.nms", e.detection_nms);
  e.detection_cap = c.get_size("eval.max_detections", e.detection_cap);
  e.calibration_bins = c.get_size("eval.calibration_bins", e.calibration_bins);
  e.rounds = c.get_size("eval.rounds", e.rounds);
  for (const auto& cls : classes) {
    const auto key = "eval.iou." + cls.name;
    if (c.has(key)) e.class_iou.emplace_back(cls.name, c.get_double(key, 0.0));
  }
  if (e.calibration_bins == 0) throw ConfigError("eval.calibration_bins must be positive");
  if (e.rounds == 0) throw ConfigError("eval.rounds must be positive");
  return e;
}

std::string EvalReport::to_json() const {
  json doc;
  doc["classes"] = json::array();
  for (const auto& c : classes) {
    json entry{{"name", c.name},
               {"num_gt", c.num_gt},
               {"num_detections", c.num_detections},
               {"iou_threshold", c.iou_threshold}};
    entry["ap"] = c.ap ? json(*c.ap) : json(nullptr);
    doc["classes"].push_back(entry);
  }
  doc["proposal_mean_iou"] = proposal_mean_iou;
  doc["refined_mean_iou"] = refined_mean_iou;
  doc["matched_proposals"] = matched_proposals;
  doc["calibration"] = json::array();
  for (const auto& b : calibration) {
    doc["calibration"].push_back({{"lo", b.lo},
                                  {"hi", b.hi},
                                  {"count", b.count},
                                  {"mean_confidence", b.mean_confidence},
                                  {"hit_rate", b.hit_rate}});
  }
  return doc.dump(2);
}

EvalReport evaluate(Model& model, std::span<const Scene> scenes,
                    std::span<const ObjectClass> classes, const EvalConfig& cfg,
                    std::uint64_t seed) {
  NoGradGuard no_grad;
  const auto mode = model.config().refine.iou_mode;
  const auto passes = scenes.size() * cfg.rounds;
  std::vector<std::vector<Roi>> detections(passes);
  std::vector<std::vector<Roi>> gts(passes);
  EvalReport report;
  double prop_sum = 0.0, refined_sum = 0.0;
  int max_cls = static_cast<int>(classes.size()) - 1;
  std::vector<Occupancy> occupancy;
  for (const auto& scene : scenes) occupancy.push_back(voxelize(scene.points, model.config().grid));

  // Pass s covers scene s % scenes.size() with its own proposal seed.
  for (std::size_t s = 0; s < passes; ++s) {
    const auto& scene = scenes[s % scenes.size()];
    gts[s] = scene.boxes;
    for (const auto& g : scene.boxes) max_cls = std::max(max_cls, g.cls);
    auto proposals = jitter_proposals(scene.boxes, cfg.jitter, mix_seed(seed, s), classes);
    proposals = nms(proposals, cfg.proposal_nms, cfg.proposal_cap, mode);
    if (proposals.empty()) continue;
    const auto out = model.forward(occupancy[s % scenes.size()], proposals,
                                   mix_seed(mix_seed(seed, s), 2), false);
    const auto refined = model.refined_boxes(out, proposals);

    const auto matches = match_rois(proposals, scene.boxes, mode);
    for (std::size_t r = 0; r < proposals.size(); ++r) {
      if (matches[r].gt < 0) continue;
      const auto& gt = scene.boxes[static_cast<std::size_t>(matches[r].gt)];
      prop_sum += matches[r].iou;
      refined_sum += iou(refined[r], gt, mode);
      ++report.matched_proposals;
    }
    for (auto k : nms_indices(refined, cfg.detection_nms, cfg.detection_cap, mode)) {
      detections[s].push_back(refined[k]);
      max_cls = std::max(max_cls, refined[k].cls);
    }
  }
  if (report.matched_proposals > 0) {
    report.proposal_mean_iou = prop_sum / static_cast<double>(report.matched_proposals);
    report.refined_mean_iou = refined_sum / static_cast<double>(report.matched_proposals);
  }

  std::vector<ScoredMatch> all_matches;
  for (int c = 0; c <= max_cls; ++c) {
    ClassAp entry;
    entry.name = static_cast<std::size_t>(c) < classes.size()
                     ? classes[static_cast<std::size_t>(c)].name
                     : "class" + std::to_string(c);
    entry.iou_threshold = cfg.iou_threshold(entry.name);
    std::vector<std::vector<Roi>> class_dets(passes), class_gts(passes);
    for (std::size_t s = 0; s < passes; ++s) {
      for (const auto& d : detections[s])
        if (d.cls == c) class_dets[s].push_back(d);
      for (const auto& g : gts[s])
        if (g.cls == c) class_gts[s].push_back(g);
      entry.num_gt += class_gts[s].size();
      entry.num_detections += class_dets[s].size();
    }
    const auto matched = match_detections(class_dets, class_gts, entry.iou_threshold, mode);
    entry.ap = average_precision(matched, entry.num_gt);
    all_matches.insert(all_matches.end(), matched.begin(), matched.end());
    report.classes.push_back(entry);
  }
  report.calibration = calibration_table(all_matches, cfg.calibration_bins);
  return report;
}

OverfitResult run_overfit(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                          const EvalConfig& eval_cfg, std::span<const Scene> scenes,
                          std::span<const ObjectClass> classes, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  Model model(model_cfg, mix_seed(seed, 0x1417));
  AdamState optimizer;
  OverfitResult result;
  result.trace = train(model, optimizer, scenes, train_cfg, seed, {}, classes);
  result.steps = result.trace.size();
  const auto report = evaluate(model, scenes, classes, eval_cfg, mix_seed(seed, 0xe7a1));
  result.proposal_mean_iou = report.proposal_mean_iou;
  result.refined_mean_iou = report.refined_mean_iou;
  result.gain = report.refined_mean_iou - report.proposal_mean_iou;
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

std::vector<AblationRow> ablate(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                                const EvalConfig& eval_cfg, const SceneSpec& scenes,
                                std::size_t scene_count, std::span<const std::uint64_t> seeds) {
  std::vector<AblationRow> rows;
  for (auto seed : seeds) {
    SceneSpec spec = scenes;
    spec.seed = seed;
    std::vector<Scene> generated;
    for (std::size_t i = 0; i < scene_count; ++i) generated.push_back(generate_scene(spec, i));
    AblationRow row;
    row.seed = seed;
    ModelConfig cfg = model_cfg;
    cfg.rfe.attention = AttentionKind::kVector;
    row.vector = run_overfit(cfg, train_cfg, eval_cfg, generated, spec.classes, seed);
    cfg.rfe.attention = AttentionKind::kMultihead;
    row.multihead = run_overfit(cfg, train_cfg, eval_cfg, generated, spec.classes, seed);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace refine3d
