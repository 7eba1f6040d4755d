// Command-line front end: scene generation, training, evaluation,
// benchmarks, gradient checks and the attention ablation.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "refine3d/bench.hpp"
#include "refine3d/config.hpp"
#include "refine3d/gradcheck.hpp"
#include "refine3d/model.hpp"
#include "refine3d/scene.hpp"
#include "refine3d/train.hpp"

namespace fs = std::filesystem;
using namespace refine3d;

namespace {

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  std::string out = "out";
};

Config load_config(const Globals& g) {
  return g.config.empty() ? Config{} : Config::load(g.config);
}

// Keys outside these sections are probably typos; keys of other commands
// are expected in a shared config file.
void warn_unused(const Config& cfg) {
  static const std::vector<std::string> sections{
      "scene.", "grid.", "rfe.", "thresholds.", "loss.", "iou.", "head.", "aux.",
      "train.", "jitter.", "eval.", "bench.", "gradcheck.", "overfit."};
  for (const auto& key : cfg.unused_keys()) {
    const bool known = std::any_of(sections.begin(), sections.end(), [&](const auto& s) {
      return key.rfind(s, 0) == 0;
    });
    if (!known) std::cerr << "warning: unknown config key '" << key << "'\n";
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write " + path.string());
  out << text;
}

int cmd_gen_scenes(const Globals& g, std::size_t count) {
  const auto cfg = load_config(g);
  const auto spec = SceneSpec::from_config(cfg, g.seed);
  if (count == 0) count = cfg.get_size("scene.count", 10);
  const auto paths = gen_scenes(spec, count, g.out);
  std::cout << "wrote " << paths.size() << " scenes to " << g.out << "\n";
  warn_unused(cfg);
  return 0;
}

int cmd_train(const Globals& g, const std::string& scene_dir, const std::string& resume) {
  const auto cfg = load_config(g);
  const auto model_cfg = ModelConfig::from_config(cfg);
  const auto train_cfg = TrainConfig::from_config(cfg);
  const auto spec = SceneSpec::from_config(cfg, g.seed);
  const auto scenes = load_scene_dir(scene_dir);
  if (scenes.empty()) throw ContractError("no scene_*.json files in " + scene_dir);

  Model model(model_cfg, g.seed);
  AdamState optimizer;
  if (!resume.empty()) {
    load_checkpoint(model, &optimizer, resume);
    std::cout << "resuming at step " << optimizer.step << "\n";
  }
  const auto trace =
      train(model, optimizer, scenes, train_cfg, g.seed, TrainOutput{g.out}, spec.classes);
  if (!trace.empty()) {
    std::printf("trained %zu steps: first total %.6f, last total %.6f (refine %.6f)\n",
                trace.size(), trace.front().total, trace.back().total, trace.back().refine);
  }
  std::cout << "checkpoint: " << (fs::path(g.out) / "checkpoint.json").string() << "\n";
  warn_unused(cfg);
  return 0;
}

int cmd_eval(const Globals& g, const std::string& checkpoint, const std::string& scene_dir) {
  const auto cfg = load_config(g);
  const auto model_cfg = ModelConfig::from_config(cfg);
  const auto spec = SceneSpec::from_config(cfg, g.seed);
  const auto eval_cfg = EvalConfig::from_config(cfg, spec.classes);
  const auto scenes = load_scene_dir(scene_dir);
  Model model(model_cfg, g.seed);
  load_checkpoint(model, nullptr, checkpoint);
  const auto report = evaluate(model, scenes, spec.classes, eval_cfg, g.seed);
  for (const auto& c : report.classes) {
    if (c.ap) {
      std::printf("%-12s AP40@%.2f = %7.3f  (%zu gt, %zu detections)\n", c.name.c_str(),
                  c.iou_threshold, *c.ap, c.num_gt, c.num_detections);
    } else {
      std::printf("%-12s absent (no ground truth)\n", c.name.c_str());
    }
  }
  std::printf("mean IoU: proposals %.4f, refined %.4f over %zu matched proposals\n",
              report.proposal_mean_iou, report.refined_mean_iou, report.matched_proposals);
  write_text(fs::path(g.out) / "eval_report.json", report.to_json() + "\n");
  warn_unused(cfg);
  return 0;
}

int cmd_bench(const Globals& g) {
  const auto cfg = load_config(g);
  const auto bench_cfg = BenchConfig::from_config(cfg);
  const auto rows = bench(bench_cfg, g.seed);
  const auto csv = bench_csv(rows);
  std::cout << csv;
  write_text(fs::path(g.out) / "bench.csv", csv);
  warn_unused(cfg);
  return 0;
}

int cmd_gradcheck(const Globals& g, bool skip_ops) {
  const auto cfg = load_config(g);
  const auto model_cfg = ModelConfig::from_config(cfg);
  const auto gc = GradcheckConfig::from_config(cfg);
  GradcheckReport report;
  if (!skip_ops) report.merge(gradcheck_ops(gc, g.seed));
  report.merge(gradcheck_model(model_cfg, gc, g.seed));
  const auto text = report.to_text();
  std::cout << text;
  write_text(fs::path(g.out) / "gradcheck.txt", text);
  warn_unused(cfg);
  return report.pass() ? 0 : 1;
}

int cmd_ablate(const Globals& g, std::vector<std::uint64_t> seeds) {
  const auto cfg = load_config(g);
  const auto model_cfg = ModelConfig::from_config(cfg);
  const auto train_cfg = TrainConfig::from_config(cfg);
  const auto spec = SceneSpec::from_config(cfg, g.seed);
  const auto eval_cfg = EvalConfig::from_config(cfg, spec.classes);
  const auto count = cfg.get_size("overfit.scenes", 5);
  if (seeds.empty()) seeds = {g.seed, g.seed + 1, g.seed + 2};
  const auto rows = ablate(model_cfg, train_cfg, eval_cfg, spec, count, seeds);
  std::string csv =
      "seed,proposal_iou,vector_iou,multihead_iou,vector_gain,multihead_gain,difference\n";
  for (const auto& r : rows) {
    char line[256];
    std::snprintf(line, sizeof line, "%llu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                  static_cast<unsigned long long>(r.seed), r.vector.proposal_mean_iou,
                  r.vector.refined_mean_iou, r.multihead.refined_mean_iou, r.vector.gain,
                  r.multihead.gain, r.vector.refined_mean_iou - r.multihead.refined_mean_iou);
    csv += line;
  }
  std::cout << csv;
  write_text(fs::path(g.out) / "ablation.csv", csv);
  warn_unused(cfg);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ROI refinement stage of a two-stage 3D detector"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "flat key = value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "global seed");
  app.add_option("--out", g.out, "output directory");

  std::size_t count = 0;
  auto* gen = app.add_subcommand("gen-scenes", "write synthetic scenes to --out");
  gen->add_option("--count", count, "number of scenes (default: scene.count or 10)");

  std::string scene_dir, resume, checkpoint;
  auto* tr = app.add_subcommand("train", "train on a scene directory");
  tr->add_option("--scenes", scene_dir, "scene directory")->required();
  tr->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--scenes", scene_dir, "scene directory")->required();

  auto* be = app.add_subcommand("bench", "time and measure compute_roi_features");

  bool skip_ops = false;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_flag("--skip-ops", skip_ops, "only check model parameter groups");

  std::vector<std::uint64_t> seeds;
  auto* ab = app.add_subcommand("ablate", "paired vector vs. multihead overfit runs");
  ab->add_option("--seeds", seeds, "seeds (default: seed, seed+1, seed+2)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_scenes(g, count);
    if (tr->parsed()) return cmd_train(g, scene_dir, resume);
    if (ev->parsed()) return cmd_eval(g, checkpoint, scene_dir);
    if (be->parsed()) return cmd_bench(g);
    if (gc->parsed()) return cmd_gradcheck(g, skip_ops);
    if (ab->parsed()) return cmd_ablate(g, seeds);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
