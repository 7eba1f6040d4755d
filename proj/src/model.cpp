#include "refine3d/model.hpp"

#include <fstream>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "refine3d/ops.hpp"

namespace refine3d {

using json = nlohmann::json;

void ModelConfig::validate() const {
  grid.validate();
  rfe.validate();
  refine.validate();
  if (head_hidden == 0 || aux_hidden == 0) throw ConfigError("head widths must be positive");
  for (auto s : aux_scales)
    if (s < 1 || s > kNumScales) throw ConfigError("aux.scales entries must be 1..4");
}

ModelConfig ModelConfig::from_config(const Config& c) {
  ModelConfig m;
  m.grid.range_min = c.get_vec3("grid.range_min", m.grid.range_min);
  m.grid.range_max = c.get_vec3("grid.range_max", m.grid.range_max);
  m.grid.voxel = c.get_vec3("grid.voxel", m.grid.voxel);

  auto& r = m.rfe;
  r.d_a = c.get_size("rfe.d_a", r.d_a);
  r.hidden = c.get_size("rfe.hidden", r.hidden);
  r.repeats = c.get_size("rfe.repeats", r.repeats);
  r.scale_order = c.get_sizes("rfe.scale_order", r.scale_order);
  r.budgets = c.get_sizes("rfe.budgets", r.budgets);
  r.enlargement = c.get_vec3("rfe.enlargement", r.enlargement);
  r.attention = parse_attention_kind(c.get_string("rfe.attention", to_string(r.attention)));
  r.norm = parse_norm_kind(c.get_string("rfe.norm", to_string(r.norm)));
  r.heads = c.get_size("rfe.heads", r.heads);

  auto& t = m.refine;
  t.fg_threshold = c.get_double("thresholds.fg", t.fg_threshold);
  t.bg_threshold = c.get_double("thresholds.bg", t.bg_threshold);
  t.reg_threshold = c.get_double("thresholds.reg", t.reg_threshold);
  t.focal_alpha = c.get_double("loss.focal_alpha", t.focal_alpha);
  t.focal_gamma = c.get_double("loss.focal_gamma", t.focal_gamma);
  t.huber_delta = c.get_double("loss.huber_delta", t.huber_delta);
  const auto diag = c.get_string("loss.diagonal", "base");
  if (diag == "base") {
    t.diagonal = DiagonalMode::kBaseDiagonal;
  } else if (diag == "center") {
    t.diagonal = DiagonalMode::kCenterNorm;
  } else {
    throw ConfigError("loss.diagonal must be base|center");
  }
  const auto frame = c.get_string("loss.residue_frame", "canonical");
  if (frame == "canonical") {
    t.frame = ResidueFrame::kCanonical;
  } else if (frame == "lidar") {
    t.frame = ResidueFrame::kLidar;
  } else {
    throw ConfigError("loss.residue_frame must be canonical|lidar");
  }
  const auto gate = c.get_string("loss.reg_gate", "raw");
  if (gate == "raw") {
    t.gate = RegressionGate::kRawIou;
  } else if (gate == "normalized") {
    t.gate = RegressionGate::kNormalizedIou;
  } else {
    throw ConfigError("loss.reg_gate must be raw|normalized");
  }
  const auto mode = c.get_string("iou.mode", "3d");
  if (mode == "3d") {
    t.iou_mode = IouMode::k3d;
  } else if (mode == "bev") {
    t.iou_mode = IouMode::kBev;
  } else {
    throw ConfigError("iou.mode must be 3d|bev");
  }

  m.head_hidden = c.get_size("head.hidden", m.head_hidden);
  m.aux_hidden = c.get_size("aux.hidden", m.aux_hidden);
  m.aux_scales = c.get_sizes("aux.scales", m.aux_scales);
  m.losses.refine = c.get_bool("loss.refine", m.losses.refine);
  m.losses.aux = c.get_bool("loss.aux", m.losses.aux);
  m.validate();
  return m;
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Initializer init(seed);
  encoder_ = MultiscaleEncoder::create(params_, "encoder", init);
  rfe_ = RfeParams::create(params_, "rfe", cfg_.rfe, init);
  head_ = DetectionHead::create(params_, "head", cfg_.rfe.d_a, cfg_.head_hidden, init);
  for (auto s : cfg_.aux_scales) {
    aux_heads_.push_back(AuxHead::create(params_, "aux.s" + std::to_string(s),
                                         kScaleChannels[s - 1], cfg_.aux_hidden, init));
  }
}

std::vector<std::pair<std::string, const NormLayer*>> Model::norm_layers() const {
  std::vector<std::pair<std::string, const NormLayer*>> out;
  for (std::size_t n = 0; n < cfg_.rfe.repeats; ++n) {
    for (std::size_t slot = 0; slot < cfg_.rfe.scale_order.size(); ++slot) {
      const auto prefix = "rfe.r" + std::to_string(n) + ".s" +
                          std::to_string(cfg_.rfe.scale_order[slot]);
      const auto& u = rfe_.unit(n, slot, cfg_.rfe);
      out.emplace_back(prefix + ".norm1", &u.norm1);
      out.emplace_back(prefix + ".norm2", &u.norm2);
    }
  }
  return out;
}

std::vector<std::pair<std::string, NormLayer*>> Model::norm_layers() {
  std::vector<std::pair<std::string, NormLayer*>> out;
  for (const auto& [name, norm] : std::as_const(*this).norm_layers()) {
    out.emplace_back(name, const_cast<NormLayer*>(norm));
  }
  return out;
}

Model::Output Model::forward(const Occupancy& occ, std::span<const Roi> rois,
                             std::uint64_t pool_seed, bool training, RfeTrace* trace) {
  Output out;
  const auto maps = encoder_.forward(occ, cfg_.grid);
  for (std::size_t s = 0; s < kNumScales; ++s) out.points[s] = interpret(maps[s], cfg_.grid);
  out.roi_features =
      compute_roi_features(out.points, rois, rfe_, cfg_.rfe, pool_seed, training, trace);
  out.head = head_.forward(out.roi_features);
  if (cfg_.losses.aux) {
    for (std::size_t i = 0; i < cfg_.aux_scales.size(); ++i) {
      out.aux.push_back(aux_heads_[i].forward(out.points[cfg_.aux_scales[i] - 1].features));
    }
  }
  return out;
}

Model::Losses Model::loss(const Output& out, std::span<const Roi> rois,
                          std::span<const Roi> gts) const {
  Losses l;
  LossTerms terms;
  if (cfg_.losses.refine && !rois.empty()) {
    const auto matches = match_rois(rois, gts, cfg_.refine.iou_mode);
    const auto targets = make_refine_targets(rois, matches, gts, cfg_.refine);
    terms.refine = refine_loss(out.head.confidence, out.head.residue, targets, cfg_.refine);
    l.refine_value = terms.refine.item();
  }
  if (cfg_.losses.aux && !out.aux.empty()) {
    Tensor aux = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < cfg_.aux_scales.size(); ++i) {
      const auto& pts = out.points[cfg_.aux_scales[i] - 1];
      const auto targets = make_aux_targets(pts.positions, gts);
      aux = ops::add(aux, aux_loss(out.aux[i], targets, cfg_.refine));
    }
    terms.aux = aux;
    l.aux_value = aux.item();
  }
  l.refine = terms.refine;
  l.aux = terms.aux;
  l.total = total_loss(terms, cfg_.losses);
  return l;
}

std::vector<Roi> Model::refined_boxes(const Output& out, std::span<const Roi> rois) const {
  std::vector<Roi> boxes;
  boxes.reserve(rois.size());
  for (std::size_t r = 0; r < rois.size(); ++r) {
    ResidueVector delta{};
    for (std::size_t j = 0; j < 7; ++j) delta[j] = out.head.residue.at(r, j);
    Roi b = decode_prediction(rois[r], delta, cfg_.refine);
    b.confidence = out.head.confidence.at(r);
    boxes.push_back(b);
  }
  return boxes;
}

namespace {

json tensor_entry(const Shape& shape, std::span<const double> data) {
  return {{"shape", shape}, {"data", std::vector<double>(data.begin(), data.end())}};
}

std::vector<double> read_entry(const json& doc, const std::string& key, std::size_t n) {
  auto it = doc.find(key);
  if (it == doc.end()) throw ContractError("checkpoint is missing " + key);
  auto data = it->at("data").get<std::vector<double>>();
  if (data.size() != n) {
    throw DimensionError("checkpoint entry " + key + " has " + std::to_string(data.size()) +
                         " values, expected " + std::to_string(n));
  }
  return data;
}

}  // namespace

void save_checkpoint(const Model& model, const AdamState* optimizer,
                     const std::filesystem::path& path) {
  json doc = json::object();
  for (const auto& [name, t] : model.params()) doc[name] = tensor_entry(t.shape(), t.data());
  for (const auto& [name, norm] : model.norm_layers()) {
    if (norm->kind != NormKind::kBatch) continue;
    doc["state." + name + ".running_mean"] =
        tensor_entry({norm->running_mean.size()}, norm->running_mean);
    doc["state." + name + ".running_var"] =
        tensor_entry({norm->running_var.size()}, norm->running_var);
  }
  if (optimizer) {
    const double step = static_cast<double>(optimizer->step);
    doc["optimizer.step"] = tensor_entry({1}, std::span<const double>(&step, 1));
    for (const auto& [name, m] : optimizer->m) {
      doc["optimizer.m." + name] = tensor_entry({m.size()}, m);
    }
    for (const auto& [name, v] : optimizer->v) {
      doc["optimizer.v." + name] = tensor_entry({v.size()}, v);
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write checkpoint " + path.string());
  out << doc.dump() << '\n';
}

void load_checkpoint(Model& model, AdamState* optimizer, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot read checkpoint " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ContractError(std::string("malformed checkpoint: ") + e.what());
  }
  for (auto& [name, t] : model.params()) {
    const auto data = read_entry(doc, name, t.numel());
    auto dst = t.mutable_data();
    std::copy(data.begin(), data.end(), dst.begin());
  }
  for (auto& [name, norm] : model.norm_layers()) {
    if (norm->kind != NormKind::kBatch) continue;
    norm->running_mean = read_entry(doc, "state." + name + ".running_mean",
                                    norm->running_mean.size());
    norm->running_var = read_entry(doc, "state." + name + ".running_var",
                                   norm->running_var.size());
  }
  if (optimizer) {
    *optimizer = AdamState{};
    if (doc.contains("optimizer.step")) {
      optimizer->step =
          static_cast<std::uint64_t>(read_entry(doc, "optimizer.step", 1)[0]);
      for (auto& [name, t] : model.params()) {
        optimizer->m[name] = read_entry(doc, "optimizer.m." + name, t.numel());
        optimizer->v[name] = read_entry(doc, "optimizer.v." + name, t.numel());
      }
    }
  }
}

}  // namespace refine3d
