#include "refine3d/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "refine3d/heads.hpp"
#include "refine3d/ops.hpp"
#include "refine3d/voxel.hpp"

namespace refine3d {

GradcheckConfig GradcheckConfig::from_config(const Config& c) {
  GradcheckConfig g;
  g.steps = c.get_doubles("gradcheck.steps", g.steps);
  g.tolerance = c.get_double("gradcheck.tolerance", g.tolerance);
  g.floor = c.get_double("gradcheck.floor", g.floor);
  g.samples_per_tensor = c.get_size("gradcheck.samples", g.samples_per_tensor);
  g.include = c.get_strings("gradcheck.include", g.include);
  if (g.steps.empty()) throw ConfigError("gradcheck.steps must not be empty");
  for (double h : g.steps)
    if (!(h > 0.0)) throw ConfigError("gradcheck.steps must be positive");
  return g;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

bool GradcheckReport::pass() const {
  return std::all_of(groups.begin(), groups.end(), [](const auto& g) { return g.pass; });
}

std::string GradcheckReport::to_text() const {
  std::ostringstream out;
  for (const auto& g : groups) {
    char line[512];
    std::snprintf(line, sizeof line,
                  "%-4s %-28s checked=%-3zu nonzero=%-3zu max_rel_error=%.3e %s\n",
                  g.pass ? "ok" : "FAIL", g.name.c_str(), g.checked, g.nonzero,
                  g.max_rel_error, g.worst.c_str());
    out << line;
  }
  out << (pass() ? "gradcheck passed" : "gradcheck FAILED") << " (" << groups.size()
      << " groups)\n";
  return out.str();
}

void GradcheckReport::merge(const GradcheckReport& other, const std::string& prefix) {
  for (auto g : other.groups) {
    g.name = prefix + g.name;
    groups.push_back(std::move(g));
  }
}

GradcheckReport gradcheck_params(ParamStore& store, const std::function<Tensor()>& loss_fn,
                                 const GradcheckConfig& cfg, std::uint64_t seed,
                                 const GradientFault& fault) {
  struct Entry {
    std::string path;
    std::string group;
    Tensor tensor;
    std::vector<std::size_t> indices;
  };
  std::vector<Entry> entries;
  for (auto& [path, t] : store) {
    if (!cfg.include.empty() &&
        std::none_of(cfg.include.begin(), cfg.include.end(),
                     [&](const std::string& p) { return path.rfind(p, 0) == 0; })) {
      continue;
    }
    Entry e;
    e.path = path;
    const auto dot = path.rfind('.');
    e.group = dot == std::string::npos ? path : path.substr(0, dot);
    e.tensor = t;
    entries.push_back(std::move(e));
  }
  GradcheckReport report;
  if (entries.empty()) return report;

  store.zero_grad();
  const auto loss = loss_fn();
  backward(loss);
  const auto clean = [&] {
    std::vector<std::vector<double>> g;
    for (const auto& e : entries) g.push_back(e.tensor.grad());
    return g;
  }();
  if (fault) fault(store);
  std::vector<std::vector<double>> analytic;
  for (const auto& e : entries) analytic.push_back(e.tensor.grad());
  const double floor = cfg.floor * std::max(1.0, std::abs(loss.item()));

  // ReLU layers leave many exact zeros; sample entries with a nonzero
  // gradient first and top up with zero ones.
  for (std::size_t k = 0; k < entries.size(); ++k) {
    std::vector<std::size_t> nonzero, zero;
    for (std::size_t i = 0; i < clean[k].size(); ++i)
      (clean[k][i] != 0.0 ? nonzero : zero).push_back(i);
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + k + 1);
    auto& idx = entries[k].indices;
    std::sample(nonzero.begin(), nonzero.end(), std::back_inserter(idx),
                std::min(cfg.samples_per_tensor, nonzero.size()), rng);
    std::sample(zero.begin(), zero.end(), std::back_inserter(idx),
                std::min(cfg.samples_per_tensor - idx.size(), zero.size()), rng);
  }

  const auto evaluate = [&] {
    NoGradGuard no_grad;
    return loss_fn().item();
  };

  std::map<std::string, std::size_t> group_index;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto& e = entries[k];
    auto [it, inserted] = group_index.try_emplace(e.group, report.groups.size());
    if (inserted) {
      GradcheckGroup g;
      g.name = e.group;
      report.groups.push_back(g);
    }
    auto& group = report.groups[it->second];
    auto data = e.tensor.mutable_data();
    for (auto i : e.indices) {
      const double original = data[i];
      const double a = analytic[k][i];
      double best = std::numeric_limits<double>::infinity();
      for (double h : cfg.steps) {
        data[i] = original + h;
        const double plus = evaluate();
        data[i] = original - h;
        const double minus = evaluate();
        data[i] = original;
        best = std::min(best, relative_error(a, (plus - minus) / (2.0 * h), floor));
        if (best <= cfg.tolerance) break;
      }
      ++group.checked;
      if (a != 0.0) ++group.nonzero;
      if (best > group.max_rel_error || group.worst.empty()) {
        group.max_rel_error = best;
        group.worst = e.path + "[" + std::to_string(i) + "]";
      }
      if (best > cfg.tolerance) group.pass = false;
    }
  }
  store.zero_grad();
  return report;
}

namespace {

class OpFixture {
 public:
  explicit OpFixture(std::uint64_t seed) : rng_(seed) {}

  Tensor leaf(ParamStore& store, const std::string& path, Shape shape, double lo = -1.0,
              double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = u(rng_);
    return store.add(path, Tensor(std::move(shape), std::move(v), true));
  }

  /// Values with magnitude in [lo, hi] and random sign.
  Tensor signed_leaf(ParamStore& store, const std::string& path, Shape shape, double lo,
                     double hi) {
    auto t = leaf(store, path, std::move(shape), lo, hi);
    std::bernoulli_distribution flip(0.5);
    for (auto& x : t.mutable_data())
      if (flip(rng_)) x = -x;
    return t;
  }

  std::vector<double> constants(std::size_t n, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng_);
    return v;
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

GradcheckReport gradcheck_ops(const GradcheckConfig& cfg, std::uint64_t seed,
                              const GradientFault& fault) {
  using Forward = std::function<Tensor()>;
  GradcheckReport report;
  OpFixture fx(seed);
  GradcheckConfig c = cfg;
  c.include.clear();
  std::uint64_t case_seed = seed;

  // A case registers its inputs under ops.<name>.* and returns the op on
  // them; the checked loss is a fixed random weighting of the output.
  const auto run = [&](const std::string& name,
                       const std::function<Forward(ParamStore&, const std::string&)>& make) {
    ParamStore store;
    const auto forward = make(store, "ops." + name + ".");
    const auto weights = fx.constants(forward().numel(), -1.0, 1.0);
    report.merge(gradcheck_params(
        store, [&] { return ops::weighted_sum(forward(), weights); }, c, ++case_seed, fault));
  };

  run("matmul", [&](ParamStore& s, const std::string& p) -> Forward {
    auto a = fx.leaf(s, p + "a", {3, 4});
    auto b = fx.leaf(s, p + "b", {4, 5});
    return [=] { return ops::matmul(a, b); };
  });
  run("linear", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {3, 4});
    auto w = fx.leaf(s, p + "weight", {5, 4});
    auto b = fx.leaf(s, p + "bias", {5});
    return [=] { return ops::linear(x, w, b); };
  });
  run("add", [&](ParamStore& s, const std::string& p) -> Forward {
    auto a = fx.leaf(s, p + "a", {3, 4});
    auto b = fx.leaf(s, p + "b", {3, 4});
    return [=] { return ops::add(a, b); };
  });
  run("sub", [&](ParamStore& s, const std::string& p) -> Forward {
    auto a = fx.leaf(s, p + "a", {3, 4});
    auto b = fx.leaf(s, p + "b", {3, 4});
    return [=] { return ops::sub(a, b); };
  });
  run("mul", [&](ParamStore& s, const std::string& p) -> Forward {
    auto a = fx.leaf(s, p + "a", {3, 4});
    auto b = fx.leaf(s, p + "b", {3, 4});
    return [=] { return ops::mul(a, b); };
  });
  run("scale", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {3, 4});
    return [=] { return ops::scale(x, -1.7); };
  });
  run("add_row", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {3, 4});
    auto r = fx.leaf(s, p + "row", {4});
    return [=] { return ops::add_row(x, r); };
  });
  run("relu", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.signed_leaf(s, p + "x", {3, 4}, 0.1, 1.0);
    return [=] { return ops::relu(x); };
  });
  run("sigmoid", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {3, 4}, -4.0, 4.0);
    return [=] { return ops::sigmoid(x); };
  });
  run("sum", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {3, 4});
    return [=] { return ops::sum(x); };
  });
  run("mean", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {3, 4});
    return [=] { return ops::mean(x); };
  });
  run("sum_rows", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {3, 4});
    return [=] { return ops::sum_rows(x); };
  });
  run("reshape", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {3, 4});
    return [=] { return ops::reshape(x, {2, 6}); };
  });
  run("slice_cols", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {3, 5});
    return [=] { return ops::slice_cols(x, 1, 3); };
  });
  run("softmax0", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {3, 4}, -2.0, 2.0);
    return [=] { return ops::softmax(x, 0); };
  });
  run("softmax1", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {3, 4}, -2.0, 2.0);
    return [=] { return ops::softmax(x, 1); };
  });
  run("gather_rows", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {4, 3});
    return [=] {
      const std::vector<std::size_t> index{2, 0, 2, 3};
      return ops::gather_rows(x, index);
    };
  });
  run("scatter_rows", [&](ParamStore& s, const std::string& p) -> Forward {
    auto base = fx.leaf(s, p + "base", {4, 3});
    auto values = fx.leaf(s, p + "values", {2, 3});
    return [=] {
      const std::vector<std::size_t> index{3, 1};
      return ops::scatter_rows(base, index, values);
    };
  });
  run("segment_softmax", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {6, 3}, -2.0, 2.0);
    return [=] {
      const std::vector<std::size_t> offsets{0, 2, 2, 6};
      return ops::segment_softmax(x, offsets);
    };
  });
  run("segment_sum", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {6, 3});
    return [=] {
      const std::vector<std::size_t> offsets{0, 2, 2, 6};
      return ops::segment_sum(x, offsets);
    };
  });
  run("group_max", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {6, 3});
    return [=] {
      const std::vector<std::size_t> group{0, 1, 0, 2, 1, 2};
      return ops::group_max(x, group, 3);
    };
  });
  run("layer_norm", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {3, 5}, -2.0, 2.0);
    auto scale = fx.leaf(s, p + "scale", {5}, 0.5, 1.5);
    auto shift = fx.leaf(s, p + "shift", {5});
    return [=] { return ops::layer_norm(x, scale, shift, 1e-5); };
  });
  run("batch_norm", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {4, 3}, -2.0, 2.0);
    auto scale = fx.leaf(s, p + "scale", {3}, 0.5, 1.5);
    auto shift = fx.leaf(s, p + "shift", {3});
    return [=] { return ops::batch_norm(x, scale, shift, 1e-5); };
  });
  run("batch_norm_fixed", [&](ParamStore& s, const std::string& p) -> Forward {
    auto x = fx.leaf(s, p + "x", {4, 3}, -2.0, 2.0);
    auto scale = fx.leaf(s, p + "scale", {3}, 0.5, 1.5);
    auto shift = fx.leaf(s, p + "shift", {3});
    const auto mean = fx.constants(3, -0.5, 0.5);
    const auto var = fx.constants(3, 0.5, 2.0);
    return [=] { return ops::batch_norm_fixed(x, scale, shift, mean, var, 1e-5); };
  });
  run("focal_loss", [&](ParamStore& s, const std::string& p) -> Forward {
    auto prob = fx.leaf(s, p + "prob", {6}, 0.05, 0.95);
    const auto target = fx.constants(6, 0.0, 1.0);
    return [=] { return ops::focal_loss(prob, target, 0.25, 2.0); };
  });
  run("smooth_l1", [&](ParamStore& s, const std::string& p) -> Forward {
    // Residuals on both branches, away from the |r| = δ seam.
    auto pred = fx.leaf(s, p + "pred", {6});
    auto offsets = fx.constants(6, 0.0, 1.0);
    std::vector<double> target(6);
    const auto pd = pred.data();
    for (std::size_t i = 0; i < 6; ++i) {
      const double r = i % 2 == 0 ? 0.1 + 0.7 * offsets[i] : 1.2 + offsets[i];
      target[i] = pd[i] - (i % 3 == 0 ? r : -r);
    }
    return [=] { return ops::smooth_l1(pred, target, 1.0); };
  });
  run("bce", [&](ParamStore& s, const std::string& p) -> Forward {
    auto prob = fx.leaf(s, p + "prob", {6}, 0.05, 0.95);
    const auto target = fx.constants(6, 0.0, 1.0);
    return [=] { return ops::bce(prob, target); };
  });
  return report;
}

GradcheckFixture make_gradcheck_fixture(std::uint64_t seed) {
  SceneSpec spec;
  spec.seed = seed;
  spec.boxes_min = 1;
  spec.boxes_max = 2;
  spec.points_min = 60;
  spec.points_max = 100;
  spec.ground_points = 150;
  spec.area_min = {4.0, -5.0, 0.0};
  spec.area_max = {16.0, 5.0, 0.0};
  GradcheckFixture fx;
  fx.scene = generate_scene(spec, 0);
  ProposalJitter jitter;
  jitter.translation_sigma = {0.1, 0.1, 0.05};
  jitter.size_sigma = 0.03;
  jitter.yaw_sigma = 0.05;
  jitter.area_min = spec.area_min;
  jitter.area_max = spec.area_max;
  for (std::uint64_t round = 0; fx.rois.size() < 2 && round < 1000; ++round) {
    for (const auto& r : jitter_proposals(fx.scene.boxes, jitter, mix_seed(seed, round))) {
      const auto m = match_rois(std::span(&r, 1), fx.scene.boxes);
      if (fx.rois.size() < 2 && m[0].iou >= 0.6) fx.rois.push_back(r);
    }
  }
  if (fx.rois.size() < 2) throw ContractError("gradcheck fixture: no well-matched ROIs");
  return fx;
}

GradcheckReport gradcheck_model(const ModelConfig& model_cfg, const GradcheckConfig& cfg,
                                std::uint64_t seed, const GradientFault& fault) {
  Model model(model_cfg, seed);
  const auto fx = make_gradcheck_fixture(seed);
  const auto occ = voxelize(fx.scene.points, model_cfg.grid);
  const auto pool = mix_seed(seed, 2);
  const auto loss = [&] {
    auto out = model.forward(occ, fx.rois, pool, true);
    return model.loss(out, fx.rois, fx.scene.boxes).total;
  };
  return gradcheck_params(model.params(), loss, cfg, seed, fault);
}

}  // namespace refine3d
