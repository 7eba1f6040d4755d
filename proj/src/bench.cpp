#include "refine3d/bench.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

namespace refine3d {

BenchConfig BenchConfig::from_config(const Config& c) {
  BenchConfig b;
  b.rois = c.get_sizes("bench.rois", b.rois);
  b.points = c.get_sizes("bench.points", b.points);
  if (c.has("bench.attention")) {
    b.attentions.clear();
    for (const auto& name : c.get_strings("bench.attention", {}))
      b.attentions.push_back(parse_attention_kind(name));
  }
  b.d_a = c.get_size("bench.d_a", c.get_size("rfe.d_a", b.d_a));
  b.hidden = c.get_size("bench.hidden", c.get_size("rfe.hidden", b.hidden));
  b.heads = c.get_size("rfe.heads", b.heads);
  b.repeats = c.get_size("bench.repeats", b.repeats);
  if (b.repeats == 0) throw ConfigError("bench.repeats must be positive");
  return b;
}

BenchRow bench_case(AttentionKind attention, std::size_t rois, std::size_t points,
                    std::size_t d_a, std::size_t hidden, std::size_t heads,
                    std::size_t repeats, std::uint64_t seed) {
  RfeConfig cfg;
  cfg.d_a = d_a;
  cfg.hidden = hidden;
  cfg.heads = heads;
  cfg.repeats = 1;
  cfg.scale_order = {1};
  cfg.budgets = {points};
  cfg.attention = attention;
  cfg.validate();

  ParamStore store;
  Initializer init(seed);
  auto params = RfeParams::create(store, "rfe", cfg, init);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::vector<Roi> boxes(rois);
  ScalePoints sets;
  auto& set = sets[0];
  set.scale = 1;
  std::vector<double> features;
  for (std::size_t m = 0; m < rois; ++m) {
    Roi& r = boxes[m];
    r.center = {4.0 * static_cast<double>(m), 0.0, 1.0};
    r.size = {2.0, 2.0, 2.0};
    r.yaw = unit(rng) * 3.0;
    for (std::size_t j = 0; j < points; ++j) {
      set.positions.push_back(
          from_canonical({0.9 * unit(rng), 0.9 * unit(rng), 0.9 * unit(rng)}, r));
      for (std::size_t c = 0; c < kScaleChannels[0]; ++c) features.push_back(unit(rng));
    }
  }
  set.features = Tensor({set.positions.size(), kScaleChannels[0]}, std::move(features));

  BenchRow row;
  row.attention = attention;
  row.rois = rois;
  row.points = points;
  row.d_a = d_a;
  std::vector<double> seconds;
  NoGradGuard no_grad;
  for (std::size_t rep = 0; rep < repeats; ++rep) {
    reset_peak_allocation();
    const auto base = allocation_stats().live_doubles;
    RfeTrace trace;
    const auto t0 = std::chrono::steady_clock::now();
    const auto out = compute_roi_features(sets, boxes, params, cfg, seed, false, &trace);
    const auto t1 = std::chrono::steady_clock::now();
    seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
    row.peak_doubles = allocation_stats().peak_doubles - base;
    row.weight_elements = trace.attention_weight_elements;
    for (double v : out.data()) row.finite = row.finite && std::isfinite(v);
  }
  double sum = 0.0, sq = 0.0;
  row.min_seconds = seconds.front();
  for (double s : seconds) {
    sum += s;
    row.min_seconds = std::min(row.min_seconds, s);
  }
  row.mean_seconds = sum / static_cast<double>(seconds.size());
  for (double s : seconds) sq += (s - row.mean_seconds) * (s - row.mean_seconds);
  row.cv = seconds.size() > 1 && row.mean_seconds > 0.0
               ? std::sqrt(sq / static_cast<double>(seconds.size() - 1)) / row.mean_seconds
               : 0.0;
  return row;
}

std::vector<BenchRow> bench(const BenchConfig& cfg, std::uint64_t seed) {
  std::vector<BenchRow> rows;
  for (auto attention : cfg.attentions)
    for (auto n : cfg.points)
      for (auto m : cfg.rois)
        rows.push_back(
            bench_case(attention, m, n, cfg.d_a, cfg.hidden, cfg.heads, cfg.repeats, seed));
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream out;
  out << "attention,rois,points,d_a,mean_seconds,min_seconds,cv,weight_elements,"
         "weight_elements_per_mnd,peak_doubles,finite\n";
  for (const auto& r : rows) {
    char line[512];
    const double mnd = static_cast<double>(r.rois * r.points * r.d_a);
    std::snprintf(line, sizeof line, "%s,%zu,%zu,%zu,%.6f,%.6f,%.4f,%zu,%.6f,%zu,%d\n",
                  to_string(r.attention).c_str(), r.rois, r.points, r.d_a, r.mean_seconds,
                  r.min_seconds, r.cv, r.weight_elements,
                  static_cast<double>(r.weight_elements) / mnd, r.peak_doubles,
                  r.finite ? 1 : 0);
    out << line;
  }
  return out.str();
}

}  // namespace refine3d
