#pragma once

// Reference implementations written independently of the library, used by
// the unit tests and the acceptance runner.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "refine3d/geometry.hpp"
#include "refine3d/nn.hpp"
#include "refine3d/rfe.hpp"
#include "refine3d/tensor.hpp"

namespace oracle {

using refine3d::Roi;
using refine3d::Vec3;

inline bool inside(const Vec3& p, const Roi& b) {
  const double dx = p.x - b.center.x, dy = p.y - b.center.y, dz = p.z - b.center.z;
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double u = c * dx + s * dy, v = -s * dx + c * dy;
  return std::abs(u) <= b.size.x / 2 && std::abs(v) <= b.size.y / 2 &&
         std::abs(dz) <= b.size.z / 2;
}

/// Samples uniformly inside `a` and counts hits in `b`.
inline double monte_carlo_iou(const Roi& a, const Roi& b, std::size_t samples,
                              std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  const double c = std::cos(a.yaw), s = std::sin(a.yaw);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double lx = u(rng) * a.size.x, ly = u(rng) * a.size.y, lz = u(rng) * a.size.z;
    const Vec3 p{a.center.x + c * lx - s * ly, a.center.y + s * lx + c * ly, a.center.z + lz};
    if (inside(p, b)) ++hits;
  }
  const double va = a.size.x * a.size.y * a.size.z;
  const double vb = b.size.x * b.size.y * b.size.z;
  const double inter = va * static_cast<double>(hits) / static_cast<double>(samples);
  return inter / (va + vb - inter);
}

/// Repeatedly keeps the best remaining box (ties to the lower index) and
/// drops every remaining box overlapping it above the threshold.
template <class IouFn>
std::vector<std::size_t> naive_nms(const std::vector<Roi>& rois, double threshold,
                                   std::size_t max_keep, IouFn iou) {
  std::vector<bool> alive(rois.size(), true);
  std::vector<std::size_t> keep;
  while (keep.size() < max_keep) {
    std::size_t best = rois.size();
    for (std::size_t i = 0; i < rois.size(); ++i) {
      if (alive[i] && (best == rois.size() || rois[i].confidence > rois[best].confidence)) best = i;
    }
    if (best == rois.size()) break;
    keep.push_back(best);
    alive[best] = false;
    for (std::size_t j = 0; j < rois.size(); ++j) {
      if (alive[j] && iou(rois[best], rois[j]) > threshold) alive[j] = false;
    }
  }
  return keep;
}

/// Membership by the six face planes of the LiDAR-frame box.
inline bool half_space_inside(const Vec3& p, const Roi& b, const Vec3& enlarge) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const std::array<Vec3, 3> axes{Vec3{c, s, 0}, Vec3{-s, c, 0}, Vec3{0, 0, 1}};
  const std::array<double, 3> half{(b.size.x + enlarge.x) / 2, (b.size.y + enlarge.y) / 2,
                                   (b.size.z + enlarge.z) / 2};
  for (int k = 0; k < 3; ++k) {
    for (double sign : {1.0, -1.0}) {
      const Vec3 n = axes[k] * sign;
      const Vec3 face = b.center + n * half[k];
      const Vec3 d = p - face;
      if (d.x * n.x + d.y * n.y + d.z * n.z > 0.0) return false;
    }
  }
  return true;
}

using Row = std::vector<double>;

inline Row linear(const refine3d::LinearLayer& l, const Row& x) {
  const auto out = l.weight.size(0), in = l.weight.size(1);
  Row y(out);
  for (std::size_t o = 0; o < out; ++o) {
    double s = l.bias.at(o);
    for (std::size_t i = 0; i < in; ++i) s += l.weight.at(o, i) * x[i];
    y[o] = s;
  }
  return y;
}

inline Row mlp(const refine3d::Mlp& m, Row x) {
  for (std::size_t k = 0; k < m.layers.size(); ++k) {
    x = linear(m.layers[k], x);
    if (k + 1 < m.layers.size())
      for (auto& v : x) v = std::max(v, 0.0);
  }
  return x;
}

inline Row row(const refine3d::Tensor& t, std::size_t r) {
  Row out(t.size(1));
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = t.at(r, c);
  return out;
}

struct AttentionOut {
  Row output;
  std::vector<Row> weights;  // per point
};

/// Per-channel loop form of vector attention for one ROI.
inline AttentionOut vector_attention(const Row& r, const std::vector<Row>& f,
                                     const std::vector<Row>& zeta,
                                     const refine3d::RfeUnit& u) {
  const auto n = f.size();
  const auto q = linear(u.query, r);
  std::vector<Row> logits(n), vals(n);
  for (std::size_t j = 0; j < n; ++j) {
    const auto k = linear(u.key, f[j]);
    auto v = linear(u.value, f[j]);
    Row arg(q.size());
    for (std::size_t c = 0; c < q.size(); ++c) {
      arg[c] = q[c] - k[c] + zeta[j][c];
      v[c] += zeta[j][c];
    }
    logits[j] = mlp(u.gamma, arg);
    vals[j] = v;
  }
  const auto d = q.size();
  AttentionOut out{Row(d, 0.0), std::vector<Row>(n, Row(d))};
  for (std::size_t c = 0; c < d; ++c) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, logits[j][c]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(logits[j][c] - mx);
    for (std::size_t j = 0; j < n; ++j) {
      const double w = std::exp(logits[j][c] - mx) / z;
      out.weights[j][c] = w;
      out.output[c] += w * vals[j][c];
    }
  }
  return out;
}

/// Loop form of scaled dot-product attention with ζ on keys and values.
inline AttentionOut multihead_attention(const Row& r, const std::vector<Row>& f,
                                        const std::vector<Row>& zeta,
                                        const refine3d::RfeUnit& u, std::size_t heads) {
  const auto n = f.size();
  const auto q = linear(u.query, r);
  const auto d = q.size(), dh = d / heads;
  std::vector<Row> keys(n), vals(n);
  for (std::size_t j = 0; j < n; ++j) {
    keys[j] = linear(u.key, f[j]);
    vals[j] = linear(u.value, f[j]);
    for (std::size_t c = 0; c < d; ++c) {
      keys[j][c] += zeta[j][c];
      vals[j][c] += zeta[j][c];
    }
  }
  AttentionOut out{Row(d, 0.0), std::vector<Row>(n, Row(heads))};
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<double> score(n);
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s += q[c] * keys[j][c];
      score[j] = s / std::sqrt(static_cast<double>(dh));
      mx = std::max(mx, score[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(score[j] - mx);
    for (std::size_t j = 0; j < n; ++j) {
      const double w = std::exp(score[j] - mx) / z;
      out.weights[j][h] = w;
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) out.output[c] += w * vals[j][c];
    }
  }
  return out;
}

/// AP with 40 recall positions from a ranked true/false-positive list.
inline double ap40(const std::vector<bool>& ranked_tp, std::size_t num_gt) {
  double sum = 0.0;
  for (int k = 1; k <= 40; ++k) {
    const double level = k / 40.0;
    double best = 0.0;
    std::size_t tp = 0;
    for (std::size_t i = 0; i < ranked_tp.size(); ++i) {
      if (ranked_tp[i]) ++tp;
      const double recall = static_cast<double>(tp) / static_cast<double>(num_gt);
      const double precision = static_cast<double>(tp) / static_cast<double>(i + 1);
      if (recall >= level - 1e-12) best = std::max(best, precision);
    }
    sum += best;
  }
  return 100.0 * sum / 40.0;
}

}  // namespace oracle
