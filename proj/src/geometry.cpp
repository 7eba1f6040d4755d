#include "refine3d/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "refine3d/tensor.hpp"

namespace refine3d {

double norm(Vec3 v) { return std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z); }

double wrap_angle(double theta) {
  constexpr double pi = std::numbers::pi;
  double t = std::remainder(theta, 2.0 * pi);  // [-π, π]
  if (t <= -pi) t += 2.0 * pi;
  return t;
}

void validate(const Roi& roi) {
  const auto& s = roi.size;
  if (!(s.x > 0.0 && s.y > 0.0 && s.z > 0.0) || !std::isfinite(s.x) ||
      !std::isfinite(s.y) || !std::isfinite(s.z)) {
    throw ContractError("box sizes must be positive and finite");
  }
}

Roi normalized(Roi roi) {
  roi.yaw = wrap_angle(roi.yaw);
  return roi;
}

Vec3 to_canonical(Vec3 p, const Roi& roi) {
  const double c = std::cos(roi.yaw), s = std::sin(roi.yaw);
  const Vec3 d = p - roi.center;
  return {c * d.x + s * d.y, -s * d.x + c * d.y, d.z};
}

Vec3 from_canonical(Vec3 p, const Roi& roi) {
  const double c = std::cos(roi.yaw), s = std::sin(roi.yaw);
  return Vec3{c * p.x - s * p.y, s * p.x + c * p.y, p.z} + roi.center;
}

bool contains(Vec3 p, const Roi& roi, Vec3 enlargement) {
  const Vec3 q = to_canonical(p, roi);
  return std::abs(q.x) <= 0.5 * (roi.size.x + enlargement.x) &&
         std::abs(q.y) <= 0.5 * (roi.size.y + enlargement.y) &&
         std::abs(q.z) <= 0.5 * (roi.size.z + enlargement.z);
}

BoxVertices box_vertices(const Roi& roi) {
  BoxVertices v;
  for (std::size_t k = 0; k < 8; ++k) {
    v[k] = {(k & 4 ? 0.5 : -0.5) * roi.size.x, (k & 2 ? 0.5 : -0.5) * roi.size.y,
            (k & 1 ? 0.5 : -0.5) * roi.size.z};
  }
  return v;
}

BoxVertices box_vertices_lidar(const Roi& roi) {
  auto v = box_vertices(roi);
  for (auto& p : v) p = from_canonical(p, roi);
  return v;
}

std::array<Point2, 4> bev_corners(const Roi& roi) {
  const double hx = 0.5 * roi.size.x, hy = 0.5 * roi.size.y;
  const double c = std::cos(roi.yaw), s = std::sin(roi.yaw);
  const std::array<Point2, 4> local{{{hx, hy}, {-hx, hy}, {-hx, -hy}, {hx, -hy}}};
  std::array<Point2, 4> out;
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = {roi.center.x + c * local[i].x - s * local[i].y,
              roi.center.y + s * local[i].x + c * local[i].y};
  }
  return out;
}

double polygon_area(std::span<const Point2> poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % poly.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * a;
}

namespace {

// > 0 when p is left of the directed edge a→b.
double side(Point2 a, Point2 b, Point2 p) {
  return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
}

Point2 edge_crossing(Point2 p, Point2 q, Point2 a, Point2 b) {
  const double sp = side(a, b, p), sq = side(a, b, q);
  const double t = sp / (sp - sq);
  return {p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)};
}

}  // namespace

std::vector<Point2> clip_polygon(std::span<const Point2> subject,
                                 std::span<const Point2> clip) {
  std::vector<Point2> out(subject.begin(), subject.end());
  for (std::size_t e = 0; e < clip.size() && !out.empty(); ++e) {
    const Point2 a = clip[e], b = clip[(e + 1) % clip.size()];
    std::vector<Point2> in;
    in.swap(out);
    for (std::size_t i = 0; i < in.size(); ++i) {
      const Point2 cur = in[i], prev = in[(i + in.size() - 1) % in.size()];
      const bool cur_in = side(a, b, cur) >= 0.0;
      const bool prev_in = side(a, b, prev) >= 0.0;
      if (cur_in) {
        if (!prev_in) out.push_back(edge_crossing(prev, cur, a, b));
        out.push_back(cur);
      } else if (prev_in) {
        out.push_back(edge_crossing(prev, cur, a, b));
      }
    }
  }
  return out;
}

double bev_intersection_area(const Roi& a, const Roi& b) {
  // Cheap reject on bounding circles.
  const double ra = 0.5 * std::hypot(a.size.x, a.size.y);
  const double rb = 0.5 * std::hypot(b.size.x, b.size.y);
  if (std::hypot(a.center.x - b.center.x, a.center.y - b.center.y) > ra + rb) {
    return 0.0;
  }
  const auto pa = bev_corners(a);
  const auto pb = bev_corners(b);
  const auto poly = clip_polygon(pa, pb);
  if (poly.size() < 3) return 0.0;
  return std::max(0.0, polygon_area(poly));
}

double iou_bev(const Roi& a, const Roi& b) {
  validate(a);
  validate(b);
  const double inter = bev_intersection_area(a, b);
  const double uni = a.size.x * a.size.y + b.size.x * b.size.y - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double iou_3d(const Roi& a, const Roi& b) {
  validate(a);
  validate(b);
  const double lo = std::max(a.center.z - 0.5 * a.size.z, b.center.z - 0.5 * b.size.z);
  const double hi = std::min(a.center.z + 0.5 * a.size.z, b.center.z + 0.5 * b.size.z);
  const double h = hi - lo;
  if (h <= 0.0) return 0.0;
  const double inter = bev_intersection_area(a, b) * h;
  const double va = a.size.x * a.size.y * a.size.z;
  const double vb = b.size.x * b.size.y * b.size.z;
  return std::clamp(inter / (va + vb - inter), 0.0, 1.0);
}

double iou(const Roi& a, const Roi& b, IouMode mode) {
  return mode == IouMode::k3d ? iou_3d(a, b) : iou_bev(a, b);
}

std::vector<std::size_t> nms_indices(std::span<const Roi> rois,
                                     double overlap_threshold,
                                     std::size_t max_keep, IouMode mode) {
  if (!(overlap_threshold > 0.0 && overlap_threshold < 1.0)) {
    throw ContractError("nms: overlap threshold must be in (0, 1)");
  }
  std::vector<std::size_t> order(rois.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return rois[a].confidence > rois[b].confidence;
  });
  std::vector<std::size_t> keep;
  std::vector<char> removed(rois.size(), 0);
  for (std::size_t oi = 0; oi < order.size() && keep.size() < max_keep; ++oi) {
    const auto i = order[oi];
    if (removed[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const auto j = order[oj];
      if (!removed[j] && iou(rois[i], rois[j], mode) > overlap_threshold) removed[j] = 1;
    }
  }
  return keep;
}

std::vector<Roi> nms(std::span<const Roi> rois, double overlap_threshold,
                     std::size_t max_keep, IouMode mode) {
  std::vector<Roi> out;
  for (auto i : nms_indices(rois, overlap_threshold, max_keep, mode)) {
    out.push_back(rois[i]);
  }
  return out;
}

}  // namespace refine3d
