#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace refine3d {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(Vec3 a, double s) { return {a.x * s, a.y * s, a.z * s}; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
  double operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

double norm(Vec3 v);

/// Maps any angle to (-π, π].
double wrap_angle(double theta);

/// Oriented box in the LiDAR frame (origin at the sensor, X forward, Z up,
/// Y = Z × X). `yaw` rotates the box's X axis about Z.
struct Roi {
  Vec3 center;
  Vec3 size{1.0, 1.0, 1.0};
  double yaw = 0.0;
  int cls = 0;
  double confidence = 1.0;
};

/// Throws ContractError unless all sizes are positive and finite.
void validate(const Roi& roi);
/// Copy of `roi` with yaw wrapped to (-π, π].
Roi normalized(Roi roi);

/// Translates by -center then rotates by -yaw about Z.
Vec3 to_canonical(Vec3 p, const Roi& roi);
Vec3 from_canonical(Vec3 p, const Roi& roi);

/// Boundary-inclusive membership in the box grown by `enlargement` on each
/// full size (half-extents grow by enlargement/2).
bool contains(Vec3 p, const Roi& roi, Vec3 enlargement = {});

/// Corner k sits at (±dx/2, ±dy/2, ±dz/2) with bit 2 of k choosing the x sign,
/// bit 1 the y sign and bit 0 the z sign (set bit = +).
using BoxVertices = std::array<Vec3, 8>;
BoxVertices box_vertices(const Roi& roi);
BoxVertices box_vertices_lidar(const Roi& roi);

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// Box footprint corners, counter-clockwise.
std::array<Point2, 4> bev_corners(const Roi& roi);
/// Shoelace area, positive for counter-clockwise polygons.
double polygon_area(std::span<const Point2> poly);
/// Sutherland–Hodgman clip of `subject` against convex CCW `clip`.
std::vector<Point2> clip_polygon(std::span<const Point2> subject,
                                 std::span<const Point2> clip);

double bev_intersection_area(const Roi& a, const Roi& b);
double iou_bev(const Roi& a, const Roi& b);
double iou_3d(const Roi& a, const Roi& b);

enum class IouMode { k3d, kBev };
double iou(const Roi& a, const Roi& b, IouMode mode);

/// Greedy NMS by descending confidence (ties by input index). Returns the
/// indices of survivors in selection order.
std::vector<std::size_t> nms_indices(std::span<const Roi> rois,
                                     double overlap_threshold,
                                     std::size_t max_keep,
                                     IouMode mode = IouMode::k3d);
std::vector<Roi> nms(std::span<const Roi> rois, double overlap_threshold,
                     std::size_t max_keep, IouMode mode = IouMode::k3d);

}  // namespace refine3d
