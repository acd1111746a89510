#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

namespace fusion3d {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(dot(*this)); }
  bool operator==(const Vec3&) const = default;
};

struct Vec2 {
  double x = 0, y = 0;
};

// Wraps an angle into [-pi, pi).
double normalize_angle(double theta);

// 7-DoF box: centre, extents (w along the box x axis, l along y, h along z)
// and yaw about +z.
struct OrientedBox3D {
  Vec3 center;
  Vec3 extents;
  double yaw = 0.0;

  double volume() const { return extents.x * extents.y * extents.z; }
  // Throws InputError if an extent is not positive or a value is non-finite.
  void validate() const;
  bool operator==(const OrientedBox3D&) const = default;
};

// Rotates v about +z by theta.
Vec3 rotate_z(const Vec3& v, double theta);
// Expresses a world point in the box frame (origin at the centre, yaw removed).
Vec3 to_box_frame(const OrientedBox3D& box, const Vec3& p);
// True if p lies inside the box grown by `margin` on every face.
bool box_contains(const OrientedBox3D& box, const Vec3& p, double margin = 0.0);
// Bird's-eye-view corners, counter-clockwise.
std::array<Vec2, 4> bev_corners(const OrientedBox3D& box);

// Pinhole camera: pixel = K [R | t] P, image of width x height pixels.
struct CameraModel {
  std::array<double, 9> K{};  // row-major
  std::array<double, 9> R{};  // row-major, world -> camera
  std::array<double, 3> t{};
  int width = 1;
  int height = 1;

  // Throws InputError unless K[2,2] = 1, R is orthonormal within 1e-9 and the
  // image size is at least one pixel.
  void validate() const;
  // Camera-frame coordinates R P + t.
  Vec3 to_camera(const Vec3& p) const;

  bool operator==(const CameraModel&) const = default;
};

struct RefPoint {
  double u = 0.0;
  double v = 0.0;
  bool valid = false;
};

inline constexpr double kMinProjectionDepth = 1e-6;

// Projects P and normalises by the image size. Invalid when the homogeneous
// depth is <= 1e-6 or the point falls outside [0,1]^2 (the border is valid).
RefPoint project_point(const CameraModel& cam, const Vec3& p);
// Homogeneous variant, P = (x, y, z, w).
RefPoint project_point(const CameraModel& cam, const std::array<double, 4>& p);

// Signed distances from a point to the six faces of a box, measured in the
// box's yaw-aligned frame: (+x, -x, +y, -y, +z, -z).
struct DeltaSextet {
  std::array<double, 6> d{};

  double& operator[](std::size_t i) { return d[i]; }
  double operator[](std::size_t i) const { return d[i]; }
};

DeltaSextet encode_deltas(const OrientedBox3D& box, const Vec3& proposal);
// Moves the proposal by half the face-distance imbalance along each axis of the
// frame rotated by yaw. With exact deltas this returns the box centre.
Vec3 apply_center_update(const Vec3& proposal, const DeltaSextet& deltas, double yaw);
// Product over axes of min/max of opposing face distances; 0 if any delta < 0.
double centerness_target(const DeltaSextet& deltas);

// Area of the intersection of two convex polygons (counter-clockwise).
double convex_intersection_area(const std::vector<Vec2>& a, const std::vector<Vec2>& b);
double bev_intersection_area(const OrientedBox3D& a, const OrientedBox3D& b);

inline constexpr double kMinIntersectionArea = 1e-12;

// Exact 3D IoU of two yaw-rotated boxes: BEV polygon-clip area times vertical
// overlap, over the union volume.
double rotated_iou3d(const OrientedBox3D& a, const OrientedBox3D& b);

}  // namespace fusion3d
