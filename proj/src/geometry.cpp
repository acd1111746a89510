#include "fusion3d/geometry.hpp"

#include <algorithm>

#include "fusion3d/errors.hpp"

namespace fusion3d {

double normalize_angle(double theta) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double r = std::fmod(theta + std::numbers::pi, two_pi);
  if (r < 0) r += two_pi;
  r -= std::numbers::pi;
  if (r >= std::numbers::pi) r -= two_pi;
  return r;
}

void OrientedBox3D::validate() const {
  const double vals[] = {center.x, center.y, center.z, extents.x, extents.y, extents.z, yaw};
  for (double v : vals)
    if (!std::isfinite(v)) throw InputError("box has a non-finite value");
  if (!(extents.x > 0 && extents.y > 0 && extents.z > 0)) throw InputError("box extents must be positive");
}

Vec3 rotate_z(const Vec3& v, double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  return {c * v.x - s * v.y, s * v.x + c * v.y, v.z};
}

Vec3 to_box_frame(const OrientedBox3D& box, const Vec3& p) { return rotate_z(p - box.center, -box.yaw); }

bool box_contains(const OrientedBox3D& box, const Vec3& p, double margin) {
  const Vec3 q = to_box_frame(box, p);
  return std::abs(q.x) <= box.extents.x / 2 + margin && std::abs(q.y) <= box.extents.y / 2 + margin &&
         std::abs(q.z) <= box.extents.z / 2 + margin;
}

std::array<Vec2, 4> bev_corners(const OrientedBox3D& box) {
  const double hx = box.extents.x / 2, hy = box.extents.y / 2;
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const std::array<Vec2, 4> local = {Vec2{hx, hy}, Vec2{-hx, hy}, Vec2{-hx, -hy}, Vec2{hx, -hy}};
  std::array<Vec2, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = {box.center.x + c * local[i].x - s * local[i].y, box.center.y + s * local[i].x + c * local[i].y};
  }
  return out;
}

void CameraModel::validate() const {
  if (width < 1 || height < 1) throw InputError("camera image size must be at least 1x1");
  if (K[8] != 1.0) throw InputError("camera intrinsic K[2,2] must be 1");
  for (double v : K)
    if (!std::isfinite(v)) throw InputError("camera intrinsics are not finite");
  for (double v : t)
    if (!std::isfinite(v)) throw InputError("camera translation is not finite");
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) dot += R[i * 3 + k] * R[j * 3 + k];
      if (std::abs(dot - (i == j ? 1.0 : 0.0)) > 1e-9) throw InputError("camera rotation is not orthonormal");
    }
  }
}

Vec3 CameraModel::to_camera(const Vec3& p) const {
  return {R[0] * p.x + R[1] * p.y + R[2] * p.z + t[0], R[3] * p.x + R[4] * p.y + R[5] * p.z + t[1],
          R[6] * p.x + R[7] * p.y + R[8] * p.z + t[2]};
}

RefPoint project_point(const CameraModel& cam, const std::array<double, 4>& p) {
  // [R | t] P with homogeneous P
  double c[3];
  for (int i = 0; i < 3; ++i) {
    c[i] = cam.R[i * 3] * p[0] + cam.R[i * 3 + 1] * p[1] + cam.R[i * 3 + 2] * p[2] + cam.t[i] * p[3];
  }
  double h[3];
  for (int i = 0; i < 3; ++i) h[i] = cam.K[i * 3] * c[0] + cam.K[i * 3 + 1] * c[1] + cam.K[i * 3 + 2] * c[2];
  RefPoint r;
  if (!(h[2] > kMinProjectionDepth)) return r;
  r.u = h[0] / h[2] / static_cast<double>(cam.width);
  r.v = h[1] / h[2] / static_cast<double>(cam.height);
  r.valid = std::isfinite(r.u) && std::isfinite(r.v) && r.u >= 0.0 && r.u <= 1.0 && r.v >= 0.0 && r.v <= 1.0;
  return r;
}

RefPoint project_point(const CameraModel& cam, const Vec3& p) {
  return project_point(cam, std::array<double, 4>{p.x, p.y, p.z, 1.0});
}

DeltaSextet encode_deltas(const OrientedBox3D& box, const Vec3& proposal) {
  const Vec3 q = to_box_frame(box, proposal);
  const Vec3& e = box.extents;
  return DeltaSextet{{e.x / 2 - q.x, q.x + e.x / 2, e.y / 2 - q.y, q.y + e.y / 2, e.z / 2 - q.z, q.z + e.z / 2}};
}

Vec3 apply_center_update(const Vec3& proposal, const DeltaSextet& d, double yaw) {
  const Vec3 local{(d[0] - d[1]) / 2, (d[2] - d[3]) / 2, (d[4] - d[5]) / 2};
  return proposal + rotate_z(local, yaw);
}

double centerness_target(const DeltaSextet& d) {
  double c = 1.0;
  for (std::size_t a = 0; a < 3; ++a) {
    const double lo = std::min(d[2 * a], d[2 * a + 1]);
    const double hi = std::max(d[2 * a], d[2 * a + 1]);
    if (!(lo > 0.0)) return 0.0;
    c *= lo / hi;
  }
  return c;
}

namespace {
double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

double polygon_area(const std::vector<Vec2>& p) {
  double a = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Vec2& u = p[i];
    const Vec2& v = p[(i + 1) % p.size()];
    a += u.x * v.y - v.x * u.y;
  }
  return a / 2.0;
}
}  // namespace

double convex_intersection_area(const std::vector<Vec2>& subject, const std::vector<Vec2>& clip) {
  // Sutherland-Hodgman: clip `subject` against each edge of `clip`.
  std::vector<Vec2> out = subject;
  for (std::size_t e = 0; e < clip.size() && !out.empty(); ++e) {
    const Vec2& a = clip[e];
    const Vec2& b = clip[(e + 1) % clip.size()];
    std::vector<Vec2> in = std::move(out);
    out.clear();
    for (std::size_t i = 0; i < in.size(); ++i) {
      const Vec2& p = in[i];
      const Vec2& q = in[(i + 1) % in.size()];
      const double sp = cross(a, b, p);
      const double sq = cross(a, b, q);
      if (sp >= 0) out.push_back(p);
      if ((sp >= 0) != (sq >= 0)) {
        const double t = sp / (sp - sq);
        out.push_back({p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)});
      }
    }
  }
  if (out.size() < 3) return 0.0;
  return std::max(0.0, polygon_area(out));
}

double bev_intersection_area(const OrientedBox3D& a, const OrientedBox3D& b) {
  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  return convex_intersection_area({ca.begin(), ca.end()}, {cb.begin(), cb.end()});
}

double rotated_iou3d(const OrientedBox3D& a, const OrientedBox3D& b) {
  const double za0 = a.center.z - a.extents.z / 2, za1 = a.center.z + a.extents.z / 2;
  const double zb0 = b.center.z - b.extents.z / 2, zb1 = b.center.z + b.extents.z / 2;
  const double dz = std::min(za1, zb1) - std::max(za0, zb0);
  if (dz <= 0) return 0.0;
  // Quick reject on circumscribed circles.
  const double ra = std::hypot(a.extents.x, a.extents.y) / 2, rb = std::hypot(b.extents.x, b.extents.y) / 2;
  if (std::hypot(a.center.x - b.center.x, a.center.y - b.center.y) > ra + rb) return 0.0;
  const double area = bev_intersection_area(a, b);
  if (area < kMinIntersectionArea) return 0.0;
  const double inter = area * dz;
  const double uni = a.volume() + b.volume() - inter;
  if (uni <= 0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

}  // namespace fusion3d
