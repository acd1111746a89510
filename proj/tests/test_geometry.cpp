#include <cmath>
#include <numbers>

#include "doctest.h"
#include "fusion3d/errors.hpp"
#include "fusion3d/geometry.hpp"
#include "oracles.hpp"

using namespace fusion3d;

namespace {

CameraModel simple_camera() {
  CameraModel cam;
  cam.K = {100, 0, 50, 0, 100, 50, 0, 0, 1};
  cam.R = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  cam.t = {0, 0, 0};
  cam.width = 100;
  cam.height = 100;
  return cam;
}

OrientedBox3D cube(Vec3 c) { return {c, {1, 1, 1}, 0.0}; }

}  // namespace

TEST_CASE("angle normalisation") {
  CHECK(normalize_angle(0.0) == 0.0);
  CHECK(normalize_angle(std::numbers::pi) == doctest::Approx(-std::numbers::pi));
  CHECK(normalize_angle(-std::numbers::pi) == doctest::Approx(-std::numbers::pi));
  CHECK(normalize_angle(3 * std::numbers::pi / 2) == doctest::Approx(-std::numbers::pi / 2));
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double a = normalize_angle(rng.uniform(-50, 50));
    CHECK(a >= -std::numbers::pi);
    CHECK(a < std::numbers::pi);
  }
}

TEST_CASE("projection") {
  const CameraModel cam = simple_camera();
  CHECK_NOTHROW(cam.validate());
  RefPoint r = project_point(cam, Vec3{0, 0, 1});
  CHECK(r.valid);
  CHECK(r.u == doctest::Approx(0.5));
  CHECK(r.v == doctest::Approx(0.5));

  r = project_point(cam, Vec3{0.5, 0, 1});
  CHECK(r.valid);
  CHECK(r.u == 1.0);
  CHECK(r.v == 0.5);

  CHECK_FALSE(project_point(cam, Vec3{0, 0, -1}).valid);
  CHECK_FALSE(project_point(cam, Vec3{0.6, 0, 1}).valid);

  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const Vec3 p{rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(0.5, 3)};
    const double lambda = rng.uniform(0.1, 10);
    const RefPoint a = project_point(cam, p);
    const RefPoint b = project_point(cam, std::array<double, 4>{lambda * p.x, lambda * p.y, lambda * p.z, lambda});
    CHECK(a.valid == b.valid);
    CHECK(a.u == doctest::Approx(b.u).epsilon(1e-12));
    CHECK(a.v == doctest::Approx(b.v).epsilon(1e-12));
  }
}

TEST_CASE("camera validation") {
  CameraModel cam = simple_camera();
  cam.K[8] = 2;
  CHECK_THROWS_AS(cam.validate(), InputError);
  cam = simple_camera();
  cam.R[0] = 1.1;
  CHECK_THROWS_AS(cam.validate(), InputError);
  cam = simple_camera();
  cam.width = 0;
  CHECK_THROWS_AS(cam.validate(), InputError);
}

TEST_CASE("delta encoding examples") {
  const OrientedBox3D box{{0, 0, 0}, {2, 4, 6}, 0.0};
  DeltaSextet d = encode_deltas(box, {0, 0, 0});
  const double expect[6] = {1, 1, 2, 2, 3, 3};
  for (int i = 0; i < 6; ++i) CHECK(d[i] == expect[i]);

  d = encode_deltas(box, {0.5, 0, 0});
  CHECK(d[0] == 0.5);
  CHECK(d[1] == 1.5);
  for (int i = 2; i < 6; ++i) CHECK(d[i] == expect[i]);

  d = encode_deltas(box, {1, 0, 0});
  CHECK(d[0] == 0.0);
}

TEST_CASE("center update round trip") {
  Rng rng(11);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const OrientedBox3D box = oracle::random_box(rng, 3.0);
    const Vec3 p = box.center + Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const Vec3 c = apply_center_update(p, encode_deltas(box, p), box.yaw);
    worst = std::max(worst, (c - box.center).norm());
  }
  CHECK(worst < 1e-12);

  DeltaSextet balanced;
  balanced.d = {0.7, 0.7, 0.2, 0.2, 1.1, 1.1};
  const Vec3 p{0.3, -1.2, 0.8};
  CHECK(apply_center_update(p, balanced, 0.9) == p);
}

TEST_CASE("centerness target") {
  DeltaSextet d;
  d.d = {1, 1, 2, 2, 3, 3};
  CHECK(centerness_target(d) == 1.0);
  d.d = {0.5, 1.5, 2, 2, 3, 3};
  CHECK(centerness_target(d) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  d.d = {0, 2, 2, 2, 3, 3};
  CHECK(centerness_target(d) == 0.0);
  d.d = {-0.1, 2, 2, 2, 3, 3};
  CHECK(centerness_target(d) == 0.0);

  // exactly 1 at centres, 0 on faces, monotone along an axis
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const OrientedBox3D box = oracle::random_box(rng);
    CHECK(centerness_target(encode_deltas(box, box.center)) == 1.0);
    const Vec3 face = box.center + rotate_z({box.extents.x / 2, 0, 0}, box.yaw);
    CHECK(centerness_target(encode_deltas(box, face)) < 1e-12);
    double prev = 2.0;
    for (int s = 0; s <= 10; ++s) {
      const Vec3 q = box.center + rotate_z({0, 0.049 * s * box.extents.y, 0}, box.yaw);
      const double c = centerness_target(encode_deltas(box, q));
      CHECK(c <= prev + 1e-12);
      prev = c;
    }
  }
}

TEST_CASE("rotated iou analytic cases") {
  const OrientedBox3D a = cube({0, 0, 0});
  CHECK(rotated_iou3d(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rotated_iou3d(a, cube({10, 0, 0})) == 0.0);
  CHECK(std::abs(rotated_iou3d(a, cube({0.5, 0, 0})) - 1.0 / 3.0) < 1e-9);
  // touching faces
  CHECK(rotated_iou3d(a, cube({1, 0, 0})) == 0.0);
  // rotated copy of itself by 90 degrees
  OrientedBox3D r = a;
  r.yaw = std::numbers::pi / 2;
  CHECK(rotated_iou3d(a, r) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("rotated iou against monte carlo") {
  Rng rng(2024), mc(99);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const OrientedBox3D a = oracle::random_box(rng, 0.6);
    const OrientedBox3D b = oracle::random_box(rng, 0.6);
    worst = std::max(worst, std::abs(rotated_iou3d(a, b) - oracle::monte_carlo_iou(a, b, 100000, mc)));
  }
  CHECK(worst < 0.02);
}

TEST_CASE("rotated iou symmetry and rigid invariance") {
  Rng rng(5);
  for (int i = 0; i < 300; ++i) {
    OrientedBox3D a = oracle::random_box(rng, 0.8), b = oracle::random_box(rng, 0.8);
    const double iou = rotated_iou3d(a, b);
    CHECK(iou >= 0.0);
    CHECK(iou <= 1.0);
    CHECK(std::abs(iou - rotated_iou3d(b, a)) < 1e-12);
    const double phi = rng.uniform(-3, 3);
    const Vec3 shift{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
    for (auto* box : {&a, &b}) {
      box->center = rotate_z(box->center, phi) + shift;
      box->yaw = normalize_angle(box->yaw + phi);
    }
    CHECK(std::abs(iou - rotated_iou3d(a, b)) < 1e-9);
  }
}

TEST_CASE("convex intersection") {
  const std::vector<Vec2> sq{{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  const std::vector<Vec2> shifted{{0.5, 0.5}, {1.5, 0.5}, {1.5, 1.5}, {0.5, 1.5}};
  CHECK(convex_intersection_area(sq, shifted) == doctest::Approx(0.25));
  CHECK(convex_intersection_area(sq, sq) == doctest::Approx(1.0));
}

TEST_CASE("box validation") {
  OrientedBox3D b = cube({0, 0, 0});
  CHECK_NOTHROW(b.validate());
  b.extents.y = 0;
  CHECK_THROWS_AS(b.validate(), InputError);
  b = cube({0, std::nan(""), 0});
  CHECK_THROWS_AS(b.validate(), InputError);
}
