#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "fusion3d/backbones.hpp"
#include "fusion3d/errors.hpp"
#include "helpers.hpp"

using namespace fusion3d;

namespace {

PointCloud random_cloud(std::size_t n, Rng& rng) {
  PointCloud pc;
  for (std::size_t i = 0; i < n; ++i) {
    pc.positions.push_back({rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 1)});
    pc.colors.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  }
  return pc;
}

CameraModel camera(int size) {
  CameraModel cam;
  const double f = size / 2.0;
  cam.K = {f, 0, size / 2.0, 0, f, size / 2.0, 0, 0, 1};
  cam.R = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  cam.width = size;
  cam.height = size;
  return cam;
}

double& at(Tensor& t, std::size_t y, std::size_t x, std::size_t c) {
  return t[(y * t.shape()[1] + x) * t.shape()[2] + c];
}

}  // namespace

TEST_CASE("farthest point sampling") {
  Rng rng(1);
  const PointCloud pc = random_cloud(10, rng);
  auto idx = farthest_point_sampling(pc.positions, 10);
  std::sort(idx.begin(), idx.end());
  std::vector<std::size_t> all(10);
  std::iota(all.begin(), all.end(), 0);
  CHECK(idx == all);

  // two clusters of three
  const std::vector<Vec3> pts{{0, 0, 0}, {0.1, 0, 0}, {0, 0.1, 0}, {5, 5, 0}, {5.1, 5, 0}, {5, 5.1, 0}};
  const auto two = farthest_point_sampling(pts, 2);
  CHECK(two[0] == 0);
  CHECK(two[1] >= 3);

  CHECK_THROWS_AS(farthest_point_sampling(pts, 7), InputError);
  CHECK(farthest_point_sampling(pts, 0).empty());
}

TEST_CASE("grouping falls back to the nearest point") {
  PointCloud pc;
  pc.positions = {{0, 0, 0}, {3, 0, 0}, {3.05, 0, 0}};
  pc.colors.assign(3, {0.5, 0.5, 0.5});
  const PointGrouping g = group_points(pc, 3, 0.01, 32);
  for (std::size_t c = 0; c < 3; ++c) {
    REQUIRE(g.neighbors[c].size() == 1);
    CHECK(g.neighbors[c][0] == g.centers[c]);
  }
  const PointGrouping wide = group_points(pc, 1, 10.0, 2);
  CHECK(wide.neighbors[0].size() == 2);
}

TEST_CASE("encode points") {
  Rng rng(3);
  PointEncoder enc("pe", {8, 6, 0.4, 8});
  ParamStore store;
  enc.init(store, rng);
  const PointCloud pc = random_cloud(60, rng);
  const ProposalSet p = encode_points(store, enc, pc, 12);
  CHECK(p.coords.shape() == std::vector<std::size_t>{12, 3});
  CHECK(p.features.shape() == std::vector<std::size_t>{12, 8});
  CHECK_THROWS_AS(encode_points(store, enc, pc, 61), InputError);

  // input order does not matter
  std::vector<std::size_t> perm(pc.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  PointCloud shuffled;
  for (std::size_t i : perm) {
    shuffled.positions.push_back(pc.positions[i]);
    shuffled.colors.push_back(pc.colors[i]);
  }
  const ProposalSet q = encode_points(store, enc, shuffled, 12);
  CHECK(q.coords.storage() == p.coords.storage());
  CHECK(q.features.storage() == p.features.storage());
}

TEST_CASE("point encoder gradcheck") {
  Rng rng(5);
  PointEncoder enc("pe", {5, 4, 0.5, 6});
  ParamStore store;
  enc.init(store, rng);
  test::jitter(store, rng, 0.2);
  const PointCloud pc = random_cloud(30, rng);
  const PointGrouping g = group_points(pc, 6, 0.5, 6);
  const Tensor w = test::random_tensor({6, 5}, rng);
  auto loss = [&] { return test::dot(enc.forward(store, pc, g), w); };
  auto bwd = [&] {
    PointEncoderCache c;
    enc.forward(store, pc, g, &c);
    enc.backward(store, c, w);
  };
  const GradCheckReport rep = check_params("point_encoder", store, loss, bwd, 32, rng);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("rasterisation") {
  const CameraModel cam = camera(64);
  PointCloud one;
  one.positions = {{0, 0, 2}};
  one.colors = {{0.2, 0.4, 0.6}};
  Tensor r = rasterize_scene(one, cam);
  CHECK(r.shape() == std::vector<std::size_t>{64, 64, 4});
  std::size_t nonzero = 0;
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x)
      if (at(r, y, x, 3) != 0.0) ++nonzero;
  CHECK(nonzero == 1);
  CHECK(at(r, 32, 32, 3) == 2.0);
  CHECK(at(r, 32, 32, 0) == 0.2);

  PointCloud two = one;
  two.positions.push_back({0, 0, 1});
  two.colors.push_back({1, 1, 1});
  r = rasterize_scene(two, cam);
  CHECK(at(r, 32, 32, 3) == 1.0);
  CHECK(at(r, 32, 32, 0) == 1.0);

  PointCloud behind = one;
  behind.positions[0].z = -2;
  r = rasterize_scene(behind, cam);
  CHECK(std::all_of(r.storage().begin(), r.storage().end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("raster depth is the per-pixel minimum") {
  Rng rng(8);
  const CameraModel cam = camera(32);
  PointCloud pc;
  for (int i = 0; i < 400; ++i) {
    pc.positions.push_back({rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.5, 3)});
    pc.colors.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  }
  Tensor r = rasterize_scene(pc, cam);
  Tensor expect({32, 32});
  for (const auto& p : pc.positions) {
    const RefPoint rp = project_point(cam, p);
    if (!rp.valid) continue;
    const auto x = std::min<std::size_t>(31, static_cast<std::size_t>(rp.u * 32));
    const auto y = std::min<std::size_t>(31, static_cast<std::size_t>(rp.v * 32));
    if (expect(y, x) == 0.0 || p.z < expect(y, x)) expect(y, x) = p.z;
  }
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) CHECK(at(r, y, x, 3) == expect(y, x));
}

TEST_CASE("image pyramid") {
  Rng rng(9);
  Tensor raster({64, 64, 4});
  raster.fill(0.3);
  ImageEncoder enc("ie", {5, 6});
  ParamStore store;
  enc.init(store, rng);
  const ImagePyramid pyr = enc.forward(store, raster);
  REQUIRE(pyr.levels.size() == 4);
  std::size_t side = 32;
  for (const auto& level : pyr.levels) {
    CHECK(level.shape() == std::vector<std::size_t>{side, side, 5});
    for (std::size_t i = 0; i < level.size(); ++i) CHECK(level[i] == level[i % 5]);
    side /= 2;
  }
  CHECK_THROWS_AS(enc.forward(store, Tensor({48, 64, 4})), InputError);

  // perturbations that cancel inside a 2x2 block leave level 0 unchanged
  Tensor bumped = raster;
  at(bumped, 0, 0, 1) += 0.1;
  at(bumped, 1, 1, 1) -= 0.1;
  const ImagePyramid p2 = enc.forward(store, bumped);
  for (std::size_t i = 0; i < p2.levels[0].size(); ++i)
    CHECK(p2.levels[0][i] == doctest::Approx(pyr.levels[0][i]).epsilon(1e-14));
}

TEST_CASE("image encoder gradcheck") {
  Rng rng(10);
  ImageEncoder enc("ie", {3, 4});
  ParamStore store;
  enc.init(store, rng);
  test::jitter(store, rng, 0.2);
  const Tensor raster = test::random_tensor({32, 32, 4}, rng, 0.0, 1.0);
  const auto pooled = pool_raster(raster);
  std::vector<Tensor> w;
  for (const auto& p : pooled) w.push_back(test::random_tensor({p.shape()[0], p.shape()[1], 3}, rng));
  auto loss = [&] {
    const ImagePyramid pyr = enc.forward_pooled(store, pooled);
    double s = 0;
    for (std::size_t l = 0; l < w.size(); ++l) s += test::dot(pyr.levels[l], w[l]);
    return s;
  };
  auto bwd = [&] {
    ImageEncoderCache c;
    enc.forward_pooled(store, pooled, &c);
    enc.backward(store, c, w);
  };
  CHECK(check_params("image_encoder", store, loss, bwd, 32, rng).max_rel_error < 1e-4);
}

TEST_CASE("voxel downsampling") {
  PointCloud pc;
  pc.positions = {{0.01, 0.01, 0.01}, {0.02, 0.02, 0.02}, {0.3, 0, 0}};
  pc.colors.assign(3, {0, 0, 0});
  CHECK(voxel_downsample(pc, 0.1).size() == 2);
  CHECK(voxel_downsample(pc, 0.0).size() == 3);
}
