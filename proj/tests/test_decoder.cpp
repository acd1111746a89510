#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fusion3d/decoder.hpp"
#include "fusion3d/errors.hpp"
#include "fusion3d/model.hpp"
#include "fusion3d/synthdata.hpp"
#include "fusion3d/training.hpp"
#include "helpers.hpp"

using namespace fusion3d;

namespace {

Tensor coords_of(const std::vector<Vec3>& pts) {
  Tensor c({pts.size(), 3});
  for (std::size_t i = 0; i < pts.size(); ++i) {
    c(i, 0) = pts[i].x;
    c(i, 1) = pts[i].y;
    c(i, 2) = pts[i].z;
  }
  return c;
}

Vec3 row(const Tensor& c, std::size_t i) { return {c(i, 0), c(i, 1), c(i, 2)}; }

double inverse_softplus(double y) { return std::log(std::expm1(y)); }

// Prediction whose decoded box is exactly the GT of each listed query.
StagePrediction oracle_prediction(const Tensor& coords, const std::vector<OrientedBox3D>& boxes, std::size_t K) {
  const std::size_t M = coords.rows();
  StagePrediction p;
  p.logits = Tensor({M, K});
  p.regression = Tensor({M, kRegressionOutputs});
  p.deltas = Tensor({M, 6});
  p.yaw.resize(M);
  p.centerness = Tensor({M, 1});
  for (std::size_t i = 0; i < M; ++i) {
    const DeltaSextet d = encode_deltas(boxes[i], row(coords, i));
    for (std::size_t k = 0; k < 6; ++k) {
      p.regression(i, k) = inverse_softplus(d[k]);
      p.deltas(i, k) = kernels::softplus(p.regression(i, k));
    }
    p.regression(i, 6) = std::sin(boxes[i].yaw);
    p.regression(i, 7) = std::cos(boxes[i].yaw);
    p.yaw[i] = std::atan2(p.regression(i, 6), p.regression(i, 7));
  }
  return p;
}

ModelConfig small_model() {
  ModelConfig mc;
  mc.num_queries = 16;
  mc.feature_dim = 16;
  mc.image_dim = 8;
  mc.heads = 2;
  mc.acmt_layers = 1;
  mc.stages = 3;
  mc.grm_scales = {3, 5};
  mc.num_classes = 5;
  mc.context_points = 48;
  mc.edge_dim = 8;
  mc.ffn_dim = 32;
  mc.point_hidden = 16;
  mc.image_hidden = 8;
  mc.sampling_points = 2;
  mc.idw_k = 4;
  mc.max_group = 16;
  return mc;
}

SceneSpec small_spec() {
  SceneSpec s;
  s.num_points = 512;
  s.image_width = 32;
  s.image_height = 32;
  return s;
}

}  // namespace

TEST_CASE("assigner examples") {
  const std::vector<LabeledBox> gts{{{{0, 0, 0.5}, {2, 2, 1}, 0.3}, 1}};
  for (std::size_t stage = 0; stage < 3; ++stage) {
    const Assignment a = assign_targets(coords_of({{0, 0, 0.5}}), gts, stage);
    CHECK(a.gt[0] == 0);
    CHECK(a.ctr_target[0] == doctest::Approx(1.0).epsilon(1e-12));
  }
  const Vec3 outside = gts[0].box.center + rotate_z({1.15, 0, 0}, 0.3);
  CHECK(assign_targets(coords_of({outside}), gts, 0).positive(0));
  CHECK_FALSE(assign_targets(coords_of({outside}), gts, 2).positive(0));
  CHECK(assign_targets(coords_of({outside}), {}, 0).num_pos == 0);

  // ten queries inside: stage 3 keeps the four best by centerness
  Rng rng(3);
  std::vector<Vec3> pts;
  for (int i = 0; i < 10; ++i)
    pts.push_back(gts[0].box.center + rotate_z({rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9), rng.uniform(-0.4, 0.4)}, 0.3));
  const Assignment a = assign_targets(coords_of(pts), gts, 2);
  CHECK(a.num_pos == 4);
  std::vector<std::size_t> order(10);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return centerness_target(encode_deltas(gts[0].box, pts[x])) > centerness_target(encode_deltas(gts[0].box, pts[y]));
  });
  for (std::size_t r = 0; r < 10; ++r) CHECK(a.positive(order[r]) == (r < 4));
}

TEST_CASE("assignment is monotone over the schedule") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const SceneSample s = generate_scene(seed, small_spec());
    Rng rng(seed);
    std::vector<Vec3> pts;
    for (int i = 0; i < 64; ++i) {
      const auto& b = s.boxes[static_cast<std::size_t>(i) % s.boxes.size()].box;
      pts.push_back(b.center + rotate_z({rng.uniform(-0.8, 0.8) * b.extents.x, rng.uniform(-0.8, 0.8) * b.extents.y,
                                         rng.uniform(-0.8, 0.8) * b.extents.z},
                                        b.yaw));
    }
    const Tensor c = coords_of(pts);
    const Assignment first = assign_targets(c, s.boxes, 0), last = assign_targets(c, s.boxes, 2);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (!last.positive(i)) continue;
      CHECK(first.gt[i] == last.gt[i]);
    }
    // positives sit inside their GT grown by the stage margin
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (first.positive(i)) CHECK(box_contains(s.boxes[static_cast<std::size_t>(first.gt[i])].box, pts[i], 0.2 + 1e-12));
  }
}

TEST_CASE("zero heads") {
  StageHeads heads("h", 4, 3);
  ParamStore store;
  Rng rng(1);
  heads.init(store, rng);
  for (auto& [_, p] : store) p.value.fill(0.0);
  const StagePrediction p = heads.forward(store, test::random_tensor({5, 4}, rng));
  CHECK(p.logits.shape() == std::vector<std::size_t>{5, 3});
  CHECK(p.deltas.shape() == std::vector<std::size_t>{5, 6});
  CHECK(p.yaw.size() == 5);
  CHECK(p.centerness.shape() == std::vector<std::size_t>{5, 1});
  for (std::size_t i = 0; i < p.logits.size(); ++i) CHECK(kernels::sigmoid(p.logits[i]) == 0.5);
  for (std::size_t i = 0; i < p.deltas.size(); ++i) CHECK(p.deltas[i] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("heads start at the focal prior and facing +x") {
  StageHeads heads("h", 6, 4);
  ParamStore store;
  Rng rng(2);
  heads.init(store, rng);
  const StagePrediction p = heads.forward(store, test::random_tensor({8, 6}, rng));
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(std::abs(p.yaw[i]) < 0.5);
    CHECK(kernels::sigmoid(p.logits(i, 0)) < 0.05);
  }
}

TEST_CASE("losses") {
  const std::vector<LabeledBox> gts{{{{0, 0, 0.5}, {1.2, 0.8, 1.0}, 0.4}, 2}};
  Rng rng(4);
  std::vector<Vec3> pts;
  for (int i = 0; i < 6; ++i)
    pts.push_back(gts[0].box.center + rotate_z({rng.uniform(-0.4, 0.4), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)}, 0.4));
  const Tensor c = coords_of(pts);
  const Assignment as = assign_targets(c, gts, 2);
  REQUIRE(as.num_pos == 4);

  StagePrediction p = oracle_prediction(c, std::vector<OrientedBox3D>(6, gts[0].box), 3);
  for (std::size_t i = 0; i < 6; ++i) p.centerness(i, 0) = std::log(as.ctr_target[i] / (1 - as.ctr_target[i]));
  LossBreakdown l = stage_loss(p, as, gts);
  CHECK(l.reg == doctest::Approx(0.0).epsilon(0).scale(1).epsilon(1e-12));
  CHECK(std::abs(l.reg) < 1e-12);
  CHECK(std::abs(l.ctr) < 1e-12);
  CHECK(l.cls > 0);
  CHECK(l.total == 1.0 * l.cls + 2.0 * l.reg + 1.0 * l.ctr);

  const Assignment none = assign_targets(c, {}, 0);
  l = stage_loss(p, none, {});
  CHECK(l.reg == 0.0);
  CHECK(l.ctr == 0.0);
  CHECK(l.cls > 0.0);

  const LossBreakdown avg = combine_stage_losses({stage_loss(p, as, gts), l});
  CHECK(avg.total == 1.0 * avg.cls + 2.0 * avg.reg + 1.0 * avg.ctr);
  CHECK(avg.cls >= 0);
}

TEST_CASE("focal and centerness loss derivatives") {
  for (double x : {-8.0, -1.3, 0.0, 0.7, 5.0}) {
    for (bool pos : {false, true}) {
      double g = 0;
      focal_loss(x, pos, &g);
      const double h = 1e-6;
      CHECK(g == doctest::Approx((focal_loss(x + h, pos) - focal_loss(x - h, pos)) / (2 * h)).epsilon(1e-6));
    }
    double g = 0;
    centerness_loss(x, 0.3, &g);
    CHECK(g == doctest::Approx(kernels::sigmoid(x) - 0.3));
  }
  CHECK(focal_loss(0.0, true) == doctest::Approx(0.25 * 0.25 * std::log(2.0)));
}

TEST_CASE("heads and loss gradcheck") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    StageHeads heads("h", 6, 3);
    ParamStore store;
    heads.init(store, rng);
    test::jitter(store, rng, 0.3);
    const std::vector<LabeledBox> gts{{{{0, 0, 0.5}, {1, 1.4, 0.8}, 0.2}, 1}, {{{2, 1, 0.4}, {0.6, 0.6, 0.8}, -1.0}, 0}};
    std::vector<Vec3> pts;
    for (int i = 0; i < 10; ++i) {
      const auto& b = gts[static_cast<std::size_t>(i % 2)].box;
      pts.push_back(b.center + rotate_z({rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)}, b.yaw));
    }
    const Tensor c = coords_of(pts);
    const Assignment as = assign_targets(c, gts, 0);
    const Tensor y = test::random_tensor({10, 6}, rng);
    auto loss = [&] { return combine_stage_losses({stage_loss(heads.forward(store, y), as, gts)}).total; };
    auto bwd = [&] {
      StageHeadsCache cache;
      const StagePrediction p = heads.forward(store, y, &cache);
      StageLossGrad gr;
      stage_loss(p, as, gts, &gr);
      heads.backward(store, cache, gr.dlogits, gr.dregression, gr.dcenterness);
    };
    CHECK(check_params("heads", store, loss, bwd, 16, rng).max_rel_error < 1e-4);
  }
}

TEST_CASE("oracle deltas make the cascade a fixed point after one stage") {
  const SceneSample s = generate_scene(7, small_spec());
  Rng rng(7);
  std::vector<Vec3> pts;
  std::vector<OrientedBox3D> targets;
  for (int i = 0; i < 24; ++i) {
    const auto& b = s.boxes[static_cast<std::size_t>(i) % s.boxes.size()].box;
    pts.push_back(b.center + rotate_z({rng.uniform(-0.45, 0.45) * b.extents.x, rng.uniform(-0.45, 0.45) * b.extents.y,
                                       rng.uniform(-0.45, 0.45) * b.extents.z},
                                      b.yaw));
    targets.push_back(b);
  }
  Tensor c = coords_of(pts);
  for (int stage = 0; stage < 3; ++stage) {
    c = update_coords(oracle_prediction(c, targets, 5), c);
    for (std::size_t i = 0; i < pts.size(); ++i) CHECK((row(c, i) - targets[i].center).norm() < 1e-9);
  }
  // decoded boxes equal the targets too
  const StagePrediction p = oracle_prediction(c, targets, 5);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const OrientedBox3D b = decode_box(p, i, row(c, i));
    CHECK(std::abs(b.extents.x - targets[i].extents.x) < 1e-9);
    CHECK(rotated_iou3d(b, targets[i]) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("cascade coordinates stay finite and near the scene for random parameters") {
  const ModelConfig mc = small_model();
  Detector det(mc);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const PreparedScene scene = prepare_scene(generate_scene(seed, small_spec()), mc);
    ParamStore store;
    det.init(store, seed);
    Rng rng(seed);
    test::jitter(store, rng, 1.0);
    const DetectorOutput out = det.forward(store, scene);
    REQUIRE(out.coords.size() == 3);
    auto in_bounds = [&](const Tensor& t) {
      for (std::size_t i = 0; i < t.rows(); ++i) {
        const double lo[3] = {scene.lower.x, scene.lower.y, scene.lower.z};
        const double hi[3] = {scene.upper.x, scene.upper.y, scene.upper.z};
        for (std::size_t a = 0; a < 3; ++a)
          if (!std::isfinite(t(i, a)) || t(i, a) < lo[a] - 1.0 || t(i, a) > hi[a] + 1.0) return false;
      }
      return true;
    };
    for (const auto& t : out.coords) CHECK(in_bounds(t));
    CHECK(in_bounds(out.final_coords));
  }
}

TEST_CASE("single stage cascade") {
  ModelConfig mc = small_model();
  mc.stages = 1;
  Detector det(mc);
  ParamStore store;
  det.init(store, 1);
  const PreparedScene scene = prepare_scene(generate_scene(1, small_spec()), mc);
  const DetectorOutput out = det.forward(store, scene);
  CHECK(out.predictions.size() == 1);
  CHECK(det.grm_count() == 1);
  const LossBreakdown l = det.loss(store, scene, true);
  CHECK(std::isfinite(l.total));
}

TEST_CASE("nms and scoring") {
  ScoredBox a{{{{0, 0, 0}, {1, 1, 1}, 0}, 0}, 0.9};
  ScoredBox b{{{{0.1, 0, 0}, {1, 1, 1}, 0}, 0}, 0.8};
  ScoredBox c{{{{0.1, 0, 0}, {1, 1, 1}, 0}, 1}, 0.7};
  ScoredBox d{{{{5, 0, 0}, {1, 1, 1}, 0}, 0}, 0.01};
  const auto kept = class_nms({d, b, c, a});
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].score == 0.9);
  CHECK(kept[1].score == 0.7);
}

TEST_CASE("training loss decreases on a two-scene toy set") {
  RunConfig cfg;
  cfg.model = small_model();
  cfg.num_points = 512;
  cfg.lr = 2e-3;
  cfg.milestones = {};
  cfg.batch_size = 2;
  cfg.epochs = 200;
  std::vector<PreparedScene> scenes;
  SceneSpec spec = cfg.scene_spec();
  spec.image_width = 64;
  for (std::size_t i = 0; i < 2; ++i) scenes.push_back(prepare_scene(generate_scene(scene_seed(3, i), spec), cfg.model));
  std::vector<double> ratios;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    cfg.seed = seed;
    Trainer t(cfg, scenes);
    const TrainResult r = t.run();
    REQUIRE(r.steps.size() == 200);
    ratios.push_back(r.steps.back().loss.total / r.steps.front().loss.total);
  }
  std::sort(ratios.begin(), ratios.end());
  MESSAGE("median final/initial loss " << ratios[2]);
  CHECK(ratios[2] < 1.0);
}
