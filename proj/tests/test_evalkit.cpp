#include <cmath>

#include "doctest.h"
#include "fusion3d/errors.hpp"
#include "fusion3d/evalkit.hpp"
#include "oracles.hpp"

using namespace fusion3d;

namespace {

LabeledBox cube(double x, int label) { return {{{x, 0, 0}, {1, 1, 1}, 0.0}, label}; }

Detection det(const std::string& scene, double x, int label, double score) { return {cube(x, label), score, scene}; }

// GTs far apart, so a detection overlaps at most one of them.
GroundTruthMap spread_scene(Rng& rng, std::size_t scenes, std::size_t per_scene, int classes) {
  GroundTruthMap gts;
  for (std::size_t s = 0; s < scenes; ++s) {
    auto& list = gts["s" + std::to_string(s)];
    for (std::size_t g = 0; g < per_scene; ++g) {
      LabeledBox b{oracle::random_box(rng, 0.2), static_cast<int>(rng.integer(0, classes - 1))};
      b.box.center.x += 10.0 * static_cast<double>(g);
      list.push_back(b);
    }
  }
  return gts;
}

std::vector<Detection> jittered(const GroundTruthMap& gts, Rng& rng, std::size_t n, double jitter) {
  std::vector<Detection> dets;
  std::vector<std::pair<std::string, LabeledBox>> pool;
  for (const auto& [scene, boxes] : gts)
    for (const auto& b : boxes) pool.push_back({scene, b});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& [scene, b] = pool[rng.integer(0, static_cast<std::int64_t>(pool.size()) - 1)];
    Detection d{b, rng.uniform(), scene};
    d.box.box.center = d.box.box.center + Vec3{rng.normal(0, jitter), rng.normal(0, jitter), rng.normal(0, jitter)};
    d.box.box.yaw = normalize_angle(d.box.box.yaw + rng.normal(0, 0.3));
    dets.push_back(d);
  }
  return dets;
}

}  // namespace

TEST_CASE("average precision examples") {
  CHECK(average_precision({true}, 1).ap == 1.0);
  CHECK(average_precision({true, false}, 1).ap == 1.0);
  CHECK(average_precision({false, true}, 1).ap == 0.5);
  CHECK(average_precision({}, 3).ap == 0.0);
  const PRCurve none = average_precision({false}, 0);
  CHECK_FALSE(none.defined);
  CHECK(none.ap == 0.0);
}

TEST_CASE("single match and one-GT rule") {
  GroundTruthMap gts{{"a", {cube(0, 0)}}};
  // shift 0.25 gives IoU 0.75 / 1.25 = 0.6
  CHECK(match_detections({det("a", 0.25, 0, 0.9)}, gts, 0, 0.5) == std::vector<bool>{true});
  std::vector<Detection> two{det("a", 0.3, 0, 0.4), det("a", 0.1, 0, 0.8)};
  sort_detections(two);
  CHECK(two[0].score == 0.8);
  CHECK(match_detections(two, gts, 0, 0.5) == std::vector<bool>{true, false});
  // other scenes and classes never match
  CHECK(match_detections({det("b", 0, 0, 0.9)}, gts, 0, 0.5) == std::vector<bool>{false});
}

TEST_CASE("sort ties use scene id then input order") {
  std::vector<Detection> d{det("b", 0, 0, 0.5), det("a", 1, 0, 0.5), det("a", 2, 0, 0.5), det("c", 3, 0, 0.9)};
  sort_detections(d);
  CHECK(d[0].scene == "c");
  CHECK(d[1].box.box.center.x == 1);
  CHECK(d[2].box.box.center.x == 2);
  CHECK(d[3].scene == "b");
}

TEST_CASE("greedy matching agrees with exhaustive assignment") {
  // three detections, two GTs: the first detection overlaps both
  GroundTruthMap fixed{{"a", {cube(0, 0), cube(0.9, 0)}}};
  std::vector<Detection> three{det("a", 0.3, 0, 0.9), det("a", 0.75, 0, 0.8), det("a", 0.05, 0, 0.7)};
  CHECK(match_detections(three, fixed, 0, 0.25) == oracle::exhaustive_match(three, fixed, 0, 0.25));

  Rng rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    GroundTruthMap gts;
    const std::size_t scenes = static_cast<std::size_t>(rng.integer(1, 2));
    for (std::size_t s = 0; s < scenes; ++s) {
      auto& list = gts["s" + std::to_string(s)];
      const auto n = rng.integer(0, 3);
      for (std::int64_t g = 0; g < n; ++g) list.push_back({oracle::random_box(rng, 0.6), 0});
    }
    std::vector<Detection> dets;
    const auto n = rng.integer(1, 5);
    for (std::int64_t d = 0; d < n; ++d)
      dets.push_back({{oracle::random_box(rng, 0.6), 0}, rng.uniform(), "s" + std::to_string(rng.integer(0, 1))});
    sort_detections(dets);
    for (double thr : {0.1, 0.25, 0.5}) CHECK(match_detections(dets, gts, 0, thr) == oracle::exhaustive_match(dets, gts, 0, thr));
  }
}

TEST_CASE("five scene fixture") {
  // unit cubes shifted along x: IoU(s) = (1 - s) / (1 + s)
  GroundTruthMap gts{{"s0", {cube(0, 0), cube(5, 1)}},
                     {"s1", {cube(0, 0)}},
                     {"s2", {cube(0, 0), cube(3, 0)}},
                     {"s3", {cube(0, 1)}},
                     {"s4", {}}};
  std::vector<Detection> dets{
      det("s0", 0.2, 0, 0.95), det("s1", 0.5, 0, 0.90), det("s0", 0.0, 0, 0.85), det("s4", 0.0, 0, 0.80),
      det("s2", 0.0, 0, 0.70), det("s2", 3.8, 0, 0.60), det("s1", 0.0, 0, 0.50), det("s3", 0.2, 1, 0.90),
      det("s0", 0.0, 1, 0.80), det("s0", 5.5, 1, 0.70), det("s0", 0.0, 2, 0.99)};
  const MapReport r = map_at_iou(dets, gts, 3);
  REQUIRE(r.thresholds == std::vector<double>{0.25, 0.5});
  CHECK(r.num_gts == std::vector<std::size_t>{4, 2, 0});
  // hand computed
  CHECK(r.ap[0][0] == doctest::Approx(13.0 / 20.0).epsilon(1e-12));
  CHECK(r.ap[0][1] == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  CHECK(r.ap[1][0] == doctest::Approx(13.0 / 28.0).epsilon(1e-12));
  CHECK(r.ap[1][1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r.map[0] == doctest::Approx(89.0 / 120.0).epsilon(1e-12));
  CHECK(r.map[1] == doctest::Approx(27.0 / 56.0).epsilon(1e-12));
}

TEST_CASE("mean over classes") {
  GroundTruthMap gts{{"a", {cube(0, 0)}}};
  const MapReport one = map_at_iou({det("a", 0.1, 0, 0.5)}, gts, 1);
  CHECK(one.map[0] == one.ap[0][0]);
  // a class without GTs and with only false positives does not count
  const MapReport excl = map_at_iou({det("a", 0.1, 0, 0.5), det("a", 0, 1, 0.9)}, gts, 2);
  CHECK(excl.map[0] == 1.0);
  CHECK_THROWS_AS(map_at_iou({det("a", 0, 4, 0.5)}, gts, 2), InputError);

  // ground truth as predictions
  Rng rng(3);
  const GroundTruthMap many = spread_scene(rng, 6, 4, 3);
  std::vector<Detection> perfect;
  for (const auto& [scene, boxes] : many)
    for (const auto& b : boxes) perfect.push_back({b, 1.0, scene});
  const MapReport r = map_at_iou(perfect, many, 3);
  CHECK(r.map[0] == 1.0);
  CHECK(r.map[1] == 1.0);
}

TEST_CASE("ranking invariants") {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const GroundTruthMap gts = spread_scene(rng, 4, 3, 2);
    const std::vector<Detection> dets = jittered(gts, rng, 20, 0.25);
    const MapReport base = map_at_iou(dets, gts, 2);

    std::vector<Detection> warped = dets;
    for (auto& d : warped) d.score = std::exp(3 * d.score) / 30.0;
    const MapReport w = map_at_iou(warped, gts, 2);
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t c = 0; c < 2; ++c) CHECK(w.ap[t][c] == base.ap[t][c]);

    for (std::size_t c = 0; c < 2; ++c) CHECK(base.ap[0][c] >= base.ap[1][c]);

    std::vector<Detection> doubled = dets;
    for (const auto& d : dets) {
      Detection copy = d;
      copy.score = d.score * rng.uniform(0.5, 1.0);
      doubled.push_back(copy);
    }
    const MapReport dd = map_at_iou(doubled, gts, 2);
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t c = 0; c < 2; ++c) CHECK(dd.ap[t][c] <= base.ap[t][c] + 1e-15);
  }
}

TEST_CASE("detection file round trip") {
  std::vector<Detection> dets{det("x", 0.125, 1, 0.75), det("x", -3.5, 0, 0.1)};
  dets[0].box.box.yaw = -2.75;
  dets[1].box.box.extents = {0.3, 1.7, 0.9};
  const std::string text = detections_to_json("x", dets, R"({"config": {"stages": 3}})");
  const std::vector<Detection> back = parse_detections(text);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].scene == "x");
    CHECK(back[i].score == dets[i].score);
    CHECK(back[i].box == dets[i].box);
  }
  CHECK(detections_to_json("x", back, R"({"config": {"stages": 3}})") == text);
  CHECK(parse_detections(detections_to_json("empty", {})).empty());
}

TEST_CASE("detection file errors") {
  auto message = [](const std::string& text) {
    try {
      parse_detections(text);
    } catch (const ParseError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message("{").find("detections") != std::string::npos);
  CHECK(message("[]").find("object") != std::string::npos);
  CHECK(message(R"({"detections": []})").find("scene") != std::string::npos);
  CHECK(message(R"({"scene": "a"})").find("detections") != std::string::npos);
  CHECK(message(R"({"scene": "a", "detections": [[0,0,0,1,1,1,0,0]]})").find("[0]") != std::string::npos);
  CHECK(message(R"({"scene": "a", "detections": [[0,0,0,1,1,1,0,0.5,0.5]]})").find("class") != std::string::npos);
  CHECK(message(R"({"scene": "a", "detections": [[0,0,0,1,1,1,0,0,2]]})").find("score") != std::string::npos);
  CHECK(message(R"({"scene": "a", "detections": [[0,0,0,1,-1,1,0,0,0.5]]})") != "no error");
}
