#include <filesystem>
#include <fstream>
#include <sstream>

#include <spdlog/sinks/ringbuffer_sink.h>
#include <spdlog/spdlog.h>

#include "doctest.h"
#include "fusion3d/errors.hpp"
#include "fusion3d/synthdata.hpp"
#include "helpers.hpp"

using namespace fusion3d;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("fusion3d_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void dump(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

bool same(const SceneSample& a, const SceneSample& b) {
  return a.id == b.id && a.seed == b.seed && a.cloud == b.cloud && a.camera == b.camera && a.boxes == b.boxes;
}

// Captures warnings routed through the default logger.
struct WarningCapture {
  std::shared_ptr<spdlog::sinks::ringbuffer_sink_mt> sink = std::make_shared<spdlog::sinks::ringbuffer_sink_mt>(64);
  std::shared_ptr<spdlog::logger> previous = spdlog::default_logger();
  WarningCapture() {
    auto logger = std::make_shared<spdlog::logger>("capture", sink);
    logger->set_level(spdlog::level::warn);
    spdlog::set_default_logger(logger);
  }
  ~WarningCapture() { spdlog::set_default_logger(previous); }
  std::string text() const {
    std::string all;
    for (const auto& line : sink->last_formatted()) all += line;
    return all;
  }
};

}  // namespace

TEST_CASE("generation is deterministic") {
  const SceneSample a = generate_scene(42), b = generate_scene(42), c = generate_scene(43);
  CHECK(same(a, b));
  CHECK_FALSE(same(a, c));
  CHECK(a.cloud.size() == 2048);
  CHECK(a.boxes.size() >= 3);
  CHECK(a.boxes.size() <= 6);
}

TEST_CASE("generated scenes satisfy their invariants") {
  const SceneSpec spec;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SceneSample s = generate_scene(seed, spec);
    CHECK_NOTHROW(s.camera.validate());
    for (std::size_t i = 0; i < s.boxes.size(); ++i) {
      const auto& b = s.boxes[i].box;
      CHECK(b.yaw >= -std::numbers::pi);
      CHECK(b.yaw < std::numbers::pi);
      CHECK(s.boxes[i].label >= 0);
      CHECK(s.boxes[i].label < 5);
      for (const auto& corner : bev_corners(b)) {
        CHECK(corner.x >= 0.0);
        CHECK(corner.x <= spec.room.x);
        CHECK(corner.y >= 0.0);
        CHECK(corner.y <= spec.room.y);
      }
      std::size_t inside = 0;
      for (const auto& p : s.cloud.positions) inside += box_contains(b, p);
      CHECK(inside >= 20);
      for (std::size_t j = i + 1; j < s.boxes.size(); ++j) CHECK(rotated_iou3d(b, s.boxes[j].box) < 0.05);
    }
    // the camera faces the box centroid
    Vec3 centroid;
    for (const auto& b : s.boxes) centroid = centroid + b.box.center;
    const RefPoint r = project_point(s.camera, centroid * (1.0 / static_cast<double>(s.boxes.size())));
    CHECK(r.valid);
    CHECK(r.u == doctest::Approx(0.5));
    CHECK(r.v == doctest::Approx(0.5));
  }
}

TEST_CASE("infeasible spec raises a generation error") {
  SceneSpec spec;
  spec.room = {1.0, 1.0, 3.0};
  spec.min_boxes = 6;
  spec.max_boxes = 6;
  CHECK_THROWS_AS(generate_scene(1, spec), GenerationError);
}

TEST_CASE("real formatting round trips") {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const double v = rng.normal(0, 1) * std::pow(10.0, rng.uniform(-12, 12));
    CHECK(std::stod(format_real(v)) == v);
  }
  CHECK(format_real(0.5) == "0.5");
  CHECK(format_real(1.0) == "1");
}

TEST_CASE("archive round trip is bit exact") {
  TempDir tmp("archive");
  for (std::uint64_t seed : {0, 5, 17}) {
    const SceneSample s = generate_scene(seed, {}, "scene_x");
    write_scene(s, tmp.path / "a");
    const SceneSample r = read_scene(tmp.path / "a");
    CHECK(same(s, r));
    write_scene(r, tmp.path / "b");
    for (const char* f : {"points.txt", "camera.json", "boxes.json", "meta.json"})
      CHECK(slurp(tmp.path / "a" / f) == slurp(tmp.path / "b" / f));
  }
  const std::string pts = slurp(tmp.path / "a" / "points.txt");
  CHECK(pts.find('\r') == std::string::npos);
  CHECK(pts.back() == '\n');
}

TEST_CASE("malformed archives") {
  TempDir tmp("malformed");
  const SceneSample s = generate_scene(3);
  write_scene(s, tmp.path);
  const std::string good = slurp(tmp.path / "points.txt");

  // drop the last value of line 4
  std::istringstream in(good);
  std::string line, bad;
  for (int n = 1; std::getline(in, line); ++n) {
    if (n == 4) line = line.substr(0, line.rfind(' '));
    bad += line + "\n";
  }
  dump(tmp.path / "points.txt", bad);
  try {
    read_scene(tmp.path);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 4") != std::string::npos);
  }
  dump(tmp.path / "points.txt", good);

  const std::string cam = slurp(tmp.path / "camera.json");
  dump(tmp.path / "camera.json", "{\"K\": [1, 2]}");
  try {
    read_scene(tmp.path);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("K") != std::string::npos);
  }
  dump(tmp.path / "camera.json", cam);

  fs::remove(tmp.path / "boxes.json");
  CHECK_THROWS_AS(read_scene(tmp.path), InputError);
}

TEST_CASE("unknown keys are ignored with a warning") {
  TempDir tmp("unknown");
  const SceneSample s = generate_scene(4);
  write_scene(s, tmp.path);
  std::string boxes = slurp(tmp.path / "boxes.json");
  boxes.insert(boxes.find('{') + 1, "\"comment\": \"hand edited\",");
  dump(tmp.path / "boxes.json", boxes);
  WarningCapture cap;
  const SceneSample r = read_scene(tmp.path);
  CHECK(same(s, r));
  CHECK(cap.text().find("comment") != std::string::npos);
}

TEST_CASE("dataset split") {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < 10; ++i) ids.push_back(scene_id(i));
  const auto [train, val] = split_dataset(ids, 0.8, 7);
  CHECK(train.size() == 8);
  CHECK(val.size() == 2);
  std::vector<std::string> all = train;
  all.insert(all.end(), val.begin(), val.end());
  std::sort(all.begin(), all.end());
  CHECK(all == ids);
  CHECK(split_dataset(ids, 0.8, 7) == std::make_pair(train, val));
  CHECK_THROWS_AS(split_dataset({"a"}, 0.5, 1), InputError);
  CHECK_THROWS_AS(split_dataset(ids, 1.0, 1), InputError);
}
