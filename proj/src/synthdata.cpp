#include "fusion3d/synthdata.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fusion3d/errors.hpp"
#include "fusion3d/logging.hpp"

namespace fusion3d {

namespace {

constexpr double kSurfaceInset = 0.01;
constexpr double kClutterFraction = 0.35;
constexpr double kFloorShare = 0.85;
constexpr double kWallMargin = 0.05;
constexpr double kWallBand = 0.5;
constexpr double kFieldOfView = std::numbers::pi / 2;

const std::array<Vec3, 5> kExtents = {Vec3{1.4, 0.9, 0.5}, Vec3{0.6, 0.6, 0.9}, Vec3{1.0, 0.5, 0.75},
                                      Vec3{0.5, 0.5, 0.5}, Vec3{0.9, 0.4, 1.2}};
const std::array<std::array<double, 3>, 5> kPalette = {{{0.85, 0.2, 0.2},
                                                        {0.2, 0.75, 0.25},
                                                        {0.2, 0.35, 0.85},
                                                        {0.9, 0.8, 0.2},
                                                        {0.6, 0.3, 0.75}}};
const std::array<double, 3> kFloorColor = {0.45, 0.42, 0.38};
const std::array<double, 3> kWallColor = {0.75, 0.75, 0.72};

std::array<double, 3> noisy(const std::array<double, 3>& c, Rng& rng) {
  std::array<double, 3> out{};
  for (std::size_t k = 0; k < 3; ++k) out[k] = std::clamp(c[k] + rng.normal(0.0, 0.03), 0.0, 1.0);
  return out;
}

// Area-weighted sample on the top or one of the four sides, inset into the box.
Vec3 sample_box_surface(const OrientedBox3D& b, Rng& rng) {
  const double w = b.extents.x, l = b.extents.y, h = b.extents.z;
  const double areas[5] = {w * l, w * h, w * h, l * h, l * h};
  double total = 0;
  for (double a : areas) total += a;
  double pick = rng.uniform(0.0, total);
  std::size_t face = 0;
  while (face < 4 && pick > areas[face]) pick -= areas[face++];
  const double hw = w / 2 - kSurfaceInset, hl = l / 2 - kSurfaceInset, hh = h / 2 - kSurfaceInset;
  Vec3 q;
  switch (face) {
    case 0: q = {rng.uniform(-hw, hw), rng.uniform(-hl, hl), hh}; break;
    case 1: q = {rng.uniform(-hw, hw), hl, rng.uniform(-hh, hh)}; break;
    case 2: q = {rng.uniform(-hw, hw), -hl, rng.uniform(-hh, hh)}; break;
    case 3: q = {hw, rng.uniform(-hl, hl), rng.uniform(-hh, hh)}; break;
    default: q = {-hw, rng.uniform(-hl, hl), rng.uniform(-hh, hh)}; break;
  }
  return b.center + rotate_z(q, b.yaw);
}

double box_surface(const OrientedBox3D& b) {
  const Vec3& e = b.extents;
  return e.x * e.y + 2 * e.x * e.z + 2 * e.y * e.z;
}

CameraModel look_at(const Vec3& eye, const Vec3& target, int width, int height) {
  Vec3 f = target - eye;
  f = f * (1.0 / f.norm());
  const Vec3 up{0, 0, 1};
  Vec3 r{f.y * up.z - f.z * up.y, f.z * up.x - f.x * up.z, f.x * up.y - f.y * up.x};
  r = r * (1.0 / r.norm());
  const Vec3 d{f.y * r.z - f.z * r.y, f.z * r.x - f.x * r.z, f.x * r.y - f.y * r.x};
  CameraModel cam;
  cam.width = width;
  cam.height = height;
  const double fx = width / 2.0 / std::tan(kFieldOfView / 2);
  const double fy = height / 2.0 / std::tan(kFieldOfView / 2);
  cam.K = {fx, 0, width / 2.0, 0, fy, height / 2.0, 0, 0, 1};
  cam.R = {r.x, r.y, r.z, d.x, d.y, d.z, f.x, f.y, f.z};
  cam.t = {-r.dot(eye), -d.dot(eye), -f.dot(eye)};
  return cam;
}

}  // namespace

void SceneSpec::validate() const {
  if (num_points == 0) throw ConfigError("scene spec: num_points must be positive");
  if (min_boxes == 0 || max_boxes < min_boxes) throw ConfigError("scene spec: need 1 <= min_boxes <= max_boxes");
  if (num_classes == 0) throw ConfigError("scene spec: num_classes must be positive");
  if (!(room.x > 0 && room.y > 0 && room.z > 0)) throw ConfigError("scene spec: room size must be positive");
  if (image_width <= 0 || image_height <= 0) throw ConfigError("scene spec: image size must be positive");
  if (max_attempts == 0) throw ConfigError("scene spec: max_attempts must be positive");
}

Vec3 class_extents(int label) { return kExtents[static_cast<std::size_t>(label) % kExtents.size()]; }

std::array<double, 3> class_color(int label) { return kPalette[static_cast<std::size_t>(label) % kPalette.size()]; }

std::string scene_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu", index);
  return buf;
}

std::uint64_t scene_seed(std::uint64_t dataset_seed, std::size_t index) { return mix_seed(dataset_seed, index); }

SceneSample generate_scene(std::uint64_t seed, const SceneSpec& spec, const std::string& id) {
  spec.validate();
  Rng rng(seed);
  SceneSample s;
  s.id = id;
  s.seed = seed;

  const auto count = static_cast<std::size_t>(
      rng.integer(static_cast<std::int64_t>(spec.min_boxes), static_cast<std::int64_t>(spec.max_boxes)));
  std::size_t attempts = 0;
  while (s.boxes.size() < count) {
    if (attempts++ >= spec.max_attempts) {
      throw GenerationError("could not place " + std::to_string(count) + " boxes in " +
                            std::to_string(spec.max_attempts) + " attempts");
    }
    LabeledBox lb;
    lb.label = static_cast<int>(rng.integer(0, static_cast<std::int64_t>(spec.num_classes) - 1));
    const Vec3 base = class_extents(lb.label);
    OrientedBox3D& b = lb.box;
    b.extents = {base.x * rng.uniform(0.8, 1.2), base.y * rng.uniform(0.8, 1.2), base.z * rng.uniform(0.8, 1.2)};
    b.yaw = rng.uniform(-std::numbers::pi / 2, std::numbers::pi / 2);
    const double r = std::hypot(b.extents.x, b.extents.y) / 2 + kWallMargin;
    if (2 * r >= spec.room.x || 2 * r >= spec.room.y || b.extents.z >= spec.room.z) continue;
    b.center = {rng.uniform(r, spec.room.x - r), rng.uniform(r, spec.room.y - r), b.extents.z / 2};
    bool ok = true;
    for (const auto& other : s.boxes) {
      if (rotated_iou3d(other.box, b) >= spec.max_pair_iou) {
        ok = false;
        break;
      }
    }
    if (ok) s.boxes.push_back(lb);
  }

  const auto clutter = static_cast<std::size_t>(std::floor(kClutterFraction * static_cast<double>(spec.num_points)));
  const std::size_t budget = spec.num_points - clutter;
  if (budget < spec.min_points_per_box * s.boxes.size()) {
    throw GenerationError("num_points too small to give every box " + std::to_string(spec.min_points_per_box) +
                          " points");
  }
  double total_area = 0;
  for (const auto& b : s.boxes) total_area += box_surface(b.box);
  std::vector<std::size_t> per_box(s.boxes.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < s.boxes.size(); ++i) {
    const double share = box_surface(s.boxes[i].box) / total_area * static_cast<double>(budget);
    per_box[i] = std::max(2 * spec.min_points_per_box, static_cast<std::size_t>(share));
    assigned += per_box[i];
  }
  while (assigned > budget) {
    auto it = std::max_element(per_box.begin(), per_box.end());
    --*it;
    --assigned;
  }

  auto& pc = s.cloud;
  for (std::size_t i = 0; i < s.boxes.size(); ++i) {
    const auto& lb = s.boxes[i];
    for (std::size_t n = 0; n < per_box[i]; ++n) {
      pc.positions.push_back(sample_box_surface(lb.box, rng));
      pc.colors.push_back(noisy(class_color(lb.label), rng));
    }
  }
  const std::size_t remaining = spec.num_points - assigned;
  const auto floor_pts = static_cast<std::size_t>(std::round(kFloorShare * static_cast<double>(remaining)));
  for (std::size_t n = 0; n < remaining; ++n) {
    if (n < floor_pts) {
      pc.positions.push_back({rng.uniform(0, spec.room.x), rng.uniform(0, spec.room.y), rng.uniform(0, kSurfaceInset)});
      pc.colors.push_back(noisy(kFloorColor, rng));
    } else {
      const auto wall = rng.integer(0, 3);
      const double along = rng.uniform(0, 1), z = rng.uniform(0, std::min(kWallBand, spec.room.z));
      Vec3 p;
      switch (wall) {
        case 0: p = {along * spec.room.x, 0.0, z}; break;
        case 1: p = {along * spec.room.x, spec.room.y, z}; break;
        case 2: p = {0.0, along * spec.room.y, z}; break;
        default: p = {spec.room.x, along * spec.room.y, z}; break;
      }
      pc.positions.push_back(p);
      pc.colors.push_back(noisy(kWallColor, rng));
    }
  }

  Vec3 centroid;
  for (const auto& b : s.boxes) centroid = centroid + b.box.center;
  centroid = centroid * (1.0 / static_cast<double>(s.boxes.size()));
  const auto wall = rng.integer(0, 3);
  const double h = 0.75 * spec.room.z;
  Vec3 eye;
  switch (wall) {
    case 0: eye = {spec.room.x / 2, kWallMargin, h}; break;
    case 1: eye = {spec.room.x / 2, spec.room.y - kWallMargin, h}; break;
    case 2: eye = {kWallMargin, spec.room.y / 2, h}; break;
    default: eye = {spec.room.x - kWallMargin, spec.room.y / 2, h}; break;
  }
  s.camera = look_at(eye, centroid, spec.image_width, spec.image_height);
  return s;
}

// ---- archive -------------------------------------------------------------------

std::string format_real(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw Error("cannot format real");
  return {buf, end};
}

namespace {

using nlohmann::json;

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError("cannot write " + p.string());
  out << text;
  if (!out) throw InputError("failed writing " + p.string());
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("missing or unreadable file " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_json(const std::filesystem::path& p) {
  const std::string text = read_text(p);
  try {
    json j = json::parse(text);
    if (!j.is_object()) throw ParseError(p.filename().string() + ": top level must be an object");
    return j;
  } catch (const json::parse_error& e) {
    throw ParseError(p.filename().string() + ": " + e.what());
  }
}

void warn_unknown(const json& j, const std::string& file, std::initializer_list<const char*> known) {
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end()) {
      spdlog::warn("{}: ignoring unknown key '{}'", file, key);
    }
  }
}

const json& require(const json& j, const std::string& file, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw ParseError(file + ": missing key '" + key + "'");
  return *it;
}

template <std::size_t N>
std::array<double, N> real_array(const json& j, const std::string& file, const char* key) {
  const json& v = require(j, file, key);
  if (!v.is_array() || v.size() != N) {
    throw ParseError(file + ": key '" + key + "' must be an array of " + std::to_string(N) + " numbers");
  }
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    if (!v[i].is_number()) throw ParseError(file + ": key '" + key + "' entry " + std::to_string(i) + " is not a number");
    out[i] = v[i].get<double>();
  }
  return out;
}

int integer_key(const json& j, const std::string& file, const char* key) {
  const json& v = require(j, file, key);
  if (!v.is_number_integer()) throw ParseError(file + ": key '" + key + "' must be an integer");
  return v.get<int>();
}

}  // namespace

void write_scene(const SceneSample& s, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw InputError("cannot create " + dir.string() + ": " + ec.message());

  std::string pts;
  pts.reserve(s.cloud.size() * 96);
  for (std::size_t i = 0; i < s.cloud.size(); ++i) {
    const auto& p = s.cloud.positions[i];
    const auto& c = s.cloud.colors[i];
    pts += format_real(p.x) + ' ' + format_real(p.y) + ' ' + format_real(p.z) + ' ' + format_real(c[0]) + ' ' +
           format_real(c[1]) + ' ' + format_real(c[2]) + '\n';
  }
  write_text(dir / "points.txt", pts);

  json cam;
  cam["K"] = s.camera.K;
  cam["R"] = s.camera.R;
  cam["t"] = s.camera.t;
  cam["W0"] = s.camera.width;
  cam["H0"] = s.camera.height;
  write_text(dir / "camera.json", cam.dump(2) + "\n");

  json boxes = json::array();
  for (const auto& b : s.boxes) {
    const auto& o = b.box;
    boxes.push_back({o.center.x, o.center.y, o.center.z, o.extents.x, o.extents.y, o.extents.z, o.yaw, b.label});
  }
  write_text(dir / "boxes.json", json{{"boxes", boxes}}.dump(2) + "\n");

  json meta{{"id", s.id}, {"seed", s.seed}, {"num_points", s.cloud.size()}, {"format_version", kSceneFormatVersion}};
  write_text(dir / "meta.json", meta.dump(2) + "\n");
}

SceneSample read_scene(const std::filesystem::path& dir) {
  SceneSample s;

  const json meta = parse_json(dir / "meta.json");
  warn_unknown(meta, "meta.json", {"id", "seed", "num_points", "format_version"});
  const int version = integer_key(meta, "meta.json", "format_version");
  if (version != kSceneFormatVersion) {
    throw ParseError("meta.json: unsupported format_version " + std::to_string(version));
  }
  const json& id = require(meta, "meta.json", "id");
  if (!id.is_string()) throw ParseError("meta.json: key 'id' must be a string");
  s.id = id.get<std::string>();
  const json& seed = require(meta, "meta.json", "seed");
  if (!seed.is_number_unsigned() && !seed.is_number_integer()) throw ParseError("meta.json: key 'seed' must be an integer");
  s.seed = seed.get<std::uint64_t>();
  const json& np = require(meta, "meta.json", "num_points");
  if (!np.is_number_integer()) throw ParseError("meta.json: key 'num_points' must be an integer");

  const std::string text = read_text(dir / "points.txt");
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    const char* p = text.data() + pos;
    const char* e = text.data() + end;
    double v[6];
    std::size_t n = 0;
    while (p < e) {
      while (p < e && *p == ' ') ++p;
      if (p == e) break;
      if (n == 6) throw ParseError("points.txt line " + std::to_string(line_no) + ": more than 6 values");
      auto [next, ec] = std::from_chars(p, e, v[n]);
      if (ec != std::errc() || (next < e && *next != ' ')) {
        throw ParseError("points.txt line " + std::to_string(line_no) + ": bad number");
      }
      ++n;
      p = next;
    }
    if (n != 6) {
      throw ParseError("points.txt line " + std::to_string(line_no) + ": expected 6 values, got " + std::to_string(n));
    }
    s.cloud.positions.push_back({v[0], v[1], v[2]});
    s.cloud.colors.push_back({v[3], v[4], v[5]});
    pos = end + 1;
  }
  if (s.cloud.size() != np.get<std::size_t>()) {
    throw ParseError("points.txt has " + std::to_string(s.cloud.size()) + " points but meta.json says " +
                     std::to_string(np.get<std::size_t>()));
  }

  const json cam = parse_json(dir / "camera.json");
  warn_unknown(cam, "camera.json", {"K", "R", "t", "W0", "H0"});
  s.camera.K = real_array<9>(cam, "camera.json", "K");
  s.camera.R = real_array<9>(cam, "camera.json", "R");
  s.camera.t = real_array<3>(cam, "camera.json", "t");
  s.camera.width = integer_key(cam, "camera.json", "W0");
  s.camera.height = integer_key(cam, "camera.json", "H0");
  s.camera.validate();

  const json boxes = parse_json(dir / "boxes.json");
  warn_unknown(boxes, "boxes.json", {"boxes"});
  const json& list = require(boxes, "boxes.json", "boxes");
  if (!list.is_array()) throw ParseError("boxes.json: key 'boxes' must be an array");
  for (std::size_t i = 0; i < list.size(); ++i) {
    const json& b = list[i];
    const std::string where = "boxes.json: boxes[" + std::to_string(i) + "]";
    if (!b.is_array() || b.size() != 8) throw ParseError(where + " must be [x,y,z,w,l,h,theta,class]");
    for (const auto& v : b)
      if (!v.is_number()) throw ParseError(where + " has a non-numeric entry");
    if (!b[7].is_number_integer()) throw ParseError(where + " class must be an integer");
    LabeledBox lb;
    lb.box.center = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>()};
    lb.box.extents = {b[3].get<double>(), b[4].get<double>(), b[5].get<double>()};
    lb.box.yaw = b[6].get<double>();
    lb.label = b[7].get<int>();
    try {
      lb.box.validate();
    } catch (const InputError& e) {
      throw ParseError(where + ": " + e.what());
    }
    if (lb.label < 0) throw ParseError(where + " class must be non-negative");
    s.boxes.push_back(lb);
  }
  return s;
}

std::pair<std::vector<std::string>, std::vector<std::string>> split_dataset(const std::vector<std::string>& ids,
                                                                          double fraction, std::uint64_t seed) {
  if (ids.size() < 2) throw InputError("split_dataset needs at least two scenes");
  if (!(fraction > 0.0 && fraction < 1.0)) throw InputError("train fraction must lie in (0, 1)");
  std::vector<std::string> order = ids;
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng.engine());
  auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ids.size())));
  n = std::clamp<std::size_t>(n, 1, ids.size() - 1);
  std::vector<std::string> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  std::vector<std::string> val(order.begin() + static_cast<std::ptrdiff_t>(n), order.end());
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

}  // namespace fusion3d
