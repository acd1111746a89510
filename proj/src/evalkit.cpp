#include "fusion3d/evalkit.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "fusion3d/errors.hpp"
#include "fusion3d/logging.hpp"

namespace fusion3d {

void sort_detections(std::vector<Detection>& dets) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.scene < b.scene;
  });
}

std::vector<bool> match_detections(const std::vector<Detection>& dets, const GroundTruthMap& gts, int label,
                                   double iou_threshold) {
  std::map<std::string, std::vector<bool>> used;
  std::vector<bool> flags(dets.size(), false);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    const Detection& det = dets[d];
    if (det.box.label != label) continue;
    auto it = gts.find(det.scene);
    if (it == gts.end()) continue;
    auto& taken = used[det.scene];
    taken.resize(it->second.size(), false);
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < it->second.size(); ++g) {
      if (taken[g] || it->second[g].label != label) continue;
      const double iou = rotated_iou3d(det.box.box, it->second[g].box);
      if (iou >= iou_threshold && iou > best) {
        best = iou;
        best_g = g;
      }
    }
    if (best >= 0.0) {
      taken[best_g] = true;
      flags[d] = true;
    }
  }
  return flags;
}

PRCurve average_precision(const std::vector<bool>& flags, std::size_t num_gts) {
  PRCurve pr;
  if (num_gts == 0) {
    pr.defined = false;
    return pr;
  }
  std::size_t tp = 0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    tp += flags[i] ? 1 : 0;
    pr.recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gts));
    pr.precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  // Area under the monotone precision envelope.
  std::vector<double> env(pr.precision);
  for (std::size_t i = env.size(); i-- > 1;) env[i - 1] = std::max(env[i - 1], env[i]);
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < env.size(); ++i) {
    pr.ap += (pr.recall[i] - prev_recall) * env[i];
    prev_recall = pr.recall[i];
  }
  return pr;
}

MapReport map_at_iou(std::vector<Detection> dets, const GroundTruthMap& gts, std::size_t num_classes,
                     const std::vector<double>& thresholds) {
  MapReport r;
  r.thresholds = thresholds;
  r.num_classes = num_classes;
  r.num_gts.assign(num_classes, 0);
  for (const auto& [scene, boxes] : gts) {
    for (const auto& b : boxes) {
      if (b.label < 0 || static_cast<std::size_t>(b.label) >= num_classes) {
        throw InputError("ground truth in " + scene + " has class " + std::to_string(b.label) + " outside [0, " +
                         std::to_string(num_classes) + ")");
      }
      ++r.num_gts[static_cast<std::size_t>(b.label)];
    }
  }
  for (const auto& d : dets) {
    if (d.box.label < 0 || static_cast<std::size_t>(d.box.label) >= num_classes) {
      throw InputError("detection in " + d.scene + " has class " + std::to_string(d.box.label) + " outside [0, " +
                       std::to_string(num_classes) + ")");
    }
  }
  sort_detections(dets);
  for (double thr : thresholds) {
    std::vector<double> aps(num_classes, 0.0);
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
      std::vector<Detection> mine;
      for (const auto& d : dets)
        if (d.box.label == static_cast<int>(c)) mine.push_back(d);
      const PRCurve pr = average_precision(match_detections(mine, gts, static_cast<int>(c), thr), r.num_gts[c]);
      aps[c] = pr.ap;
      if (pr.defined) {
        sum += pr.ap;
        ++counted;
      }
    }
    r.ap.push_back(aps);
    r.map.push_back(counted ? sum / static_cast<double>(counted) : 0.0);
  }
  return r;
}

// ---- detection files -------------------------------------------------------------

using nlohmann::json;

std::string detections_to_json(const std::string& scene, const std::vector<Detection>& dets,
                               const std::string& extra_json_object) {
  json doc = json::object();
  if (!extra_json_object.empty()) doc = json::parse(extra_json_object);
  doc["scene"] = scene;
  json list = json::array();
  for (const auto& d : dets) {
    const auto& b = d.box.box;
    list.push_back({b.center.x, b.center.y, b.center.z, b.extents.x, b.extents.y, b.extents.z, b.yaw, d.box.label,
                    d.score});
  }
  doc["detections"] = list;
  return doc.dump(2) + "\n";
}

void write_detections(const std::filesystem::path& file, const std::string& scene, const std::vector<Detection>& dets,
                      const std::string& extra_json_object) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw InputError("cannot write " + file.string());
  out << detections_to_json(scene, dets, extra_json_object);
}

std::vector<Detection> parse_detections(const std::string& text, const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(origin + ": " + e.what());
  }
  if (!doc.is_object()) throw ParseError(origin + ": top level must be an object");
  for (const auto& [key, _] : doc.items()) {
    if (key != "scene" && key != "detections" && key != "config") {
      spdlog::warn("{}: ignoring unknown key '{}'", origin, key);
    }
  }
  auto scene = doc.find("scene");
  if (scene == doc.end() || !scene->is_string()) throw ParseError(origin + ": key 'scene' must be a string");
  auto list = doc.find("detections");
  if (list == doc.end() || !list->is_array()) throw ParseError(origin + ": key 'detections' must be an array");
  std::vector<Detection> out;
  for (std::size_t i = 0; i < list->size(); ++i) {
    const json& e = (*list)[i];
    const std::string where = origin + ": detections[" + std::to_string(i) + "]";
    if (!e.is_array() || e.size() != 9) throw ParseError(where + " must be [x,y,z,w,l,h,theta,class,score]");
    for (const auto& v : e)
      if (!v.is_number()) throw ParseError(where + " has a non-numeric entry");
    if (!e[7].is_number_integer()) throw ParseError(where + " class must be an integer");
    Detection d;
    d.scene = scene->get<std::string>();
    d.box.box.center = {e[0].get<double>(), e[1].get<double>(), e[2].get<double>()};
    d.box.box.extents = {e[3].get<double>(), e[4].get<double>(), e[5].get<double>()};
    d.box.box.yaw = e[6].get<double>();
    d.box.label = e[7].get<int>();
    d.score = e[8].get<double>();
    try {
      d.box.box.validate();
    } catch (const InputError& err) {
      throw ParseError(where + ": " + err.what());
    }
    if (!(d.score >= 0.0 && d.score <= 1.0)) throw ParseError(where + " score must lie in [0, 1]");
    out.push_back(d);
  }
  return out;
}

std::vector<Detection> read_detections(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw InputError("cannot read " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_detections(ss.str(), file.filename().string());
}

}  // namespace fusion3d
