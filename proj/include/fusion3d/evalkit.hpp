#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fusion3d/scene.hpp"

// Greedy detection matching and all-point-interpolated average precision.
namespace fusion3d {

struct Detection {
  LabeledBox box;
  double score = 0.0;
  std::string scene;
};

using GroundTruthMap = std::map<std::string, std::vector<LabeledBox>>;

// Descending score; ties by scene id, then input order.
void sort_detections(std::vector<Detection>& dets);

// TP/FP flag per detection of one class, in the order given (callers sort
// first). Each detection takes the highest-IoU unmatched GT of its scene and
// class with IoU >= threshold.
std::vector<bool> match_detections(const std::vector<Detection>& dets, const GroundTruthMap& gts, int label,
                                   double iou_threshold);

struct PRCurve {
  std::vector<double> recall;
  std::vector<double> precision;
  double ap = 0.0;
  bool defined = true;  // false when there are no GTs; ap is then 0
};

PRCurve average_precision(const std::vector<bool>& flags, std::size_t num_gts);

struct MapReport {
  std::vector<double> thresholds;
  std::size_t num_classes = 0;
  std::vector<std::size_t> num_gts;       // per class
  std::vector<std::vector<double>> ap;    // [threshold][class]
  std::vector<double> map;                // per threshold, over classes with GTs
};

// Every detection and GT label must lie in [0, num_classes).
MapReport map_at_iou(std::vector<Detection> dets, const GroundTruthMap& gts, std::size_t num_classes,
                     const std::vector<double>& thresholds = {0.25, 0.5});

// ---- detection files -------------------------------------------------------------

// {"scene": id, "detections": [[x,y,z,w,l,h,theta,class,score], ...]}, in the
// order given. `extra` keys (e.g. an echoed config) are merged at top level.
std::string detections_to_json(const std::string& scene, const std::vector<Detection>& dets,
                               const std::string& extra_json_object = "");
void write_detections(const std::filesystem::path& file, const std::string& scene, const std::vector<Detection>& dets,
                      const std::string& extra_json_object = "");
// Throws ParseError naming the key or entry.
std::vector<Detection> parse_detections(const std::string& text, const std::string& origin = "detections");
std::vector<Detection> read_detections(const std::filesystem::path& file);

}  // namespace fusion3d
