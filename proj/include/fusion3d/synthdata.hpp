#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fusion3d/scene.hpp"

// Synthetic indoor scenes and their on-disk archive format.
namespace fusion3d {

struct SceneSpec {
  std::size_t num_points = 2048;
  std::size_t min_boxes = 3;
  std::size_t max_boxes = 6;
  std::size_t num_classes = 5;
  Vec3 room{6.0, 6.0, 3.0};
  int image_width = 64;
  int image_height = 64;
  double max_pair_iou = 0.05;
  std::size_t min_points_per_box = 20;
  std::size_t max_attempts = 1000;

  void validate() const;
};

// Nominal (w, l, h) and palette colour of a class; classes past the table wrap.
Vec3 class_extents(int label);
std::array<double, 3> class_color(int label);

// Deterministic in (seed, spec). Throws GenerationError when the boxes cannot
// be placed within spec.max_attempts rejections.
SceneSample generate_scene(std::uint64_t seed, const SceneSpec& spec = {}, const std::string& id = "scene");

// Scene `index` of a dataset generated from `seed`.
std::string scene_id(std::size_t index);
std::uint64_t scene_seed(std::uint64_t dataset_seed, std::size_t index);

// ---- archive -------------------------------------------------------------------

inline constexpr int kSceneFormatVersion = 1;

// Shortest decimal that parses back to the same double.
std::string format_real(double v);

// Writes points.txt, camera.json, boxes.json and meta.json into `dir`.
void write_scene(const SceneSample& scene, const std::filesystem::path& dir);
// Throws ParseError naming the file and line or key on malformed input and
// InputError when a file is missing. Unknown JSON keys are logged and ignored.
SceneSample read_scene(const std::filesystem::path& dir);

// Deterministic shuffle split; throws InputError for fewer than two scenes or a
// fraction outside (0, 1). Both sides are non-empty.
std::pair<std::vector<std::string>, std::vector<std::string>> split_dataset(const std::vector<std::string>& ids,
                                                                          double train_fraction, std::uint64_t seed);

}  // namespace fusion3d
