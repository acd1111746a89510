#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fusion3d/model.hpp"
#include "fusion3d/synthdata.hpp"

namespace fusion3d {

// Every hyperparameter of a run, stored as one flat JSON object.
struct RunConfig {
  ModelConfig model;

  double lr = 1e-4;
  double lr_decay = 0.1;
  std::vector<std::size_t> milestones = {8, 11};  // epochs after which lr is scaled
  double weight_decay = 0.01;
  std::size_t batch_size = 4;
  std::size_t epochs = 12;
  std::size_t max_steps = 0;  // 0 = no limit
  double grad_clip = 10.0;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;  // epochs; 0 = only after the last one

  std::size_t num_points = 2048;
  double voxel_size = 0.0;  // <= 0 disables downsampling
  std::size_t min_boxes = 3;
  std::size_t max_boxes = 6;
  double train_fraction = 0.8;
  double score_threshold = 0.05;
  double nms_iou = 0.5;

  // Throws ConfigError naming the field.
  void validate() const;

  SceneSpec scene_spec() const;
  // Learning rate during zero-based `epoch`.
  double lr_at(std::size_t epoch) const;

  std::string to_json() const;
  // Unknown keys and ill-typed values throw ConfigError; absent keys keep
  // their defaults.
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::string& path);

  // Overrides one field from `key=value`, the value parsed as JSON (bare
  // strings are not needed by any field).
  void set(const std::string& assignment);
};

}  // namespace fusion3d
