#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fusion3d/backbones.hpp"
#include "fusion3d/geometry.hpp"

namespace fusion3d {

struct LabeledBox {
  OrientedBox3D box;
  int label = 0;

  bool operator==(const LabeledBox&) const = default;
};

// One synthetic indoor scene: coloured cloud, calibrated camera and GT boxes.
struct SceneSample {
  std::string id;
  std::uint64_t seed = 0;
  PointCloud cloud;
  CameraModel camera;
  std::vector<LabeledBox> boxes;
};

}  // namespace fusion3d
