#pragma once

#include <array>
#include <string>
#include <vector>

#include "fusion3d/geometry.hpp"
#include "fusion3d/kernels.hpp"

// Small surrogate encoders for the point and image streams. They preserve the
// interfaces the fusion modules consume (per-point features x^p and an L-level
// image feature pyramid) while staying cheap enough to gradcheck.
namespace fusion3d {

struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<std::array<double, 3>> colors;

  std::size_t size() const { return positions.size(); }
  // Throws InputError if empty, mismatched or non-finite.
  void validate() const;

  bool operator==(const PointCloud&) const = default;
};

// Keeps the lowest-index point in each occupied voxel. voxel_size <= 0 is a no-op.
PointCloud voxel_downsample(const PointCloud& pc, double voxel_size);

struct ProposalSet {
  Tensor coords;    // [M,3]
  Tensor features;  // [M,C]

  std::size_t size() const { return coords.empty() ? 0 : coords.rows(); }
};

// Farthest-point sampling starting from the lexicographically smallest point;
// distance ties go to the lowest index. Returns `count` distinct indices.
std::vector<std::size_t> farthest_point_sampling(const std::vector<Vec3>& points, std::size_t count);

// Parameter-free grouping: FPS centres and their radius neighbourhoods
// (nearest first, capped). Reusable across forward passes of the same cloud.
struct PointGrouping {
  std::vector<std::size_t> centers;
  std::vector<std::vector<std::size_t>> neighbors;
};

PointGrouping group_points(const PointCloud& pc, std::size_t num_centers, double radius, std::size_t max_neighbors);

struct PointEncoderConfig {
  std::size_t feature_dim = 64;
  std::size_t hidden_dim = 32;
  double radius = 0.3;
  std::size_t max_neighbors = 32;
};

struct PointEncoderCache {
  std::vector<std::size_t> used;                  // cloud indices fed to the MLP
  std::vector<std::vector<std::size_t>> argmax;   // per centre, per channel: row into `used`
  kernels::MlpCache mlp;
};

// Per-point MLP on (position, colour) followed by max-pooling over each group.
class PointEncoder {
 public:
  PointEncoder() = default;
  PointEncoder(std::string name, PointEncoderConfig config);

  void init(ParamStore& store, Rng& rng) const;
  // Returns one feature row per group centre: [centers, C].
  Tensor forward(const ParamStore& store, const PointCloud& pc, const PointGrouping& grouping,
                 PointEncoderCache* cache = nullptr) const;
  void backward(ParamStore& store, const PointEncoderCache& cache, const Tensor& dfeatures) const;

  const PointEncoderConfig& config() const { return config_; }

 private:
  std::string name_;
  PointEncoderConfig config_;
  kernels::Mlp mlp_;
};

// Seeds M proposals by FPS and pools their features. Throws InputError if the
// cloud has fewer than M points.
ProposalSet encode_points(const ParamStore& store, const PointEncoder& encoder, const PointCloud& pc, std::size_t M);

// ---- image stream ---------------------------------------------------------

inline constexpr std::size_t kPyramidLevels = 4;
inline constexpr std::size_t kRasterChannels = 4;  // r, g, b, depth

struct ImagePyramid {
  std::vector<Tensor> levels;  // level l: [H0 / 2^(l+1), W0 / 2^(l+1), C_img]
};

// Z-buffer splat of the cloud into an [H0, W0, 4] raster of (r, g, b, depth).
// Empty pixels are zero; points behind the camera or off-image are skipped.
Tensor rasterize_scene(const PointCloud& pc, const CameraModel& cam);

// Average-pools the raster to each pyramid resolution. Throws InputError unless
// H0 and W0 are divisible by 32.
std::vector<Tensor> pool_raster(const Tensor& raster, std::size_t levels = kPyramidLevels);

struct ImageEncoderConfig {
  std::size_t feature_dim = 32;
  std::size_t hidden_dim = 32;
};

struct ImageEncoderCache {
  std::vector<Tensor> pooled;
  std::vector<kernels::MlpCache> mlp;
};

// Pool-then-MLP pyramid: a per-pixel MLP per level on the pooled raster.
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(std::string name, ImageEncoderConfig config);

  void init(ParamStore& store, Rng& rng) const;
  ImagePyramid forward(const ParamStore& store, const Tensor& raster, ImageEncoderCache* cache = nullptr) const;
  ImagePyramid forward_pooled(const ParamStore& store, const std::vector<Tensor>& pooled,
                              ImageEncoderCache* cache = nullptr) const;
  void backward(ParamStore& store, const ImageEncoderCache& cache, const std::vector<Tensor>& dlevels) const;

 private:
  std::string name_;
  ImageEncoderConfig config_;
  std::vector<kernels::Mlp> levels_;
};

}  // namespace fusion3d
