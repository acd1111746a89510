#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fusion3d/acmt.hpp"
#include "fusion3d/backbones.hpp"
#include "fusion3d/decoder.hpp"
#include "fusion3d/grm.hpp"
#include "fusion3d/scene.hpp"

// The full detector: surrogate backbones, graph reasoning, cross-modal
// transformer stacks and cascaded heads.
namespace fusion3d {

struct ModelConfig {
  std::size_t num_queries = 64;
  std::size_t feature_dim = 64;
  std::size_t image_dim = 32;
  std::size_t heads = 4;
  std::size_t acmt_layers = 2;
  std::size_t stages = 3;
  std::vector<std::size_t> grm_scales = {5, 10, 20};
  std::size_t num_classes = 5;
  std::size_t context_points = 256;
  std::size_t edge_dim = 32;
  std::size_t ffn_dim = 128;
  std::size_t point_hidden = 32;
  std::size_t image_hidden = 32;
  std::size_t sampling_points = 4;
  std::size_t idw_k = 8;
  double point_radius = 0.3;
  std::size_t max_group = 32;

  // Throws ConfigError on any inconsistent field.
  void validate() const;
};

// Inference-time module switches.
struct Ablation {
  bool no_grm = false;
  bool no_gating = false;
  bool point_only = false;
  std::optional<std::size_t> single_scale;

  // Accepts "", "none", "no-grm", "no-gating", "point-only" and
  // "single-scale-k=K"; throws ConfigError otherwise.
  static Ablation parse(const std::string& text);
  std::string name() const;
};

// Parameter-free per-scene preprocessing shared by every forward pass.
struct PreparedScene {
  std::string id;
  PointCloud cloud;
  CameraModel camera;
  std::vector<LabeledBox> boxes;
  PointGrouping grouping;     // context centres; the first M seed the queries
  Tensor context_coords;      // [N_ctx, 3]
  std::vector<Tensor> pooled;  // raster pyramid
  Vec3 lower, upper;           // cloud bounds
};

PreparedScene prepare_scene(const SceneSample& scene, const ModelConfig& config);

struct DetectorCache {
  PointEncoderCache points;
  ImageEncoderCache image;
  Tensor context;  // [N_ctx, C]
  ImagePyramid pyramid;
  struct Stage {
    Tensor coords;
    QueryState state;
    kernels::MlpCache pos;
    bool has_grm = false;
    GrmCache grm;
    std::vector<AcmtLayerCache> acmt;
    std::vector<Tensor> acmt_inputs;
    StageHeadsCache heads;
  };
  std::vector<Stage> stages;
};

struct DetectorOutput {
  std::vector<Tensor> coords;  // coordinates each stage was evaluated at
  std::vector<StagePrediction> predictions;
  Tensor final_coords;
};

class Detector {
 public:
  explicit Detector(ModelConfig config);

  void init(ParamStore& store, std::uint64_t seed) const;
  const ModelConfig& config() const { return config_; }

  // `fixed_coords` (one [M,3] per stage) replaces the cascaded coordinate
  // updates; used to make the loss a smooth function of the parameters.
  DetectorOutput forward(const ParamStore& store, const PreparedScene& scene, const Ablation& ablation = {},
                         DetectorCache* cache = nullptr, const std::vector<Tensor>* fixed_coords = nullptr) const;

  // Forward, stage assignment and loss; with `accumulate` the gradient of
  // `scale * total` is added to the store.
  LossBreakdown loss(ParamStore& store, const PreparedScene& scene, bool accumulate, double scale = 1.0,
                     const std::vector<Tensor>* fixed_coords = nullptr) const;

  // Final-stage boxes after class-wise NMS and score threshold.
  std::vector<ScoredBox> detect(const ParamStore& store, const PreparedScene& scene, const Ablation& ablation = {},
                                double score_threshold = 0.05, double nms_iou = 0.5) const;

  std::size_t grm_count() const { return grms_.size(); }

 private:
  void backward(ParamStore& store, const PreparedScene& scene, const DetectorCache& cache,
                const std::vector<StageLossGrad>& grads) const;

  ModelConfig config_;
  PointEncoder point_encoder_;
  ImageEncoder image_encoder_;
  std::vector<GraphReasoning> grms_;  // before stage 1 and after stage 1
  std::vector<kernels::Mlp> pos_;
  std::vector<std::vector<AcmtLayer>> acmt_;
  std::vector<StageHeads> heads_;
};

}  // namespace fusion3d
