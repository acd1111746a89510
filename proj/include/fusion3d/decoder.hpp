#pragma once

#include <array>
#include <string>
#include <vector>

#include "fusion3d/geometry.hpp"
#include "fusion3d/kernels.hpp"
#include "fusion3d/scene.hpp"

// Per-stage prediction heads, the cascade target assigner, the training
// objective and inference-time decoding.
namespace fusion3d {

inline constexpr std::size_t kRegressionOutputs = 8;  // six raw deltas, sin, cos
inline constexpr double kFocalGamma = 2.0;
inline constexpr double kFocalAlpha = 0.25;
inline constexpr double kClsWeight = 1.0;
inline constexpr double kRegWeight = 2.0;
inline constexpr double kCtrWeight = 1.0;

struct StagePrediction {
  Tensor logits;      // [M, K]
  Tensor regression;  // [M, 8] raw head output
  Tensor deltas;      // [M, 6] softplus of the first six columns
  std::vector<double> yaw;
  Tensor centerness;  // [M, 1] logits

  std::size_t size() const { return logits.empty() ? 0 : logits.rows(); }
};

struct StageHeadsCache {
  kernels::MlpCache cls, reg, ctr;
};

class StageHeads {
 public:
  StageHeads() = default;
  StageHeads(std::string name, std::size_t dim, std::size_t num_classes);

  // Classification bias starts at the focal prior; yaw starts facing +x.
  void init(ParamStore& store, Rng& rng) const;
  StagePrediction forward(const ParamStore& store, const Tensor& y, StageHeadsCache* cache = nullptr) const;
  // Gradients w.r.t. logits, raw regression outputs and centerness logits.
  Tensor backward(ParamStore& store, const StageHeadsCache& cache, const Tensor& dlogits, const Tensor& dregression,
                  const Tensor& dcenterness) const;

  const kernels::Mlp& cls() const { return cls_; }
  const kernels::Mlp& reg() const { return reg_; }
  const kernels::Mlp& ctr() const { return ctr_; }
  std::size_t num_classes() const { return num_classes_; }

 private:
  std::size_t num_classes_ = 0;
  kernels::Mlp cls_, reg_, ctr_;
};

// Decodes query i of a stage prediction relative to its coordinate.
OrientedBox3D decode_box(const StagePrediction& pred, std::size_t i, const Vec3& coord);
// Moves every query to its decoded centre.
Tensor update_coords(const StagePrediction& pred, const Tensor& coords);

// ---- assigner ---------------------------------------------------------------

struct AssignerSchedule {
  std::vector<double> margins = {0.2, 0.1, 0.0};
  std::vector<std::size_t> topk = {8, 6, 4};

  // Stages past the end of the schedule reuse its last entry.
  double margin(std::size_t stage) const;
  std::size_t k(std::size_t stage) const;
};

struct Assignment {
  std::vector<long> gt;             // matched GT index or -1
  std::vector<double> ctr_target;   // centerness target of the match
  std::vector<DeltaSextet> deltas;  // GT face distances from the query
  std::size_t num_pos = 0;

  bool positive(std::size_t i) const { return gt[i] >= 0; }
};

// Stage index is zero-based. A query is a candidate for a GT when it lies in
// the GT grown by the stage margin. Each query is claimed by the candidate GT
// where its centerness target is highest (ties: nearer centre, then lower GT
// index); each GT then keeps its top-k claims by centerness (ties: nearer
// centre, then lower query index).
Assignment assign_targets(const Tensor& coords, const std::vector<LabeledBox>& gts, std::size_t stage,
                          const AssignerSchedule& schedule = {});

// ---- loss -------------------------------------------------------------------

struct LossBreakdown {
  double cls = 0.0;
  double reg = 0.0;
  double ctr = 0.0;
  double total = 0.0;
  std::size_t num_pos = 0;
};

struct StageLossGrad {
  Tensor dlogits, dregression, dcenterness;
};

// Sigmoid focal loss of one logit against a binary target, and its derivative.
double focal_loss(double logit, bool positive, double* dlogit = nullptr);

// Rotated-box regression surrogate for one positive, evaluated in the GT frame:
// 1 - kappa * IoU + rho^2 / c^2 where IoU and the enclosing diagonal c are those
// of the axis-aligned boxes spanned by predicted and target face distances, rho
// is their centre distance and kappa = (1 + cos(yaw error)) / 2. `target` may
// contain negative distances for queries outside the box.
double box_regression_loss(const std::array<double, kRegressionOutputs>& raw, const DeltaSextet& target,
                           double target_yaw, std::array<double, kRegressionOutputs>* draw = nullptr);

// Binary cross-entropy against a soft target minus the target's entropy, so
// a perfect prediction scores zero.
double centerness_loss(double logit, double target, double* dlogit = nullptr);

// Unweighted per-stage terms, each normalised by max(1, positives). When
// `grad` is non-null it receives d(total)/d(outputs) scaled by `scale`.
LossBreakdown stage_loss(const StagePrediction& pred, const Assignment& assignment,
                         const std::vector<LabeledBox>& gts, StageLossGrad* grad = nullptr, double scale = 1.0);

// Stage average with total = 1 cls + 2 reg + 1 ctr.
LossBreakdown combine_stage_losses(const std::vector<LossBreakdown>& stages);

// ---- inference ----------------------------------------------------------------

struct ScoredBox {
  LabeledBox box;
  double score = 0.0;
};

// Per query: best class, score = class probability * centerness probability.
std::vector<ScoredBox> score_queries(const StagePrediction& pred, const Tensor& coords);
// Class-wise greedy suppression; returns survivors above `score_threshold`
// sorted by descending score (ties keep query order).
std::vector<ScoredBox> class_nms(std::vector<ScoredBox> boxes, double iou_threshold = 0.5,
                                 double score_threshold = 0.05);

}  // namespace fusion3d
