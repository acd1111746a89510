#include "fusion3d/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fusion3d/errors.hpp"

namespace fusion3d {

namespace {
constexpr double kPriorProbability = 0.01;
constexpr double kMinYawNorm = 1e-12;
}  // namespace

StageHeads::StageHeads(std::string name, std::size_t dim, std::size_t num_classes)
    : num_classes_(num_classes),
      cls_(name + ".cls", kernels::MlpSpec{{dim, dim, num_classes}}),
      reg_(name + ".reg", kernels::MlpSpec{{dim, dim, kRegressionOutputs}}),
      ctr_(name + ".ctr", kernels::MlpSpec{{dim, dim, 1}}) {
  if (num_classes == 0) throw ConfigError("heads need at least one class");
}

void StageHeads::init(ParamStore& store, Rng& rng) const {
  cls_.init(store, rng, 0.1);
  reg_.init(store, rng, 0.1);
  ctr_.init(store, rng, 0.1);
  store.value(cls_.layer(1).bias_name()).fill(-std::log((1.0 - kPriorProbability) / kPriorProbability));
  store.value(reg_.layer(1).bias_name())[7] = 1.0;
}

StagePrediction StageHeads::forward(const ParamStore& store, const Tensor& y, StageHeadsCache* cache) const {
  StagePrediction p;
  p.logits = cls_.forward(store, y, cache ? &cache->cls : nullptr);
  p.regression = reg_.forward(store, y, cache ? &cache->reg : nullptr);
  p.centerness = ctr_.forward(store, y, cache ? &cache->ctr : nullptr);
  const std::size_t M = y.rows();
  p.deltas = Tensor({M, 6});
  p.yaw.resize(M);
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t k = 0; k < 6; ++k) p.deltas(i, k) = kernels::softplus(p.regression(i, k));
    p.yaw[i] = std::atan2(p.regression(i, 6), p.regression(i, 7));
  }
  return p;
}

Tensor StageHeads::backward(ParamStore& store, const StageHeadsCache& cache, const Tensor& dlogits,
                            const Tensor& dregression, const Tensor& dcenterness) const {
  Tensor dy = cls_.backward(store, cache.cls, dlogits);
  dy += reg_.backward(store, cache.reg, dregression);
  dy += ctr_.backward(store, cache.ctr, dcenterness);
  return dy;
}

OrientedBox3D decode_box(const StagePrediction& pred, std::size_t i, const Vec3& coord) {
  DeltaSextet d;
  for (std::size_t k = 0; k < 6; ++k) d[k] = pred.deltas(i, k);
  OrientedBox3D b;
  b.yaw = pred.yaw[i];
  b.extents = {d[0] + d[1], d[2] + d[3], d[4] + d[5]};
  b.center = apply_center_update(coord, d, b.yaw);
  return b;
}

Tensor update_coords(const StagePrediction& pred, const Tensor& coords) {
  Tensor out = Tensor::zeros_like(coords);
  for (std::size_t i = 0; i < coords.rows(); ++i) {
    const Vec3 c = decode_box(pred, i, {coords(i, 0), coords(i, 1), coords(i, 2)}).center;
    out(i, 0) = c.x;
    out(i, 1) = c.y;
    out(i, 2) = c.z;
  }
  return out;
}

// ---- assigner ---------------------------------------------------------------

double AssignerSchedule::margin(std::size_t stage) const {
  if (margins.empty()) throw ConfigError("assigner schedule has no margins");
  return margins[std::min(stage, margins.size() - 1)];
}

std::size_t AssignerSchedule::k(std::size_t stage) const {
  if (topk.empty()) throw ConfigError("assigner schedule has no top-k values");
  return topk[std::min(stage, topk.size() - 1)];
}

Assignment assign_targets(const Tensor& coords, const std::vector<LabeledBox>& gts, std::size_t stage,
                          const AssignerSchedule& schedule) {
  const std::size_t M = coords.rows();
  Assignment a;
  a.gt.assign(M, -1);
  a.ctr_target.assign(M, 0.0);
  a.deltas.assign(M, DeltaSextet{});
  const double margin = schedule.margin(stage);
  const std::size_t k = schedule.k(stage);

  struct Candidate {
    double ctr, dist;
    std::size_t query;
  };
  // Each query first picks its best GT, then every GT keeps its top-k claims.
  // Resolving conflicts before the cut keeps stage-t positives a subset of the
  // earlier stages' positives.
  std::vector<std::vector<Candidate>> claims(gts.size());
  std::vector<double> best(M, -1.0);
  for (std::size_t i = 0; i < M; ++i) {
    const Vec3 p{coords(i, 0), coords(i, 1), coords(i, 2)};
    long pick = -1;
    Candidate top{-1.0, 0.0, i};
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const OrientedBox3D& box = gts[g].box;
      if (!box_contains(box, p, margin)) continue;
      const Candidate c{centerness_target(encode_deltas(box, p)), (p - box.center).norm(), i};
      if (pick < 0 || c.ctr > top.ctr || (c.ctr == top.ctr && c.dist < top.dist)) {
        pick = static_cast<long>(g);
        top = c;
      }
    }
    if (pick >= 0) claims[static_cast<std::size_t>(pick)].push_back(top);
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    auto& cand = claims[g];
    std::sort(cand.begin(), cand.end(), [](const Candidate& x, const Candidate& y) {
      if (x.ctr != y.ctr) return x.ctr > y.ctr;
      if (x.dist != y.dist) return x.dist < y.dist;
      return x.query < y.query;
    });
    if (cand.size() > k) cand.resize(k);
    for (const auto& c : cand) {
      best[c.query] = c.ctr;
      a.gt[c.query] = static_cast<long>(g);
    }
  }
  for (std::size_t i = 0; i < M; ++i) {
    if (a.gt[i] < 0) continue;
    const OrientedBox3D& box = gts[static_cast<std::size_t>(a.gt[i])].box;
    a.deltas[i] = encode_deltas(box, {coords(i, 0), coords(i, 1), coords(i, 2)});
    a.ctr_target[i] = best[i];
    ++a.num_pos;
  }
  return a;
}

// ---- loss -------------------------------------------------------------------

double focal_loss(double x, bool positive, double* dlogit) {
  const double p = kernels::sigmoid(x);
  if (positive) {
    const double logp = kernels::log_sigmoid(x);
    const double q = 1.0 - p;
    const double qg = q * q;
    if (dlogit) *dlogit = kFocalAlpha * qg * (kFocalGamma * p * logp - q);
    return -kFocalAlpha * qg * logp;
  }
  const double logq = kernels::log_sigmoid(-x);
  const double pg = p * p;
  if (dlogit) *dlogit = (1.0 - kFocalAlpha) * pg * (p - kFocalGamma * (1.0 - p) * logq);
  return -(1.0 - kFocalAlpha) * pg * logq;
}

double box_regression_loss(const std::array<double, kRegressionOutputs>& raw, const DeltaSextet& t, double target_yaw,
                           std::array<double, kRegressionOutputs>* draw) {
  double d[6];
  for (std::size_t k = 0; k < 6; ++k) d[k] = kernels::softplus(raw[k]);

  double inter[3], ext_p[3], ext_g[3], enc[3], dc[3];
  for (std::size_t a = 0; a < 3; ++a) {
    const double a1 = d[2 * a], a0 = -d[2 * a + 1];
    const double b1 = t[2 * a], b0 = -t[2 * a + 1];
    inter[a] = std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
    ext_p[a] = a1 - a0;
    ext_g[a] = b1 - b0;
    enc[a] = std::max(a1, b1) - std::min(a0, b0);
    dc[a] = 0.5 * (a1 + a0) - 0.5 * (b1 + b0);
  }
  const double I = inter[0] * inter[1] * inter[2];
  const double Vp = ext_p[0] * ext_p[1] * ext_p[2];
  const double Vg = ext_g[0] * ext_g[1] * ext_g[2];
  const double U = Vp + Vg - I;
  const double iou = U > 0 ? I / U : 0.0;
  const double rho2 = dc[0] * dc[0] + dc[1] * dc[1] + dc[2] * dc[2];
  const double c2 = std::max(enc[0] * enc[0] + enc[1] * enc[1] + enc[2] * enc[2], 1e-12);

  const double s = raw[6], c = raw[7];
  const double n = std::max(std::sqrt(s * s + c * c), kMinYawNorm);
  const double S = std::sin(target_yaw), C = std::cos(target_yaw);
  const double cosd = (c * C + s * S) / n;
  const double kappa = 0.5 * (1.0 + cosd);
  const double loss = 1.0 - kappa * iou + rho2 / c2;
  if (!draw) return loss;

  const double dL_diou = -kappa;
  const double dL_dkappa = -iou;
  const double dL_drho2 = 1.0 / c2;
  const double dL_dc2 = -rho2 / (c2 * c2);
  const double diou_dI = U > 0 ? (U + I) / (U * U) : 0.0;
  const double diou_dVp = U > 0 ? -I / (U * U) : 0.0;

  double dd[6] = {0, 0, 0, 0, 0, 0};
  for (std::size_t a = 0; a < 3; ++a) {
    const double a1 = d[2 * a], a0 = -d[2 * a + 1];
    const double b1 = t[2 * a], b0 = -t[2 * a + 1];
    const double other_inter = inter[(a + 1) % 3] * inter[(a + 2) % 3];
    const double other_ext = ext_p[(a + 1) % 3] * ext_p[(a + 2) % 3];
    double g1 = 0.0, g0 = 0.0;  // d/da1, d/da0
    if (inter[a] > 0) {
      const double dI = dL_diou * diou_dI * other_inter;
      if (a1 < b1) g1 += dI;
      if (a0 > b0) g0 -= dI;
    }
    const double dV = dL_diou * diou_dVp * other_ext;
    g1 += dV;
    g0 -= dV;
    g1 += dL_drho2 * dc[a];
    g0 += dL_drho2 * dc[a];
    if (a1 > b1) g1 += dL_dc2 * 2.0 * enc[a];
    if (a0 < b0) g0 -= dL_dc2 * 2.0 * enc[a];
    dd[2 * a] = g1;
    dd[2 * a + 1] = -g0;
  }
  for (std::size_t k = 0; k < 6; ++k) (*draw)[k] = dd[k] * kernels::sigmoid(raw[k]);
  const double n3 = n * n * n;
  const double dcos_ds = S / n - (c * C + s * S) * s / n3;
  const double dcos_dc = C / n - (c * C + s * S) * c / n3;
  (*draw)[6] = dL_dkappa * 0.5 * dcos_ds;
  (*draw)[7] = dL_dkappa * 0.5 * dcos_dc;
  return loss;
}

double centerness_loss(double x, double target, double* dlogit) {
  const double bce = -(target * kernels::log_sigmoid(x) + (1.0 - target) * kernels::log_sigmoid(-x));
  double entropy = 0.0;
  if (target > 0.0 && target < 1.0) entropy = -(target * std::log(target) + (1.0 - target) * std::log(1.0 - target));
  if (dlogit) *dlogit = kernels::sigmoid(x) - target;
  return std::max(0.0, bce - entropy);
}

LossBreakdown stage_loss(const StagePrediction& pred, const Assignment& as, const std::vector<LabeledBox>& gts,
                         StageLossGrad* grad, double scale) {
  const std::size_t M = pred.size(), K = pred.logits.cols();
  if (as.gt.size() != M) throw DimensionError("stage_loss: assignment size does not match predictions");
  LossBreakdown out;
  out.num_pos = as.num_pos;
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, as.num_pos));
  if (grad) {
    grad->dlogits = Tensor::zeros_like(pred.logits);
    grad->dregression = Tensor::zeros_like(pred.regression);
    grad->dcenterness = Tensor::zeros_like(pred.centerness);
  }
  for (std::size_t i = 0; i < M; ++i) {
    const int label = as.positive(i) ? gts[static_cast<std::size_t>(as.gt[i])].label : -1;
    for (std::size_t k = 0; k < K; ++k) {
      double g = 0.0;
      out.cls += focal_loss(pred.logits(i, k), static_cast<int>(k) == label, grad ? &g : nullptr);
      if (grad) grad->dlogits(i, k) = scale * kClsWeight * norm * g;
    }
    if (!as.positive(i)) continue;
    std::array<double, kRegressionOutputs> raw{}, draw{};
    for (std::size_t k = 0; k < kRegressionOutputs; ++k) raw[k] = pred.regression(i, k);
    const double yaw = gts[static_cast<std::size_t>(as.gt[i])].box.yaw;
    out.reg += box_regression_loss(raw, as.deltas[i], yaw, grad ? &draw : nullptr);
    double gc = 0.0;
    out.ctr += centerness_loss(pred.centerness(i, 0), as.ctr_target[i], grad ? &gc : nullptr);
    if (grad) {
      for (std::size_t k = 0; k < kRegressionOutputs; ++k) grad->dregression(i, k) = scale * kRegWeight * norm * draw[k];
      grad->dcenterness(i, 0) = scale * kCtrWeight * norm * gc;
    }
  }
  out.cls *= norm;
  out.reg *= norm;
  out.ctr *= norm;
  out.total = kClsWeight * out.cls + kRegWeight * out.reg + kCtrWeight * out.ctr;
  return out;
}

LossBreakdown combine_stage_losses(const std::vector<LossBreakdown>& stages) {
  LossBreakdown out;
  if (stages.empty()) return out;
  for (const auto& s : stages) {
    out.cls += s.cls;
    out.reg += s.reg;
    out.ctr += s.ctr;
    out.num_pos += s.num_pos;
  }
  const double n = static_cast<double>(stages.size());
  out.cls /= n;
  out.reg /= n;
  out.ctr /= n;
  out.total = kClsWeight * out.cls + kRegWeight * out.reg + kCtrWeight * out.ctr;
  return out;
}

// ---- inference ----------------------------------------------------------------

std::vector<ScoredBox> score_queries(const StagePrediction& pred, const Tensor& coords) {
  std::vector<ScoredBox> out;
  const std::size_t K = pred.logits.cols();
  for (std::size_t i = 0; i < pred.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (pred.logits(i, k) > pred.logits(i, best)) best = k;
    ScoredBox b;
    b.box.box = decode_box(pred, i, {coords(i, 0), coords(i, 1), coords(i, 2)});
    b.box.label = static_cast<int>(best);
    b.score = kernels::sigmoid(pred.logits(i, best)) * kernels::sigmoid(pred.centerness(i, 0));
    out.push_back(b);
  }
  return out;
}

std::vector<ScoredBox> class_nms(std::vector<ScoredBox> boxes, double iou_threshold, double score_threshold) {
  std::erase_if(boxes, [&](const ScoredBox& b) { return !(b.score >= score_threshold); });
  std::stable_sort(boxes.begin(), boxes.end(), [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
  std::vector<ScoredBox> kept;
  for (const auto& b : boxes) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.box.label == b.box.label && rotated_iou3d(k.box.box, b.box.box) >= iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(b);
  }
  return kept;
}

}  // namespace fusion3d
