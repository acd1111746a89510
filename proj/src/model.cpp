#include "fusion3d/model.hpp"

#include <algorithm>
#include <limits>

#include "fusion3d/errors.hpp"

namespace fusion3d {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (num_queries == 0) fail("num_queries must be positive");
  if (context_points < num_queries) fail("context_points must be at least num_queries");
  if (feature_dim == 0 || image_dim == 0) fail("feature widths must be positive");
  if (heads == 0 || feature_dim % heads != 0) fail("heads must divide the feature width");
  if (stages == 0) fail("stages must be at least 1");
  if (acmt_layers == 0) fail("acmt_layers must be at least 1");
  if (grm_scales.empty()) fail("grm_scales must not be empty");
  for (auto k : grm_scales)
    if (k == 0) fail("grm_scales entries must be positive");
  if (num_classes == 0) fail("num_classes must be positive");
  if (edge_dim == 0 || ffn_dim == 0 || point_hidden == 0 || image_hidden == 0) fail("hidden widths must be positive");
  if (sampling_points == 0 || idw_k == 0 || max_group == 0) fail("sampling counts must be positive");
  if (!(point_radius > 0)) fail("point_radius must be positive");
}

Ablation Ablation::parse(const std::string& text) {
  Ablation a;
  if (text.empty() || text == "none") return a;
  if (text == "no-grm") {
    a.no_grm = true;
  } else if (text == "no-gating") {
    a.no_gating = true;
  } else if (text == "point-only") {
    a.point_only = true;
  } else if (text.rfind("single-scale-k=", 0) == 0) {
    const std::string num = text.substr(15);
    std::size_t used = 0;
    unsigned long k = 0;
    try {
      k = std::stoul(num, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (num.empty() || used != num.size() || k == 0) throw ConfigError("bad ablation '" + text + "'");
    a.single_scale = k;
  } else {
    throw ConfigError("unknown ablation '" + text + "' (expected no-grm, no-gating, point-only or single-scale-k=K)");
  }
  return a;
}

std::string Ablation::name() const {
  if (no_grm) return "no-grm";
  if (no_gating) return "no-gating";
  if (point_only) return "point-only";
  if (single_scale) return "single-scale-k=" + std::to_string(*single_scale);
  return "none";
}

PreparedScene prepare_scene(const SceneSample& scene, const ModelConfig& config) {
  config.validate();
  scene.cloud.validate();
  scene.camera.validate();
  if (scene.cloud.size() < config.num_queries) {
    throw InputError("scene " + scene.id + " has " + std::to_string(scene.cloud.size()) + " points, need at least " +
                     std::to_string(config.num_queries));
  }
  PreparedScene p;
  p.id = scene.id;
  p.cloud = scene.cloud;
  p.camera = scene.camera;
  p.boxes = scene.boxes;
  const std::size_t n_ctx = std::min(config.context_points, scene.cloud.size());
  p.grouping = group_points(p.cloud, n_ctx, config.point_radius, config.max_group);
  p.context_coords = Tensor({n_ctx, 3});
  for (std::size_t i = 0; i < n_ctx; ++i) {
    const Vec3& q = p.cloud.positions[p.grouping.centers[i]];
    p.context_coords(i, 0) = q.x;
    p.context_coords(i, 1) = q.y;
    p.context_coords(i, 2) = q.z;
  }
  p.pooled = pool_raster(rasterize_scene(p.cloud, p.camera), kPyramidLevels);
  const double inf = std::numeric_limits<double>::infinity();
  p.lower = {inf, inf, inf};
  p.upper = {-inf, -inf, -inf};
  for (const auto& q : p.cloud.positions) {
    p.lower = {std::min(p.lower.x, q.x), std::min(p.lower.y, q.y), std::min(p.lower.z, q.z)};
    p.upper = {std::max(p.upper.x, q.x), std::max(p.upper.y, q.y), std::max(p.upper.z, q.z)};
  }
  return p;
}

namespace {

constexpr double kBoundsSlack = 0.5;

Tensor centered(const Tensor& coords, const PreparedScene& s) {
  const Vec3 mid = (s.lower + s.upper) * 0.5;
  Tensor out = coords;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    out(i, 0) -= mid.x;
    out(i, 1) -= mid.y;
    out(i, 2) -= mid.z;
  }
  return out;
}

void clamp_to_scene(Tensor& coords, const PreparedScene& s) {
  const double lo[3] = {s.lower.x - kBoundsSlack, s.lower.y - kBoundsSlack, s.lower.z - kBoundsSlack};
  const double hi[3] = {s.upper.x + kBoundsSlack, s.upper.y + kBoundsSlack, s.upper.z + kBoundsSlack};
  for (std::size_t i = 0; i < coords.rows(); ++i)
    for (std::size_t a = 0; a < 3; ++a) coords(i, a) = std::clamp(coords(i, a), lo[a], hi[a]);
}

}  // namespace

Detector::Detector(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t C = config_.feature_dim;
  point_encoder_ = PointEncoder("point_encoder", {C, config_.point_hidden, config_.point_radius, config_.max_group});
  image_encoder_ = ImageEncoder("image_encoder", {config_.image_dim, config_.image_hidden});
  GrmConfig gc{C, config_.edge_dim, config_.grm_scales, config_.idw_k};
  for (std::size_t g = 0; g < std::min<std::size_t>(2, config_.stages); ++g) {
    grms_.emplace_back("grm" + std::to_string(g), gc);
  }
  AcmtConfig ac{C, config_.image_dim, config_.heads, kPyramidLevels, config_.sampling_points, config_.ffn_dim};
  for (std::size_t t = 0; t < config_.stages; ++t) {
    const std::string p = "stage" + std::to_string(t);
    pos_.emplace_back(p + ".pos", kernels::MlpSpec{{3, C, C}});
    acmt_.emplace_back();
    for (std::size_t l = 0; l < config_.acmt_layers; ++l) acmt_.back().emplace_back(p + ".acmt" + std::to_string(l), ac);
    heads_.emplace_back(p + ".heads", C, config_.num_classes);
  }
}

void Detector::init(ParamStore& store, std::uint64_t seed) const {
  Rng rng(seed);
  point_encoder_.init(store, rng);
  image_encoder_.init(store, rng);
  for (const auto& g : grms_) g.init(store, rng);
  for (std::size_t t = 0; t < config_.stages; ++t) {
    pos_[t].init(store, rng);
    for (const auto& l : acmt_[t]) l.init(store, rng);
    heads_[t].init(store, rng);
  }
}

DetectorOutput Detector::forward(const ParamStore& store, const PreparedScene& scene, const Ablation& ablation,
                                 DetectorCache* cache, const std::vector<Tensor>* fixed_coords) const {
  const std::size_t M = config_.num_queries;
  if (scene.context_coords.rows() < M) throw InputError("scene " + scene.id + " was prepared with too few context points");
  if (fixed_coords && fixed_coords->size() != config_.stages) {
    throw DimensionError("fixed coordinates must provide one tensor per stage");
  }
  if (ablation.single_scale &&
      std::find(config_.grm_scales.begin(), config_.grm_scales.end(), *ablation.single_scale) ==
          config_.grm_scales.end()) {
    throw ConfigError("ablation scale k=" + std::to_string(*ablation.single_scale) + " is not a configured GRM scale");
  }
  DetectorCache local;
  DetectorCache& c = cache ? *cache : local;
  c = DetectorCache{};
  c.context = point_encoder_.forward(store, scene.cloud, scene.grouping, cache ? &c.points : nullptr);
  c.pyramid = image_encoder_.forward_pooled(store, scene.pooled, cache ? &c.image : nullptr);

  DetectorOutput out;
  Tensor coords = scene.context_coords.slice_rows(0, M);
  Tensor y = c.context.slice_rows(0, M);
  GrmOptions grm_options;
  grm_options.only_scale = ablation.single_scale;
  AcmtOptions acmt_options{ablation.no_gating};
  c.stages.resize(config_.stages);
  for (std::size_t t = 0; t < config_.stages; ++t) {
    auto& st = c.stages[t];
    if (fixed_coords) {
      coords = (*fixed_coords)[t];
      require_shape(coords, {M, 3}, "fixed coordinates");
    }
    st.coords = coords;
    y += pos_[t].forward(store, centered(coords, scene), cache ? &st.pos : nullptr);
    if (t < grms_.size() && !ablation.no_grm) {
      st.has_grm = true;
      y = grms_[t].forward(store, coords, y, scene.context_coords, c.context, grm_options, cache ? &st.grm : nullptr);
    }
    std::vector<RefPoint> refs = project_queries(scene.camera, coords);
    if (ablation.point_only)
      for (auto& r : refs) r.valid = false;
    st.acmt.resize(acmt_[t].size());
    for (std::size_t l = 0; l < acmt_[t].size(); ++l) {
      QueryState state{y, refs, coords};
      y = acmt_[t][l].forward(store, state, c.context, c.pyramid, acmt_options, cache ? &st.acmt[l] : nullptr);
    }
    StagePrediction pred = heads_[t].forward(store, y, cache ? &st.heads : nullptr);
    out.coords.push_back(coords);
    coords = update_coords(pred, coords);
    clamp_to_scene(coords, scene);
    out.predictions.push_back(std::move(pred));
  }
  out.final_coords = coords;
  return out;
}

void Detector::backward(ParamStore& store, const PreparedScene& scene, const DetectorCache& c,
                        const std::vector<StageLossGrad>& grads) const {
  const std::size_t M = config_.num_queries, C = config_.feature_dim;
  Tensor dctx = Tensor::zeros_like(c.context);
  std::vector<Tensor> dlevels;
  for (const auto& l : c.pyramid.levels) dlevels.push_back(Tensor::zeros_like(l));
  Tensor dy({M, C});
  for (std::size_t t = config_.stages; t-- > 0;) {
    const auto& st = c.stages[t];
    dy += heads_[t].backward(store, st.heads, grads[t].dlogits, grads[t].dregression, grads[t].dcenterness);
    for (std::size_t l = acmt_[t].size(); l-- > 0;) {
      Tensor din({M, C});
      acmt_[t][l].backward(store, st.acmt[l], c.pyramid, dy, din, dctx, dlevels);
      dy = std::move(din);
    }
    if (st.has_grm) {
      Tensor din({M, C});
      grms_[t].backward(store, st.grm, dy, din, dctx);
      dy = std::move(din);
    }
    pos_[t].backward(store, st.pos, dy);
  }
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k = 0; k < C; ++k) dctx(i, k) += dy(i, k);
  point_encoder_.backward(store, c.points, dctx);
  image_encoder_.backward(store, c.image, dlevels);
  (void)scene;
}

LossBreakdown Detector::loss(ParamStore& store, const PreparedScene& scene, bool accumulate, double scale,
                             const std::vector<Tensor>* fixed_coords) const {
  DetectorCache cache;
  const DetectorOutput out = forward(store, scene, {}, accumulate ? &cache : nullptr, fixed_coords);
  std::vector<LossBreakdown> parts;
  std::vector<StageLossGrad> grads(config_.stages);
  const double stage_scale = scale / static_cast<double>(config_.stages);
  for (std::size_t t = 0; t < config_.stages; ++t) {
    const Assignment as = assign_targets(out.coords[t], scene.boxes, t);
    parts.push_back(stage_loss(out.predictions[t], as, scene.boxes, accumulate ? &grads[t] : nullptr, stage_scale));
  }
  if (accumulate) backward(store, scene, cache, grads);
  return combine_stage_losses(parts);
}

std::vector<ScoredBox> Detector::detect(const ParamStore& store, const PreparedScene& scene, const Ablation& ablation,
                                        double score_threshold, double nms_iou) const {
  const DetectorOutput out = forward(store, scene, ablation);
  return class_nms(score_queries(out.predictions.back(), out.coords.back()), nms_iou, score_threshold);
}

}  // namespace fusion3d
