#include "fusion3d/backbones.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <tuple>

#include "fusion3d/errors.hpp"

namespace fusion3d {

void PointCloud::validate() const {
  if (positions.empty()) throw InputError("point cloud is empty");
  if (colors.size() != positions.size()) throw InputError("point cloud colours do not match positions");
  for (const auto& p : positions)
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
      throw InputError("point cloud has a non-finite position");
}

PointCloud voxel_downsample(const PointCloud& pc, double voxel_size) {
  if (voxel_size <= 0) return pc;
  std::map<std::tuple<long, long, long>, std::size_t> seen;
  PointCloud out;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const auto& p = pc.positions[i];
    auto key = std::make_tuple(static_cast<long>(std::floor(p.x / voxel_size)),
                               static_cast<long>(std::floor(p.y / voxel_size)),
                               static_cast<long>(std::floor(p.z / voxel_size)));
    if (seen.emplace(key, i).second) {
      out.positions.push_back(p);
      out.colors.push_back(pc.colors[i]);
    }
  }
  return out;
}

std::vector<std::size_t> farthest_point_sampling(const std::vector<Vec3>& pts, std::size_t count) {
  const std::size_t n = pts.size();
  if (count > n) throw InputError("cannot sample " + std::to_string(count) + " of " + std::to_string(n) + " points");
  std::vector<std::size_t> out;
  if (count == 0) return out;
  out.reserve(count);

  std::size_t start = 0;
  for (std::size_t i = 1; i < n; ++i) {
    const auto& a = pts[i];
    const auto& b = pts[start];
    if (std::tie(a.x, a.y, a.z) < std::tie(b.x, b.y, b.z)) start = i;
  }
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  std::size_t cur = start;
  for (std::size_t s = 0; s < count; ++s) {
    out.push_back(cur);
    taken[cur] = 1;
    if (s + 1 == count) break;
    const Vec3 c = pts[cur];
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 d = pts[i] - c;
      const double d2 = d.dot(d);
      if (d2 < dist[i]) dist[i] = d2;
      if (!taken[i] && dist[i] > best_d) {
        best_d = dist[i];
        best = i;
      }
    }
    cur = best;
  }
  return out;
}

PointGrouping group_points(const PointCloud& pc, std::size_t num_centers, double radius, std::size_t max_neighbors) {
  PointGrouping g;
  g.centers = farthest_point_sampling(pc.positions, num_centers);
  g.neighbors.resize(g.centers.size());
  const double r2 = radius * radius;
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t c = 0; c < g.centers.size(); ++c) {
    const Vec3 ctr = pc.positions[g.centers[c]];
    cand.clear();
    double nearest_d = std::numeric_limits<double>::infinity();
    std::size_t nearest = 0;
    for (std::size_t i = 0; i < pc.size(); ++i) {
      const Vec3 d = pc.positions[i] - ctr;
      const double d2 = d.dot(d);
      if (d2 <= r2) cand.emplace_back(d2, i);
      if (d2 < nearest_d) {
        nearest_d = d2;
        nearest = i;
      }
    }
    if (cand.empty()) {
      g.neighbors[c] = {nearest};
      continue;
    }
    const std::size_t keep = std::min(cand.size(), max_neighbors);
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end());
    g.neighbors[c].reserve(keep);
    for (std::size_t k = 0; k < keep; ++k) g.neighbors[c].push_back(cand[k].second);
  }
  return g;
}

PointEncoder::PointEncoder(std::string name, PointEncoderConfig config)
    : name_(std::move(name)),
      config_(config),
      mlp_(name_ + ".mlp", kernels::MlpSpec{{6, config.hidden_dim, config.feature_dim}}) {}

void PointEncoder::init(ParamStore& store, Rng& rng) const { mlp_.init(store, rng); }

Tensor PointEncoder::forward(const ParamStore& store, const PointCloud& pc, const PointGrouping& grouping,
                             PointEncoderCache* cache) const {
  std::vector<long> row_of(pc.size(), -1);
  std::vector<std::size_t> used;
  for (const auto& nb : grouping.neighbors)
    for (std::size_t i : nb) row_of[i] = 0;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    if (row_of[i] == 0) {
      row_of[i] = static_cast<long>(used.size());
      used.push_back(i);
    }
  }
  Tensor input({used.size(), 6});
  for (std::size_t r = 0; r < used.size(); ++r) {
    const auto& p = pc.positions[used[r]];
    const auto& c = pc.colors[used[r]];
    const double vals[6] = {p.x, p.y, p.z, c[0], c[1], c[2]};
    std::copy(vals, vals + 6, input.row(r).begin());
  }
  kernels::MlpCache* mc = cache ? &cache->mlp : nullptr;
  const Tensor per_point = mlp_.forward(store, input, mc);

  const std::size_t C = config_.feature_dim;
  Tensor out({grouping.neighbors.size(), C});
  if (cache) {
    cache->used = used;
    cache->argmax.assign(grouping.neighbors.size(), std::vector<std::size_t>(C, 0));
  }
  for (std::size_t g = 0; g < grouping.neighbors.size(); ++g) {
    const auto& nb = grouping.neighbors[g];
    for (std::size_t ch = 0; ch < C; ++ch) {
      std::size_t best = static_cast<std::size_t>(row_of[nb[0]]);
      double bv = per_point(best, ch);
      for (std::size_t k = 1; k < nb.size(); ++k) {
        const auto r = static_cast<std::size_t>(row_of[nb[k]]);
        if (per_point(r, ch) > bv) {
          bv = per_point(r, ch);
          best = r;
        }
      }
      out(g, ch) = bv;
      if (cache) cache->argmax[g][ch] = best;
    }
  }
  return out;
}

void PointEncoder::backward(ParamStore& store, const PointEncoderCache& cache, const Tensor& dfeatures) const {
  const std::size_t C = config_.feature_dim;
  Tensor dper_point({cache.used.size(), C});
  for (std::size_t g = 0; g < cache.argmax.size(); ++g)
    for (std::size_t ch = 0; ch < C; ++ch) dper_point(cache.argmax[g][ch], ch) += dfeatures(g, ch);
  mlp_.backward(store, cache.mlp, dper_point);
}

ProposalSet encode_points(const ParamStore& store, const PointEncoder& encoder, const PointCloud& pc, std::size_t M) {
  pc.validate();
  if (pc.size() < M) {
    throw InputError("encode_points: cloud has " + std::to_string(pc.size()) + " points, need at least " +
                     std::to_string(M));
  }
  const auto& cfg = encoder.config();
  const PointGrouping grouping = group_points(pc, M, cfg.radius, cfg.max_neighbors);
  ProposalSet out;
  out.features = encoder.forward(store, pc, grouping);
  out.coords = Tensor({M, 3});
  for (std::size_t i = 0; i < M; ++i) {
    const auto& p = pc.positions[grouping.centers[i]];
    out.coords(i, 0) = p.x;
    out.coords(i, 1) = p.y;
    out.coords(i, 2) = p.z;
  }
  return out;
}

Tensor rasterize_scene(const PointCloud& pc, const CameraModel& cam) {
  cam.validate();
  const auto H = static_cast<std::size_t>(cam.height);
  const auto W = static_cast<std::size_t>(cam.width);
  Tensor raster({H, W, kRasterChannels});
  std::vector<double> zbuf(H * W, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const RefPoint r = project_point(cam, pc.positions[i]);
    if (!r.valid) continue;
    const Vec3 c = cam.to_camera(pc.positions[i]);
    const double depth = cam.K[6] * c.x + cam.K[7] * c.y + cam.K[8] * c.z;
    const std::size_t col = std::min(W - 1, static_cast<std::size_t>(r.u * static_cast<double>(W)));
    const std::size_t row = std::min(H - 1, static_cast<std::size_t>(r.v * static_cast<double>(H)));
    double& z = zbuf[row * W + col];
    if (depth < z) {
      z = depth;
      raster.at(row, col, 0) = pc.colors[i][0];
      raster.at(row, col, 1) = pc.colors[i][1];
      raster.at(row, col, 2) = pc.colors[i][2];
      raster.at(row, col, 3) = depth;
    }
  }
  return raster;
}

std::vector<Tensor> pool_raster(const Tensor& raster, std::size_t levels) {
  if (raster.ndim() != 3) throw InputError("raster must be [H,W,C], got " + raster.shape_string());
  const std::size_t H = raster.dim(0), W = raster.dim(1), C = raster.dim(2);
  if (H == 0 || W == 0 || H % 32 != 0 || W % 32 != 0) {
    throw InputError("raster size " + std::to_string(H) + "x" + std::to_string(W) + " is not divisible by 32");
  }
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < levels; ++l) {
    const std::size_t f = std::size_t{2} << l;
    const std::size_t h = H / f, w = W / f;
    Tensor pooled({h, w, C});
    const double inv = 1.0 / static_cast<double>(f * f);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t c = 0; c < C; ++c) {
          double s = 0.0;
          for (std::size_t di = 0; di < f; ++di)
            for (std::size_t dj = 0; dj < f; ++dj) s += raster.at(i * f + di, j * f + dj, c);
          pooled.at(i, j, c) = s * inv;
        }
    out.push_back(std::move(pooled));
  }
  return out;
}

ImageEncoder::ImageEncoder(std::string name, ImageEncoderConfig config) : name_(std::move(name)), config_(config) {
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    levels_.emplace_back(name_ + ".level" + std::to_string(l),
                         kernels::MlpSpec{{kRasterChannels, config_.hidden_dim, config_.feature_dim}});
  }
}

void ImageEncoder::init(ParamStore& store, Rng& rng) const {
  for (const auto& m : levels_) m.init(store, rng);
}

ImagePyramid ImageEncoder::forward(const ParamStore& store, const Tensor& raster, ImageEncoderCache* cache) const {
  return forward_pooled(store, pool_raster(raster, levels_.size()), cache);
}

ImagePyramid ImageEncoder::forward_pooled(const ParamStore& store, const std::vector<Tensor>& pooled,
                                          ImageEncoderCache* cache) const {
  ImagePyramid pyr;
  if (cache) {
    cache->pooled = pooled;
    cache->mlp.assign(levels_.size(), {});
  }
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    const Tensor& p = pooled[l];
    const std::size_t h = p.dim(0), w = p.dim(1);
    Tensor flat({h * w, p.dim(2)}, p.storage());
    Tensor feats = levels_[l].forward(store, flat, cache ? &cache->mlp[l] : nullptr);
    pyr.levels.emplace_back(std::vector<std::size_t>{h, w, config_.feature_dim}, std::move(feats.storage()));
  }
  return pyr;
}

void ImageEncoder::backward(ParamStore& store, const ImageEncoderCache& cache,
                            const std::vector<Tensor>& dlevels) const {
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    const Tensor& d = dlevels[l];
    Tensor flat({d.dim(0) * d.dim(1), d.dim(2)}, d.storage());
    levels_[l].backward(store, cache.mlp[l], flat);
  }
}

}  // namespace fusion3d
