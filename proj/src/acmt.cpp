#include "fusion3d/acmt.hpp"

#include <cmath>

#include "fusion3d/errors.hpp"

namespace fusion3d {

void AcmtConfig::validate() const {
  if (feature_dim == 0 || image_dim == 0 || heads == 0 || levels == 0 || points == 0 || ffn_dim == 0) {
    throw ConfigError("acmt: all sizes must be positive");
  }
  if (feature_dim % heads != 0) {
    throw ConfigError("acmt: heads (" + std::to_string(heads) + ") must divide the feature width (" +
                      std::to_string(feature_dim) + ")");
  }
}

std::vector<RefPoint> project_queries(const CameraModel& cam, const Tensor& coords) {
  std::vector<RefPoint> refs(coords.rows());
  for (std::size_t i = 0; i < coords.rows(); ++i) refs[i] = project_point(cam, Vec3{coords(i, 0), coords(i, 1), coords(i, 2)});
  return refs;
}

// ---- cross-attention --------------------------------------------------------

CrossAttention::CrossAttention(std::string name, std::size_t dim, std::size_t heads)
    : dim_(dim),
      heads_(heads),
      query_(name + ".query", dim, dim),
      key_(name + ".key", dim, dim, false),
      value_(name + ".value", dim, dim),
      output_(name + ".output", dim, dim) {
  if (heads == 0 || dim % heads != 0) throw ConfigError("cross attention: heads must divide the feature width");
}

void CrossAttention::init(ParamStore& store, Rng& rng) const {
  query_.init(store, rng);
  key_.init(store, rng);
  value_.init(store, rng);
  output_.init(store, rng);
}

Tensor CrossAttention::forward(const ParamStore& store, const Tensor& y, const Tensor& x,
                               CrossAttentionCache* cache) const {
  if (y.ndim() != 2 || y.cols() != dim_ || x.ndim() != 2 || x.cols() != dim_) {
    throw DimensionError("cross attention: expected [M," + std::to_string(dim_) + "] and [N," +
                         std::to_string(dim_) + "], got " + y.shape_string() + " and " + x.shape_string());
  }
  if (x.rows() == 0) throw InputError("cross attention: no keys");
  const std::size_t M = y.rows(), N = x.rows(), dh = dim_ / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor q = query_.forward(store, y);
  Tensor k = key_.forward(store, x);
  Tensor v = value_.forward(store, x);
  std::vector<double> attn(heads_ * M * N);
  Tensor ctx({M, dim_});
  for (std::size_t h = 0; h < heads_; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < M; ++i) {
      std::span<double> a(attn.data() + (h * M + i) * N, N);
      const double* qi = q.data() + i * dim_ + c0;
      for (std::size_t j = 0; j < N; ++j) {
        const double* kj = k.data() + j * dim_ + c0;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        a[j] = s * scale;
      }
      kernels::softmax_inplace(a);
      double* out = ctx.data() + i * dim_ + c0;
      for (std::size_t j = 0; j < N; ++j) {
        const double w = a[j];
        const double* vj = v.data() + j * dim_ + c0;
        for (std::size_t c = 0; c < dh; ++c) out[c] += w * vj[c];
      }
    }
  }
  Tensor out = output_.forward(store, ctx);
  if (cache) {
    cache->y = y;
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attn = std::move(attn);
    cache->context = std::move(ctx);
  }
  return out;
}

void CrossAttention::backward(ParamStore& store, const CrossAttentionCache& c, const Tensor& dout, Tensor& dy,
                              Tensor& dx) const {
  const std::size_t M = c.y.rows(), N = c.x.rows(), dh = dim_ / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor dctx = output_.backward(store, c.context, dout);
  Tensor dq({M, dim_}), dk({N, dim_}), dv({N, dim_});
  std::vector<double> da(N), ds(N);
  for (std::size_t h = 0; h < heads_; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < M; ++i) {
      std::span<const double> a(c.attn.data() + (h * M + i) * N, N);
      const double* g = dctx.data() + i * dim_ + c0;
      for (std::size_t j = 0; j < N; ++j) {
        const double* vj = c.v.data() + j * dim_ + c0;
        double* dvj = dv.data() + j * dim_ + c0;
        double s = 0.0;
        for (std::size_t ch = 0; ch < dh; ++ch) {
          s += g[ch] * vj[ch];
          dvj[ch] += a[j] * g[ch];
        }
        da[j] = s;
        ds[j] = 0.0;
      }
      kernels::softmax_row_backward(a, da, ds);
      const double* qi = c.q.data() + i * dim_ + c0;
      double* dqi = dq.data() + i * dim_ + c0;
      for (std::size_t j = 0; j < N; ++j) {
        const double w = ds[j] * scale;
        if (w == 0.0) continue;
        const double* kj = c.k.data() + j * dim_ + c0;
        double* dkj = dk.data() + j * dim_ + c0;
        for (std::size_t ch = 0; ch < dh; ++ch) {
          dqi[ch] += w * kj[ch];
          dkj[ch] += w * qi[ch];
        }
      }
    }
  }
  dy += query_.backward(store, c.y, dq);
  dx += key_.backward(store, c.x, dk);
  dx += value_.backward(store, c.x, dv);
}

// ---- deformable attention ---------------------------------------------------

DeformableAttention::DeformableAttention(std::string name, const AcmtConfig& config) : config_(config) {
  config_.validate();
  const std::size_t C = config_.feature_dim, H = config_.heads, LP = config_.levels * config_.points;
  offsets_ = kernels::Linear(name + ".offsets", C, H * LP * 2);
  weights_ = kernels::Linear(name + ".weights", C, H * LP);
  value_ = kernels::Linear(name + ".value", config_.image_dim, C, false);
  output_ = kernels::Linear(name + ".output", C, C);
}

void DeformableAttention::init(ParamStore& store, Rng& rng) const {
  offsets_.init(store, rng, 0.0);
  weights_.init(store, rng);
  value_.init(store, rng);
  output_.init(store, rng);
}

Tensor DeformableAttention::forward(const ParamStore& store, const Tensor& y, const std::vector<RefPoint>& refs,
                                    const ImagePyramid& pyramid, DeformableCache* cache) const {
  const std::size_t C = config_.feature_dim, Ci = config_.image_dim, H = config_.heads;
  const std::size_t L = config_.levels, P = config_.points, LP = L * P, dh = C / H;
  if (y.ndim() != 2 || y.cols() != C) throw DimensionError("deformable attention: queries must be [M," + std::to_string(C) + "]");
  const std::size_t M = y.rows();
  if (refs.size() != M) throw DimensionError("deformable attention: one reference point per query required");
  if (pyramid.levels.size() != L) throw DimensionError("deformable attention: pyramid level count mismatch");
  for (const auto& lv : pyramid.levels)
    if (lv.ndim() != 3 || lv.dim(2) != Ci) throw DimensionError("deformable attention: pyramid channel mismatch");

  Tensor offs = offsets_.forward(store, y);
  Tensor logits = weights_.forward(store, y);
  std::vector<double> weights(logits.storage());
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t h = 0; h < H; ++h) kernels::softmax_inplace({weights.data() + (i * H + h) * LP, LP});

  Tensor gathered({M, H * Ci});
  for (std::size_t i = 0; i < M; ++i) {
    if (!refs[i].valid) continue;
    for (std::size_t h = 0; h < H; ++h) {
      std::span<double> g(gathered.data() + i * H * Ci + h * Ci, Ci);
      for (std::size_t l = 0; l < L; ++l) {
        const Tensor& map = pyramid.levels[l];
        const double wl = static_cast<double>(map.dim(1)), hl = static_cast<double>(map.dim(0));
        for (std::size_t p = 0; p < P; ++p) {
          const std::size_t s = (h * L + l) * P + p;
          const double u = refs[i].u + offs(i, 2 * s) / wl;
          const double v = refs[i].v + offs(i, 2 * s + 1) / hl;
          kernels::bilinear_sample_into(map, u, v, weights[(i * H + h) * LP + l * P + p], g);
        }
      }
    }
  }

  const Tensor& Wv = store.value(value_.weight_name());
  Tensor heads_out({M, C});
  for (std::size_t i = 0; i < M; ++i) {
    if (!refs[i].valid) continue;
    for (std::size_t h = 0; h < H; ++h) {
      const double* g = gathered.data() + i * H * Ci + h * Ci;
      double* o = heads_out.data() + i * C + h * dh;
      for (std::size_t c = 0; c < Ci; ++c) {
        if (g[c] == 0.0) continue;
        const double* w = Wv.data() + c * C + h * dh;
        for (std::size_t k = 0; k < dh; ++k) o[k] += g[c] * w[k];
      }
    }
  }
  Tensor out = output_.forward(store, heads_out);
  for (std::size_t i = 0; i < M; ++i)
    if (!refs[i].valid)
      for (auto& x : out.row(i)) x = 0.0;

  if (cache) {
    cache->y = y;
    cache->refs = refs;
    cache->offsets = std::move(offs);
    cache->weights = std::move(weights);
    cache->gathered = std::move(gathered);
    cache->heads_out = std::move(heads_out);
  }
  return out;
}

void DeformableAttention::backward(ParamStore& store, const DeformableCache& c, const ImagePyramid& pyramid,
                                   const Tensor& dout, Tensor& dy, std::vector<Tensor>& dlevels) const {
  const std::size_t C = config_.feature_dim, Ci = config_.image_dim, H = config_.heads;
  const std::size_t L = config_.levels, P = config_.points, LP = L * P, dh = C / H;
  const std::size_t M = c.y.rows();

  Tensor dmasked = dout;
  for (std::size_t i = 0; i < M; ++i)
    if (!c.refs[i].valid)
      for (auto& x : dmasked.row(i)) x = 0.0;
  const Tensor dheads = output_.backward(store, c.heads_out, dmasked);

  const Tensor& Wv = store.value(value_.weight_name());
  Tensor& dWv = store.grad(value_.weight_name());
  Tensor doffs = Tensor::zeros_like(c.offsets);
  Tensor dlogits({M, H * LP});
  std::vector<double> dg(Ci), dw(LP), sample(Ci);
  for (std::size_t i = 0; i < M; ++i) {
    if (!c.refs[i].valid) continue;
    for (std::size_t h = 0; h < H; ++h) {
      const double* g = c.gathered.data() + i * H * Ci + h * Ci;
      const double* d = dheads.data() + i * C + h * dh;
      for (std::size_t ch = 0; ch < Ci; ++ch) {
        const double* w = Wv.data() + ch * C + h * dh;
        double* dw_row = dWv.data() + ch * C + h * dh;
        double s = 0.0;
        for (std::size_t k = 0; k < dh; ++k) {
          s += d[k] * w[k];
          dw_row[k] += g[ch] * d[k];
        }
        dg[ch] = s;
      }
      const double* A = c.weights.data() + (i * H + h) * LP;
      for (std::size_t l = 0; l < L; ++l) {
        const Tensor& map = pyramid.levels[l];
        const double wl = static_cast<double>(map.dim(1)), hl = static_cast<double>(map.dim(0));
        for (std::size_t p = 0; p < P; ++p) {
          const std::size_t s = (h * L + l) * P + p;
          const double u = c.refs[i].u + c.offsets(i, 2 * s) / wl;
          const double v = c.refs[i].v + c.offsets(i, 2 * s + 1) / hl;
          std::fill(sample.begin(), sample.end(), 0.0);
          kernels::bilinear_sample_into(map, u, v, 1.0, sample);
          double da = 0.0;
          for (std::size_t ch = 0; ch < Ci; ++ch) da += dg[ch] * sample[ch];
          dw[l * P + p] = da;
          const double a = A[l * P + p];
          std::vector<double> ds(Ci);
          for (std::size_t ch = 0; ch < Ci; ++ch) ds[ch] = a * dg[ch];
          double du = 0.0, dv = 0.0;
          kernels::bilinear_sample_backward(map, u, v, ds, &dlevels[l], &du, &dv);
          doffs(i, 2 * s) += du / wl;
          doffs(i, 2 * s + 1) += dv / hl;
        }
      }
      kernels::softmax_row_backward({A, LP}, dw, {dlogits.data() + i * H * LP + h * LP, LP});
    }
  }
  dy += offsets_.backward(store, c.y, doffs);
  dy += weights_.backward(store, c.y, dlogits);
}

// ---- gating -------------------------------------------------------------------

CrossModalGate::CrossModalGate(std::string name, std::size_t dim, std::size_t heads)
    : dim_(dim), heads_(heads), mlp_(name + ".mlp", kernels::MlpSpec{{3 * dim, dim, 2 * heads}, true}) {
  if (heads == 0 || dim % heads != 0) throw ConfigError("gate: heads must divide the feature width");
}

void CrossModalGate::init(ParamStore& store, Rng& rng) const { mlp_.init(store, rng, 0.0); }

Tensor CrossModalGate::forward(const ParamStore& store, const Tensor& y, const Tensor& yp, const Tensor& yi,
                               bool fixed, GateCache* cache) const {
  const std::size_t M = y.rows(), C = dim_, H = heads_, dh = C / H;
  require_shape(yp, {M, C}, "gate point branch");
  require_shape(yi, {M, C}, "gate image branch");
  std::vector<double> lambda(M * H * 2, 0.5);
  if (!fixed) {
    Tensor in({M, 3 * C});
    for (std::size_t i = 0; i < M; ++i) {
      auto r = in.row(i);
      std::copy(y.row(i).begin(), y.row(i).end(), r.begin());
      std::copy(yp.row(i).begin(), yp.row(i).end(), r.begin() + static_cast<std::ptrdiff_t>(C));
      std::copy(yi.row(i).begin(), yi.row(i).end(), r.begin() + static_cast<std::ptrdiff_t>(2 * C));
    }
    const Tensor logits = mlp_.forward(store, in, cache ? &cache->mlp : nullptr);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t h = 0; h < H; ++h) {
        double* l = lambda.data() + (i * H + h) * 2;
        l[0] = logits(i, 2 * h);
        l[1] = logits(i, 2 * h + 1);
        kernels::softmax_inplace({l, 2});
      }
  }
  Tensor out({M, C});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t h = 0; h < H; ++h) {
      const double lp = lambda[(i * H + h) * 2], li = lambda[(i * H + h) * 2 + 1];
      for (std::size_t k = h * dh; k < (h + 1) * dh; ++k) out(i, k) = lp * yp(i, k) + li * yi(i, k);
    }
  if (cache) {
    if (fixed) cache->mlp = kernels::MlpCache{};
    cache->yp = yp;
    cache->yi = yi;
    cache->lambda = std::move(lambda);
  }
  return out;
}

void CrossModalGate::backward(ParamStore& store, const GateCache& c, const Tensor& dout, Tensor& dy, Tensor& dyp,
                              Tensor& dyi) const {
  const std::size_t M = dout.rows(), C = dim_, H = heads_, dh = C / H;
  const bool fixed = c.mlp.inputs.empty();
  Tensor dlogits({M, 2 * H});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t h = 0; h < H; ++h) {
      const double* l = c.lambda.data() + (i * H + h) * 2;
      double dl[2] = {0.0, 0.0};
      for (std::size_t k = h * dh; k < (h + 1) * dh; ++k) {
        dyp(i, k) += l[0] * dout(i, k);
        dyi(i, k) += l[1] * dout(i, k);
        dl[0] += dout(i, k) * c.yp(i, k);
        dl[1] += dout(i, k) * c.yi(i, k);
      }
      kernels::softmax_row_backward({l, 2}, dl, {dlogits.data() + i * 2 * H + 2 * h, 2});
    }
  if (fixed) return;
  const Tensor din = mlp_.backward(store, c.mlp, dlogits);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k = 0; k < C; ++k) {
      dy(i, k) += din(i, k);
      dyp(i, k) += din(i, C + k);
      dyi(i, k) += din(i, 2 * C + k);
    }
}

// ---- layer ----------------------------------------------------------------------

AcmtLayer::AcmtLayer(std::string name, AcmtConfig config)
    : config_(config),
      ln1_(name + ".ln1", config.feature_dim),
      ln2_(name + ".ln2", config.feature_dim),
      cross_(name + ".cross", config.feature_dim, config.heads),
      deform_(name + ".deform", config),
      gate_(name + ".gate", config.feature_dim, config.heads),
      ffn_(name + ".ffn", kernels::MlpSpec{{config.feature_dim, config.ffn_dim, config.feature_dim}}) {
  config_.validate();
}

void AcmtLayer::init(ParamStore& store, Rng& rng) const {
  ln1_.init(store);
  ln2_.init(store);
  cross_.init(store, rng);
  deform_.init(store, rng);
  gate_.init(store, rng);
  ffn_.init(store, rng);
}

Tensor AcmtLayer::forward(const ParamStore& store, const QueryState& state, const Tensor& context,
                          const ImagePyramid& pyramid, const AcmtOptions& options, AcmtLayerCache* cache) const {
  AcmtLayerCache local;
  AcmtLayerCache& c = cache ? *cache : local;
  c.y_in = state.y;
  c.u = ln1_.forward(store, state.y, &c.ln1);
  c.yp = cross_.forward(store, c.u, context, &c.cross);
  c.yi = deform_.forward(store, c.u, state.refs, pyramid, &c.deform);
  Tensor fused = gate_.forward(store, c.u, c.yp, c.yi, options.fixed_gate, &c.gate);
  c.y_mid = state.y;
  c.y_mid += fused;
  c.v = ln2_.forward(store, c.y_mid, &c.ln2);
  Tensor out = c.y_mid;
  out += ffn_.forward(store, c.v, &c.ffn);
  return out;
}

void AcmtLayer::backward(ParamStore& store, const AcmtLayerCache& c, const ImagePyramid& pyramid, const Tensor& dout,
                         Tensor& dy, Tensor& dcontext, std::vector<Tensor>& dlevels) const {
  Tensor dmid = dout;
  dmid += ln2_.backward(store, c.ln2, ffn_.backward(store, c.ffn, dout));
  Tensor du = Tensor::zeros_like(c.u);
  Tensor dyp = Tensor::zeros_like(c.yp), dyi = Tensor::zeros_like(c.yi);
  gate_.backward(store, c.gate, dmid, du, dyp, dyi);
  cross_.backward(store, c.cross, dyp, du, dcontext);
  deform_.backward(store, c.deform, pyramid, dyi, du, dlevels);
  dy += dmid;
  dy += ln1_.backward(store, c.ln1, du);
}

}  // namespace fusion3d
