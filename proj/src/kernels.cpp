#include "fusion3d/kernels.hpp"

#include <algorithm>
#include <cmath>

#include "fusion3d/errors.hpp"

namespace fusion3d::kernels {

namespace testing {
namespace {
std::string& corrupted_op() {
  static std::string op;
  return op;
}
}  // namespace

void set_corrupted_backward(const std::string& op) { corrupted_op() = op; }
bool is_corrupted(const char* op) { return !corrupted_op().empty() && corrupted_op() == op; }
}  // namespace testing

namespace {
constexpr double kCorruptionFactor = 1.01;

void require_rank2(const Tensor& t, const char* what) {
  if (t.ndim() != 2) throw DimensionError(std::string(what) + " must be rank 2, got " + t.shape_string());
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul lhs");
  require_rank2(b, "matmul rhs");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + a.shape_string() + " x " + b.shape_string());
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor out({n, m});
  const double* A = a.data();
  const double* B = b.data();
  double* O = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = O + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = A[i * k + p];
      if (s == 0.0) continue;
      const double* brow = B + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += s * brow[j];
    }
  }
  return out;
}

void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  require_rank2(a, "matmul_tn lhs");
  require_rank2(b, "matmul_tn rhs");
  if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols()) {
    throw DimensionError("matmul_tn: " + a.shape_string() + "^T x " + b.shape_string() + " -> " +
                         out.shape_string());
  }
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  const double* A = a.data();
  const double* B = b.data();
  double* O = out.data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = B + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double s = A[p * n + i];
      if (s == 0.0) continue;
      double* orow = O + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += s * brow[j];
    }
  }
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  Tensor out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul(a, transpose(b)); }

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank2(x, "linear input");
  require_rank2(weight, "linear weight");
  if (x.cols() != weight.rows()) {
    throw DimensionError("linear: input " + x.shape_string() + " incompatible with weight " +
                         weight.shape_string());
  }
  if (!bias.empty() && (bias.ndim() != 1 || bias.dim(0) != weight.cols())) {
    throw DimensionError("linear: bias " + bias.shape_string() + " incompatible with weight " +
                         weight.shape_string());
  }
  Tensor out = matmul(x, weight);
  if (!bias.empty()) {
    const std::size_t m = out.cols();
    for (std::size_t i = 0; i < out.rows(); ++i) {
      double* r = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) r[j] += bias[j];
    }
  }
  return out;
}

LinearGrad linear_backward(const Tensor& x, const Tensor& weight, const Tensor& dy) {
  if (dy.rows() != x.rows() || dy.cols() != weight.cols()) {
    throw DimensionError("linear_backward: dy " + dy.shape_string() + " vs input " + x.shape_string() +
                         " and weight " + weight.shape_string());
  }
  LinearGrad g;
  g.dweight = Tensor::zeros_like(weight);
  matmul_tn_acc(x, dy, g.dweight);
  g.dbias = Tensor({weight.cols()});
  for (std::size_t i = 0; i < dy.rows(); ++i)
    for (std::size_t j = 0; j < dy.cols(); ++j) g.dbias[j] += dy(i, j);
  g.dx = matmul_nt(dy, weight);
  if (testing::is_corrupted("linear")) g.dweight *= kCorruptionFactor;
  return g;
}

Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& pre, const Tensor& dy) {
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!(pre[i] > 0.0)) dx[i] = 0.0;
  return dx;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double log_sigmoid(double x) { return -softplus(-x); }

void softmax_inplace(std::span<double> v) {
  if (v.empty()) return;
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (auto& e : v) {
    e = std::exp(e - mx);
    sum += e;
  }
  for (auto& e : v) e /= sum;
}

void softmax_row_backward(std::span<const double> y, std::span<const double> dy, std::span<double> dx) {
  double dot = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) dot += dy[j] * y[j];
  const double f = testing::is_corrupted("softmax") ? kCorruptionFactor : 1.0;
  for (std::size_t j = 0; j < y.size(); ++j) dx[j] += f * y[j] * (dy[j] - dot);
}

namespace {
struct AxisLayout {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisLayout axis_layout(const Tensor& x, std::size_t axis) {
  if (axis >= x.ndim()) throw DimensionError("softmax axis out of range for " + x.shape_string());
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= x.dim(i);
  l.n = x.dim(axis);
  for (std::size_t i = axis + 1; i < x.ndim(); ++i) l.inner *= x.dim(i);
  if (l.n == 0) throw DimensionError("softmax over an empty axis");
  return l;
}
}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisLayout l = axis_layout(x, axis);
  Tensor out = x;
  std::vector<double> buf(l.n);
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      for (std::size_t j = 0; j < l.n; ++j) buf[j] = x[(o * l.n + j) * l.inner + i];
      softmax_inplace(buf);
      for (std::size_t j = 0; j < l.n; ++j) out[(o * l.n + j) * l.inner + i] = buf[j];
    }
  }
  return out;
}

Tensor softmax_backward(const Tensor& y, const Tensor& dy, std::size_t axis) {
  const AxisLayout l = axis_layout(y, axis);
  Tensor dx = Tensor::zeros_like(y);
  std::vector<double> yb(l.n), db(l.n), xb(l.n);
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      for (std::size_t j = 0; j < l.n; ++j) {
        const std::size_t idx = (o * l.n + j) * l.inner + i;
        yb[j] = y[idx];
        db[j] = dy[idx];
        xb[j] = 0.0;
      }
      softmax_row_backward(yb, db, xb);
      for (std::size_t j = 0; j < l.n; ++j) dx[(o * l.n + j) * l.inner + i] = xb[j];
    }
  }
  return dx;
}

Tensor layer_norm(const Tensor& x, const Tensor& scale, const Tensor& shift, LayerNormCache* cache) {
  require_rank2(x, "layer_norm input");
  const std::size_t n = x.rows(), d = x.cols();
  if (d == 0) throw DimensionError("layer_norm over zero features");
  require_shape(scale, {d}, "layer_norm scale");
  require_shape(shift, {d}, "layer_norm shift");
  Tensor out({n, d});
  Tensor xhat({n, d});
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (r[j] - mean) * is;
      xhat(i, j) = h;
      out(i, j) = h * scale[j] + shift[j];
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

LayerNormGrad layer_norm_backward(const LayerNormCache& cache, const Tensor& scale, const Tensor& dy) {
  const std::size_t n = cache.xhat.rows(), d = cache.xhat.cols();
  LayerNormGrad g;
  g.dx = Tensor({n, d});
  g.dscale = Tensor({d});
  g.dshift = Tensor({d});
  std::vector<double> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_d = 0.0, mean_dx = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double gy = dy(i, j);
      g.dscale[j] += gy * cache.xhat(i, j);
      g.dshift[j] += gy;
      dxhat[j] = gy * scale[j];
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * cache.xhat(i, j);
    }
    mean_d /= static_cast<double>(d);
    mean_dx /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      g.dx(i, j) = cache.inv_std[i] * (dxhat[j] - mean_d - cache.xhat(i, j) * mean_dx);
    }
  }
  if (testing::is_corrupted("layer_norm")) g.dscale *= kCorruptionFactor;
  return g;
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine_sim: vector lengths differ");
  double dot = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  const double na = std::max(std::sqrt(aa), kCosineNormFloor);
  const double nb = std::max(std::sqrt(bb), kCosineNormFloor);
  return dot / (na * nb);
}

void cosine_sim_backward(std::span<const double> a, std::span<const double> b, double dout,
                         std::span<double> da, std::span<double> db) {
  double dot = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  const double ra = std::sqrt(aa), rb = std::sqrt(bb);
  const double na = std::max(ra, kCosineNormFloor);
  const double nb = std::max(rb, kCosineNormFloor);
  const double c = dot / (na * nb);
  const double inv = 1.0 / (na * nb);
  const bool ga = ra > kCosineNormFloor, gb = rb > kCosineNormFloor;
  const double f = testing::is_corrupted("cosine_sim") ? kCorruptionFactor : 1.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    da[i] += f * dout * (b[i] * inv - (ga ? c * a[i] / (na * na) : 0.0));
    db[i] += f * dout * (a[i] * inv - (gb ? c * b[i] / (nb * nb) : 0.0));
  }
}

namespace {
struct BilinearStencil {
  std::size_t x0, x1, y0, y1;
  double fx, fy;
};

bool stencil(const Tensor& map, double u, double v, BilinearStencil& s) {
  if (!(u >= 0.0 && u <= 1.0 && v >= 0.0 && v <= 1.0)) return false;
  const std::size_t H = map.dim(0), W = map.dim(1);
  const double px = u * static_cast<double>(W - 1);
  const double py = v * static_cast<double>(H - 1);
  auto axis = [](double p, std::size_t n, std::size_t& i0, std::size_t& i1, double& f) {
    if (n < 2) {
      i0 = i1 = 0;
      f = 0.0;
      return;
    }
    i0 = std::min(static_cast<std::size_t>(std::floor(p)), n - 2);
    i1 = i0 + 1;
    f = p - static_cast<double>(i0);
  };
  axis(px, W, s.x0, s.x1, s.fx);
  axis(py, H, s.y0, s.y1, s.fy);
  return true;
}
}  // namespace

bool bilinear_sample_into(const Tensor& map, double u, double v, double weight, std::span<double> out) {
  BilinearStencil s{};
  if (!stencil(map, u, v, s)) return false;
  const std::size_t C = map.dim(2);
  const double w00 = (1 - s.fy) * (1 - s.fx), w01 = (1 - s.fy) * s.fx;
  const double w10 = s.fy * (1 - s.fx), w11 = s.fy * s.fx;
  const double* m00 = map.ptr(s.y0, s.x0, 0);
  const double* m01 = map.ptr(s.y0, s.x1, 0);
  const double* m10 = map.ptr(s.y1, s.x0, 0);
  const double* m11 = map.ptr(s.y1, s.x1, 0);
  for (std::size_t c = 0; c < C; ++c) {
    out[c] += weight * (w00 * m00[c] + w01 * m01[c] + w10 * m10[c] + w11 * m11[c]);
  }
  return true;
}

std::vector<double> bilinear_sample(const Tensor& map, double u, double v) {
  if (map.ndim() != 3 || map.empty()) throw DimensionError("bilinear_sample needs a nonempty [H,W,C] map");
  std::vector<double> out(map.dim(2), 0.0);
  bilinear_sample_into(map, u, v, 1.0, out);
  return out;
}

void bilinear_sample_backward(const Tensor& map, double u, double v, std::span<const double> dsample,
                              Tensor* dmap, double* du, double* dv) {
  BilinearStencil s{};
  if (!stencil(map, u, v, s)) return;
  const std::size_t C = map.dim(2);
  const double w00 = (1 - s.fy) * (1 - s.fx), w01 = (1 - s.fy) * s.fx;
  const double w10 = s.fy * (1 - s.fx), w11 = s.fy * s.fx;
  const double f = testing::is_corrupted("bilinear_sample") ? kCorruptionFactor : 1.0;
  if (dmap) {
    double* d00 = dmap->ptr(s.y0, s.x0, 0);
    double* d01 = dmap->ptr(s.y0, s.x1, 0);
    double* d10 = dmap->ptr(s.y1, s.x0, 0);
    double* d11 = dmap->ptr(s.y1, s.x1, 0);
    for (std::size_t c = 0; c < C; ++c) {
      const double g = f * dsample[c];
      d00[c] += w00 * g;
      d01[c] += w01 * g;
      d10[c] += w10 * g;
      d11[c] += w11 * g;
    }
  }
  if (du || dv) {
    const std::size_t H = map.dim(0), W = map.dim(1);
    const double* m00 = map.ptr(s.y0, s.x0, 0);
    const double* m01 = map.ptr(s.y0, s.x1, 0);
    const double* m10 = map.ptr(s.y1, s.x0, 0);
    const double* m11 = map.ptr(s.y1, s.x1, 0);
    double gx = 0.0, gy = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      gx += dsample[c] * ((1 - s.fy) * (m01[c] - m00[c]) + s.fy * (m11[c] - m10[c]));
      gy += dsample[c] * ((1 - s.fx) * (m10[c] - m00[c]) + s.fx * (m11[c] - m01[c]));
    }
    if (du && W > 1) *du += f * gx * static_cast<double>(W - 1);
    if (dv && H > 1) *dv += f * gy * static_cast<double>(H - 1);
  }
}

// ---- layers ---------------------------------------------------------------

Linear::Linear(std::string name, std::size_t in, std::size_t out, bool bias)
    : name_(std::move(name)), in_(in), out_(out), bias_(bias) {
  if (in == 0 || out == 0) throw ConfigError("linear layer " + name_ + " has a zero width");
}

void Linear::init(ParamStore& store, Rng& rng, double scale) const {
  const double bound = std::sqrt(6.0 / static_cast<double>(in_ + out_));
  Tensor w({in_, out_});
  for (auto& v : w.storage()) v = scale * rng.uniform(-bound, bound);
  store.add(weight_name(), std::move(w));
  if (bias_) store.add(bias_name(), Tensor({out_}));
}

Tensor Linear::forward(const ParamStore& store, const Tensor& x) const {
  static const Tensor kNoBias;
  return linear(x, store.value(weight_name()), bias_ ? store.value(bias_name()) : kNoBias);
}

Tensor Linear::backward(ParamStore& store, const Tensor& x, const Tensor& dy) const {
  LinearGrad g = linear_backward(x, store.value(weight_name()), dy);
  store.grad(weight_name()) += g.dweight;
  if (bias_) store.grad(bias_name()) += g.dbias;
  return std::move(g.dx);
}

void LayerNorm::init(ParamStore& store) const {
  store.add(scale_name(), Tensor({dim_}, 1.0));
  store.add(shift_name(), Tensor({dim_}, 0.0));
}

Tensor LayerNorm::forward(const ParamStore& store, const Tensor& x, LayerNormCache* cache) const {
  return layer_norm(x, store.value(scale_name()), store.value(shift_name()), cache);
}

Tensor LayerNorm::backward(ParamStore& store, const LayerNormCache& cache, const Tensor& dy) const {
  LayerNormGrad g = layer_norm_backward(cache, store.value(scale_name()), dy);
  store.grad(scale_name()) += g.dscale;
  store.grad(shift_name()) += g.dshift;
  return std::move(g.dx);
}

Mlp::Mlp(std::string name, MlpSpec spec) : name_(std::move(name)), spec_(std::move(spec)) {
  if (spec_.widths.size() < 2) throw ConfigError("mlp " + name_ + ": spec needs at least one layer");
  const std::size_t L = spec_.widths.size() - 1;
  for (std::size_t i = 0; i < L; ++i) {
    layers_.emplace_back(name_ + ".l" + std::to_string(i), spec_.widths[i], spec_.widths[i + 1]);
    if (spec_.layer_norm && (i + 1 < L || spec_.activate_output)) {
      norms_.emplace_back(name_ + ".ln" + std::to_string(i), spec_.widths[i + 1]);
    }
  }
}

void Mlp::init(ParamStore& store, Rng& rng, double last_scale) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].init(store, rng, i + 1 == layers_.size() ? last_scale : 1.0);
  }
  for (const auto& n : norms_) n.init(store);
}

Tensor Mlp::forward(const ParamStore& store, const Tensor& x, MlpCache* cache) const {
  if (x.ndim() != 2 || x.cols() != in_dim()) {
    throw DimensionError("mlp " + name_ + ": input " + x.shape_string() + " incompatible with width " +
                         std::to_string(in_dim()));
  }
  if (cache) *cache = MlpCache{};
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Tensor pre = layers_[i].forward(store, h);
    if (cache) cache->inputs.push_back(std::move(h));
    if (activated(i)) {
      Tensor normed;
      if (spec_.layer_norm) {
        LayerNormCache lc;
        normed = norms_[i].forward(store, pre, cache ? &lc : nullptr);
        if (cache) cache->norms.push_back(std::move(lc));
      } else {
        normed = pre;
      }
      h = relu(normed);
      if (cache) cache->normed.push_back(std::move(normed));
    } else {
      h = pre;
      if (cache) {
        cache->norms.emplace_back();
        cache->normed.emplace_back();
      }
    }
    if (cache) cache->pre.push_back(std::move(pre));
  }
  return h;
}

Tensor Mlp::backward(ParamStore& store, const MlpCache& cache, const Tensor& dy) const {
  Tensor g = dy;
  for (std::size_t ii = layers_.size(); ii-- > 0;) {
    if (activated(ii)) {
      g = relu_backward(cache.normed[ii], g);
      if (spec_.layer_norm) g = norms_[ii].backward(store, cache.norms[ii], g);
    }
    g = layers_[ii].backward(store, cache.inputs[ii], g);
  }
  return g;
}

}  // namespace fusion3d::kernels
