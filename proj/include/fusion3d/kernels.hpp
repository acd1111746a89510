#pragma once

#include <span>
#include <string>
#include <vector>

#include "fusion3d/params.hpp"
#include "fusion3d/tensor.hpp"

// Differentiable numerical primitives. Every op has an explicit backward rule;
// there is no autodiff graph. Layers read parameter values from a ParamStore on
// the forward pass and accumulate into its gradient slots on the backward pass.
namespace fusion3d::kernels {

// ---- matrix products (rank-2) -------------------------------------------

// a[n,k] * b[k,m]
Tensor matmul(const Tensor& a, const Tensor& b);
// out += a^T * b for a[k,n], b[k,m]
void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out);
// a[n,k] * b[m,k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---- linear ---------------------------------------------------------------

// y = x W + b with W [d_in, d_out] and b [d_out]. An empty bias means none.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct LinearGrad {
  Tensor dx;
  Tensor dweight;
  Tensor dbias;
};
LinearGrad linear_backward(const Tensor& x, const Tensor& weight, const Tensor& dy);

// ---- elementwise ----------------------------------------------------------

Tensor relu(const Tensor& x);
// Subgradient at 0 is 0.
Tensor relu_backward(const Tensor& pre, const Tensor& dy);
double sigmoid(double x);
double softplus(double x);
// log(sigmoid(x)), stable for large |x|.
double log_sigmoid(double x);

// ---- softmax ----------------------------------------------------------------

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor softmax_backward(const Tensor& y, const Tensor& dy, std::size_t axis);
void softmax_inplace(std::span<double> v);
// dx = y * (dy - <dy, y>) over one softmax row, accumulated into dx.
void softmax_row_backward(std::span<const double> y, std::span<const double> dy, std::span<double> dx);

// ---- layer norm -----------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Tensor xhat;
  std::vector<double> inv_std;
};

Tensor layer_norm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                  LayerNormCache* cache = nullptr);

struct LayerNormGrad {
  Tensor dx;
  Tensor dscale;
  Tensor dshift;
};
LayerNormGrad layer_norm_backward(const LayerNormCache& cache, const Tensor& scale, const Tensor& dy);

// ---- cosine similarity ------------------------------------------------------

inline constexpr double kCosineNormFloor = 1e-12;

double cosine_sim(std::span<const double> a, std::span<const double> b);
// Accumulates dout * d cos / da and d cos / db.
void cosine_sim_backward(std::span<const double> a, std::span<const double> b, double dout,
                         std::span<double> da, std::span<double> db);

// ---- bilinear sampling ------------------------------------------------------

// Samples map [H,W,C] at normalised (u, v); pixel coords are u*(W-1), v*(H-1).
// Coordinates outside [0,1]^2 return zeros.
std::vector<double> bilinear_sample(const Tensor& map, double u, double v);
// out += weight * sample. Returns false (and adds nothing) when out of range.
bool bilinear_sample_into(const Tensor& map, double u, double v, double weight, std::span<double> out);
// Given dL/dsample, accumulates into dmap (if non-null) and du, dv (if non-null).
void bilinear_sample_backward(const Tensor& map, double u, double v, std::span<const double> dsample,
                              Tensor* dmap, double* du, double* dv);

// ---- layers -------------------------------------------------------------

class Linear {
 public:
  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out, bool bias = true);

  // Xavier-uniform weights multiplied by `scale`; zero bias.
  void init(ParamStore& store, Rng& rng, double scale = 1.0) const;
  Tensor forward(const ParamStore& store, const Tensor& x) const;
  // Accumulates dW, db into the store and returns dx.
  Tensor backward(ParamStore& store, const Tensor& x, const Tensor& dy) const;

  const std::string& name() const { return name_; }
  std::string weight_name() const { return name_ + ".weight"; }
  std::string bias_name() const { return name_ + ".bias"; }
  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }
  bool has_bias() const { return bias_; }

 private:
  std::string name_;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
  bool bias_ = true;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(std::string name, std::size_t dim) : name_(std::move(name)), dim_(dim) {}

  void init(ParamStore& store) const;
  Tensor forward(const ParamStore& store, const Tensor& x, LayerNormCache* cache = nullptr) const;
  Tensor backward(ParamStore& store, const LayerNormCache& cache, const Tensor& dy) const;

  std::string scale_name() const { return name_ + ".scale"; }
  std::string shift_name() const { return name_ + ".shift"; }

 private:
  std::string name_;
  std::size_t dim_ = 0;
};

struct MlpSpec {
  std::vector<std::size_t> widths;  // widths[0] is the input width
  bool layer_norm = false;          // layer norm before each hidden ReLU
  bool activate_output = false;     // apply (norm +) ReLU after the last layer too
};

struct MlpCache {
  std::vector<Tensor> inputs;  // input of each linear layer
  std::vector<Tensor> pre;     // output of each linear layer
  std::vector<LayerNormCache> norms;
  std::vector<Tensor> normed;  // input of each ReLU
};

class Mlp {
 public:
  Mlp() = default;
  // Throws ConfigError if the spec has fewer than two widths.
  Mlp(std::string name, MlpSpec spec);

  // `last_scale` multiplies the final layer's weights (0 gives a zero layer).
  void init(ParamStore& store, Rng& rng, double last_scale = 1.0) const;
  Tensor forward(const ParamStore& store, const Tensor& x, MlpCache* cache = nullptr) const;
  Tensor backward(ParamStore& store, const MlpCache& cache, const Tensor& dy) const;

  const Linear& layer(std::size_t i) const { return layers_[i]; }
  std::size_t num_layers() const { return layers_.size(); }
  std::size_t in_dim() const { return spec_.widths.front(); }
  std::size_t out_dim() const { return spec_.widths.back(); }
  const std::string& name() const { return name_; }

 private:
  bool activated(std::size_t layer) const {
    return layer + 1 < layers_.size() || spec_.activate_output;
  }

  std::string name_;
  MlpSpec spec_;
  std::vector<Linear> layers_;
  std::vector<LayerNorm> norms_;
};

// ---- test hooks -----------------------------------------------------------

namespace testing {
// Names a primitive ("linear", "layer_norm", "bilinear_sample", "softmax",
// "cosine_sim") whose backward rule is deliberately perturbed. Empty disables.
void set_corrupted_backward(const std::string& op);
bool is_corrupted(const char* op);
}  // namespace testing

}  // namespace fusion3d::kernels
