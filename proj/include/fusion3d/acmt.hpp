#pragma once

#include <string>
#include <vector>

#include "fusion3d/backbones.hpp"
#include "fusion3d/geometry.hpp"
#include "fusion3d/kernels.hpp"

// Cross-modal transformer layer: multi-head cross-attention to point features,
// multi-scale deformable attention into the image pyramid, per-head gating of
// the two branches, then a feed-forward block.
namespace fusion3d {

struct AcmtConfig {
  std::size_t feature_dim = 64;
  std::size_t image_dim = 32;
  std::size_t heads = 4;
  std::size_t levels = kPyramidLevels;
  std::size_t points = 4;  // sampling points per head and level
  std::size_t ffn_dim = 128;

  // Throws ConfigError unless heads divides feature_dim and all sizes are positive.
  void validate() const;
};

struct QueryState {
  Tensor y;                      // [M, C]
  std::vector<RefPoint> refs;    // one per query
  Tensor coords;                 // [M, 3]
};

// Projects every query centre into the image.
std::vector<RefPoint> project_queries(const CameraModel& cam, const Tensor& coords);

// ---- cross-attention --------------------------------------------------------

struct CrossAttentionCache {
  Tensor y, x, q, k, v;
  std::vector<double> attn;  // [H, M, N]
  Tensor context;            // [M, C] concatenated head outputs
};

class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(std::string name, std::size_t dim, std::size_t heads);

  void init(ParamStore& store, Rng& rng) const;
  // Queries from y [M,C], keys and values from x [N,C]. Returns [M,C].
  Tensor forward(const ParamStore& store, const Tensor& y, const Tensor& x, CrossAttentionCache* cache = nullptr) const;
  void backward(ParamStore& store, const CrossAttentionCache& cache, const Tensor& dout, Tensor& dy, Tensor& dx) const;

  const kernels::Linear& value() const { return value_; }
  const kernels::Linear& output() const { return output_; }

 private:
  std::size_t dim_ = 0, heads_ = 0;
  kernels::Linear query_, key_, value_, output_;
};

// ---- deformable attention ---------------------------------------------------

struct DeformableCache {
  Tensor y;
  std::vector<RefPoint> refs;
  Tensor offsets;             // [M, H*L*P*2] raw offsets (pixels of each level)
  std::vector<double> weights;  // [M, H, L*P] softmax weights
  Tensor gathered;            // [M, H*C_img] weighted sample sums per head
  Tensor heads_out;           // [M, C]
};

class DeformableAttention {
 public:
  DeformableAttention() = default;
  DeformableAttention(std::string name, const AcmtConfig& config);

  // Offsets start at zero so every sample begins at the reference point.
  void init(ParamStore& store, Rng& rng) const;
  // Rows with an invalid reference point are exactly zero.
  Tensor forward(const ParamStore& store, const Tensor& y, const std::vector<RefPoint>& refs,
                 const ImagePyramid& pyramid, DeformableCache* cache = nullptr) const;
  // dlevels must have the pyramid's shapes; gradients are accumulated.
  void backward(ParamStore& store, const DeformableCache& cache, const ImagePyramid& pyramid, const Tensor& dout,
                Tensor& dy, std::vector<Tensor>& dlevels) const;

  const kernels::Linear& offsets() const { return offsets_; }
  const kernels::Linear& weights() const { return weights_; }
  const kernels::Linear& value() const { return value_; }
  const kernels::Linear& output() const { return output_; }

 private:
  AcmtConfig config_;
  kernels::Linear offsets_, weights_, value_, output_;
};

// ---- gating -------------------------------------------------------------------

struct GateCache {
  Tensor yp, yi;
  kernels::MlpCache mlp;
  std::vector<double> lambda;  // [M, H, 2]: point weight then image weight
};

class CrossModalGate {
 public:
  CrossModalGate() = default;
  CrossModalGate(std::string name, std::size_t dim, std::size_t heads);

  // The last layer starts at zero, so both modalities begin at weight 0.5.
  void init(ParamStore& store, Rng& rng) const;
  // Per head h: [lp, li] = softmax(logits_h), out = lp * yp + li * yi on the
  // head's channel slice. `fixed` skips the MLP and uses (0.5, 0.5).
  Tensor forward(const ParamStore& store, const Tensor& y, const Tensor& yp, const Tensor& yi, bool fixed = false,
                 GateCache* cache = nullptr) const;
  void backward(ParamStore& store, const GateCache& cache, const Tensor& dout, Tensor& dy, Tensor& dyp,
                Tensor& dyi) const;

  const kernels::Mlp& mlp() const { return mlp_; }

 private:
  std::size_t dim_ = 0, heads_ = 0;
  kernels::Mlp mlp_;
};

// ---- layer ----------------------------------------------------------------------

struct AcmtOptions {
  bool fixed_gate = false;
};

struct AcmtLayerCache {
  Tensor y_in;
  kernels::LayerNormCache ln1, ln2;
  Tensor u, yp, yi, y_mid, v;
  CrossAttentionCache cross;
  DeformableCache deform;
  GateCache gate;
  kernels::MlpCache ffn;
};

class AcmtLayer {
 public:
  AcmtLayer() = default;
  AcmtLayer(std::string name, AcmtConfig config);

  void init(ParamStore& store, Rng& rng) const;
  // u = LN(y); y += gate(u, CrossAttn(u, x), DeformAttn(u, pyramid)); y += FFN(LN(y)).
  Tensor forward(const ParamStore& store, const QueryState& state, const Tensor& context, const ImagePyramid& pyramid,
                 const AcmtOptions& options = {}, AcmtLayerCache* cache = nullptr) const;
  // Accumulates into dy (queries), dcontext and dlevels.
  void backward(ParamStore& store, const AcmtLayerCache& cache, const ImagePyramid& pyramid, const Tensor& dout,
                Tensor& dy, Tensor& dcontext, std::vector<Tensor>& dlevels) const;

  const CrossAttention& cross() const { return cross_; }
  const DeformableAttention& deform() const { return deform_; }
  const CrossModalGate& gate() const { return gate_; }
  const kernels::Mlp& ffn() const { return ffn_; }
  const AcmtConfig& config() const { return config_; }

 private:
  AcmtConfig config_;
  kernels::LayerNorm ln1_, ln2_;
  CrossAttention cross_;
  DeformableAttention deform_;
  CrossModalGate gate_;
  kernels::Mlp ffn_;
};

}  // namespace fusion3d
