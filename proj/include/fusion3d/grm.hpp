#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fusion3d/kernels.hpp"

// Graph reasoning over proposals: boundary-gated inverse-distance pooling of
// backbone point features, multi-scale k-NN graph attention with Gaussian
// spatial weights, and a gamma-gated residual fusion of the scales.
namespace fusion3d {

inline constexpr double kMinSigma = 1e-9;

struct KnnScale {
  std::size_t k = 0;  // effective k = min(requested, M - 1)
  std::vector<std::vector<std::size_t>> neighbors;
  std::vector<std::vector<double>> distances;
  double sigma = 0.0;  // mean distance to the k-th neighbour
};

struct KnnGraph {
  std::vector<KnnScale> scales;
};

// Exact k-NN per scale, nearest first, ties to the lower index, no self loops.
// Throws InputError for fewer than two nodes.
KnnGraph knn_graph(const Tensor& coords, std::span<const std::size_t> ks);

// Proposal -> backbone point neighbourhoods for inverse-distance pooling.
struct IdwNeighborhood {
  std::vector<std::vector<std::size_t>> neighbors;
  std::vector<std::vector<double>> distances;
  std::vector<std::vector<double>> mask;  // boundary mask zeta in {0, 1}
  double sigma = 0.0;
};

// k nearest points per proposal; sigma is the mean k-NN distance and the mask
// keeps neighbours within 2 * sigma.
IdwNeighborhood idw_neighborhood(const Tensor& proposal_coords, const Tensor& point_coords, std::size_t k);

// f_i = sum zeta w f_j / sum zeta w with w = exp(-d / sigma). Rows whose
// masked weight sum is zero keep `prior` unchanged.
Tensor idw_aggregate(const IdwNeighborhood& nb, const Tensor& point_features, const Tensor& prior);
void idw_aggregate_backward(const IdwNeighborhood& nb, const Tensor& dout, Tensor& dpoint_features, Tensor& dprior);

struct GrmConfig {
  std::size_t feature_dim = 64;
  std::size_t edge_dim = 32;
  std::vector<std::size_t> scales = {5, 10, 20};
  std::size_t idw_k = 8;
};

struct GrmOptions {
  // When set, only the branch whose k equals this value contributes.
  std::optional<std::size_t> only_scale;
};

struct ScaleAttention {
  std::vector<std::vector<double>> alpha;    // softmax over neighbours
  std::vector<std::vector<double>> spatial;  // Gaussian weights
  Tensor aggregated;                         // [M, C]
};

struct GrmCache {
  bool degenerate = false;
  IdwNeighborhood idw;
  Tensor coords;
  Tensor nodes;  // IDW-pooled node features
  KnnGraph graph;
  std::size_t fan = 0;  // edges per node (largest effective k)
  Tensor edge_pre, edges;
  struct Scale {
    Tensor q, k;
    std::vector<double> cos, alpha, spatial;  // per edge slot (node-major, fan stride)
    Tensor agg;                               // [M, C_edge]
    std::vector<double> beta_sum;
    bool active = true;
  };
  std::vector<Scale> scales;
  Tensor fused_in;
  kernels::MlpCache fusion;
  Tensor fusion_out;
};

class GraphReasoning {
 public:
  GraphReasoning() = default;
  GraphReasoning(std::string name, GrmConfig config);

  // gamma starts at 0 so the module is an exact identity at initialisation.
  void init(ParamStore& store, Rng& rng) const;

  // Returns updated proposal features [M, C]. `degenerate` is set when M = 1,
  // in which case the input is returned unchanged.
  Tensor forward(const ParamStore& store, const Tensor& coords, const Tensor& features, const Tensor& point_coords,
                 const Tensor& point_features, const GrmOptions& options = {}, GrmCache* cache = nullptr,
                 bool* degenerate = nullptr) const;

  // Accumulates parameter gradients; adds into dfeatures and dpoint_features.
  void backward(ParamStore& store, const GrmCache& cache, const Tensor& dout, Tensor& dfeatures,
                Tensor& dpoint_features) const;

  // Edge function on one (x_i, x_j, p_i - p_j) triple: MLP([x_i; x_j - x_i; p_i - p_j]).
  std::vector<double> edge_features(const ParamStore& store, std::span<const double> xi, std::span<const double> xj,
                                    const std::array<double, 3>& rel) const;

  // Attention weights and aggregate of one scale branch over the given node
  // features (edges are recomputed from `nodes`).
  ScaleAttention scale_attention(const ParamStore& store, const Tensor& coords, const Tensor& nodes,
                                 const KnnScale& scale, std::size_t branch) const;

  const GrmConfig& config() const { return config_; }
  std::string gamma_name() const { return name_ + ".gamma"; }

 private:
  std::string name_;
  GrmConfig config_;
  kernels::Mlp edge_;
  std::vector<kernels::Linear> query_, key_, psi_;
  kernels::Mlp fusion_;
};

}  // namespace fusion3d
