#include "fusion3d/grm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fusion3d/errors.hpp"

namespace fusion3d {

namespace {

double dist3(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const double dx = a(i, 0) - b(j, 0), dy = a(i, 1) - b(j, 1), dz = a(i, 2) - b(j, 2);
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

// Mean that does not depend on the order of `v`.
double order_free_mean(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

KnnGraph knn_graph(const Tensor& coords, std::span<const std::size_t> ks) {
  if (coords.ndim() != 2 || coords.cols() != 3) throw DimensionError("knn_graph expects [M,3] coordinates");
  const std::size_t M = coords.rows();
  if (M < 2) throw InputError("knn_graph needs at least two nodes, got " + std::to_string(M));
  std::size_t kmax = 0;
  for (auto k : ks) kmax = std::max(kmax, std::min(k, M - 1));

  std::vector<std::vector<std::pair<double, std::size_t>>> sorted(M);
  for (std::size_t i = 0; i < M; ++i) {
    auto& row = sorted[i];
    row.reserve(M - 1);
    for (std::size_t j = 0; j < M; ++j)
      if (j != i) row.emplace_back(dist3(coords, i, coords, j), j);
    std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(kmax), row.end());
    row.resize(kmax);
  }

  KnnGraph g;
  for (auto k_req : ks) {
    KnnScale s;
    s.k = std::min(k_req, M - 1);
    s.neighbors.resize(M);
    s.distances.resize(M);
    std::vector<double> kth(M);
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t t = 0; t < s.k; ++t) {
        s.neighbors[i].push_back(sorted[i][t].second);
        s.distances[i].push_back(sorted[i][t].first);
      }
      kth[i] = s.k ? s.distances[i].back() : 0.0;
    }
    s.sigma = std::max(order_free_mean(std::move(kth)), kMinSigma);
    g.scales.push_back(std::move(s));
  }
  return g;
}

IdwNeighborhood idw_neighborhood(const Tensor& proposal_coords, const Tensor& point_coords, std::size_t k) {
  const std::size_t M = proposal_coords.rows(), N = point_coords.rows();
  if (N == 0) throw InputError("idw_neighborhood: no backbone points");
  const std::size_t keff = std::min(k, N);
  IdwNeighborhood nb;
  nb.neighbors.resize(M);
  nb.distances.resize(M);
  nb.mask.resize(M);
  std::vector<double> all;
  std::vector<std::pair<double, std::size_t>> row;
  for (std::size_t i = 0; i < M; ++i) {
    row.clear();
    for (std::size_t j = 0; j < N; ++j) row.emplace_back(dist3(proposal_coords, i, point_coords, j), j);
    std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(keff), row.end());
    for (std::size_t t = 0; t < keff; ++t) {
      nb.neighbors[i].push_back(row[t].second);
      nb.distances[i].push_back(row[t].first);
      all.push_back(row[t].first);
    }
  }
  nb.sigma = std::max(order_free_mean(std::move(all)), kMinSigma);
  for (std::size_t i = 0; i < M; ++i)
    for (double d : nb.distances[i]) nb.mask[i].push_back(d <= 2.0 * nb.sigma ? 1.0 : 0.0);
  return nb;
}

Tensor idw_aggregate(const IdwNeighborhood& nb, const Tensor& point_features, const Tensor& prior) {
  if (!(nb.sigma > 0)) throw InputError("idw_aggregate: sigma must be positive");
  const std::size_t M = nb.neighbors.size(), C = point_features.cols();
  if (prior.rows() != M || prior.cols() != C) throw DimensionError("idw_aggregate: prior shape mismatch");
  Tensor out({M, C});
  for (std::size_t i = 0; i < M; ++i) {
    double wsum = 0.0;
    auto orow = out.row(i);
    for (std::size_t t = 0; t < nb.neighbors[i].size(); ++t) {
      const double w = nb.mask[i][t] * std::exp(-nb.distances[i][t] / nb.sigma);
      if (w == 0.0) continue;
      wsum += w;
      const auto f = point_features.row(nb.neighbors[i][t]);
      for (std::size_t c = 0; c < C; ++c) orow[c] += w * f[c];
    }
    if (wsum > 0.0) {
      for (auto& v : orow) v /= wsum;
    } else {
      const auto p = prior.row(i);
      std::copy(p.begin(), p.end(), orow.begin());
    }
  }
  return out;
}

void idw_aggregate_backward(const IdwNeighborhood& nb, const Tensor& dout, Tensor& dpoint_features, Tensor& dprior) {
  const std::size_t M = nb.neighbors.size(), C = dout.cols();
  for (std::size_t i = 0; i < M; ++i) {
    double wsum = 0.0;
    for (std::size_t t = 0; t < nb.neighbors[i].size(); ++t)
      wsum += nb.mask[i][t] * std::exp(-nb.distances[i][t] / nb.sigma);
    const auto g = dout.row(i);
    if (wsum > 0.0) {
      for (std::size_t t = 0; t < nb.neighbors[i].size(); ++t) {
        const double w = nb.mask[i][t] * std::exp(-nb.distances[i][t] / nb.sigma) / wsum;
        if (w == 0.0) continue;
        auto d = dpoint_features.row(nb.neighbors[i][t]);
        for (std::size_t c = 0; c < C; ++c) d[c] += w * g[c];
      }
    } else {
      auto d = dprior.row(i);
      for (std::size_t c = 0; c < C; ++c) d[c] += g[c];
    }
  }
}

GraphReasoning::GraphReasoning(std::string name, GrmConfig config) : name_(std::move(name)), config_(std::move(config)) {
  if (config_.scales.empty()) throw ConfigError("graph reasoning needs at least one neighbourhood scale");
  const std::size_t C = config_.feature_dim, E = config_.edge_dim;
  edge_ = kernels::Mlp(name_ + ".edge", kernels::MlpSpec{{2 * C + 3, E, E}});
  for (std::size_t s = 0; s < config_.scales.size(); ++s) {
    const std::string p = name_ + ".scale" + std::to_string(s);
    query_.emplace_back(p + ".query", C, C);
    key_.emplace_back(p + ".key", C, C);
    psi_.emplace_back(p + ".psi", E, C);
  }
  fusion_ = kernels::Mlp(name_ + ".fusion", kernels::MlpSpec{{config_.scales.size() * C, C, C}});
}

void GraphReasoning::init(ParamStore& store, Rng& rng) const {
  edge_.init(store, rng);
  for (std::size_t s = 0; s < query_.size(); ++s) {
    query_[s].init(store, rng);
    key_[s].init(store, rng);
    psi_[s].init(store, rng);
  }
  fusion_.init(store, rng);
  store.add(gamma_name(), Tensor({1}, 0.0));
}

std::vector<double> GraphReasoning::edge_features(const ParamStore& store, std::span<const double> xi,
                                                  std::span<const double> xj, const std::array<double, 3>& rel) const {
  const std::size_t C = config_.feature_dim;
  if (xi.size() != C || xj.size() != C) throw DimensionError("edge_features: node feature width mismatch");
  Tensor in({1, 2 * C + 3});
  for (std::size_t c = 0; c < C; ++c) {
    in(0, c) = xi[c];
    in(0, C + c) = xj[c] - xi[c];
  }
  for (std::size_t a = 0; a < 3; ++a) in(0, 2 * C + a) = rel[a];
  const Tensor out = edge_.forward(store, in);
  return {out.storage().begin(), out.storage().end()};
}

namespace {

struct EdgeBlock {
  Tensor pre;    // [M * fan, E]
  Tensor edges;  // [M * fan, E]
};

// Edge MLP with its first layer split over the [x_i ; x_j - x_i ; p_i - p_j]
// blocks so that per-node products are shared by all incident edges.
EdgeBlock compute_edges(const ParamStore& store, const kernels::Mlp& edge, const Tensor& coords, const Tensor& nodes,
                        const std::vector<std::vector<std::size_t>>& neighbors, std::size_t fan) {
  const std::size_t M = nodes.rows(), C = nodes.cols();
  const Tensor& W0 = store.value(edge.layer(0).weight_name());
  const Tensor& b0 = store.value(edge.layer(0).bias_name());
  const std::size_t E = W0.cols();
  const Tensor P = kernels::matmul(nodes, W0.slice_rows(0, C));
  const Tensor Q = kernels::matmul(nodes, W0.slice_rows(C, 2 * C));
  EdgeBlock out;
  out.pre = Tensor({M * fan, E});
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t t = 0; t < fan; ++t) {
      const std::size_t j = neighbors[i][t];
      auto r = out.pre.row(i * fan + t);
      const double rel[3] = {coords(i, 0) - coords(j, 0), coords(i, 1) - coords(j, 1), coords(i, 2) - coords(j, 2)};
      for (std::size_t e = 0; e < E; ++e) {
        r[e] = P(i, e) + (Q(j, e) - Q(i, e)) + rel[0] * W0(2 * C, e) + rel[1] * W0(2 * C + 1, e) +
               rel[2] * W0(2 * C + 2, e) + b0[e];
      }
    }
  }
  out.edges = edge.layer(1).forward(store, kernels::relu(out.pre));
  return out;
}

struct BranchForward {
  Tensor q, k;
  std::vector<double> cos, alpha, spatial;
  Tensor agg;
  std::vector<double> beta_sum;
  Tensor out;  // [M, C]
};

BranchForward branch_forward(const ParamStore& store, const kernels::Linear& query, const kernels::Linear& key,
                             const kernels::Linear& psi, const Tensor& coords, const Tensor& nodes,
                             const KnnScale& scale, const Tensor& edges, std::size_t fan) {
  const std::size_t M = nodes.rows(), E = edges.cols();
  BranchForward b;
  b.q = query.forward(store, nodes);
  b.k = key.forward(store, nodes);
  b.cos.assign(M * fan, 0.0);
  b.alpha.assign(M * fan, 0.0);
  b.spatial.assign(M * fan, 0.0);
  b.agg = Tensor({M, E});
  b.beta_sum.assign(M, 0.0);
  const double two_s2 = 2.0 * scale.sigma * scale.sigma;
  for (std::size_t i = 0; i < M; ++i) {
    const std::size_t k = scale.k;
    std::span<double> logits(b.alpha.data() + i * fan, k);
    for (std::size_t t = 0; t < k; ++t) {
      const std::size_t j = scale.neighbors[i][t];
      b.cos[i * fan + t] = kernels::cosine_sim(b.q.row(i), b.k.row(j));
      logits[t] = b.cos[i * fan + t];
      const double d = dist3(coords, i, coords, j);
      b.spatial[i * fan + t] = std::exp(-d * d / two_s2);
    }
    kernels::softmax_inplace(logits);
    auto agg = b.agg.row(i);
    for (std::size_t t = 0; t < k; ++t) {
      const double beta = b.alpha[i * fan + t] * b.spatial[i * fan + t];
      b.beta_sum[i] += beta;
      const auto e = edges.row(i * fan + t);
      for (std::size_t c = 0; c < E; ++c) agg[c] += beta * e[c];
    }
  }
  static const Tensor kNoBias;
  b.out = kernels::linear(b.agg, store.value(psi.weight_name()), kNoBias);
  const Tensor& bias = store.value(psi.bias_name());
  for (std::size_t i = 0; i < M; ++i) {
    auto r = b.out.row(i);
    for (std::size_t c = 0; c < r.size(); ++c) r[c] += b.beta_sum[i] * bias[c];
  }
  return b;
}

}  // namespace

ScaleAttention GraphReasoning::scale_attention(const ParamStore& store, const Tensor& coords, const Tensor& nodes,
                                               const KnnScale& scale, std::size_t branch) const {
  const std::size_t fan = scale.k;
  const EdgeBlock eb = compute_edges(store, edge_, coords, nodes, scale.neighbors, fan);
  BranchForward b = branch_forward(store, query_.at(branch), key_.at(branch), psi_.at(branch), coords, nodes, scale,
                                   eb.edges, fan);
  ScaleAttention out;
  const std::size_t M = nodes.rows();
  out.alpha.resize(M);
  out.spatial.resize(M);
  for (std::size_t i = 0; i < M; ++i) {
    out.alpha[i].assign(b.alpha.begin() + static_cast<std::ptrdiff_t>(i * fan),
                        b.alpha.begin() + static_cast<std::ptrdiff_t>(i * fan + scale.k));
    out.spatial[i].assign(b.spatial.begin() + static_cast<std::ptrdiff_t>(i * fan),
                          b.spatial.begin() + static_cast<std::ptrdiff_t>(i * fan + scale.k));
  }
  out.aggregated = std::move(b.out);
  return out;
}

Tensor GraphReasoning::forward(const ParamStore& store, const Tensor& coords, const Tensor& features,
                               const Tensor& point_coords, const Tensor& point_features, const GrmOptions& options,
                               GrmCache* cache, bool* degenerate) const {
  const std::size_t C = config_.feature_dim;
  if (coords.ndim() != 2 || coords.cols() != 3) throw DimensionError("grm: coordinates must be [M,3]");
  const std::size_t M = coords.rows();
  if (M == 0) throw InputError("grm: empty proposal set");
  require_shape(features, {M, C}, "grm features");
  if (point_features.cols() != C || point_features.rows() != point_coords.rows()) {
    throw DimensionError("grm: backbone point features must be [N," + std::to_string(C) + "]");
  }
  if (options.only_scale &&
      std::find(config_.scales.begin(), config_.scales.end(), *options.only_scale) == config_.scales.end()) {
    throw ConfigError("grm: scale k=" + std::to_string(*options.only_scale) + " is not configured");
  }
  if (degenerate) *degenerate = (M == 1);
  if (M == 1) {
    if (cache) {
      *cache = GrmCache{};
      cache->degenerate = true;
    }
    return features;
  }

  GrmCache local;
  GrmCache& c = cache ? *cache : local;
  c = GrmCache{};
  c.coords = coords;
  c.idw = idw_neighborhood(coords, point_coords, config_.idw_k);
  c.nodes = idw_aggregate(c.idw, point_features, features);
  c.graph = knn_graph(coords, config_.scales);
  c.fan = 0;
  std::size_t widest = 0;
  for (std::size_t s = 0; s < c.graph.scales.size(); ++s) {
    if (c.graph.scales[s].k > c.fan) {
      c.fan = c.graph.scales[s].k;
      widest = s;
    }
  }
  EdgeBlock eb = compute_edges(store, edge_, coords, c.nodes, c.graph.scales[widest].neighbors, c.fan);
  c.edge_pre = std::move(eb.pre);
  c.edges = std::move(eb.edges);

  const std::size_t S = config_.scales.size();
  c.fused_in = Tensor({M, S * C});
  c.scales.resize(S);
  for (std::size_t s = 0; s < S; ++s) {
    auto& sc = c.scales[s];
    sc.active = !options.only_scale || config_.scales[s] == *options.only_scale;
    if (!sc.active) continue;
    BranchForward b = branch_forward(store, query_[s], key_[s], psi_[s], coords, c.nodes, c.graph.scales[s], c.edges,
                                     c.fan);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t ch = 0; ch < C; ++ch) c.fused_in(i, s * C + ch) = b.out(i, ch);
    sc.q = std::move(b.q);
    sc.k = std::move(b.k);
    sc.cos = std::move(b.cos);
    sc.alpha = std::move(b.alpha);
    sc.spatial = std::move(b.spatial);
    sc.agg = std::move(b.agg);
    sc.beta_sum = std::move(b.beta_sum);
  }
  c.fusion_out = fusion_.forward(store, c.fused_in, &c.fusion);
  const double gamma = store.value(gamma_name())[0];
  Tensor out = features;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += gamma * c.fusion_out[i];
  return out;
}

void GraphReasoning::backward(ParamStore& store, const GrmCache& c, const Tensor& dout, Tensor& dfeatures,
                              Tensor& dpoint_features) const {
  dfeatures += dout;
  if (c.degenerate) return;
  const std::size_t C = config_.feature_dim;
  const std::size_t M = dout.rows();
  const std::size_t fan = c.fan;

  double dgamma = 0.0;
  for (std::size_t i = 0; i < dout.size(); ++i) dgamma += dout[i] * c.fusion_out[i];
  store.grad(gamma_name())[0] += dgamma;
  const double gamma = store.value(gamma_name())[0];
  Tensor dz = dout;
  dz *= gamma;
  const Tensor dfused = fusion_.backward(store, c.fusion, dz);

  Tensor dnodes({M, C});
  Tensor dedges = Tensor::zeros_like(c.edges);
  const std::size_t E = c.edges.cols();
  for (std::size_t s = 0; s < c.scales.size(); ++s) {
    const auto& sc = c.scales[s];
    if (!sc.active) continue;
    const KnnScale& scale = c.graph.scales[s];
    Tensor dout_s({M, C});
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t ch = 0; ch < C; ++ch) dout_s(i, ch) = dfused(i, s * C + ch);

    // psi applied to the beta-weighted edge sum, bias scaled by sum(beta)
    const Tensor& Wpsi = store.value(psi_[s].weight_name());
    const Tensor& bpsi = store.value(psi_[s].bias_name());
    kernels::matmul_tn_acc(sc.agg, dout_s, store.grad(psi_[s].weight_name()));
    Tensor& dbpsi = store.grad(psi_[s].bias_name());
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t ch = 0; ch < C; ++ch) dbpsi[ch] += sc.beta_sum[i] * dout_s(i, ch);
    const Tensor dagg = kernels::matmul_nt(dout_s, Wpsi);

    Tensor dq = Tensor::zeros_like(sc.q);
    Tensor dk = Tensor::zeros_like(sc.k);
    std::vector<double> dalpha(scale.k), dlogit(scale.k);
    for (std::size_t i = 0; i < M; ++i) {
      double bias_dot = 0.0;
      for (std::size_t ch = 0; ch < C; ++ch) bias_dot += dout_s(i, ch) * bpsi[ch];
      const auto da = dagg.row(i);
      for (std::size_t t = 0; t < scale.k; ++t) {
        const std::size_t slot = i * fan + t;
        const auto e = c.edges.row(slot);
        double dbeta = bias_dot;
        for (std::size_t ch = 0; ch < E; ++ch) dbeta += da[ch] * e[ch];
        const double beta = sc.alpha[slot] * sc.spatial[slot];
        auto de = dedges.row(slot);
        for (std::size_t ch = 0; ch < E; ++ch) de[ch] += beta * da[ch];
        dalpha[t] = dbeta * sc.spatial[slot];
        dlogit[t] = 0.0;
      }
      kernels::softmax_row_backward(std::span<const double>(sc.alpha.data() + i * fan, scale.k), dalpha, dlogit);
      for (std::size_t t = 0; t < scale.k; ++t) {
        const std::size_t j = scale.neighbors[i][t];
        kernels::cosine_sim_backward(sc.q.row(i), sc.k.row(j), dlogit[t], dq.row(i), dk.row(j));
      }
    }
    dnodes += query_[s].backward(store, c.nodes, dq);
    dnodes += key_[s].backward(store, c.nodes, dk);
  }

  // Edge MLP, second layer then the split first layer.
  const Tensor hidden = kernels::relu(c.edge_pre);
  const Tensor dhidden = edge_.layer(1).backward(store, hidden, dedges);
  const Tensor dpre = kernels::relu_backward(c.edge_pre, dhidden);
  const KnnScale* widest = nullptr;
  for (const auto& s : c.graph.scales)
    if (!widest || s.k > widest->k) widest = &s;

  Tensor G({M, E}), H({M, E});
  Tensor& dW0 = store.grad(edge_.layer(0).weight_name());
  Tensor& db0 = store.grad(edge_.layer(0).bias_name());
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t t = 0; t < fan; ++t) {
      const std::size_t j = widest->neighbors[i][t];
      const auto d = dpre.row(i * fan + t);
      for (std::size_t a = 0; a < 3; ++a) {
        const double rel = c.coords(i, a) - c.coords(j, a);
        for (std::size_t e = 0; e < E; ++e) dW0(2 * C + a, e) += rel * d[e];
      }
      for (std::size_t e = 0; e < E; ++e) {
        G(i, e) += d[e];
        H(j, e) += d[e];
        db0[e] += d[e];
      }
    }
  }
  Tensor HmG = H;
  for (std::size_t i = 0; i < HmG.size(); ++i) HmG[i] -= G[i];
  Tensor dWa({C, E}), dWb({C, E});
  kernels::matmul_tn_acc(c.nodes, G, dWa);
  kernels::matmul_tn_acc(c.nodes, HmG, dWb);
  for (std::size_t r = 0; r < C; ++r)
    for (std::size_t e = 0; e < E; ++e) {
      dW0(r, e) += dWa(r, e);
      dW0(C + r, e) += dWb(r, e);
    }
  const Tensor& W0 = store.value(edge_.layer(0).weight_name());
  dnodes += kernels::matmul_nt(G, W0.slice_rows(0, C));
  dnodes += kernels::matmul_nt(HmG, W0.slice_rows(C, 2 * C));

  idw_aggregate_backward(c.idw, dnodes, dpoint_features, dfeatures);
}

}  // namespace fusion3d
