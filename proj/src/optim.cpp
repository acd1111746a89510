#include "fusion3d/optim.hpp"

#include <cmath>

namespace fusion3d {

void AdamW::step(ParamStore& store, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (auto& [name, p] : store) {
    auto it = moments_.find(name);
    if (it == moments_.end()) {
      it = moments_.emplace(name, Moments{Tensor::zeros_like(p.value), Tensor::zeros_like(p.value)}).first;
    }
    auto& m = it->second.m.storage();
    auto& v = it->second.v.storage();
    auto& w = p.value.storage();
    const auto& g = p.grad.storage();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1 * m[i] + (1 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1 - beta2) * g[i] * g[i];
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      w[i] -= lr * (update + weight_decay * w[i]);
    }
  }
}

void AdamW::restore(std::uint64_t t, std::map<std::string, Moments> moments) {
  t_ = t;
  moments_ = std::move(moments);
}

double clip_grad_norm(ParamStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, p] : store)
    for (double g : p.grad.storage()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [_, p] : store) p.grad *= s;
  }
  return norm;
}

}  // namespace fusion3d
