#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "fusion3d/gradcheck.hpp"
#include "fusion3d/params.hpp"
#include "fusion3d/tensor.hpp"

namespace fusion3d::test {

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Perturbs every parameter so zero-initialised ones are exercised too.
inline void jitter(ParamStore& store, Rng& rng, double scale = 0.1) {
  for (auto& [_, p] : store)
    for (auto& v : p.value.storage()) v += rng.uniform(-scale, scale);
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline GradTarget target(const std::string& name, Tensor& value, const Tensor& grad, std::size_t max_entries,
                         Rng& rng) {
  GradTarget t{name, value.values(), grad.values(), {}};
  if (value.size() > max_entries) {
    std::vector<std::size_t> all(value.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    std::shuffle(all.begin(), all.end(), rng.engine());
    all.resize(max_entries);
    t.indices = std::move(all);
  }
  return t;
}

}  // namespace fusion3d::test
