#pragma once

#include <map>
#include <string>

#include "fusion3d/params.hpp"

namespace fusion3d {

// Adam moments with decoupled weight decay.
class AdamW {
 public:
  struct Moments {
    Tensor m, v;
  };

  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  // Applies one update with learning rate `lr` from the gradients in `store`.
  void step(ParamStore& store, double lr);

  std::uint64_t steps() const { return t_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }
  void restore(std::uint64_t t, std::map<std::string, Moments> moments);

 private:
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

// Scales all gradients so their global Euclidean norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_grad_norm(ParamStore& store, double max_norm);

}  // namespace fusion3d
