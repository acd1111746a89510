#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fusion3d/params.hpp"

namespace fusion3d {

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckTolerance = 1e-4;
inline constexpr double kKinkStepRatio = 0.1;
inline constexpr double kKinkRelTol = 1e-3;
inline constexpr double kKinkAbsTol = 1e-7;

struct GradCheckReport {
  std::string op;
  double max_rel_error = 0.0;
  std::map<std::string, double> per_param;
  std::map<std::string, std::size_t> skipped;  // entries straddling a kink

  bool passed(double tol = kGradCheckTolerance) const { return max_rel_error < tol; }
  // Name of the parameter with the largest error (empty if none checked).
  std::string worst_param() const;
};

// |a - n| / max(1e-8, |a| + |n|)
double relative_error(double analytic, double numeric);

// One block of scalars to perturb. `values` is mutated in place during the
// check and restored afterwards; `analytic` holds the gradient computed by the
// backward rule. `indices` restricts the check to a subset (empty = all).
struct GradTarget {
  std::string name;
  std::span<double> values;
  std::span<const double> analytic;
  std::vector<std::size_t> indices;
};

// Central finite differences with step h against the supplied analytic
// gradients. Per-target error is the relative error of the gradient vectors
// (Euclidean norms in place of absolute values). Entries where the difference
// at step h disagrees with the one at h/10 sit on a kink and are skipped (and
// counted). Throws NumericError if the function returns a non-finite value.
GradCheckReport finite_diff_check(const std::string& op, const std::function<double()>& f,
                                  std::span<const GradTarget> targets, double step = kGradCheckStep);

// Convenience wrapper over a ParamStore: zeroes gradients, runs `backward`
// (which must evaluate the loss and accumulate gradients), snapshots them and
// checks every tensor. Tensors with more than `max_entries` scalars are checked
// at a random subset of that size drawn from `rng`.
GradCheckReport check_params(const std::string& op, ParamStore& store, const std::function<double()>& loss,
                             const std::function<void()>& backward, std::size_t max_entries, Rng& rng,
                             double step = kGradCheckStep);

}  // namespace fusion3d
