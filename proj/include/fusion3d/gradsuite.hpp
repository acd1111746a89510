#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fusion3d/gradcheck.hpp"

// Finite-difference verification of every parameterised op at small sizes.
namespace fusion3d {

struct GradSuiteRow {
  std::string module;
  std::string group;  // op and parameter or input name
  double max_rel_error = 0.0;
  std::size_t seeds = 0;
  std::size_t skipped = 0;  // entries excluded as kinks, summed over seeds
};

struct GradSuiteResult {
  std::vector<GradSuiteRow> rows;  // one per group, in check order
  double max_rel_error = 0.0;
  std::string worst;  // "module/group"
  double seconds = 0.0;

  bool passed(double tol = kGradCheckTolerance) const { return max_rel_error < tol; }
};

// Modules: kernels, backbones, grm, acmt, decoder, or all.
const std::vector<std::string>& gradsuite_modules();

// Throws ConfigError for an unknown module or zero seeds.
GradSuiteResult run_gradcheck_suite(const std::string& module, std::size_t seeds = 20, std::uint64_t base_seed = 0);

}  // namespace fusion3d
