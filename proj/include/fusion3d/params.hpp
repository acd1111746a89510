#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fusion3d/tensor.hpp"

namespace fusion3d {

// Seeded random source used for initialisation, data generation and shuffles.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  // Uniform integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

// Derives a decorrelated child seed from (seed, stream).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

struct Param {
  Tensor value;
  Tensor grad;
};

// Named learnable tensors with matching gradient slots.
//
// Iteration is in lexicographic name order. Forward passes only read values, so
// concurrent inference against a const store is safe; gradient accumulation
// needs exclusive access.
class ParamStore {
 public:
  using Map = std::map<std::string, Param>;

  // Registers a new parameter; throws ConfigError on a duplicate name.
  Param& add(const std::string& name, Tensor init);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& value(const std::string& name) const;
  Tensor& value(const std::string& name);
  Tensor& grad(const std::string& name);
  const Tensor& grad(const std::string& name) const;
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;

  void zero_grad();
  std::size_t size() const { return entries_.size(); }
  std::size_t num_scalars() const;
  std::vector<std::string> names() const;

  Map::iterator begin() { return entries_.begin(); }
  Map::iterator end() { return entries_.end(); }
  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }

 private:
  Map entries_;
};

}  // namespace fusion3d
