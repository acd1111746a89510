#include "fusion3d/params.hpp"

#include "fusion3d/errors.hpp"

namespace fusion3d {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finaliser over the combined value
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Param& ParamStore::add(const std::string& name, Tensor init) {
  if (entries_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  Tensor grad = Tensor::zeros_like(init);
  auto [it, _] = entries_.emplace(name, Param{std::move(init), std::move(grad)});
  return it->second;
}

Param& ParamStore::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::value(const std::string& name) const { return at(name).value; }
Tensor& ParamStore::value(const std::string& name) { return at(name).value; }
Tensor& ParamStore::grad(const std::string& name) { return at(name).grad; }
const Tensor& ParamStore::grad(const std::string& name) const { return at(name).grad; }

void ParamStore::zero_grad() {
  for (auto& [_, p] : entries_) p.grad.fill(0.0);
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, p] : entries_) n += p.value.size();
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

}  // namespace fusion3d
