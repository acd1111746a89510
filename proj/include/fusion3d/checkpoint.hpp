#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "fusion3d/optim.hpp"
#include "fusion3d/params.hpp"

// Binary checkpoint layout (all integers and reals little-endian):
//
//   "GF3D" | u32 version | u64 n, config JSON | u64 n, state JSON
//   u64 tensor count, then per tensor:
//     u32 n, name | u32 rank | u64 dims[rank] | f64 values
//   u8 has_optimizer; if 1: u64 step, then per tensor (same order) the first
//     and second moments as f64 values
namespace fusion3d {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_json;
  std::string state_json = "{}";  // training position, best metric
  std::map<std::string, Tensor> tensors;
  std::optional<std::uint64_t> optimizer_step;
  std::map<std::string, AdamW::Moments> moments;

  static Checkpoint capture(const ParamStore& store, const std::string& config_json,
                            const AdamW* optimizer = nullptr, const std::string& state_json = "{}");

  std::string serialize() const;
  // Throws CheckpointError on bad magic, unknown version or truncation.
  static Checkpoint deserialize(const std::string& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  // Copies the tensors into a store built from the matching config. Throws
  // CheckpointError naming the tensor on a missing, extra or mis-shaped entry.
  void restore(ParamStore& store) const;
  void restore_optimizer(AdamW& optimizer) const;
};

}  // namespace fusion3d
