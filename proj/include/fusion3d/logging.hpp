#pragma once

#include <spdlog/spdlog.h>

namespace fusion3d {

inline constexpr const char* kLogEnvVar = "FUSION3D_LOG";

// Sets the default logger to stderr at the level named by FUSION3D_LOG
// (trace, debug, info, warn, error, off; default warn). Safe to call twice.
void init_logging();

}  // namespace fusion3d
