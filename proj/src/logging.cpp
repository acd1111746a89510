#include "fusion3d/logging.hpp"

#include <cstdlib>

#include <spdlog/sinks/stdout_sinks.h>

namespace fusion3d {

void init_logging() {
  static bool done = false;
  if (!done) {
    auto logger = spdlog::stderr_logger_mt("fusion3d");
    logger->set_pattern("[%l] %v");
    spdlog::set_default_logger(logger);
    done = true;
  }
  auto level = spdlog::level::warn;
  if (const char* env = std::getenv(kLogEnvVar)) {
    const auto parsed = spdlog::level::from_str(env);
    if (parsed != spdlog::level::off || std::string(env) == "off") level = parsed;
  }
  spdlog::set_level(level);
}

}  // namespace fusion3d
