#pragma once

// Flat "key = value" run configuration covering the stream, the backbone,
// the engine and the order sweep. Lines starting with '#' are comments.
// Unknown keys and malformed values raise ConfigError naming the line.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include "conec/engine.hpp"
#include "conec/stream.hpp"

namespace conec {

struct RunConfig {
  StreamConfig stream;
  EngineConfig engine;
  std::size_t num_orders = 5;
  std::uint64_t order_seed = 11;

  /// Copies stream-derived sizes into the engine and validates everything.
  void finalize();

  bool operator==(const RunConfig&) const = default;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical text with every key; parse_config(format_config(c)) == c.
std::string format_config(const RunConfig& config);

}  // namespace conec
