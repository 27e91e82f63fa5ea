#pragma once

// Experiment runner behind the `conec` executable.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "conec/config.hpp"
#include "conec/engine.hpp"

namespace conec::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kNumericError = 3, kInvariantViolation = 4 };

struct RunSpec {
  std::filesystem::path config_path;  // empty: built-in defaults
  std::filesystem::path out_dir = "conec_out";
  std::string mode = "train";  // train | eval | sweep | ablation | dump-embeddings
  std::optional<std::uint64_t> seed;
  std::optional<std::vector<std::size_t>> order;
  std::filesystem::path checkpoint;
};

/// "3,1,2" -> {3, 1, 2}; throws ConfigError on anything else.
std::vector<std::size_t> parse_order(const std::string& text);

struct LabeledRun {
  std::string label;
  std::size_t order_id = 0;
  std::vector<std::size_t> order;
  MetricsRecord metrics;
};

void write_metrics_csv(const std::filesystem::path& path, const std::vector<LabeledRun>& runs);
void write_metrics_json(const std::filesystem::path& path, const std::vector<LabeledRun>& runs);
/// One row per run plus mean and std rows.
void write_summary_csv(const std::filesystem::path& path, const std::vector<LabeledRun>& runs);

/// Structural checks on a finished run; returns one message per violation.
std::vector<std::string> check_invariants(const Engine& engine, const MetricsRecord& metrics);

/// Runs the requested mode; diagnostics go to `err`.
int run(const RunSpec& spec, std::ostream& err);

}  // namespace conec::cli
