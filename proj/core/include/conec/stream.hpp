#pragma once

// Synthetic domain-incremental stream: Gaussian classes with means on a
// scaled simplex, and a per-domain shift (rotation of coordinate pairs,
// scaling, mean drift in the unused coordinates, extra noise) applied to
// every sample of that domain.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "conec/numkit.hpp"

namespace conec {

struct DomainShift {
  double rotation_deg = 0.0;  // applied to every pair (2i, 2i+1) inside the class block
  double scale = 1.0;
  double drift = 0.0;         // length of the mean offset along this domain's drift axis
  double noise = 0.0;         // extra isotropic noise added after the transform

  bool operator==(const DomainShift&) const = default;
};

struct StreamConfig {
  std::size_t num_domains = 5;
  std::size_t num_classes = 4;
  std::size_t raw_dim = 16;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  double class_scale = 4.0;  // class m has mean class_scale * e_m
  double class_noise = 1.0;  // isotropic within-class standard deviation
  /// One entry per domain; empty selects default_shifts(num_domains).
  std::vector<DomainShift> shifts;
  /// Test splits use a perturbed transform the model never trains on.
  bool unseen_test_domains = false;
  double unseen_rotation_deg = 15.0;
  double unseen_drift_factor = 1.25;
  std::uint64_t seed = 7;

  void validate() const;
  std::vector<DomainShift> resolved_shifts() const;

  bool operator==(const StreamConfig&) const = default;
};

/// Rotations 0, +30, -30, +60, -60 degrees (cycling), drift 5, unit scale.
std::vector<DomainShift> default_shifts(std::size_t num_domains);

struct DomainData {
  std::size_t id = 0;  // 1-based domain id within the stream
  Matrix train_x;
  std::vector<std::size_t> train_y;
  Matrix test_x;
  std::vector<std::size_t> test_y;

  bool operator==(const DomainData&) const = default;
};

/// Maps a clean sample to domain `index` (0-based) of the stream.
Vector apply_shift(const StreamConfig& config, std::size_t index, const DomainShift& shift,
                   std::span<const double> x);

std::vector<DomainData> generate(const StreamConfig& config);

/// `num_orders` distinct permutations of 1..B; the first is the identity.
std::vector<std::vector<std::size_t>> domain_orders(std::size_t num_domains, std::size_t num_orders,
                                                    std::uint64_t seed);

enum class Split { Train, Test };

/// Header x_0..x_{n-1},label,domain; values printed with 17 significant digits.
void export_csv(const std::filesystem::path& path, const std::vector<DomainData>& domains,
                Split split);

/// Reads one split written by export_csv; domains are grouped by id in file order.
std::vector<DomainData> import_csv(const std::filesystem::path& path, Split split);

}  // namespace conec
