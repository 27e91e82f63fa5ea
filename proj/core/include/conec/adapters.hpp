#pragma once

// Low-rank adapters (delta W = A B) and the shared / task-specific bank that
// routes them onto the transformer blocks.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "conec/numkit.hpp"

namespace conec {

class BinaryWriter;
class BinaryReader;

/// Attention projection a LoRA pair is attached to.
enum class Projection : std::uint8_t { Query = 0, Key = 1, Value = 2 };

std::string to_string(Projection p);
Projection parse_projection(const std::string& name);

/// delta W = A B with A: d x r (up-projection, zero at creation) and
/// B: r x k (down-projection). Shared adapters keep B frozen with
/// orthonormal rows.
struct LoraAdapter {
  Matrix a;
  Matrix b;
  Projection target = Projection::Query;
  bool b_trainable = false;

  std::size_t rank() const noexcept { return b.rows(); }
  std::size_t out_dim() const noexcept { return a.rows(); }
  std::size_t in_dim() const noexcept { return b.cols(); }

  bool operator==(const LoraAdapter&) const = default;
};

struct LoraGrad {
  Matrix a;
  Matrix b;  // left empty when B is frozen
};

/// All adapters attached to one transformer block (at most one per projection).
struct BlockAdapters {
  std::vector<LoraAdapter> loras;

  const LoraAdapter* find(Projection p) const noexcept;
  bool operator==(const BlockAdapters&) const = default;
};

struct BlockAdapterGrads {
  std::vector<LoraGrad> loras;  // aligned with BlockAdapters::loras

  static BlockAdapterGrads zeros_like(const BlockAdapters& adapters);
  void scale(double s);
};

/// Shared adapter with a frozen random row-orthonormal B and A = 0.
LoraAdapter new_shared(std::size_t rank, std::size_t in_dim, std::size_t out_dim,
                       Projection target, Rng& rng);

/// Task-specific adapter; same construction, B optionally trainable.
LoraAdapter new_specific(std::size_t rank, std::size_t in_dim, std::size_t out_dim,
                         Projection target, bool b_trainable, Rng& rng);

/// Low-rank contribution z (A B)^T for every token row of z.
Matrix delta(const LoraAdapter& adapter, const Matrix& z);

/// L2 norm of each row of A (one entry per output dimension).
Vector row_norms(const Matrix& a);

/// sigma(w) = d * w / sum(w). Falls back to all ones when sum(w) == 0.
Vector redistribution_mask(const Vector& prev_norms);

/// Scales row j of grad_a by mask[j].
Matrix apply_redistribution(const Matrix& grad_a, const Vector& mask);

struct AdapterBankConfig {
  std::size_t num_layers = 6;
  std::size_t shared_blocks = 3;  // blocks [0, shared_blocks) carry shared adapters
  std::size_t rank = 8;
  std::size_t dim = 32;
  std::vector<Projection> targets{Projection::Query, Projection::Value};
  bool trainable_specific_b = false;

  void validate() const;
  bool operator==(const AdapterBankConfig&) const = default;
};

/// Adapter set of the whole stack; nullptr entries mean "no adapter".
using AdapterStack = std::vector<const BlockAdapters*>;

/// Copy of the shared adapters taken after a domain finished training,
/// with the row norms of every A used by the gradient redistribution.
struct SharedSnapshot {
  std::vector<BlockAdapters> adapters;
  std::vector<std::vector<Vector>> norms;  // [block][lora] -> length-d row norms

  bool empty() const noexcept { return adapters.empty(); }
};

class AdapterBank {
 public:
  AdapterBank() = default;
  AdapterBank(AdapterBankConfig config, Rng& rng);

  const AdapterBankConfig& config() const noexcept { return config_; }
  std::size_t split() const noexcept { return config_.shared_blocks; }

  std::vector<BlockAdapters>& shared() noexcept { return shared_; }
  const std::vector<BlockAdapters>& shared() const noexcept { return shared_; }

  /// Creates the task-specific adapters for blocks [split, L) of `domain`.
  void add_domain(std::size_t domain, Rng& rng);
  bool has_domain(std::size_t domain) const { return specific_.count(domain) != 0; }
  std::size_t num_domains() const noexcept { return specific_.size(); }
  std::vector<BlockAdapters>& specific(std::size_t domain);
  const std::vector<BlockAdapters>& specific(std::size_t domain) const;

  /// Shared adapters for the first `split` blocks, then those of `domain`.
  AdapterStack stack_for(std::size_t domain) const;
  /// Shared adapters only (remaining blocks empty).
  AdapterStack shared_stack() const;

  SharedSnapshot snapshot() const;

  void write(BinaryWriter& out) const;
  static AdapterBank read(BinaryReader& in);

  bool operator==(const AdapterBank&) const = default;

 private:
  AdapterBankConfig config_;
  std::vector<BlockAdapters> shared_;
  std::map<std::size_t, std::vector<BlockAdapters>> specific_;
};

AdapterStack stack_of(const std::vector<BlockAdapters>& shared,
                      const std::vector<BlockAdapters>& specific);

}  // namespace conec
