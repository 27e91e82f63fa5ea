#pragma once

// Frozen pre-norm micro-transformer: a fixed random tokenizer, L blocks of
// multi-head attention + GELU MLP, and per-layer token traces. The forward
// tape keeps the block intermediates so adapter gradients can be
// back-propagated by hand.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "conec/adapters.hpp"
#include "conec/numkit.hpp"

namespace conec {

struct BackboneConfig {
  std::size_t num_layers = 6;
  std::size_t embed_dim = 32;
  std::size_t num_tokens = 5;  // including CLS at position 0
  std::size_t num_heads = 4;
  std::size_t mlp_hidden = 64;
  std::size_t input_dim = 16;
  std::uint64_t seed = 20240611;
  /// Standard deviation of every weight draw; <= 0 selects 1/sqrt(fan_in).
  double weight_std = 0.0;

  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

/// Token matrices z_0 .. z_L (each num_tokens x embed_dim).
struct LayerTrace {
  std::vector<Matrix> z;

  std::size_t num_layers() const noexcept { return z.empty() ? 0 : z.size() - 1; }
  /// Row 0 of z_layer.
  Vector cls_at(std::size_t layer) const;

  bool operator==(const LayerTrace&) const = default;
};

struct BlockWeights {
  Vector ln1_gain, ln1_bias;
  Matrix wq, wk, wv, wo;  // out x in
  Vector bq, bk, bv, bo;
  Vector ln2_gain, ln2_bias;
  Matrix w1;  // hidden x d
  Vector b1;
  Matrix w2;  // d x hidden
  Vector b2;

  bool operator==(const BlockWeights&) const = default;
};

/// Intermediates of one block needed by the backward pass.
struct BlockCache {
  Matrix xhat1;
  Vector rstd1;
  Matrix u;        // LN1 output, input of the q/k/v projections
  Matrix q, k, v;  // after adapters
  std::vector<Matrix> probs;  // per head, tokens x tokens
  Matrix attn;     // concatenated head outputs before W_o
  Matrix xhat2;
  Vector rstd2;
  Matrix pre;      // MLP pre-activation
  std::vector<Matrix> lora_ub;  // u B^T per adapter, aligned with BlockAdapters::loras
};

struct ForwardTape {
  LayerTrace trace;
  std::vector<BlockCache> caches;  // one per executed block
};

class Backbone {
 public:
  explicit Backbone(BackboneConfig config);

  const BackboneConfig& config() const noexcept { return config_; }
  std::size_t num_layers() const noexcept { return config_.num_layers; }
  std::size_t dim() const noexcept { return config_.embed_dim; }

  /// Patch tokens are fixed linear maps of x; row 0 is the frozen CLS constant.
  Matrix tokenize(std::span<const double> x) const;

  LayerTrace forward_plain(std::span<const double> x) const;

  /// `shared` covers blocks 1..l and `specific` blocks l+1..L; together they
  /// must span the stack.
  LayerTrace forward_with_adapters(std::span<const double> x,
                                   std::span<const BlockAdapters> shared,
                                   std::span<const BlockAdapters> specific) const;

  /// Generic forward over the first `num_blocks` blocks (all when 0). Entries
  /// of `stack` may be null; a shorter stack leaves the rest adapter-free.
  ForwardTape forward(std::span<const double> x, const AdapterStack& stack,
                      std::size_t num_blocks = 0, bool keep_cache = true) const;

  /// Back-propagates `d_top` (gradient w.r.t. z_top) down to the tokens,
  /// accumulating adapter gradients of blocks [0, top) into `grads`
  /// (entries may be null for blocks whose gradients are not wanted).
  /// Returns the gradient w.r.t. z_0.
  Matrix backward(const ForwardTape& tape, const AdapterStack& stack, std::size_t top,
                  Matrix d_top, const std::vector<BlockAdapterGrads*>& grads) const;

  const std::vector<BlockWeights>& blocks() const noexcept { return blocks_; }
  const std::vector<Matrix>& patch_maps() const noexcept { return patch_maps_; }
  const Vector& cls_token() const noexcept { return cls_; }

  void save(const std::filesystem::path& path) const;
  static Backbone load(const std::filesystem::path& path);
  void write(class BinaryWriter& out) const;
  static Backbone read(class BinaryReader& in);

  bool operator==(const Backbone&) const = default;

 private:
  Backbone() = default;
  Matrix block_forward(std::size_t index, const Matrix& z, const BlockAdapters* adapters,
                       BlockCache* cache) const;
  Matrix block_backward(std::size_t index, const BlockCache& cache, const Matrix& dout,
                        const BlockAdapters* adapters, BlockAdapterGrads* grads) const;

  BackboneConfig config_;
  std::vector<Matrix> patch_maps_;  // (num_tokens - 1) maps, each d x input_dim
  Vector cls_;
  std::vector<BlockWeights> blocks_;
};

}  // namespace conec
