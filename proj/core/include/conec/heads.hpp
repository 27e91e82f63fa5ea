#pragma once

// Classifier heads. The stochastic head samples each class weight as
// mu + eps * sigma and scores it by scaled cosine similarity; at inference
// the noise is dropped and mu is replaced by the class prototypes. Cosine
// (sigma pinned at zero) and linear heads exist for ablations.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "conec/numkit.hpp"

namespace conec {

class BinaryWriter;
class BinaryReader;

enum class HeadKind : std::uint8_t { Stochastic = 0, Cosine = 1, Linear = 2 };

std::string to_string(HeadKind kind);
HeadKind parse_head_kind(const std::string& name);

struct ClassifierHead {
  HeadKind kind = HeadKind::Stochastic;
  Matrix mu;     // M x d class means (weights of the linear head)
  Matrix sigma;  // M x d per-dimension scales, >= 0; all zero for cosine/linear
  Vector bias;   // M, linear head only
  double eta = 16.0;

  std::size_t num_classes() const noexcept { return mu.rows(); }
  std::size_t dim() const noexcept { return mu.cols(); }

  bool operator==(const ClassifierHead&) const = default;
};

struct HeadGrad {
  Matrix mu;
  Matrix sigma;
  Vector bias;

  static HeadGrad zeros_like(const ClassifierHead& head);
  void add(const HeadGrad& other, double scale = 1.0);
};

/// Logits plus the noise that produced them (kept for the backward pass).
struct HeadPass {
  Vector logits;
  Matrix eps;  // M x d; empty when no noise was sampled
};

/// Fresh temporary head: mu ~ N(0, 1/d), sigma = sigma_init (0 unless stochastic).
ClassifierHead make_head(HeadKind kind, std::size_t num_classes, std::size_t dim, double eta,
                         double sigma_init, Rng& rng);

/// Training-time logits. Stochastic heads draw eps ~ N(0, 1)^{M x d} per call.
HeadPass forward_train(const ClassifierHead& head, std::span<const double> z, Rng& rng);

/// Training-time logits with caller-supplied noise (empty eps: noise-free).
HeadPass forward_with_noise(const ClassifierHead& head, std::span<const double> z, Matrix eps);

/// Noise-free logits: eta * cos(mu_m, z) (or W z + b for the linear head).
Vector forward_infer(const ClassifierHead& head, std::span<const double> z);

/// Accumulates d(loss)/d(head params) into `grad` and returns d(loss)/dz.
/// `pass` must come from forward_train (or carry an empty eps for the
/// deterministic path) on the same head and z.
Vector head_backward(const ClassifierHead& head, std::span<const double> z, const HeadPass& pass,
                     std::span<const double> dlogits, HeadGrad& grad);

/// Clamps sigma at zero after an optimizer step.
void clamp_sigma(ClassifierHead& head);

struct PrototypeSet {
  Matrix means;  // M x d
  std::vector<std::size_t> counts;
};

/// Per-class mean of `embeddings` rows. Throws InvalidInput naming the first
/// class id with no sample.
PrototypeSet compute_prototypes(const Matrix& embeddings, const std::vector<std::size_t>& labels,
                                std::size_t num_classes);

/// Copy of `head` whose mu rows are the prototypes; sigma is kept as is.
ClassifierHead replace_means(const ClassifierHead& head, const PrototypeSet& protos);

void write_head(BinaryWriter& out, const ClassifierHead& head);
ClassifierHead read_head(BinaryReader& in);

}  // namespace conec
