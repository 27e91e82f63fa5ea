#pragma once

// Auxiliary domain identification: per-layer transformation MLPs and linear
// domain classifiers over the CLS token of the adapter-free trace, trained
// on real current-domain embeddings plus GMM replay of past domains, and
// queried with an early-exit confidence rule.

#include <cstddef>
#include <optional>
#include <vector>

#include "conec/backbone.hpp"
#include "conec/mixtures.hpp"
#include "conec/numkit.hpp"

namespace conec {

class BinaryWriter;
class BinaryReader;

/// kappa(z) = W2 relu(W1 z + b1) + b2, d -> hidden -> d.
/// Initialised to the identity map (hidden units pair up as relu(z) - relu(-z)).
struct TransformMlp {
  Matrix w1;  // hidden x d
  Vector b1;
  Matrix w2;  // d x hidden
  Vector b2;

  bool operator==(const TransformMlp&) const = default;
};

struct TransformCache {
  Vector pre;  // hidden pre-activation
};

TransformMlp make_transform(std::size_t dim, std::size_t hidden, Rng& rng);
Vector transform_forward(const TransformMlp& t, std::span<const double> z, TransformCache* cache);

struct TransformGrad {
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
  static TransformGrad zeros_like(const TransformMlp& t);
};

/// Accumulates parameter gradients; returns d loss / d z.
Vector transform_backward(const TransformMlp& t, std::span<const double> z,
                          const TransformCache& cache, std::span<const double> dout,
                          TransformGrad& grad);

/// Linear map d -> max_domains; logits past the active count are masked.
struct DomainClassifier {
  Matrix w;  // max_domains x d
  Vector b;

  bool operator==(const DomainClassifier&) const = default;
};

struct RouterConfig {
  std::size_t num_layers = 6;
  std::size_t dim = 32;
  std::size_t max_domains = 5;
  std::size_t hidden = 128;
  double threshold = 0.9;
  /// 1-based layers carrying a local classifier (all layers when empty).
  std::vector<std::size_t> layers;

  bool operator==(const RouterConfig&) const = default;
};

struct DomainRouterState {
  RouterConfig config;
  std::vector<TransformMlp> transforms;      // one per layer 1..L
  std::vector<DomainClassifier> classifiers; // one per layer 1..L
  std::vector<Matrix> centers;               // per layer: max_domains x d
  std::vector<bool> has_center;              // per domain
  std::size_t active_domains = 0;

  /// Layers that take part in routing, ascending, 1-based.
  std::vector<std::size_t> enabled_layers() const;

  bool operator==(const DomainRouterState&) const = default;
};

DomainRouterState make_router(RouterConfig config, Rng& rng);

struct LayerVote {
  std::size_t domain = 0;
  double confidence = 0.0;
};

/// Active-domain probabilities of layer `layer` (1-based) for a CLS vector.
Vector layer_probabilities(const DomainRouterState& router, std::span<const double> cls,
                           std::size_t layer);

/// max / argmax of the softmax over active domains of h(kappa(cls_at(layer))).
LayerVote layer_confidence(const DomainRouterState& router, const LayerTrace& trace,
                           std::size_t layer);

struct RouteDecision {
  std::size_t domain = 0;
  std::size_t exit_layer = 0;      // last layer evaluated (1-based)
  std::size_t decision_layer = 0;  // layer whose vote was taken
  double confidence = 0.0;
};

/// Earliest layer whose confidence reaches the threshold decides; when none
/// does, the most confident layer decides.
RouteDecision route(const DomainRouterState& router, const LayerTrace& trace);

/// Records the center of `domain` at every layer from real CLS embeddings
/// (per_layer[l - 1] holds the layer-l rows).
void set_centers(DomainRouterState& router, std::size_t domain,
                 const std::vector<Matrix>& per_layer);

struct RouterTrainOptions {
  std::size_t synthetic_per_domain = 0;  // 0: real count / past domains, capped
  std::size_t synthetic_cap = 512;
  double lambda_ball = 2.0;
  double margin = 1.0;
  bool use_ball_loss = true;
  double lr_classifier = 2e-3;
  double lr_transform = 1e-4;
  double momentum = 0.9;
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  std::size_t threads = 1;
};

struct RouterTrainReport {
  std::vector<double> final_loss;  // mean per-batch aux loss of the last epoch, per layer
  std::size_t synthetic_per_domain = 0;
};

/// Trains every enabled layer independently on real embeddings of domain
/// `domain` plus synthetic draws from the stored mixtures of domains
/// 0..domain-1. Makes `domain` active. Each layer uses rng.fork(layer) so
/// threaded and sequential runs agree.
RouterTrainReport train_router(DomainRouterState& router, std::size_t domain,
                               const std::vector<Matrix>& real_per_layer, const GmmStore& gmms,
                               const RouterTrainOptions& options, const Rng& rng);

void write_router(BinaryWriter& out, const DomainRouterState& router);
DomainRouterState read_router(BinaryReader& in);

}  // namespace conec
