#pragma once

// Domain-incremental training loop: per-domain adapter and head training
// with distillation of the shared adapters, prototype replacement, the
// domain router with GMM replay, routed and oracle inference, metrics and
// checkpoints.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "conec/adapters.hpp"
#include "conec/backbone.hpp"
#include "conec/domainid.hpp"
#include "conec/heads.hpp"
#include "conec/losses.hpp"
#include "conec/mixtures.hpp"
#include "conec/numkit.hpp"
#include "conec/stream.hpp"

namespace conec {

/// conec: shared adapters on blocks [0, l) with distillation, specific ones above.
/// specific_only: specific adapters on every block, no distillation.
/// finetune: one adapter set and one head trained on every domain in turn.
enum class AdapterMode : std::uint8_t { Conec = 0, SpecificOnly = 1, Finetune = 2 };

std::string to_string(AdapterMode mode);
AdapterMode parse_adapter_mode(const std::string& name);

struct EngineConfig {
  BackboneConfig backbone;
  std::size_t num_classes = 4;

  AdapterMode adapter_mode = AdapterMode::Conec;
  std::size_t shared_blocks = 3;  // l
  std::size_t rank = 8;
  std::vector<Projection> targets{Projection::Query, Projection::Value};
  bool trainable_specific_b = false;

  HeadKind head = HeadKind::Stochastic;
  double eta = 16.0;
  double sigma_init = 0.05;
  bool clamp_sigma = true;
  /// Samples head noise at inference too (default: noise-free logits).
  bool inference_noise = false;

  double lambda_kd = 5.0;
  double tau = 2.0;
  bool use_kd = true;
  bool redistribution = true;

  double lr_lora = 0.02;
  double lr_head = 0.02;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;

  double threshold = 0.9;
  double lambda_ball = 2.0;
  double margin = 1.0;
  bool use_ball_loss = true;
  double lr_dc = 2e-3;
  double lr_tm = 1e-4;
  std::size_t router_epochs = 20;
  std::size_t router_batch_size = 64;
  std::size_t router_hidden = 0;  // 0: min(1024, 4 d)
  std::vector<std::size_t> router_layers;  // 1-based; empty: every layer
  std::size_t gmm_components = 2;
  std::size_t gmm_max_iter = 100;
  std::size_t synthetic_cap = 512;
  std::size_t max_domains = 5;

  std::uint64_t seed = 1;
  std::size_t threads = 1;

  void validate() const;
  /// Blocks carrying shared adapters under the selected mode.
  std::size_t effective_shared_blocks() const;
  bool distillation_enabled() const;
  std::size_t effective_router_hidden() const;

  bool operator==(const EngineConfig&) const = default;
};

/// Everything the trained system consists of. Positions (0-based) index
/// domains in training order; domain_ids maps them to stream ids.
struct EngineState {
  Backbone backbone;
  AdapterBank bank;
  std::vector<ClassifierHead> heads;
  SharedSnapshot snapshot;
  DomainRouterState router;
  GmmStore gmms;
  std::vector<std::size_t> domain_ids;

  std::size_t trained() const noexcept { return domain_ids.size(); }
};

// --- objective -----------------------------------------------------------

/// Gradients of ce + lambda_kd * kd averaged over a batch. The *_kd parts
/// already include lambda_kd. Adapter gradients are indexed by block.
struct DilGradients {
  LossReport loss;
  HeadGrad head_ce;
  HeadGrad head_kd;
  std::vector<BlockAdapterGrads> adapters_ce;
  std::vector<BlockAdapterGrads> adapters_kd;
};

struct DilBatch {
  const Matrix* x = nullptr;
  const std::vector<std::size_t>* labels = nullptr;
  std::vector<std::size_t> rows;  // rows of x in the batch
  /// Teacher logits per batch entry (constants); empty disables distillation.
  std::vector<Vector> teacher_logits;
  /// Fixed head noise per batch entry; null draws fresh noise from the rng.
  const std::vector<Matrix>* noise = nullptr;
};

/// CE on the top-layer CLS through the (noisy) head, plus distillation of
/// the noise-free head logits of the student CLS at block kd_layer towards
/// the given teacher logits.
DilGradients dil_objective(const Backbone& backbone, const AdapterStack& stack,
                           const ClassifierHead& head, const DilBatch& batch, std::size_t kd_layer,
                           double lambda_kd, double tau, Rng* rng);

// --- engine --------------------------------------------------------------

struct Prediction {
  std::size_t label = 0;
  std::size_t domain = 0;      // position
  std::size_t exit_layer = 0;  // 0 when no router is involved
};

struct DomainTrainReport {
  std::vector<double> epoch_loss;  // mean total loss per epoch
  std::vector<double> epoch_kd;    // mean raw distillation loss per epoch
  double train_accuracy = 0.0;     // prototype head on the training set
};

struct EvalRow {
  std::size_t order_id = 0;
  std::size_t after_domain = 0;  // number of domains trained so far
  std::size_t eval_domain = 0;   // stream id
  double accuracy = 0.0;
  double dc_accuracy = 0.0;
  double oracle_accuracy = 0.0;
  double exit_layer_mean = 0.0;

  bool operator==(const EvalRow&) const = default;
};

struct LayerDcRow {
  std::size_t order_id = 0;
  std::size_t after_domain = 0;
  std::size_t layer = 0;
  double accuracy = 0.0;

  bool operator==(const LayerDcRow&) const = default;
};

struct MetricsRecord {
  std::vector<EvalRow> rows;
  std::vector<LayerDcRow> layer_dc;

  std::size_t steps() const;
  /// Mean accuracy over seen domains after step `after_domain`.
  double step_accuracy(std::size_t after_domain) const;
  double step_oracle_accuracy(std::size_t after_domain) const;
  double avg_accuracy() const;
  double last_accuracy() const;
  double avg_oracle_accuracy() const;
  double last_oracle_accuracy() const;
  double last_dc_accuracy() const;
  double last_exit_layer() const;
  /// Row for (after_domain, eval_domain); throws when absent.
  const EvalRow& row(std::size_t after_domain, std::size_t eval_domain) const;

  bool operator==(const MetricsRecord&) const = default;
};

using Predictor = std::function<Prediction(std::span<const double> x, std::size_t true_position)>;

/// Scores `routed` and `oracle` on the test split of each seen domain
/// (index = position). dc_accuracy compares the routed domain to the position.
std::vector<EvalRow> evaluate_predictors(const Predictor& routed, const Predictor& oracle,
                                         const std::vector<const DomainData*>& seen,
                                         std::size_t order_id, std::size_t after_domain);

class Engine {
 public:
  explicit Engine(EngineConfig config);
  Engine(EngineConfig config, EngineState state);

  const EngineConfig& config() const noexcept { return config_; }
  const EngineState& state() const noexcept { return state_; }

  /// Trains adapters and a fresh head on the next domain, replaces the head
  /// means by prototypes and snapshots the shared adapters.
  DomainTrainReport train_domain(const DomainData& data);

  /// Fits the per-layer mixtures of the last trained domain and trains the router.
  RouterTrainReport train_router_step(const DomainData& data);

  Prediction infer(std::span<const double> x) const;
  Prediction infer_oracle(std::span<const double> x, std::size_t position) const;

  /// Per-domain rows for the test splits of every trained domain
  /// (`seen[p]` must be the data of position p).
  std::vector<EvalRow> evaluate(const std::vector<const DomainData*>& seen, std::size_t order_id) const;
  /// Domain-identification accuracy of each enabled layer on its own.
  std::vector<LayerDcRow> evaluate_layers(const std::vector<const DomainData*>& seen,
                                          std::size_t order_id) const;

  /// CLS at every layer (1..L) of the routed adapter configuration.
  LayerTrace embed(std::span<const double> x, std::size_t position) const;

  std::size_t position_of(std::size_t domain_id) const;

 private:
  AdapterStack stack_for(std::size_t position) const;
  std::size_t head_index(std::size_t position) const;
  std::size_t bank_domain(std::size_t position) const;
  Rng rng_for(std::size_t position, std::uint64_t purpose) const;

  EngineConfig config_;
  EngineState state_;
  std::size_t router_trained_ = 0;
};

struct RunResult {
  MetricsRecord metrics;
  Engine engine;
  std::vector<DomainTrainReport> train_reports;
};

/// Trains the domains of `stream` in `order` (1-based stream ids) and
/// evaluates after every domain.
RunResult run_order(const EngineConfig& config, const std::vector<DomainData>& stream,
                    const std::vector<std::size_t>& order, std::size_t order_id,
                    const std::function<void(const std::string&)>& log = {});

// --- checkpoints ---------------------------------------------------------

struct Checkpoint {
  std::string config_text;
  std::size_t order_id = 0;
  std::vector<std::size_t> order;
  MetricsRecord metrics;
  EngineConfig config;
  EngineState state;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace conec
