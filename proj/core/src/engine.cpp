#include "conec/engine.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "conec/config.hpp"
#include "conec/errors.hpp"
#include "conec/optim.hpp"
#include "conec/serialize.hpp"

namespace conec {

namespace {

constexpr const char* kCheckpointMagic = "CONEC-CK1";

// Rng purposes, combined with the training position.
enum : std::uint64_t { kInit = 1, kTrain = 2, kGmm = 3, kRouter = 4 };

std::size_t argmax(const Vector& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

AdapterBankConfig bank_config(const EngineConfig& c) {
  AdapterBankConfig b;
  b.num_layers = c.backbone.num_layers;
  b.shared_blocks = c.effective_shared_blocks();
  b.rank = c.rank;
  b.dim = c.backbone.embed_dim;
  b.targets = c.targets;
  b.trainable_specific_b = c.trainable_specific_b;
  return b;
}

RouterConfig router_config(const EngineConfig& c) {
  RouterConfig r;
  r.num_layers = c.backbone.num_layers;
  r.dim = c.backbone.embed_dim;
  r.max_domains = c.max_domains;
  r.hidden = c.effective_router_hidden();
  r.threshold = c.threshold;
  r.layers = c.router_layers;
  return r;
}

EngineState initial_state(const EngineConfig& c) {
  c.validate();
  const Rng root(c.seed);
  Rng bank_rng = root.fork(kInit);
  Rng router_rng = root.fork(kRouter);
  return EngineState{Backbone(c.backbone), AdapterBank(bank_config(c), bank_rng), {}, {},
                     make_router(router_config(c), router_rng), {}, {}};
}

}  // namespace

std::string to_string(AdapterMode mode) {
  switch (mode) {
    case AdapterMode::Conec: return "conec";
    case AdapterMode::SpecificOnly: return "specific_only";
    case AdapterMode::Finetune: return "finetune";
  }
  return "?";
}

AdapterMode parse_adapter_mode(const std::string& name) {
  if (name == "conec") return AdapterMode::Conec;
  if (name == "specific_only") return AdapterMode::SpecificOnly;
  if (name == "finetune") return AdapterMode::Finetune;
  throw ConfigError("unknown adapter_mode '" + name + "' (expected conec, specific_only or finetune)");
}

void EngineConfig::validate() const {
  backbone.validate();
  const std::size_t L = backbone.num_layers;
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be positive");
  };
  auto non_negative = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be >= 0");
  };
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (adapter_mode == AdapterMode::Conec && (shared_blocks == 0 || shared_blocks >= L))
    throw ConfigError("shared_blocks must satisfy 1 <= l < L = " + std::to_string(L));
  if (rank == 0 || rank > backbone.embed_dim) throw ConfigError("rank must be in [1, embed_dim]");
  if (targets.empty()) throw ConfigError("targets must name at least one projection");
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (std::size_t j = i + 1; j < targets.size(); ++j)
      if (targets[i] == targets[j]) throw ConfigError("targets lists a projection twice");
  positive(eta, "eta");
  non_negative(sigma_init, "sigma_init");
  non_negative(lambda_kd, "lambda_kd");
  positive(tau, "tau");
  positive(lr_lora, "lr_lora");
  positive(lr_head, "lr_head");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  non_negative(threshold, "threshold");
  non_negative(lambda_ball, "lambda_ball");
  non_negative(margin, "margin");
  positive(lr_dc, "lr_dc");
  positive(lr_tm, "lr_tm");
  if (router_epochs == 0) throw ConfigError("router_epochs must be >= 1");
  if (router_batch_size == 0) throw ConfigError("router_batch_size must be >= 1");
  for (std::size_t l : router_layers)
    if (l < 1 || l > L) throw ConfigError("router_layers entries must lie in [1, " + std::to_string(L) + "]");
  if (gmm_components == 0) throw ConfigError("gmm_components must be >= 1");
  if (gmm_max_iter == 0) throw ConfigError("gmm_max_iter must be >= 1");
  if (synthetic_cap == 0) throw ConfigError("synthetic_cap must be >= 1");
  if (max_domains == 0) throw ConfigError("max_domains must be >= 1");
  if (threads == 0) throw ConfigError("threads must be >= 1");
}

std::size_t EngineConfig::effective_shared_blocks() const {
  return adapter_mode == AdapterMode::Conec ? shared_blocks : 0;
}

bool EngineConfig::distillation_enabled() const {
  return adapter_mode == AdapterMode::Conec && use_kd && lambda_kd > 0.0;
}

std::size_t EngineConfig::effective_router_hidden() const {
  return router_hidden ? router_hidden : std::min<std::size_t>(1024, 4 * backbone.embed_dim);
}

// --- objective -------------------------------------------------------------

DilGradients dil_objective(const Backbone& backbone, const AdapterStack& stack,
                           const ClassifierHead& head, const DilBatch& batch, std::size_t kd_layer,
                           double lambda_kd, double tau, Rng* rng) {
  if (!batch.x || !batch.labels) throw InvalidInput("dil_objective: batch without data");
  if (batch.rows.empty()) throw InvalidInput("dil_objective: empty batch");
  const bool kd = !batch.teacher_logits.empty();
  if (kd && batch.teacher_logits.size() != batch.rows.size())
    throw InvalidShape("dil_objective: one teacher logit vector per batch entry required");
  if (kd && (kd_layer == 0 || kd_layer > backbone.num_layers()))
    throw InvalidInput("dil_objective: distillation layer out of range");
  if (batch.noise && batch.noise->size() != batch.rows.size())
    throw InvalidShape("dil_objective: one noise matrix per batch entry required");
  if (!batch.noise && head.kind == HeadKind::Stochastic && !rng)
    throw InvalidInput("dil_objective: stochastic head needs noise or an rng");

  const std::size_t L = backbone.num_layers(), tokens = backbone.config().num_tokens,
                    d = backbone.dim();
  DilGradients g;
  g.head_ce = HeadGrad::zeros_like(head);
  g.head_kd = HeadGrad::zeros_like(head);
  g.adapters_ce.resize(L);
  g.adapters_kd.resize(L);
  std::vector<BlockAdapterGrads*> ce_ptrs(L, nullptr), kd_ptrs(L, nullptr);
  for (std::size_t i = 0; i < L && i < stack.size(); ++i) {
    if (!stack[i]) continue;
    g.adapters_ce[i] = BlockAdapterGrads::zeros_like(*stack[i]);
    g.adapters_kd[i] = BlockAdapterGrads::zeros_like(*stack[i]);
    ce_ptrs[i] = &g.adapters_ce[i];
    kd_ptrs[i] = &g.adapters_kd[i];
  }

  const double inv = 1.0 / static_cast<double>(batch.rows.size());
  double ce_sum = 0.0, kd_sum = 0.0;
  for (std::size_t e = 0; e < batch.rows.size(); ++e) {
    const std::size_t r = batch.rows[e];
    const auto x = batch.x->row(r);
    const ForwardTape tape = backbone.forward(x, stack);
    const Vector cls = tape.trace.cls_at(L);

    const HeadPass pass = batch.noise ? forward_with_noise(head, cls, (*batch.noise)[e])
                                      : forward_train(head, cls, *rng);
    LossGrad ce = cross_entropy(pass.logits, (*batch.labels)[r]);
    ce_sum += ce.loss;
    for (double& v : ce.grad) v *= inv;
    const Vector dz = head_backward(head, cls, pass, ce.grad, g.head_ce);
    Matrix d_top(tokens, d);
    std::copy(dz.begin(), dz.end(), d_top.row(0).begin());
    backbone.backward(tape, stack, L, std::move(d_top), ce_ptrs);

    if (!kd) continue;
    const Vector student = tape.trace.cls_at(kd_layer);
    HeadPass det{forward_infer(head, student), Matrix()};
    LossGrad k = kd_loss(det.logits, batch.teacher_logits[e], tau);
    kd_sum += k.loss;
    for (double& v : k.grad) v *= lambda_kd * inv;
    const Vector dzs = head_backward(head, student, det, k.grad, g.head_kd);
    Matrix d_mid(tokens, d);
    std::copy(dzs.begin(), dzs.end(), d_mid.row(0).begin());
    backbone.backward(tape, stack, kd_layer, std::move(d_mid), kd_ptrs);
  }
  g.loss = joint_dil_loss(ce_sum * inv, kd_sum * inv, lambda_kd);
  return g;
}

// --- metrics ---------------------------------------------------------------

std::size_t MetricsRecord::steps() const {
  std::size_t s = 0;
  for (const auto& r : rows) s = std::max(s, r.after_domain);
  return s;
}

namespace {

template <typename F>
double mean_over_step(const std::vector<EvalRow>& rows, std::size_t step, F field) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows)
    if (r.after_domain == step) {
      sum += field(r);
      ++n;
    }
  if (n == 0) throw InvalidInput("metrics: no rows after domain " + std::to_string(step));
  return sum / static_cast<double>(n);
}

}  // namespace

double MetricsRecord::step_accuracy(std::size_t step) const {
  return mean_over_step(rows, step, [](const EvalRow& r) { return r.accuracy; });
}

double MetricsRecord::step_oracle_accuracy(std::size_t step) const {
  return mean_over_step(rows, step, [](const EvalRow& r) { return r.oracle_accuracy; });
}

double MetricsRecord::avg_accuracy() const {
  double s = 0.0;
  for (std::size_t b = 1; b <= steps(); ++b) s += step_accuracy(b);
  return s / static_cast<double>(steps());
}

double MetricsRecord::avg_oracle_accuracy() const {
  double s = 0.0;
  for (std::size_t b = 1; b <= steps(); ++b) s += step_oracle_accuracy(b);
  return s / static_cast<double>(steps());
}

double MetricsRecord::last_accuracy() const { return step_accuracy(steps()); }
double MetricsRecord::last_oracle_accuracy() const { return step_oracle_accuracy(steps()); }

double MetricsRecord::last_dc_accuracy() const {
  return mean_over_step(rows, steps(), [](const EvalRow& r) { return r.dc_accuracy; });
}

double MetricsRecord::last_exit_layer() const {
  return mean_over_step(rows, steps(), [](const EvalRow& r) { return r.exit_layer_mean; });
}

const EvalRow& MetricsRecord::row(std::size_t after_domain, std::size_t eval_domain) const {
  for (const auto& r : rows)
    if (r.after_domain == after_domain && r.eval_domain == eval_domain) return r;
  throw InvalidInput("metrics: no row for domain " + std::to_string(eval_domain) + " after step " +
                     std::to_string(after_domain));
}

std::vector<EvalRow> evaluate_predictors(const Predictor& routed, const Predictor& oracle,
                                         const std::vector<const DomainData*>& seen,
                                         std::size_t order_id, std::size_t after_domain) {
  std::vector<EvalRow> out;
  for (std::size_t p = 0; p < seen.size(); ++p) {
    const DomainData& data = *seen[p];
    const std::size_t n = data.test_x.rows();
    if (n == 0) throw InvalidInput("evaluate: domain " + std::to_string(data.id) + " has no test samples");
    std::size_t correct = 0, dc = 0, oracle_correct = 0, exit_sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = data.test_x.row(i);
      const Prediction pr = routed(x, p);
      correct += pr.label == data.test_y[i];
      dc += pr.domain == p;
      exit_sum += pr.exit_layer;
      oracle_correct += oracle(x, p).label == data.test_y[i];
    }
    const double dn = static_cast<double>(n);
    out.push_back(EvalRow{order_id, after_domain, data.id, static_cast<double>(correct) / dn,
                          static_cast<double>(dc) / dn, static_cast<double>(oracle_correct) / dn,
                          static_cast<double>(exit_sum) / dn});
  }
  return out;
}

// --- engine ----------------------------------------------------------------

Engine::Engine(EngineConfig config) : config_(std::move(config)), state_(initial_state(config_)) {}

Engine::Engine(EngineConfig config, EngineState state)
    : config_(std::move(config)), state_(std::move(state)) {
  config_.validate();
  if (!(state_.backbone.config() == config_.backbone))
    throw ConfigError("engine: backbone in state does not match the configuration");
  if (!(state_.bank.config() == bank_config(config_)))
    throw ConfigError("engine: adapter bank does not match the configuration");
  router_trained_ = config_.adapter_mode == AdapterMode::Finetune ? state_.trained()
                                                                  : state_.router.active_domains;
}

Rng Engine::rng_for(std::size_t position, std::uint64_t purpose) const {
  return Rng(config_.seed).fork(1000 * (position + 1) + purpose);
}

std::size_t Engine::bank_domain(std::size_t position) const {
  return config_.adapter_mode == AdapterMode::Finetune ? 0 : position;
}

std::size_t Engine::head_index(std::size_t position) const { return bank_domain(position); }

AdapterStack Engine::stack_for(std::size_t position) const {
  return state_.bank.stack_for(bank_domain(position));
}

std::size_t Engine::position_of(std::size_t domain_id) const {
  const auto& ids = state_.domain_ids;
  const auto it = std::find(ids.begin(), ids.end(), domain_id);
  if (it == ids.end()) throw ConfigError("domain " + std::to_string(domain_id) + " has not been trained");
  return static_cast<std::size_t>(it - ids.begin());
}

DomainTrainReport Engine::train_domain(const DomainData& data) {
  const auto& ids = state_.domain_ids;
  if (std::find(ids.begin(), ids.end(), data.id) != ids.end())
    throw ConfigError("domain " + std::to_string(data.id) + " was already trained");
  if (state_.trained() >= config_.max_domains)
    throw ConfigError("max_domains = " + std::to_string(config_.max_domains) + " reached");
  if (data.train_x.rows() == 0 || data.train_x.rows() != data.train_y.size())
    throw InvalidInput("train_domain: domain " + std::to_string(data.id) + " has no usable training data");
  if (data.train_x.cols() != config_.backbone.input_dim)
    throw InvalidShape("train_domain: samples have " + std::to_string(data.train_x.cols()) +
                       " features, backbone expects " + std::to_string(config_.backbone.input_dim));
  for (std::size_t y : data.train_y)
    if (y >= config_.num_classes) throw InvalidInput("train_domain: label out of range");

  const std::size_t pos = state_.trained();
  const std::size_t L = config_.backbone.num_layers, l = config_.effective_shared_blocks();
  const bool finetune = config_.adapter_mode == AdapterMode::Finetune;
  Rng init_rng = rng_for(pos, kInit);
  Rng train_rng = rng_for(pos, kTrain);
  const Backbone& bb = state_.backbone;

  ClassifierHead head;
  if (finetune && pos > 0) {
    head = state_.heads.front();
  } else {
    state_.bank.add_domain(pos, init_rng);
    head = make_head(config_.head, config_.num_classes, bb.dim(), config_.eta, config_.sigma_init,
                     init_rng);
  }

  // Mutable view of the blocks trained for this domain.
  std::vector<BlockAdapters*> blocks(L, nullptr);
  for (std::size_t i = 0; i < l; ++i) blocks[i] = &state_.bank.shared()[i];
  auto& specific = state_.bank.specific(bank_domain(pos));
  for (std::size_t i = l; i < L; ++i) blocks[i] = &specific[i - l];
  const AdapterStack stack(blocks.begin(), blocks.end());

  const bool kd = config_.distillation_enabled() && pos > 0 && !state_.snapshot.empty();
  std::vector<Vector> teacher_cls;
  std::vector<std::vector<Vector>> masks;
  if (kd) {
    const AdapterStack teacher_stack = stack_of(state_.snapshot.adapters, {});
    teacher_cls.reserve(data.train_x.rows());
    for (std::size_t r = 0; r < data.train_x.rows(); ++r)
      teacher_cls.push_back(bb.forward(data.train_x.row(r), teacher_stack, l, false).trace.cls_at(l));
    masks.resize(l);
    for (std::size_t i = 0; i < l; ++i)
      for (const auto& norms : state_.snapshot.norms[i])
        masks[i].push_back(config_.redistribution ? redistribution_mask(norms)
                                                  : Vector(norms.size(), 1.0));
  }

  MomentumSgd opt(config_.momentum);
  DomainTrainReport report;
  std::vector<std::size_t> order(data.train_x.rows());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < config_.epochs; ++epoch) {
    train_rng.shuffle(order);
    double loss_sum = 0.0, kd_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
      DilBatch batch;
      batch.x = &data.train_x;
      batch.labels = &data.train_y;
      batch.rows.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                        order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + config_.batch_size)));
      if (kd)
        for (std::size_t r : batch.rows) batch.teacher_logits.push_back(forward_infer(head, teacher_cls[r]));

      const DilGradients g = dil_objective(bb, stack, head, batch, l, config_.lambda_kd, config_.tau, &train_rng);
      if (!std::isfinite(g.loss.total)) {
        std::ostringstream msg;
        msg << "non-finite loss while training domain " << data.id << " (position " << pos
            << ", epoch " << epoch + 1 << ", batch " << batches + 1 << "): ce=" << g.loss.ce
            << " kd=" << g.loss.kd;
        throw NumericError(msg.str());
      }
      loss_sum += g.loss.total;
      kd_sum += g.loss.kd;
      ++batches;

      // The head follows the classification loss only; the teacher side of
      // the distillation term is a constant.
      opt.step(0, head.mu, g.head_ce.mu, config_.lr_head);
      if (head.kind == HeadKind::Stochastic) opt.step(1, head.sigma, g.head_ce.sigma, config_.lr_head);
      if (head.kind == HeadKind::Linear) opt.step(2, head.bias, g.head_ce.bias, config_.lr_head);
      if (config_.clamp_sigma) clamp_sigma(head);

      std::size_t slot = 3;
      for (std::size_t i = 0; i < L; ++i) {
        auto& loras = blocks[i]->loras;
        for (std::size_t j = 0; j < loras.size(); ++j, slot += 2) {
          const LoraGrad& ce = g.adapters_ce[i].loras[j];
          Matrix ga = ce.a;
          if (kd && i < l) add_inplace(ga, apply_redistribution(g.adapters_kd[i].loras[j].a, masks[i][j]));
          opt.step(slot, loras[j].a, ga, config_.lr_lora);
          if (loras[j].b_trainable) {
            Matrix gb = ce.b;
            if (kd && i < l) add_inplace(gb, g.adapters_kd[i].loras[j].b);
            opt.step(slot + 1, loras[j].b, gb, config_.lr_lora);
          }
        }
      }
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    report.epoch_kd.push_back(kd_sum / static_cast<double>(batches));
  }

  // Prototypes of the final adapter configuration replace the class means.
  Matrix emb(data.train_x.rows(), bb.dim());
  for (std::size_t r = 0; r < data.train_x.rows(); ++r) {
    const Vector cls = bb.forward(data.train_x.row(r), stack, 0, false).trace.cls_at(L);
    std::copy(cls.begin(), cls.end(), emb.row(r).begin());
  }
  if (head.kind != HeadKind::Linear)
    head = replace_means(head, compute_prototypes(emb, data.train_y, config_.num_classes));
  std::size_t correct = 0;
  for (std::size_t r = 0; r < emb.rows(); ++r) correct += argmax(forward_infer(head, emb.row(r))) == data.train_y[r];
  report.train_accuracy = static_cast<double>(correct) / static_cast<double>(emb.rows());

  if (finetune && pos > 0) {
    state_.heads.front() = std::move(head);
  } else {
    state_.heads.push_back(std::move(head));
  }
  if (l > 0) state_.snapshot = state_.bank.snapshot();
  state_.domain_ids.push_back(data.id);
  return report;
}

RouterTrainReport Engine::train_router_step(const DomainData& data) {
  const std::size_t pos = position_of(data.id);
  if (pos != router_trained_)
    throw ConfigError("router must be trained once per domain, in training order (domain " +
                      std::to_string(data.id) + ")");
  if (config_.adapter_mode == AdapterMode::Finetune) {
    ++router_trained_;
    return {};
  }
  const std::size_t L = config_.backbone.num_layers, n = data.train_x.rows();
  std::vector<Matrix> per_layer(L, Matrix(n, config_.backbone.embed_dim));
  for (std::size_t r = 0; r < n; ++r) {
    const LayerTrace trace = state_.backbone.forward_plain(data.train_x.row(r));
    for (std::size_t layer = 1; layer <= L; ++layer) {
      const Vector cls = trace.cls_at(layer);
      std::copy(cls.begin(), cls.end(), per_layer[layer - 1].row(r).begin());
    }
  }
  set_centers(state_.router, pos, per_layer);

  const Rng gmm_root = rng_for(pos, kGmm);
  for (std::size_t layer = 1; layer <= L; ++layer) {
    Rng g = gmm_root.fork(layer);
    EmFit fit = fit_em(per_layer[layer - 1], config_.gmm_components, g, config_.gmm_max_iter);
    fit.model.layer = layer;
    fit.model.domain = pos;
    state_.gmms.put(std::move(fit.model));
  }

  RouterTrainOptions opt;
  opt.synthetic_cap = config_.synthetic_cap;
  opt.lambda_ball = config_.lambda_ball;
  opt.margin = config_.margin;
  opt.use_ball_loss = config_.use_ball_loss;
  opt.lr_classifier = config_.lr_dc;
  opt.lr_transform = config_.lr_tm;
  opt.momentum = config_.momentum;
  opt.epochs = config_.router_epochs;
  opt.batch_size = config_.router_batch_size;
  opt.threads = config_.threads;
  RouterTrainReport report = train_router(state_.router, pos, per_layer, state_.gmms, opt, rng_for(pos, kRouter));
  ++router_trained_;
  return report;
}

Prediction Engine::infer_oracle(std::span<const double> x, std::size_t position) const {
  if (position >= state_.trained()) throw InvalidInput("infer: position has not been trained");
  const LayerTrace trace = state_.backbone.forward(x, stack_for(position), 0, false).trace;
  const ClassifierHead& head = state_.heads[head_index(position)];
  const Vector cls = trace.cls_at(config_.backbone.num_layers);
  if (config_.inference_noise && head.kind == HeadKind::Stochastic) {
    // Noise keyed by the input so repeated evaluation gives the same answer.
    std::uint64_t key = 1469598103934665603ull ^ position;
    for (double v : x) key = (key ^ std::bit_cast<std::uint64_t>(v)) * 1099511628211ull;
    Rng rng = Rng(config_.seed).fork(key);
    return Prediction{argmax(forward_train(head, cls, rng).logits), position, 0};
  }
  return Prediction{argmax(forward_infer(head, cls)), position, 0};
}

Prediction Engine::infer(std::span<const double> x) const {
  if (state_.trained() == 0) throw ConfigError("infer: no domain has been trained");
  if (config_.adapter_mode == AdapterMode::Finetune) return infer_oracle(x, 0);
  if (state_.router.active_domains == 0) throw ConfigError("infer: router has not been trained");
  const RouteDecision decision = route(state_.router, state_.backbone.forward_plain(x));
  Prediction p = infer_oracle(x, decision.domain);
  p.exit_layer = decision.exit_layer;
  return p;
}

LayerTrace Engine::embed(std::span<const double> x, std::size_t position) const {
  return state_.backbone.forward(x, stack_for(position), 0, false).trace;
}

std::vector<EvalRow> Engine::evaluate(const std::vector<const DomainData*>& seen,
                                      std::size_t order_id) const {
  if (seen.size() != state_.trained())
    throw InvalidInput("evaluate: expected test data for " + std::to_string(state_.trained()) + " domains");
  for (std::size_t p = 0; p < seen.size(); ++p)
    if (seen[p]->id != state_.domain_ids[p]) throw InvalidInput("evaluate: test data out of training order");
  const Predictor routed = [this](std::span<const double> x, std::size_t) { return infer(x); };
  const Predictor oracle = [this](std::span<const double> x, std::size_t p) { return infer_oracle(x, p); };
  return evaluate_predictors(routed, oracle, seen, order_id, state_.trained());
}

std::vector<LayerDcRow> Engine::evaluate_layers(const std::vector<const DomainData*>& seen,
                                                std::size_t order_id) const {
  std::vector<LayerDcRow> out;
  if (config_.adapter_mode == AdapterMode::Finetune || state_.router.active_domains == 0) return out;
  const auto layers = state_.router.enabled_layers();
  std::vector<std::size_t> correct(layers.size(), 0);
  std::size_t total = 0;
  for (std::size_t p = 0; p < seen.size(); ++p) {
    for (std::size_t i = 0; i < seen[p]->test_x.rows(); ++i) {
      const LayerTrace trace = state_.backbone.forward_plain(seen[p]->test_x.row(i));
      for (std::size_t k = 0; k < layers.size(); ++k)
        correct[k] += layer_confidence(state_.router, trace, layers[k]).domain == p;
      ++total;
    }
  }
  for (std::size_t k = 0; k < layers.size(); ++k)
    out.push_back(LayerDcRow{order_id, state_.trained(), layers[k],
                             static_cast<double>(correct[k]) / static_cast<double>(total)});
  return out;
}

RunResult run_order(const EngineConfig& config, const std::vector<DomainData>& stream,
                    const std::vector<std::size_t>& order, std::size_t order_id,
                    const std::function<void(const std::string&)>& log) {
  RunResult result{MetricsRecord{}, Engine(config), {}};
  std::vector<const DomainData*> seen;
  for (std::size_t id : order) {
    const auto it = std::find_if(stream.begin(), stream.end(), [id](const DomainData& d) { return d.id == id; });
    if (it == stream.end()) throw ConfigError("order names domain " + std::to_string(id) + " which the stream lacks");
    result.train_reports.push_back(result.engine.train_domain(*it));
    result.engine.train_router_step(*it);
    seen.push_back(&*it);
    for (auto& r : result.engine.evaluate(seen, order_id)) result.metrics.rows.push_back(r);
    for (auto& r : result.engine.evaluate_layers(seen, order_id)) result.metrics.layer_dc.push_back(r);
    if (log) {
      std::ostringstream msg;
      msg << "order " << order_id << " step " << seen.size() << " domain " << id
          << ": final loss " << result.train_reports.back().epoch_loss.back() << ", avg acc "
          << result.metrics.step_accuracy(seen.size()) << ", oracle "
          << result.metrics.step_oracle_accuracy(seen.size());
      log(msg.str());
    }
  }
  return result;
}

// --- checkpoints -----------------------------------------------------------

namespace {

void write_snapshot(BinaryWriter& out, const SharedSnapshot& snap) {
  out.u64(snap.adapters.size());
  for (std::size_t i = 0; i < snap.adapters.size(); ++i) {
    const auto& loras = snap.adapters[i].loras;
    out.u64(loras.size());
    for (std::size_t j = 0; j < loras.size(); ++j) {
      out.u64(static_cast<std::uint64_t>(loras[j].target));
      out.boolean(loras[j].b_trainable);
      out.matrix(loras[j].a);
      out.matrix(loras[j].b);
      out.vector(snap.norms[i][j]);
    }
  }
}

SharedSnapshot read_snapshot(BinaryReader& in) {
  SharedSnapshot snap;
  const std::uint64_t blocks = in.u64();
  for (std::uint64_t i = 0; i < blocks; ++i) {
    BlockAdapters block;
    std::vector<Vector> norms;
    const std::uint64_t n = in.u64();
    for (std::uint64_t j = 0; j < n; ++j) {
      LoraAdapter l;
      const std::uint64_t target = in.u64();
      if (target > 2) throw FormatError("checkpoint: bad adapter target");
      l.target = static_cast<Projection>(target);
      l.b_trainable = in.boolean();
      l.a = in.matrix();
      l.b = in.matrix();
      block.loras.push_back(std::move(l));
      norms.push_back(in.vector());
    }
    snap.adapters.push_back(std::move(block));
    snap.norms.push_back(std::move(norms));
  }
  return snap;
}

void write_metrics(BinaryWriter& out, const MetricsRecord& m) {
  out.u64(m.rows.size());
  for (const auto& r : m.rows) {
    out.u64(r.order_id);
    out.u64(r.after_domain);
    out.u64(r.eval_domain);
    out.f64(r.accuracy);
    out.f64(r.dc_accuracy);
    out.f64(r.oracle_accuracy);
    out.f64(r.exit_layer_mean);
  }
  out.u64(m.layer_dc.size());
  for (const auto& r : m.layer_dc) {
    out.u64(r.order_id);
    out.u64(r.after_domain);
    out.u64(r.layer);
    out.f64(r.accuracy);
  }
}

MetricsRecord read_metrics(BinaryReader& in) {
  MetricsRecord m;
  const std::uint64_t n = in.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    EvalRow r;
    r.order_id = in.u64();
    r.after_domain = in.u64();
    r.eval_domain = in.u64();
    r.accuracy = in.f64();
    r.dc_accuracy = in.f64();
    r.oracle_accuracy = in.f64();
    r.exit_layer_mean = in.f64();
    m.rows.push_back(r);
  }
  const std::uint64_t k = in.u64();
  for (std::uint64_t i = 0; i < k; ++i) {
    LayerDcRow r;
    r.order_id = in.u64();
    r.after_domain = in.u64();
    r.layer = in.u64();
    r.accuracy = in.f64();
    m.layer_dc.push_back(r);
  }
  return m;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw FormatError("cannot open " + path.string() + " for writing");
  BinaryWriter out(file);
  out.magic(kCheckpointMagic);
  out.string(ck.config_text);
  out.u64(ck.order_id);
  out.u64(ck.order.size());
  for (std::size_t id : ck.order) out.u64(id);
  write_metrics(out, ck.metrics);
  ck.state.backbone.write(out);
  ck.state.bank.write(out);
  out.u64(ck.state.heads.size());
  for (const auto& h : ck.state.heads) write_head(out, h);
  write_snapshot(out, ck.state.snapshot);
  write_router(out, ck.state.router);
  ck.state.gmms.write(out);
  out.u64(ck.state.domain_ids.size());
  for (std::size_t id : ck.state.domain_ids) out.u64(id);
  if (!file) throw FormatError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw FormatError("cannot open checkpoint " + path.string());
  BinaryReader in(file);
  in.expect_magic(kCheckpointMagic);
  std::string text = in.string();
  const std::size_t order_id = in.u64();
  std::vector<std::size_t> order(in.u64());
  for (auto& id : order) id = in.u64();
  MetricsRecord metrics = read_metrics(in);
  Backbone backbone = Backbone::read(in);
  AdapterBank bank = AdapterBank::read(in);
  std::vector<ClassifierHead> heads(in.u64());
  for (auto& h : heads) h = read_head(in);
  SharedSnapshot snapshot = read_snapshot(in);
  DomainRouterState router = read_router(in);
  GmmStore gmms = GmmStore::read(in);
  std::vector<std::size_t> ids(in.u64());
  for (auto& id : ids) id = in.u64();
  EngineConfig config = parse_config(text).engine;
  return Checkpoint{std::move(text), order_id, std::move(order), std::move(metrics), std::move(config),
                    EngineState{std::move(backbone), std::move(bank), std::move(heads), std::move(snapshot),
                                std::move(router), std::move(gmms), std::move(ids)}};
}

}  // namespace conec
