#include "conec/domainid.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <string>

#include "conec/errors.hpp"
#include "conec/losses.hpp"
#include "conec/optim.hpp"
#include "conec/serialize.hpp"

namespace conec {

// --- transformation module ---------------------------------------------------

TransformMlp make_transform(std::size_t dim, std::size_t hidden, Rng& rng) {
  if (dim == 0 || hidden == 0) throw InvalidShape("make_transform: zero width");
  TransformMlp t;
  t.b1.assign(hidden, 0.0);
  t.b2.assign(dim, 0.0);
  if (hidden >= 2 * dim) {
    t.w1 = random_normal(hidden, dim, rng, 1.0 / std::sqrt(static_cast<double>(dim)));
    t.w2 = Matrix(dim, hidden);
    for (std::size_t i = 0; i < dim; ++i) {
      for (std::size_t j = 0; j < dim; ++j) {
        t.w1(i, j) = i == j ? 1.0 : 0.0;
        t.w1(dim + i, j) = i == j ? -1.0 : 0.0;
      }
      t.w2(i, i) = 1.0;
      t.w2(i, dim + i) = -1.0;
    }
  } else {
    t.w1 = random_normal(hidden, dim, rng, 1.0 / std::sqrt(static_cast<double>(dim)));
    t.w2 = random_normal(dim, hidden, rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
  }
  return t;
}

Vector transform_forward(const TransformMlp& t, std::span<const double> z, TransformCache* cache) {
  Vector pre = matvec(t.w1, z);
  add_inplace(pre, t.b1);
  Vector act = pre;
  for (double& a : act) a = std::max(a, 0.0);
  Vector out = matvec(t.w2, act);
  add_inplace(out, t.b2);
  if (cache) cache->pre = std::move(pre);
  return out;
}

TransformGrad TransformGrad::zeros_like(const TransformMlp& t) {
  return TransformGrad{Matrix(t.w1.rows(), t.w1.cols()), Vector(t.b1.size(), 0.0),
                       Matrix(t.w2.rows(), t.w2.cols()), Vector(t.b2.size(), 0.0)};
}

Vector transform_backward(const TransformMlp& t, std::span<const double> z,
                          const TransformCache& cache, std::span<const double> dout,
                          TransformGrad& grad) {
  const std::size_t hidden = t.w1.rows();
  Vector act(hidden);
  for (std::size_t h = 0; h < hidden; ++h) act[h] = std::max(cache.pre[h], 0.0);
  for (std::size_t i = 0; i < t.w2.rows(); ++i) {
    add_inplace(grad.w2.row(i), act, dout[i]);
    grad.b2[i] += dout[i];
  }
  Vector dpre = matvec_t(t.w2, dout);
  for (std::size_t h = 0; h < hidden; ++h)
    if (!(cache.pre[h] > 0.0)) dpre[h] = 0.0;
  for (std::size_t h = 0; h < hidden; ++h) {
    if (dpre[h] == 0.0) continue;
    add_inplace(grad.w1.row(h), z, dpre[h]);
    grad.b1[h] += dpre[h];
  }
  return matvec_t(t.w1, dpre);
}

// --- router state ------------------------------------------------------------

std::vector<std::size_t> DomainRouterState::enabled_layers() const {
  if (!config.layers.empty()) {
    std::vector<std::size_t> l = config.layers;
    std::sort(l.begin(), l.end());
    return l;
  }
  std::vector<std::size_t> all(config.num_layers);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i + 1;
  return all;
}

DomainRouterState make_router(RouterConfig config, Rng& rng) {
  if (config.num_layers == 0 || config.dim == 0 || config.max_domains == 0)
    throw ConfigError("router: empty configuration");
  for (std::size_t l : config.layers)
    if (l < 1 || l > config.num_layers) throw ConfigError("router: layer id out of range");
  if (!(config.threshold >= 0.0)) throw ConfigError("router: threshold must be >= 0");
  DomainRouterState r;
  r.config = std::move(config);
  for (std::size_t l = 0; l < r.config.num_layers; ++l) {
    r.transforms.push_back(make_transform(r.config.dim, r.config.hidden, rng));
    r.classifiers.push_back(DomainClassifier{Matrix(r.config.max_domains, r.config.dim),
                                             Vector(r.config.max_domains, 0.0)});
    r.centers.emplace_back(r.config.max_domains, r.config.dim);
  }
  r.has_center.assign(r.config.max_domains, false);
  return r;
}

namespace {

Vector active_logits(const DomainClassifier& c, std::span<const double> h, std::size_t active) {
  Vector logits(active);
  for (std::size_t k = 0; k < active; ++k) logits[k] = dot(c.w.row(k), h) + c.b[k];
  return logits;
}

}  // namespace

Vector layer_probabilities(const DomainRouterState& router, std::span<const double> cls,
                           std::size_t layer) {
  if (router.active_domains == 0) throw ConfigError("router: no trained domains");
  if (layer < 1 || layer > router.config.num_layers)
    throw InvalidInput("router: layer " + std::to_string(layer) + " out of range");
  const Vector h = transform_forward(router.transforms[layer - 1], cls, nullptr);
  return softmax(active_logits(router.classifiers[layer - 1], h, router.active_domains));
}

LayerVote layer_confidence(const DomainRouterState& router, const LayerTrace& trace,
                           std::size_t layer) {
  if (layer < 1 || layer > trace.num_layers())
    throw InvalidInput("layer_confidence: layer out of range");
  const Vector p = layer_probabilities(router, trace.cls_at(layer), layer);
  const auto it = std::max_element(p.begin(), p.end());
  return LayerVote{static_cast<std::size_t>(it - p.begin()), *it};
}

RouteDecision route(const DomainRouterState& router, const LayerTrace& trace) {
  const auto layers = router.enabled_layers();
  RouteDecision best;
  bool have_best = false;
  for (std::size_t layer : layers) {
    const LayerVote vote = layer_confidence(router, trace, layer);
    if (vote.confidence >= router.config.threshold)
      return RouteDecision{vote.domain, layer, layer, vote.confidence};
    if (!have_best || vote.confidence > best.confidence) {
      best = RouteDecision{vote.domain, 0, layer, vote.confidence};
      have_best = true;
    }
  }
  best.exit_layer = layers.back();
  return best;
}

void set_centers(DomainRouterState& router, std::size_t domain,
                 const std::vector<Matrix>& per_layer) {
  if (domain >= router.config.max_domains) throw ConfigError("router: domain id exceeds max_domains");
  if (per_layer.size() != router.config.num_layers)
    throw InvalidShape("set_centers: need one embedding matrix per layer");
  for (std::size_t l = 0; l < per_layer.size(); ++l) {
    const Matrix& z = per_layer[l];
    if (z.rows() == 0 || z.cols() != router.config.dim)
      throw InvalidShape("set_centers: bad embedding matrix");
    auto c = router.centers[l].row(domain);
    std::fill(c.begin(), c.end(), 0.0);
    for (std::size_t i = 0; i < z.rows(); ++i) add_inplace(c, z.row(i));
    for (double& v : c) v /= static_cast<double>(z.rows());
  }
  router.has_center[domain] = true;
}

// --- training ----------------------------------------------------------------

namespace {

struct LayerJob {
  std::size_t layer;  // 1-based
  TransformMlp transform;
  DomainClassifier classifier;
  double final_loss = 0.0;
};

void train_layer(LayerJob& job, std::size_t domain, const Matrix& real, const GmmStore& gmms,
                 const Matrix& centers, std::size_t synthetic, const RouterTrainOptions& opt,
                 Rng rng) {
  const std::size_t active = domain + 1, d = real.cols();

  // Real embeddings for the current domain, GMM replay for the past ones.
  std::vector<Matrix> data(active);
  for (std::size_t p = 0; p < domain; ++p) data[p] = sample(gmms.get(p, job.layer), synthetic, rng);
  data[domain] = real;

  std::size_t max_count = 0;
  for (const auto& m : data) max_count = std::max(max_count, m.rows());

  Matrix active_centers(active, d);
  for (std::size_t k = 0; k < active; ++k)
    for (std::size_t j = 0; j < d; ++j) active_centers(k, j) = centers(k, j);

  const double lambda = opt.use_ball_loss ? opt.lambda_ball : 0.0;
  MomentumSgd optimizer(opt.momentum);
  std::vector<std::pair<std::size_t, std::size_t>> order;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    // Domain-balanced epoch: every domain contributes max_count draws.
    order.clear();
    for (std::size_t k = 0; k < active; ++k) {
      std::vector<std::size_t> idx(data[k].rows());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      std::size_t produced = 0;
      while (produced < max_count) {
        rng.shuffle(idx);
        for (std::size_t i = 0; i < idx.size() && produced < max_count; ++i, ++produced)
          order.emplace_back(k, idx[i]);
      }
    }
    rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      const std::size_t n = end - start;
      const double inv_n = 1.0 / static_cast<double>(n);

      Matrix transformed(n, d);
      std::vector<TransformCache> caches(n);
      std::vector<std::size_t> labels(n);
      for (std::size_t b = 0; b < n; ++b) {
        const auto [k, i] = order[start + b];
        labels[b] = k;
        const Vector h = transform_forward(job.transform, data[k].row(i), &caches[b]);
        std::copy(h.begin(), h.end(), transformed.row(b).begin());
      }

      BallLossResult ball{0.0, Matrix(n, d)};
      if (lambda > 0.0) ball = ball_loss(transformed, labels, active_centers, opt.margin);

      TransformGrad tg = TransformGrad::zeros_like(job.transform);
      DomainClassifier cg{Matrix(job.classifier.w.rows(), d), Vector(job.classifier.b.size(), 0.0)};
      double ce_sum = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        auto h = transformed.row(b);
        const LossGrad ce = cross_entropy(active_logits(job.classifier, h, active), labels[b]);
        ce_sum += ce.loss;
        Vector dh(d, 0.0);
        for (std::size_t k = 0; k < active; ++k) {
          const double g = ce.grad[k] * inv_n;
          add_inplace(cg.w.row(k), h, g);
          cg.b[k] += g;
          add_inplace(dh, job.classifier.w.row(k), g);
        }
        add_inplace(dh, ball.grad.row(b), lambda * inv_n);
        const auto [k, i] = order[start + b];
        transform_backward(job.transform, data[k].row(i), caches[b], dh, tg);
      }
      const LossReport report = joint_aux_loss(ce_sum * inv_n, ball.loss * inv_n, lambda);
      if (!std::isfinite(report.total))
        throw NumericError("router training: non-finite loss at layer " + std::to_string(job.layer));
      epoch_loss += report.total;
      ++batches;

      optimizer.step(0, job.classifier.w, cg.w, opt.lr_classifier);
      optimizer.step(1, job.classifier.b, cg.b, opt.lr_classifier);
      optimizer.step(2, job.transform.w1, tg.w1, opt.lr_transform);
      optimizer.step(3, job.transform.b1, tg.b1, opt.lr_transform);
      optimizer.step(4, job.transform.w2, tg.w2, opt.lr_transform);
      optimizer.step(5, job.transform.b2, tg.b2, opt.lr_transform);
    }
    job.final_loss = batches ? epoch_loss / static_cast<double>(batches) : 0.0;
  }
}

}  // namespace

RouterTrainReport train_router(DomainRouterState& router, std::size_t domain,
                               const std::vector<Matrix>& real_per_layer, const GmmStore& gmms,
                               const RouterTrainOptions& options, const Rng& rng) {
  const auto& cfg = router.config;
  if (domain >= cfg.max_domains) throw ConfigError("router: domain id exceeds max_domains");
  if (real_per_layer.size() != cfg.num_layers)
    throw InvalidShape("train_router: need real embeddings for every layer");
  if (options.batch_size == 0) throw ConfigError("train_router: batch size must be >= 1");
  const auto layers = router.enabled_layers();
  for (std::size_t p = 0; p < domain; ++p) {
    if (!router.has_center[p])
      throw ConfigError("train_router: no ball center recorded for domain " + std::to_string(p));
    for (std::size_t layer : layers)
      if (!gmms.contains(p, layer))
        throw ConfigError("train_router: missing GMM for past domain " + std::to_string(p) +
                          " layer " + std::to_string(layer));
  }
  if (!router.has_center[domain]) set_centers(router, domain, real_per_layer);

  RouterTrainReport report;
  report.final_loss.assign(cfg.num_layers, 0.0);
  router.active_domains = std::max(router.active_domains, domain + 1);
  // A single active domain has a one-way softmax: zero loss and zero gradient.
  if (domain == 0) return report;

  const std::size_t real_count = real_per_layer.front().rows();
  std::size_t synthetic = options.synthetic_per_domain;
  if (synthetic == 0) synthetic = std::max<std::size_t>(1, std::min(options.synthetic_cap, real_count / domain));
  report.synthetic_per_domain = synthetic;

  std::vector<LayerJob> jobs;
  for (std::size_t layer : layers)
    jobs.push_back(LayerJob{layer, router.transforms[layer - 1], router.classifiers[layer - 1]});

  auto run = [&](LayerJob& job) {
    train_layer(job, domain, real_per_layer[job.layer - 1], gmms, router.centers[job.layer - 1],
                synthetic, options, rng.fork(job.layer));
  };
  if (options.threads > 1) {
    std::vector<std::future<void>> pending;
    for (auto& job : jobs) pending.push_back(std::async(std::launch::async, run, std::ref(job)));
    for (auto& f : pending) f.get();
  } else {
    for (auto& job : jobs) run(job);
  }

  for (auto& job : jobs) {
    router.transforms[job.layer - 1] = std::move(job.transform);
    router.classifiers[job.layer - 1] = std::move(job.classifier);
    report.final_loss[job.layer - 1] = job.final_loss;
  }
  return report;
}

// --- serialization -----------------------------------------------------------

void write_router(BinaryWriter& out, const DomainRouterState& r) {
  out.u64(r.config.num_layers);
  out.u64(r.config.dim);
  out.u64(r.config.max_domains);
  out.u64(r.config.hidden);
  out.f64(r.config.threshold);
  out.u64(r.config.layers.size());
  for (std::size_t l : r.config.layers) out.u64(l);
  for (std::size_t l = 0; l < r.config.num_layers; ++l) {
    out.matrix(r.transforms[l].w1);
    out.vector(r.transforms[l].b1);
    out.matrix(r.transforms[l].w2);
    out.vector(r.transforms[l].b2);
    out.matrix(r.classifiers[l].w);
    out.vector(r.classifiers[l].b);
    out.matrix(r.centers[l]);
  }
  out.u64(r.has_center.size());
  for (bool h : r.has_center) out.boolean(h);
  out.u64(r.active_domains);
}

DomainRouterState read_router(BinaryReader& in) {
  DomainRouterState r;
  r.config.num_layers = in.u64();
  r.config.dim = in.u64();
  r.config.max_domains = in.u64();
  r.config.hidden = in.u64();
  r.config.threshold = in.f64();
  const std::uint64_t nl = in.u64();
  for (std::uint64_t i = 0; i < nl; ++i) r.config.layers.push_back(in.u64());
  for (std::size_t l = 0; l < r.config.num_layers; ++l) {
    TransformMlp t;
    t.w1 = in.matrix();
    t.b1 = in.vector();
    t.w2 = in.matrix();
    t.b2 = in.vector();
    r.transforms.push_back(std::move(t));
    DomainClassifier c;
    c.w = in.matrix();
    c.b = in.vector();
    r.classifiers.push_back(std::move(c));
    r.centers.push_back(in.matrix());
  }
  const std::uint64_t nc = in.u64();
  for (std::uint64_t i = 0; i < nc; ++i) r.has_center.push_back(in.boolean());
  r.active_domains = in.u64();
  return r;
}

}  // namespace conec
