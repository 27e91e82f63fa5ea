#include <doctest.h>

#include <cmath>
#include <sstream>

#include "conec/domainid.hpp"
#include "conec/errors.hpp"
#include "conec/serialize.hpp"
#include "support.hpp"

using namespace conec;
using conec::testing::grad_mismatch;

namespace {

RouterConfig small_config(std::size_t layers, std::size_t dim, std::size_t max_domains = 3) {
  RouterConfig c;
  c.num_layers = layers;
  c.dim = dim;
  c.max_domains = max_domains;
  c.hidden = 4 * dim;
  return c;
}

void randomize(DomainRouterState& r, Rng& rng) {
  for (auto& t : r.transforms) {
    t.w1 = random_normal(t.w1.rows(), t.w1.cols(), rng, 0.5);
    t.b1 = testing::random_vector(t.b1.size(), rng, 0.1);
    t.w2 = random_normal(t.w2.rows(), t.w2.cols(), rng, 0.5);
    t.b2 = testing::random_vector(t.b2.size(), rng, 0.1);
  }
  for (auto& c : r.classifiers) {
    c.w = random_normal(c.w.rows(), c.w.cols(), rng);
    c.b = testing::random_vector(c.b.size(), rng);
  }
}

LayerTrace random_trace(std::size_t layers, std::size_t dim, Rng& rng) {
  LayerTrace t;
  for (std::size_t l = 0; l <= layers; ++l) t.z.push_back(random_normal(2, dim, rng));
  return t;
}

// Per-layer CLS rows packed as a trace (row 0 of every z_l is the CLS).
LayerTrace trace_of(const std::vector<Vector>& cls_per_layer) {
  LayerTrace t;
  t.z.emplace_back(1, cls_per_layer.front().size());
  for (const auto& v : cls_per_layer) t.z.emplace_back(1, v.size(), v);
  return t;
}

// Gaussian blob around `center` (identical at every layer).
std::vector<Matrix> blob(const Vector& center, std::size_t n, std::size_t layers, Rng& rng) {
  Matrix x(n, center.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < center.size(); ++j) x(i, j) = center[j] + rng.normal();
  return std::vector<Matrix>(layers, x);
}

void store_gmms(GmmStore& store, std::size_t domain, const std::vector<Matrix>& per_layer, Rng& rng) {
  for (std::size_t l = 0; l < per_layer.size(); ++l) {
    EmFit fit = fit_em(per_layer[l], 2, rng);
    fit.model.domain = domain;
    fit.model.layer = l + 1;
    store.put(std::move(fit.model));
  }
}

RouterTrainOptions quick_options() {
  RouterTrainOptions o;
  o.epochs = 20;
  return o;
}

// Logistic regression by plain gradient descent, used as an accuracy baseline.
double logistic_oracle_accuracy(const Matrix& x0, const Matrix& x1, const Matrix& t0, const Matrix& t1) {
  const std::size_t d = x0.cols();
  Vector w(d, 0.0);
  double b = 0.0;
  for (int it = 0; it < 500; ++it) {
    Vector gw(d, 0.0);
    double gb = 0.0;
    const auto acc = [&](const Matrix& x, double y) {
      for (std::size_t i = 0; i < x.rows(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-(dot(w, x.row(i)) + b)));
        add_inplace(gw, x.row(i), p - y);
        gb += p - y;
      }
    };
    acc(x0, 0.0);
    acc(x1, 1.0);
    const double n = static_cast<double>(x0.rows() + x1.rows());
    add_inplace(w, gw, -0.1 / n);
    b -= 0.1 * gb / n;
  }
  std::size_t ok = 0;
  for (std::size_t i = 0; i < t0.rows(); ++i) ok += dot(w, t0.row(i)) + b < 0.0;
  for (std::size_t i = 0; i < t1.rows(); ++i) ok += dot(w, t1.row(i)) + b >= 0.0;
  return static_cast<double>(ok) / static_cast<double>(t0.rows() + t1.rows());
}

}  // namespace

TEST_CASE("transformation module starts as the identity") {
  Rng rng(1);
  const TransformMlp t = make_transform(6, 24, rng);
  for (int i = 0; i < 20; ++i) {
    const Vector z = testing::random_vector(6, rng, 3.0);
    const Vector out = transform_forward(t, z, nullptr);
    for (std::size_t j = 0; j < 6; ++j) REQUIRE(out[j] == z[j]);
  }
  const TransformMlp narrow = make_transform(6, 5, rng);
  CHECK(transform_forward(narrow, Vector(6, 1.0), nullptr).size() == 6);
}

TEST_CASE("transformation gradients match finite differences") {
  Rng rng(2);
  for (int t = 0; t < 10; ++t) {
    TransformMlp m = make_transform(4, 9, rng);
    m.w2 = random_normal(4, 9, rng, 0.5);
    m.b1 = testing::random_vector(9, rng, 0.3);
    const Vector z = testing::random_vector(4, rng);
    const Vector w = testing::random_vector(4, rng);
    TransformCache cache;
    transform_forward(m, z, &cache);
    bool near_kink = false;
    for (double p : cache.pre) near_kink = near_kink || std::abs(p) < 1e-4;
    if (near_kink) continue;
    TransformGrad g = TransformGrad::zeros_like(m);
    const Vector dz = transform_backward(m, z, cache, w, g);

    const auto f = [&](const TransformMlp& mm, const Vector& zz) { return dot(w, transform_forward(mm, zz, nullptr)); };
    CHECK(grad_mismatch(dz, finite_diff_grad([&](const Vector& v) { return f(m, v); }, z)) <= 1.0);
    const Vector n_w1 = finite_diff_grad(
        [&](const Vector& v) {
          TransformMlp c = m;
          c.w1 = testing::unflatten(v, 9, 4);
          return f(c, z);
        },
        testing::flatten(m.w1));
    CHECK(grad_mismatch(testing::flatten(g.w1), n_w1) <= 1.0);
    const Vector n_w2 = finite_diff_grad(
        [&](const Vector& v) {
          TransformMlp c = m;
          c.w2 = testing::unflatten(v, 4, 9);
          return f(c, z);
        },
        testing::flatten(m.w2));
    CHECK(grad_mismatch(testing::flatten(g.w2), n_w2) <= 1.0);
    const Vector n_b1 = finite_diff_grad(
        [&](const Vector& v) {
          TransformMlp c = m;
          c.b1 = v;
          return f(c, z);
        },
        m.b1);
    CHECK(grad_mismatch(g.b1, n_b1) <= 1.0);
    CHECK(grad_mismatch(g.b2, w) <= 1.0);
  }
}

TEST_CASE("router construction") {
  Rng rng(3);
  const DomainRouterState r = make_router(small_config(4, 5), rng);
  CHECK(r.transforms.size() == 4);
  CHECK(r.classifiers.size() == 4);
  CHECK(r.enabled_layers() == std::vector<std::size_t>{1, 2, 3, 4});
  for (const auto& c : r.classifiers) CHECK(max_abs(c.w) == 0.0);

  RouterConfig some = small_config(4, 5);
  some.layers = {4, 2};
  CHECK(make_router(some, rng).enabled_layers() == std::vector<std::size_t>{2, 4});
  some.layers = {5};
  CHECK_THROWS_AS(make_router(some, rng), ConfigError);
  RouterConfig neg = small_config(2, 2);
  neg.threshold = -0.1;
  CHECK_THROWS_AS(make_router(neg, rng), ConfigError);
}

TEST_CASE("layer confidence") {
  Rng rng(4);
  DomainRouterState r = make_router(small_config(3, 4), rng);
  const LayerTrace trace = random_trace(3, 4, rng);
  CHECK_THROWS_AS(layer_confidence(r, trace, 1), ConfigError);

  SUBCASE("single active domain") {
    randomize(r, rng);
    r.active_domains = 1;
    const LayerVote v = layer_confidence(r, trace, 2);
    CHECK(v.domain == 0);
    CHECK(v.confidence == 1.0);
  }
  SUBCASE("logits (10, -10)") {
    r.active_domains = 2;
    r.classifiers[0].b = Vector{10.0, -10.0, 50.0};
    const LayerVote v = layer_confidence(r, trace, 1);
    CHECK(v.domain == 0);
    CHECK(v.confidence > 0.999);
  }
  SUBCASE("manual forward oracle") {
    randomize(r, rng);
    r.active_domains = 3;
    for (std::size_t layer = 1; layer <= 3; ++layer) {
      const Vector cls = trace.cls_at(layer);
      const TransformMlp& t = r.transforms[layer - 1];
      Vector hidden(t.w1.rows());
      for (std::size_t h = 0; h < hidden.size(); ++h) {
        double s = t.b1[h];
        for (std::size_t j = 0; j < 4; ++j) s += t.w1(h, j) * cls[j];
        hidden[h] = s > 0.0 ? s : 0.0;
      }
      Vector out(4);
      for (std::size_t i = 0; i < 4; ++i) {
        double s = t.b2[i];
        for (std::size_t h = 0; h < hidden.size(); ++h) s += t.w2(i, h) * hidden[h];
        out[i] = s;
      }
      Vector logits(3);
      for (std::size_t k = 0; k < 3; ++k) logits[k] = dot(r.classifiers[layer - 1].w.row(k), out) + r.classifiers[layer - 1].b[k];
      double mx = logits[0];
      for (double v : logits) mx = std::max(mx, v);
      double z = 0.0;
      for (double v : logits) z += std::exp(v - mx);
      std::size_t arg = 0;
      for (std::size_t k = 1; k < 3; ++k)
        if (logits[k] > logits[arg]) arg = k;
      const LayerVote vote = layer_confidence(r, trace, layer);
      CHECK(vote.domain == arg);
      CHECK(std::abs(vote.confidence - std::exp(logits[arg] - mx) / z) < 1e-12);
    }
  }
}

TEST_CASE("inactive domains receive no probability mass") {
  Rng rng(5);
  DomainRouterState r = make_router(small_config(2, 3, 5), rng);
  randomize(r, rng);
  r.classifiers[0].b = Vector{0.0, 0.0, 100.0, 100.0, 100.0};
  r.active_domains = 2;
  const Vector p = layer_probabilities(r, Vector{1.0, 2.0, 3.0}, 1);
  REQUIRE(p.size() == 2);
  CHECK(p[0] + p[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(layer_confidence(r, random_trace(2, 3, rng), 1).domain < 2);
}

TEST_CASE("routing semantics") {
  Rng rng(6);
  for (int t = 0; t < 50; ++t) {
    DomainRouterState r = make_router(small_config(4, 3), rng);
    randomize(r, rng);
    r.active_domains = 3;
    const LayerTrace trace = random_trace(4, 3, rng);

    r.config.threshold = 0.0;
    const RouteDecision zero = route(r, trace);
    REQUIRE(zero.exit_layer == 1);
    REQUIRE(zero.decision_layer == 1);
    REQUIRE(zero.domain == layer_confidence(r, trace, 1).domain);

    r.config.threshold = 1.5;
    const RouteDecision never = route(r, trace);
    // Argmax over layers of the confidences.
    std::size_t best_layer = 1;
    double best = -1.0;
    for (std::size_t l = 1; l <= 4; ++l) {
      const LayerVote v = layer_confidence(r, trace, l);
      if (v.confidence > best) {
        best = v.confidence;
        best_layer = l;
      }
    }
    REQUIRE(never.decision_layer == best_layer);
    REQUIRE(never.domain == layer_confidence(r, trace, best_layer).domain);
    REQUIRE(never.exit_layer == 4);

    r.config.threshold = 0.9;
    const RouteDecision mid = route(r, trace);
    REQUIRE(mid.exit_layer >= 1);
    REQUIRE(mid.exit_layer <= 4);
  }
}

TEST_CASE("unanimous layers give a threshold-independent answer") {
  Rng rng(7);
  for (int t = 0; t < 30; ++t) {
    DomainRouterState r = make_router(small_config(3, 3), rng);
    randomize(r, rng);
    r.active_domains = 3;
    const std::size_t winner = rng.uniform_index(3);
    for (auto& c : r.classifiers) {
      c.w.fill(0.0);
      c.b = Vector(3, 0.0);
      c.b[winner] = 0.5 + 5.0 * rng.uniform();
    }
    const LayerTrace trace = random_trace(3, 3, rng);
    for (double th : {0.0, 0.3, 0.5, 0.9, 0.99, 1.0, 2.0}) {
      r.config.threshold = th;
      REQUIRE(route(r, trace).domain == winner);
    }
  }
}

TEST_CASE("a single enabled layer always decides") {
  Rng rng(8);
  RouterConfig cfg = small_config(4, 3);
  cfg.layers = {4};
  cfg.threshold = 2.0;
  DomainRouterState r = make_router(cfg, rng);
  randomize(r, rng);
  r.active_domains = 2;
  const LayerTrace trace = random_trace(4, 3, rng);
  const RouteDecision d = route(r, trace);
  CHECK(d.exit_layer == 4);
  CHECK(d.domain == layer_confidence(r, trace, 4).domain);
}

TEST_CASE("centers are per-layer means") {
  Rng rng(9);
  DomainRouterState r = make_router(small_config(2, 2), rng);
  set_centers(r, 1, {Matrix{{0, 0}, {2, 4}}, Matrix{{1, 1}}});
  CHECK(r.centers[0].row_vector(1) == Vector{1, 2});
  CHECK(r.centers[1].row_vector(1) == Vector{1, 1});
  CHECK(r.has_center[1]);
  CHECK_FALSE(r.has_center[0]);
  CHECK_THROWS_AS(set_centers(r, 5, {Matrix{{0, 0}}, Matrix{{0, 0}}}), ConfigError);
}

TEST_CASE("first domain: nothing to discriminate") {
  Rng rng(10);
  DomainRouterState r = make_router(small_config(2, 3), rng);
  const DomainRouterState before = r;
  const auto real = blob(Vector{1, 2, 3}, 30, 2, rng);
  const RouterTrainReport rep = train_router(r, 0, real, GmmStore{}, quick_options(), Rng(1));
  CHECK(r.active_domains == 1);
  CHECK(r.transforms == before.transforms);
  CHECK(r.classifiers == before.classifiers);
  CHECK(rep.synthetic_per_domain == 0);
  CHECK(r.has_center[0]);
  CHECK(route(r, trace_of({Vector{0, 0, 0}, Vector{5, 5, 5}})).domain == 0);
}

TEST_CASE("missing state for past domains is a configuration error") {
  Rng rng(11);
  DomainRouterState r = make_router(small_config(2, 3), rng);
  const auto real0 = blob(Vector{0, 0, 0}, 30, 2, rng);
  train_router(r, 0, real0, GmmStore{}, quick_options(), Rng(1));
  const auto real1 = blob(Vector{5, 0, 0}, 30, 2, rng);
  CHECK_THROWS_AS(train_router(r, 1, real1, GmmStore{}, quick_options(), Rng(1)), ConfigError);
}

TEST_CASE("two separable domains are routed almost perfectly") {
  Rng rng(12);
  const std::size_t L = 2, d = 4;
  RouterConfig cfg = small_config(L, d, 2);
  DomainRouterState r = make_router(cfg, rng);
  const Vector c0{3.0, 0.0, 0.0, 1.0}, c1{-3.0, 1.0, 0.0, 0.0};
  const auto real0 = blob(c0, 200, L, rng), real1 = blob(c1, 200, L, rng);

  GmmStore store;
  train_router(r, 0, real0, store, quick_options(), Rng(2));
  store_gmms(store, 0, real0, rng);
  const RouterTrainReport rep = train_router(r, 1, real1, store, quick_options(), Rng(3));
  CHECK(rep.synthetic_per_domain == 200);
  CHECK(r.active_domains == 2);

  const auto test0 = blob(c0, 500, 1, rng).front(), test1 = blob(c1, 500, 1, rng).front();
  std::size_t ok = 0;
  for (std::size_t i = 0; i < 500; ++i) {
    ok += route(r, trace_of({test0.row_vector(i), test0.row_vector(i)})).domain == 0;
    ok += route(r, trace_of({test1.row_vector(i), test1.row_vector(i)})).domain == 1;
  }
  const double acc = static_cast<double>(ok) / 1000.0;
  const double oracle = logistic_oracle_accuracy(real0.front(), real1.front(), test0, test1);
  CHECK(oracle >= 0.99);
  CHECK(acc >= 0.99);
}

TEST_CASE("layers train independently and threads do not change the result") {
  Rng rng(13);
  const std::size_t L = 3, d = 3;
  const auto real0 = blob(Vector{2, 0, 0}, 60, L, rng), real1 = blob(Vector{-2, 0, 1}, 60, L, rng);
  GmmStore store;
  Rng gmm_rng(14);
  store_gmms(store, 0, real0, gmm_rng);

  auto trained = [&](std::vector<std::size_t> layers, std::size_t threads) {
    RouterConfig cfg = small_config(L, d, 2);
    cfg.layers = std::move(layers);
    Rng init(15);
    DomainRouterState r = make_router(cfg, init);
    RouterTrainOptions o = quick_options();
    o.epochs = 5;
    o.threads = threads;
    train_router(r, 0, real0, store, o, Rng(16));
    train_router(r, 1, real1, store, o, Rng(16));
    return r;
  };
  const DomainRouterState seq = trained({}, 1);
  const DomainRouterState par = trained({}, 3);
  CHECK(seq == par);

  const DomainRouterState only2 = trained({2}, 1);
  CHECK(only2.transforms[1] == seq.transforms[1]);
  CHECK(only2.classifiers[1] == seq.classifiers[1]);
  Rng init(15);
  const DomainRouterState fresh = make_router(only2.config, init);
  CHECK(only2.transforms[0] == fresh.transforms[0]);
  CHECK(only2.classifiers[2] == fresh.classifiers[2]);
  CHECK(seq.classifiers[0] != fresh.classifiers[0]);
}

TEST_CASE("ball loss switch changes training") {
  Rng rng(17);
  const auto real0 = blob(Vector{1, 0}, 40, 2, rng), real1 = blob(Vector{-1, 0}, 40, 2, rng);
  GmmStore store;
  store_gmms(store, 0, real0, rng);
  auto trained = [&](bool ball) {
    Rng init(18);
    DomainRouterState r = make_router(small_config(2, 2, 2), init);
    RouterTrainOptions o = quick_options();
    o.epochs = 3;
    o.use_ball_loss = ball;
    train_router(r, 0, real0, store, o, Rng(19));
    train_router(r, 1, real1, store, o, Rng(19));
    return r;
  };
  CHECK(trained(true).transforms != trained(false).transforms);
}

TEST_CASE("router serialization round trip") {
  Rng rng(20);
  RouterConfig cfg = small_config(3, 4);
  cfg.layers = {1, 3};
  DomainRouterState r = make_router(cfg, rng);
  randomize(r, rng);
  set_centers(r, 0, {random_normal(3, 4, rng), random_normal(3, 4, rng), random_normal(3, 4, rng)});
  r.active_domains = 2;
  std::stringstream buf;
  BinaryWriter w(buf);
  write_router(w, r);
  BinaryReader in(buf);
  CHECK(read_router(in) == r);
}
