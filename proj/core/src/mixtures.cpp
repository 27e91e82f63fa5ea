#include "conec/mixtures.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <string>

#include "conec/errors.hpp"
#include "conec/serialize.hpp"

namespace conec {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

// log N(z | mean, L L^T) given the lower factor L.
double logpdf_with_factor(std::span<const double> z, std::span<const double> mean, const Matrix& l) {
  const std::size_t d = l.rows();
  double quad = 0.0, logdet = 0.0;
  std::vector<double> y(d);
  for (std::size_t i = 0; i < d; ++i) {
    double s = z[i] - mean[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
    quad += y[i] * y[i];
    logdet += std::log(l(i, i));
  }
  return -0.5 * quad - logdet - 0.5 * static_cast<double>(d) * kLog2Pi;
}

double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

Vector column_mean(const Matrix& x) {
  Vector m(x.cols(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) add_inplace(m, x.row(i));
  for (double& v : m) v /= static_cast<double>(x.rows());
  return m;
}

void add_covariance_jitter(Matrix& k) {
  const std::size_t d = k.rows();
  double trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) trace += k(i, i);
  const double jitter = 1e-6 * trace / static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) k(i, i) += jitter;
}

Matrix global_covariance(const Matrix& x, const Vector& mean) {
  const std::size_t d = x.cols();
  Matrix k(d, d);
  std::vector<double> diff(d);
  for (std::size_t n = 0; n < x.rows(); ++n) {
    for (std::size_t i = 0; i < d; ++i) diff[i] = x(n, i) - mean[i];
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j <= i; ++j) k(i, j) += diff[i] * diff[j];
  }
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      k(i, j) /= static_cast<double>(x.rows());
      k(j, i) = k(i, j);
    }
  add_covariance_jitter(k);
  return k;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

std::vector<std::size_t> kmeanspp_seeds(const Matrix& x, std::size_t c, Rng& rng) {
  std::vector<std::size_t> seeds{rng.uniform_index(x.rows())};
  std::vector<double> best(x.rows(), std::numeric_limits<double>::infinity());
  while (seeds.size() < c) {
    double total = 0.0;
    for (std::size_t n = 0; n < x.rows(); ++n) {
      best[n] = std::min(best[n], squared_distance(x.row(n), x.row(seeds.back())));
      total += best[n];
    }
    if (!(total > 0.0)) {
      seeds.push_back(rng.uniform_index(x.rows()));
      continue;
    }
    double target = rng.uniform() * total;
    std::size_t pick = x.rows() - 1;
    for (std::size_t n = 0; n < x.rows(); ++n) {
      target -= best[n];
      if (target < 0.0) {
        pick = n;
        break;
      }
    }
    seeds.push_back(pick);
  }
  return seeds;
}

}  // namespace

double gaussian_logpdf(std::span<const double> z, std::span<const double> mean, const Matrix& cov) {
  if (z.size() != mean.size() || cov.rows() != z.size())
    throw InvalidShape("gaussian_logpdf: dimension mismatch");
  return logpdf_with_factor(z, mean, cholesky(cov, "gaussian_logpdf"));
}

double gmm_logpdf(const GmmModel& model, std::span<const double> z) {
  std::vector<double> terms(model.num_components());
  for (std::size_t c = 0; c < terms.size(); ++c)
    terms[c] = std::log(model.weights[c]) + gaussian_logpdf(z, model.means[c], model.covariances[c]);
  return log_sum_exp(terms);
}

EmFit fit_em(const Matrix& samples, std::size_t components, Rng& rng, std::size_t max_iter,
             double tol) {
  const std::size_t n = samples.rows(), d = samples.cols();
  if (components == 0) throw InvalidInput("fit_em: need at least one component");
  if (d == 0) throw InvalidShape("fit_em: zero-dimensional samples");
  if (n < components)
    throw InvalidInput("fit_em: " + std::to_string(n) + " samples for " +
                       std::to_string(components) + " components");
  if (!samples.all_finite()) throw InvalidInput("fit_em: non-finite samples");
  if (max_iter == 0) throw InvalidInput("fit_em: max_iter must be >= 1");

  const Vector mean_all = column_mean(samples);
  const Matrix cov_all = global_covariance(samples, mean_all);

  GmmModel model;
  model.weights.assign(components, 1.0 / static_cast<double>(components));
  for (std::size_t s : kmeanspp_seeds(samples, components, rng)) {
    model.means.push_back(samples.row_vector(s));
    model.covariances.push_back(cov_all);
  }

  EmFit fit;
  GmmModel previous;
  Matrix resp(n, components);
  std::vector<double> terms(components);
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    // E-step.
    std::vector<Matrix> factors;
    for (std::size_t c = 0; c < components; ++c)
      factors.push_back(cholesky(model.covariances[c], "fit_em component " + std::to_string(c)));
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < components; ++c)
        terms[c] = std::log(model.weights[c]) +
                   logpdf_with_factor(samples.row(i), model.means[c], factors[c]);
      const double lse = log_sum_exp(terms);
      ll += lse;
      for (std::size_t c = 0; c < components; ++c) resp(i, c) = std::exp(terms[c] - lse);
    }
    if (!std::isfinite(ll)) throw NumericError("fit_em: non-finite log-likelihood");
    fit.iterations = iter + 1;
    if (iter > 0) {
      const double prev = fit.log_likelihood.back();
      if (ll < prev) {
        // The jittered M-step is not an exact maximizer; keep the better model.
        model = std::move(previous);
        break;
      }
      fit.log_likelihood.push_back(ll);
      if (ll - prev <= tol * std::abs(prev)) break;
    } else {
      fit.log_likelihood.push_back(ll);
    }
    if (iter + 1 == max_iter) break;

    // M-step.
    previous = model;
    for (std::size_t c = 0; c < components; ++c) {
      double mass = 0.0;
      for (std::size_t i = 0; i < n; ++i) mass += resp(i, c);
      if (mass < 1e-10) {
        model.means[c] = samples.row_vector(rng.uniform_index(n));
        model.covariances[c] = cov_all;
        model.weights[c] = 1.0 / static_cast<double>(n);
        continue;
      }
      Vector mu(d, 0.0);
      for (std::size_t i = 0; i < n; ++i) add_inplace(mu, samples.row(i), resp(i, c));
      for (double& v : mu) v /= mass;
      Matrix k(d, d);
      std::vector<double> diff(d);
      for (std::size_t i = 0; i < n; ++i) {
        const double r = resp(i, c);
        if (r == 0.0) continue;
        for (std::size_t a = 0; a < d; ++a) diff[a] = samples(i, a) - mu[a];
        for (std::size_t a = 0; a < d; ++a) {
          const double ra = r * diff[a];
          for (std::size_t b = 0; b <= a; ++b) k(a, b) += ra * diff[b];
        }
      }
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b <= a; ++b) {
          k(a, b) /= mass;
          k(b, a) = k(a, b);
        }
      add_covariance_jitter(k);
      model.means[c] = std::move(mu);
      model.covariances[c] = std::move(k);
      model.weights[c] = mass / static_cast<double>(n);
    }
    double wsum = 0.0;
    for (double w : model.weights) wsum += w;
    for (double& w : model.weights) w /= wsum;
  }
  fit.model = std::move(model);
  return fit;
}

Matrix sample(const GmmModel& model, std::size_t n, Rng& rng) {
  const std::size_t d = model.dim(), c = model.num_components();
  if (c == 0) throw InvalidInput("sample: empty mixture");
  std::vector<Matrix> factors;
  for (std::size_t k = 0; k < c; ++k)
    factors.push_back(cholesky(model.covariances[k], "sample domain " + std::to_string(model.domain) +
                                                         " layer " + std::to_string(model.layer)));
  Matrix out(n, d);
  std::vector<double> eps(d);
  for (std::size_t i = 0; i < n; ++i) {
    double u = rng.uniform();
    std::size_t q = c - 1;
    for (std::size_t k = 0; k < c; ++k) {
      u -= model.weights[k];
      if (u < 0.0) {
        q = k;
        break;
      }
    }
    for (double& e : eps) e = rng.normal();
    const Matrix& l = factors[q];
    for (std::size_t a = 0; a < d; ++a) {
      double s = model.means[q][a];
      for (std::size_t b = 0; b <= a; ++b) s += l(a, b) * eps[b];
      out(i, a) = s;
    }
  }
  return out;
}

// --- store -----------------------------------------------------------------

void GmmStore::put(GmmModel model) {
  const auto key = std::make_pair(model.domain, model.layer);
  models_.insert_or_assign(key, std::move(model));
}

bool GmmStore::contains(std::size_t domain, std::size_t layer) const {
  return models_.count({domain, layer}) != 0;
}

const GmmModel& GmmStore::get(std::size_t domain, std::size_t layer) const {
  auto it = models_.find({domain, layer});
  if (it == models_.end())
    throw ConfigError("no GMM stored for domain " + std::to_string(domain) + " layer " +
                      std::to_string(layer));
  return it->second;
}

std::size_t GmmStore::count_for_domain(std::size_t domain) const {
  std::size_t n = 0;
  for (const auto& [key, m] : models_)
    if (key.first == domain) ++n;
  return n;
}

void GmmStore::export_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string());
  std::size_t d = models_.empty() ? 0 : models_.begin()->second.dim();
  out << "domain,layer,component,weight";
  for (std::size_t i = 0; i < d; ++i) out << ",mean_" << i;
  for (std::size_t i = 0; i < d; ++i) out << ",var_" << i;
  out << '\n' << std::setprecision(17);
  for (const auto& [key, m] : models_) {
    for (std::size_t c = 0; c < m.num_components(); ++c) {
      out << key.first << ',' << key.second << ',' << c << ',' << m.weights[c];
      for (double v : m.means[c]) out << ',' << v;
      for (std::size_t i = 0; i < m.dim(); ++i) out << ',' << m.covariances[c](i, i);
      out << '\n';
    }
  }
}

void GmmStore::write(BinaryWriter& out) const {
  out.u64(models_.size());
  for (const auto& [key, m] : models_) {
    out.u64(m.domain);
    out.u64(m.layer);
    out.vector(m.weights);
    out.u64(m.num_components());
    for (std::size_t c = 0; c < m.num_components(); ++c) {
      out.vector(m.means[c]);
      out.matrix(m.covariances[c]);
    }
  }
}

GmmStore GmmStore::read(BinaryReader& in) {
  GmmStore store;
  const std::uint64_t n = in.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    GmmModel m;
    m.domain = in.u64();
    m.layer = in.u64();
    m.weights = in.vector();
    const std::uint64_t c = in.u64();
    if (c != m.weights.size()) throw FormatError("gmm: component count mismatch");
    for (std::uint64_t k = 0; k < c; ++k) {
      m.means.push_back(in.vector());
      m.covariances.push_back(in.matrix());
    }
    store.put(std::move(m));
  }
  return store;
}

}  // namespace conec
