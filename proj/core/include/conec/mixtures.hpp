#pragma once

// Full-covariance Gaussian mixtures: EM fitting, densities, and sampling of
// synthetic embeddings for past domains.

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "conec/numkit.hpp"

namespace conec {

class BinaryWriter;
class BinaryReader;

struct GmmModel {
  Vector weights;                  // C, on the simplex
  std::vector<Vector> means;       // C x d
  std::vector<Matrix> covariances; // C x (d x d), symmetric positive definite
  std::size_t layer = 0;
  std::size_t domain = 0;

  std::size_t num_components() const noexcept { return weights.size(); }
  std::size_t dim() const noexcept { return means.empty() ? 0 : means.front().size(); }

  bool operator==(const GmmModel&) const = default;
};

/// log N(z | mean, cov) evaluated through a Cholesky factor.
double gaussian_logpdf(std::span<const double> z, std::span<const double> mean, const Matrix& cov);

/// log sum_c w_c N(z | mean_c, cov_c)
double gmm_logpdf(const GmmModel& model, std::span<const double> z);

struct EmFit {
  GmmModel model;
  std::vector<double> log_likelihood;  // total log-likelihood at each E-step
  std::size_t iterations = 0;
};

/// EM with k-means++ seeding. Each M-step adds 1e-6 * trace(K) / d to the
/// covariance diagonal; a component whose responsibility mass vanishes is
/// re-seeded at a random sample with the global covariance. Stops when the
/// relative log-likelihood gain drops below `tol`, when an update would lower
/// the likelihood (that update is discarded), or after `max_iter` E-steps.
/// The returned model is the one the last log-likelihood entry was evaluated on.
EmFit fit_em(const Matrix& samples, std::size_t components, Rng& rng, std::size_t max_iter = 100,
             double tol = 1e-8);

/// Draws component q ~ Categorical(weights), then mean_q + L_q eps.
Matrix sample(const GmmModel& model, std::size_t n, Rng& rng);

/// Mixtures keyed by (domain, layer).
class GmmStore {
 public:
  void put(GmmModel model);
  bool contains(std::size_t domain, std::size_t layer) const;
  const GmmModel& get(std::size_t domain, std::size_t layer) const;
  std::size_t size() const noexcept { return models_.size(); }
  std::size_t count_for_domain(std::size_t domain) const;

  /// One row per component: domain, layer, component, weight, mean..., diag(K)...
  void export_csv(const std::filesystem::path& path) const;

  void write(BinaryWriter& out) const;
  static GmmStore read(BinaryReader& in);

  bool operator==(const GmmStore&) const = default;

 private:
  std::map<std::pair<std::size_t, std::size_t>, GmmModel> models_;
};

}  // namespace conec
