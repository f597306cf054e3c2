#pragma once

// Scalar Gaussian-process baseline: Matérn covariance K(h) = sigma2 - gamma(h),
// Gaussian log-likelihood with the constant mean profiled out, grid-search
// maximum likelihood, and seeded sampling used to generate test data.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "wkrige/error.hpp"
#include "wkrige/kriging.hpp"
#include "wkrige/variogram.hpp"

namespace wkrige {

/// Covariance parameters share the semivariogram's shape.
using CovParams = MaternParams;

/// Relative diagonal jitter added before every Cholesky factorisation.
inline constexpr double kCovarianceJitter = 1e-10;

inline double matern_covariance(double h, const CovParams& params) {
  return params.sigma2 * matern_correlation(h, params.length_scale, params.nu);
}

/// K_ij = K(|x_i - x_j|) with sigma2 * jitter on the diagonal.
inline Eigen::MatrixXd covariance_matrix(const SiteSet& sites, const CovParams& params) {
  const auto& x = sites.points();
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    k(i, i) = params.sigma2 * (1.0 + kCovarianceJitter);
    for (Eigen::Index j = i + 1; j < n; ++j) k(i, j) = k(j, i) = matern_covariance((x.row(i) - x.row(j)).norm(), params);
  }
  return k;
}

namespace detail {

inline Eigen::LLT<Eigen::MatrixXd> cholesky(const Eigen::MatrixXd& k) {
  Eigen::LLT<Eigen::MatrixXd> llt(k);
  if (llt.info() != Eigen::Success) throw NumericalError("covariance not SPD");
  return llt;
}

inline double log_det(const Eigen::LLT<Eigen::MatrixXd>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

/// Cholesky solve followed by one step of iterative refinement.
inline Eigen::VectorXd refined_solve(const Eigen::LLT<Eigen::MatrixXd>& llt, const Eigen::MatrixXd& k, const Eigen::VectorXd& b) {
  Eigen::VectorXd x = llt.solve(b);
  x += llt.solve(b - k * x);
  return x;
}

inline Eigen::Map<const Eigen::VectorXd> as_vector(std::span<const double> v) {
  return {v.data(), static_cast<Eigen::Index>(v.size())};
}

}  // namespace detail

/// Generalised least-squares mean 1'K^{-1}y / 1'K^{-1}1.
inline double profile_mean(const Eigen::MatrixXd& cov_matrix, std::span<const double> values) {
  if (cov_matrix.rows() != cov_matrix.cols() || static_cast<std::size_t>(cov_matrix.rows()) != values.size())
    throw ValidationError("covariance shape does not match values");
  const auto llt = detail::cholesky(cov_matrix);
  const Eigen::VectorXd w = detail::refined_solve(llt, cov_matrix, Eigen::VectorXd::Ones(cov_matrix.rows()));
  return w.dot(detail::as_vector(values)) / w.sum();
}

inline double log_likelihood(const CovParams& params, double mean, const SiteSet& sites, std::span<const double> values) {
  params.validate();
  if (values.size() != sites.size()) throw ValidationError("value count does not match sites");
  const auto llt = detail::cholesky(covariance_matrix(sites, params));
  const Eigen::VectorXd r = detail::as_vector(values).array() - mean;
  const Eigen::VectorXd z = llt.matrixL().solve(r);
  const auto n = static_cast<double>(values.size());
  return -0.5 * z.squaredNorm() - 0.5 * n * std::log(2.0 * std::numbers::pi) - 0.5 * detail::log_det(llt);
}

struct MleFit {
  CovParams params;
  double mean = 0.0;
  double log_likelihood = -std::numeric_limits<double>::infinity();
  /// Set when the profiled variance vanishes (constant data).
  bool degenerate = false;
  std::vector<double> profiled_log_likelihood;  // per candidate, -inf when not SPD
};

/// Grid search over length scales with the mean and sill profiled in closed
/// form: sigma2(l) = r'C_l^{-1}r / n, r = y - m(l) 1, C_l the unit-sill covariance.
inline MleFit mle_fit(const SiteSet& sites, std::span<const double> values, Smoothness nu0,
                      std::span<const double> length_scale_grid) {
  const std::size_t n = values.size();
  if (n < 2) throw ValidationError("maximum likelihood needs at least two observations");
  if (n != sites.size()) throw ValidationError("value count does not match sites");
  if (length_scale_grid.empty()) throw ValidationError("length-scale grid is empty");
  const auto y = detail::as_vector(values);
  const double dn = static_cast<double>(n);
  // Profiled variances below this are roundoff from (near) constant data.
  const double variance_floor = 1e-12 * std::max(y.squaredNorm() / dn, std::numeric_limits<double>::min());

  MleFit fit;
  fit.profiled_log_likelihood.assign(length_scale_grid.size(), -std::numeric_limits<double>::infinity());
  bool found = false;
  for (std::size_t k = 0; k < length_scale_grid.size(); ++k) {
    const CovParams unit{1.0, length_scale_grid[k], nu0, 0.0};
    const Eigen::MatrixXd c = covariance_matrix(sites, unit);
    Eigen::LLT<Eigen::MatrixXd> llt(c);
    if (llt.info() != Eigen::Success) continue;
    const Eigen::VectorXd w = detail::refined_solve(llt, c, Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n)));
    const double m = w.dot(y) / w.sum();
    const Eigen::VectorXd r = y.array() - m;
    double sigma2 = llt.matrixL().solve(r).squaredNorm() / dn;
    const double log_det_c = detail::log_det(llt);

    double ll;
    if (sigma2 > variance_floor && std::isfinite(sigma2)) {
      ll = -0.5 * dn * (std::log(2.0 * std::numbers::pi) + std::log(sigma2) + 1.0) - 0.5 * log_det_c;
    } else {
      ll = std::numeric_limits<double>::infinity();
      sigma2 = 0.0;
    }
    fit.profiled_log_likelihood[k] = ll;
    if (!found || ll > fit.log_likelihood) {
      found = true;
      fit.log_likelihood = ll;
      fit.mean = m;
      fit.params = {sigma2, length_scale_grid[k], nu0, 0.0};
    }
  }
  if (!found) throw NumericalError("covariance not SPD for every length-scale candidate");
  fit.degenerate = fit.params.sigma2 == 0.0;
  return fit;
}

struct GpSample {
  SiteSet sites;
  std::vector<double> values;
  std::uint64_t seed = 0;
};

/// mean + L z with L the Cholesky factor of K and z i.i.d. N(0, 1) from a
/// seeded mt19937_64.
inline GpSample sample_gp(const SiteSet& sites, const CovParams& params, double mean, std::uint64_t seed) {
  params.validate();
  const auto llt = detail::cholesky(covariance_matrix(sites, params));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd z(static_cast<Eigen::Index>(sites.size()));
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal(rng);
  const Eigen::VectorXd y = (llt.matrixL() * z).array() + mean;
  return {sites, std::vector<double>(y.data(), y.data() + y.size()), seed};
}

}  // namespace wkrige
