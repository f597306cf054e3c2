#pragma once

// Leave-one-out cross-validation for quantile-curve Kriging.
//
// The virtual formulas express every LOO residual through the single matrix
//   Gt = G^{-1} - G^{-1} 1 (1' G^{-1} 1)^{-1} 1' G^{-1},
// the top-left block of the inverse bordered matrix:
//   Q_i - Qhat_i^{(-i)} = sum_j (Gt_ij / Gt_ii) Q_j,
// and the LOO variance at unit sill is -1 / Gt_ii.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wkrige/error.hpp"
#include "wkrige/kriging.hpp"
#include "wkrige/measures.hpp"
#include "wkrige/parallel.hpp"
#include "wkrige/variogram.hpp"

namespace wkrige {

class GammaTilde {
 public:
  /// `unit` is the matrix at unit sill; the stored sill only rescales access.
  GammaTilde(Eigen::MatrixXd unit, double sigma2) : unit_(std::move(unit)), sigma2_(sigma2) {}

  /// Also keeps the bordered factorisation so that residuals come from
  /// refined solves instead of products with the explicit matrix, which lose
  /// digits when the system is poorly conditioned.
  GammaTilde(Eigen::MatrixXd unit, double sigma2, Eigen::MatrixXd unit_bordered,
             Eigen::PartialPivLU<Eigen::MatrixXd> bordered_lu)
      : unit_(std::move(unit)), sigma2_(sigma2), bordered_(std::move(unit_bordered)), lu_(std::move(bordered_lu)) {}

  [[nodiscard]] Eigen::MatrixXd matrix() const { return unit_ / sigma2_; }
  [[nodiscard]] const Eigen::MatrixXd& unit_matrix() const noexcept { return unit_; }
  [[nodiscard]] double sigma2() const noexcept { return sigma2_; }
  [[nodiscard]] std::size_t size() const noexcept { return static_cast<std::size_t>(unit_.rows()); }

  /// Row-normalised matrix Gt_ij / Gt_ii. Independent of the sill.
  [[nodiscard]] Eigen::MatrixXd residual_operator() const {
    return unit_.diagonal().cwiseInverse().asDiagonal() * unit_;
  }

  /// residual_operator() * stacked.
  [[nodiscard]] Eigen::MatrixXd apply_residual_operator(const Eigen::MatrixXd& stacked) const {
    if (!lu_) return residual_operator() * stacked;
    const Eigen::Index n = unit_.rows();
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + 1, stacked.cols());
    rhs.topRows(n) = stacked;
    Eigen::MatrixXd y = lu_->solve(rhs);
    y += lu_->solve(rhs - bordered_ * y);
    return unit_.diagonal().cwiseInverse().asDiagonal() * y.topRows(n);
  }

  /// LOO prediction variances -1 / Gt_ii at the stored sill.
  [[nodiscard]] Eigen::VectorXd loo_variances() const {
    return -sigma2_ * unit_.diagonal().cwiseInverse();
  }

 private:
  Eigen::MatrixXd unit_;
  double sigma2_;
  Eigen::MatrixXd bordered_;
  std::optional<Eigen::PartialPivLU<Eigen::MatrixXd>> lu_;
};

inline GammaTilde gamma_tilde(const GammaMatrix& gm) {
  // Read off the refined bordered inverse: its corner is -1/s with
  // s = 1' G^{-1} 1, and its leading block is Gt.
  const Eigen::MatrixXd binv = gm.unit_bordered_inverse();
  const Eigen::Index n = binv.rows() - 1;
  const double s = -1.0 / binv(n, n);
  // The threshold applies to the normalisation at the model's own sill.
  if (!(std::abs(s / gm.params().sigma2) >= 1e-14)) throw NumericalError("degenerate constraint normalization");
  Eigen::MatrixXd gt = binv.topLeftCorner(n, n);
  gt = 0.5 * (gt + gt.transpose());
  // Gt has zero row sums. Remove the rounding defect with the smallest
  // symmetric off-diagonal correction, keeping the diagonal (the LOO
  // precisions) as computed.
  if (n >= 3) {
    const Eigen::VectorXd defect = gt.rowwise().sum();
    const double dn = static_cast<double>(n);
    const Eigen::VectorXd v = (defect.array() - defect.sum() / (2.0 * dn - 2.0)) / (dn - 2.0);
    const Eigen::VectorXd diag = gt.diagonal();
    gt.colwise() -= v;
    gt.rowwise() -= v.transpose();
    gt.diagonal() = diag;
  }
  if (!(gt.diagonal().array() < 0.0).all()) throw NumericalError("invalid LOO variance (ill-posed system)");
  return {std::move(gt), gm.params().sigma2, gm.unit_bordered(), gm.bordered_lu()};
}

namespace detail {

inline Eigen::MatrixXd loo_residual_matrix(const GammaTilde& gt, const Eigen::MatrixXd& stacked) {
  if (static_cast<std::size_t>(stacked.rows()) != gt.size()) throw ValidationError("curve count does not match Gamma");
  return gt.apply_residual_operator(stacked);
}

inline double mean_l2_squared(const Eigen::MatrixXd& residuals) {
  return residuals.squaredNorm() / static_cast<double>(residuals.rows() * residuals.cols());
}

}  // namespace detail

/// Q_i minus its leave-one-out prediction, for every i, from one inverse.
inline std::vector<RawCurve> loo_residuals_virtual(const GammaTilde& gt, std::span<const QuantileCurve> curves) {
  const Eigen::MatrixXd r = detail::loo_residual_matrix(gt, detail::stack_rows(curves));
  const auto grid = curves.front().grid();
  std::vector<RawCurve> out;
  out.reserve(curves.size());
  for (Eigen::Index i = 0; i < r.rows(); ++i) out.emplace_back(grid, r.row(i).transpose());
  return out;
}

/// (1/n) sum_i ||Q_i - Qhat_i^{(-i)}||^2 via the virtual formulas.
inline double loo_mse_virtual(const GammaTilde& gt, std::span<const QuantileCurve> curves) {
  return detail::mean_l2_squared(detail::loo_residual_matrix(gt, detail::stack_rows(curves)));
}

namespace detail {

/// Weights of the Kriging predictor at site i from the other sites, solved
/// from scratch. With pivot site L the unit-sum constraint is eliminated by
/// writing the weights as e_L plus increments; the increment matrix
/// g(a,L) + g(b,L) - g(a,b) is SPD, so one Cholesky factorisation suffices.
/// Falls back to the bordered LU when it is not numerically SPD.
/// `work` is reused across folds to hold the increment matrix and its factor.
inline Eigen::VectorXd naive_fold_weights(const Eigen::MatrixXd& full, Eigen::Index i, const MaternParams& params,
                                          Eigen::MatrixXd& work) {
  const Eigen::Index n = full.rows();
  const Eigen::Index m = n - 1;
  std::vector<Eigen::Index> keep;
  keep.reserve(static_cast<std::size_t>(m));
  for (Eigen::Index j = 0; j < n; ++j)
    if (j != i) keep.push_back(j);
  const auto at = [&](Eigen::Index r) { return keep[static_cast<std::size_t>(r)]; };
  if (m == 1) return Eigen::VectorXd::Ones(1);

  const Eigen::Index pivot = at(m - 1);
  work.resize(m - 1, m - 1);
  auto& inc = work;
  Eigen::VectorXd rhs(m - 1);
  for (Eigen::Index c = 0; c < m - 1; ++c) {
    for (Eigen::Index r = c; r < m - 1; ++r) inc(r, c) = full(at(r), pivot) + full(at(c), pivot) - full(at(r), at(c));
    rhs[c] = full(at(c), pivot) + full(pivot, i) - full(at(c), i);
  }
  const Eigen::LLT<Eigen::Ref<Eigen::MatrixXd>> llt(inc);
  Eigen::VectorXd weights(m);
  if (llt.info() == Eigen::Success && llt.rcond() >= kMinReciprocalCondition) {
    Eigen::VectorXd w = llt.solve(rhs);
    const auto assemble = [&] {
      weights.head(m - 1) = w;
      weights[m - 1] = 1.0 - w.sum();
    };
    assemble();
    // One refinement step on the stationarity conditions of the reduced problem.
    Eigen::VectorXd grad(m);
    for (Eigen::Index r = 0; r < m; ++r) {
      double acc = -full(at(r), i);
      for (Eigen::Index c = 0; c < m; ++c) acc += full(at(c), at(r)) * weights[c];
      grad[r] = acc;
    }
    w += llt.solve((grad.head(m - 1).array() - grad[m - 1]).matrix());
    assemble();
    return weights;
  }

  Eigen::MatrixXd bordered(n, n);
  Eigen::VectorXd b(n);
  for (Eigen::Index r = 0; r < m; ++r) {
    for (Eigen::Index c = 0; c < m; ++c) bordered(r, c) = full(at(r), at(c));
    bordered(r, m) = bordered(m, r) = 1.0;
    b[r] = full(at(r), i);
  }
  bordered(m, m) = 0.0;
  b[m] = 1.0;
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(bordered);
  if (!(lu.rcond() >= kMinReciprocalCondition))
    throw NumericalError("ill-conditioned Kriging system (" + params.describe() + ")");
  Eigen::VectorXd sol = lu.solve(b);
  sol += lu.solve(b - bordered * sol);
  weights = sol.head(m);
  restore_unit_sum(weights);
  return weights;
}

}  // namespace detail

/// Residuals by refitting the Kriging system without each site in turn: for
/// every i the system on the other n - 1 sites is factorised from scratch and
/// solved for the target x_i. Uses the raw linear predictor, no rearrangement.
inline std::vector<RawCurve> loo_residuals_naive(const SiteSet& sites, std::span<const QuantileCurve> curves,
                                                 const MaternParams& params) {
  params.validate();
  const auto n = static_cast<Eigen::Index>(sites.size());
  if (n < 2) throw ValidationError("leave-one-out needs at least two sites");
  if (curves.size() != sites.size()) throw ValidationError("curve count does not match sites");
  const Eigen::MatrixXd q = detail::stack_rows(curves);
  const Eigen::MatrixXd full = unit_semivariogram_matrix(sites, params);
  const auto grid = curves.front().grid();

  std::vector<RawCurve> out;
  out.reserve(sites.size());
  Eigen::MatrixXd work;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd weights = detail::naive_fold_weights(full, i, params, work);
    Eigen::VectorXd residual = q.row(i).transpose();
    for (Eigen::Index r = 0, j = 0; j < n; ++j) {
      if (j == i) continue;
      residual.noalias() -= weights[r++] * q.row(j).transpose();
    }
    out.emplace_back(grid, std::move(residual));
  }
  return out;
}

inline double loo_mse_naive(const SiteSet& sites, std::span<const QuantileCurve> curves, const MaternParams& params) {
  const auto residuals = loo_residuals_naive(sites, curves, params);
  double total = 0.0;
  for (const auto& r : residuals) total += l2_norm_squared(r);
  return total / static_cast<double>(residuals.size());
}

/// Scale estimate (1/n) sum_i ||res_i||^2 / sigma_i^2 with sigma_i^2 = -1/Gt_ii
/// taken at unit sill, whatever sill `gt` was assembled with.
inline double estimate_scale(const GammaTilde& gt, std::span<const QuantileCurve> curves) {
  const Eigen::VectorXd diag = gt.unit_matrix().diagonal();
  if (!(diag.array() < 0.0).all()) throw NumericalError("invalid LOO variance (ill-posed system)");
  const Eigen::MatrixXd r = detail::loo_residual_matrix(gt, detail::stack_rows(curves));
  const auto m = static_cast<double>(r.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < r.rows(); ++i) {
    const double unit_variance = -1.0 / diag[i];
    total += (r.row(i).squaredNorm() / m) / unit_variance;
  }
  return total / static_cast<double>(r.rows());
}

// ---------------------------------------------------------------------------
// Parameter selection

/// 100 log-spaced length scales in [0.05, 2] x the largest site separation.
inline std::vector<double> default_length_scale_grid(const SiteSet& sites, std::size_t size = 100) {
  const double d = sites.max_pairwise_distance();
  if (!(d > 0.0)) throw ValidationError("need at least two distinct sites");
  return log_spaced(0.05 * d, 2.0 * d, size);
}

struct CvCandidate {
  double length_scale = 0.0;
  Smoothness nu = Smoothness::half;
  double mse_loo = std::numeric_limits<double>::quiet_NaN();
  bool admissible = false;
  std::string diagnostic;
};

struct CvReport {
  std::vector<CvCandidate> candidates;
  std::size_t best = 0;
  std::vector<double> residual_norms;  // ||Q_i - Qhat_i^{(-i)}||^2 at the best candidate
  double sigma2_hat = 0.0;

  /// Selected parameters with the estimated sill.
  [[nodiscard]] MaternParams selected() const {
    const auto& c = candidates.at(best);
    return {sigma2_hat, c.length_scale, c.nu, 0.0};
  }
};

struct CvOptions {
  std::size_t threads = 1;
  /// Sill used while scoring candidates. Scores do not depend on it.
  double sigma2 = 1.0;
};

namespace detail {

inline bool all_rows_equal(const Eigen::MatrixXd& q) {
  for (Eigen::Index i = 1; i < q.rows(); ++i)
    if (q.row(i) != q.row(0)) return false;
  return true;
}

}  // namespace detail

/// Grid search over (nu, length_scale) minimising the virtual LOO error.
/// Candidate order is nu ascending, then length scale in grid order; ties
/// keep the earliest candidate.
inline CvReport grid_search_cv(const SiteSet& sites, std::span<const QuantileCurve> curves,
                               std::span<const double> length_scale_grid, std::span<const Smoothness> nu_set,
                               const CvOptions& options = {}) {
  if (length_scale_grid.empty()) throw ValidationError("length-scale grid is empty");
  if (nu_set.empty()) throw ValidationError("smoothness set is empty");
  if (curves.size() != sites.size()) throw ValidationError("curve count does not match sites");
  if (sites.size() < 3) throw ValidationError("cross-validation needs at least three sites");
  const Eigen::MatrixXd q = detail::stack_rows(curves);
  if (detail::all_rows_equal(q)) throw ValidationError("zero variance data");

  std::vector<Smoothness> nus(nu_set.begin(), nu_set.end());
  std::sort(nus.begin(), nus.end(), [](Smoothness a, Smoothness b) { return to_double(a) < to_double(b); });
  nus.erase(std::unique(nus.begin(), nus.end()), nus.end());

  CvReport report;
  for (Smoothness nu : nus)
    for (double ell : length_scale_grid) report.candidates.push_back({ell, nu, std::numeric_limits<double>::quiet_NaN(), false, {}});

  parallel_for(report.candidates.size(), options.threads, [&](std::size_t k) {
    auto& c = report.candidates[k];
    try {
      const GammaMatrix gm(sites, {options.sigma2, c.length_scale, c.nu, 0.0});
      const GammaTilde gt = gamma_tilde(gm);
      c.mse_loo = detail::mean_l2_squared(detail::loo_residual_matrix(gt, q));
      c.admissible = std::isfinite(c.mse_loo);
      if (!c.admissible) c.diagnostic = "non-finite LOO error";
    } catch (const Error& e) {
      c.diagnostic = e.what();
    }
  });

  bool found = false;
  for (std::size_t k = 0; k < report.candidates.size(); ++k) {
    const auto& c = report.candidates[k];
    if (!c.admissible) continue;
    if (!found) {
      report.best = k;
      found = true;
      continue;
    }
    const double incumbent = report.candidates[report.best].mse_loo;
    if (c.mse_loo < incumbent - 1e-15 * std::max(1.0, incumbent)) report.best = k;
  }
  if (!found) throw NumericalError("no admissible candidate");

  const auto& best = report.candidates[report.best];
  const GammaMatrix gm(sites, {1.0, best.length_scale, best.nu, 0.0});
  const GammaTilde gt = gamma_tilde(gm);
  const Eigen::MatrixXd r = detail::loo_residual_matrix(gt, q);
  report.residual_norms.resize(static_cast<std::size_t>(r.rows()));
  for (Eigen::Index i = 0; i < r.rows(); ++i)
    report.residual_norms[static_cast<std::size_t>(i)] = r.row(i).squaredNorm() / static_cast<double>(r.cols());
  report.sigma2_hat = estimate_scale(gt, curves);
  if (!(report.sigma2_hat > 0.0)) throw ValidationError("zero variance data");
  return report;
}

}  // namespace wkrige
