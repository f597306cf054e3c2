#pragma once

// Ordinary Kriging. Scalar and quantile-valued predictions share the bordered
// system [[Gamma, 1], [1', 0]] [lambda; alpha] = [gamma*; 1]; only the final
// combination of observations differs.

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
#include "wkrige/measures.hpp"
#include "wkrige/variogram.hpp"

namespace wkrige {

inline constexpr double kMinReciprocalCondition = 1e-12;

/// Per-coordinate affine map x -> (x - offset) * factor applied before distances.
struct CoordinateScaling {
  Eigen::VectorXd offset;
  Eigen::VectorXd factor;

  /// Maps the bounding box of `points` (rows) onto [0, 1]^d. Constant
  /// coordinates keep factor 1.
  static CoordinateScaling min_max(const Eigen::MatrixXd& points) {
    CoordinateScaling s;
    s.offset = points.colwise().minCoeff().transpose();
    const Eigen::VectorXd span = points.colwise().maxCoeff().transpose() - s.offset;
    s.factor = span.unaryExpr([](double w) { return w > 0.0 ? 1.0 / w : 1.0; });
    return s;
  }

  [[nodiscard]] Eigen::VectorXd apply(const Eigen::VectorXd& x) const {
    return (x - offset).cwiseProduct(factor);
  }
};

/// Observation locations in R^d, optionally rescaled per coordinate.
class SiteSet {
 public:
  explicit SiteSet(Eigen::MatrixXd points, std::optional<CoordinateScaling> scaling = std::nullopt)
      : raw_(std::move(points)), scaling_(std::move(scaling)) {
    if (raw_.rows() == 0) throw ValidationError("site set is empty");
    if (raw_.cols() == 0) throw ValidationError("site dimension must be positive");
    if (!raw_.allFinite()) throw ValidationError("non-finite site coordinate");
    if (scaling_) {
      if (scaling_->offset.size() != raw_.cols() || scaling_->factor.size() != raw_.cols())
        throw ValidationError("scaling dimension does not match sites");
      if ((scaling_->factor.array() <= 0.0).any()) throw ValidationError("scaling factors must be positive");
      scaled_.resize(raw_.rows(), raw_.cols());
      for (Eigen::Index i = 0; i < raw_.rows(); ++i)
        scaled_.row(i) = scaling_->apply(raw_.row(i).transpose()).transpose();
    } else {
      scaled_ = raw_;
    }
    for (Eigen::Index i = 0; i < scaled_.rows(); ++i)
      for (Eigen::Index j = i + 1; j < scaled_.rows(); ++j)
        if ((scaled_.row(i) - scaled_.row(j)).squaredNorm() == 0.0) throw ValidationError("duplicate locations");
  }

  static SiteSet with_min_max_scaling(Eigen::MatrixXd points) {
    auto scaling = CoordinateScaling::min_max(points);
    return SiteSet(std::move(points), std::move(scaling));
  }

  [[nodiscard]] std::size_t size() const noexcept { return static_cast<std::size_t>(raw_.rows()); }
  [[nodiscard]] Eigen::Index dim() const noexcept { return raw_.cols(); }
  [[nodiscard]] const Eigen::MatrixXd& raw_points() const noexcept { return raw_; }
  /// Points after scaling; all distances are measured here.
  [[nodiscard]] const Eigen::MatrixXd& points() const noexcept { return scaled_; }
  [[nodiscard]] const std::optional<CoordinateScaling>& scaling() const noexcept { return scaling_; }

  [[nodiscard]] Eigen::VectorXd to_model_space(const Eigen::VectorXd& x) const {
    if (x.size() != dim()) throw ValidationError("target dimension does not match sites");
    if (!x.allFinite()) throw ValidationError("non-finite target coordinate");
    return scaling_ ? scaling_->apply(x) : x;
  }

  /// Sites with row `skip` removed, sharing this set's scaling.
  [[nodiscard]] SiteSet without(std::size_t skip) const {
    Eigen::MatrixXd rest(raw_.rows() - 1, raw_.cols());
    for (Eigen::Index i = 0, r = 0; i < raw_.rows(); ++i)
      if (static_cast<std::size_t>(i) != skip) rest.row(r++) = raw_.row(i);
    return SiteSet(std::move(rest), scaling_);
  }

  [[nodiscard]] double max_pairwise_distance() const {
    double best = 0.0;
    for (Eigen::Index i = 0; i < scaled_.rows(); ++i)
      for (Eigen::Index j = i + 1; j < scaled_.rows(); ++j)
        best = std::max(best, (scaled_.row(i) - scaled_.row(j)).norm());
    return best;
  }

 private:
  Eigen::MatrixXd raw_;
  std::optional<CoordinateScaling> scaling_;
  Eigen::MatrixXd scaled_;
};

struct KrigingSolution {
  Eigen::VectorXd weights;
  double multiplier = 0.0;
  Eigen::VectorXd target;
};

enum class PredictionMode { sorted, constrained };

/// Gamma_ij = gamma(|x_i - x_j|) / sigma2 in model space; zero diagonal.
inline Eigen::MatrixXd unit_semivariogram_matrix(const SiteSet& sites, const MaternParams& params) {
  const MaternParams unit = params.with_sigma2(1.0);
  const double unit_nugget = params.nugget / params.sigma2;
  const auto& x = sites.points();
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) g(i, j) = g(j, i) = matern((x.row(i) - x.row(j)).norm(), unit) + unit_nugget;
  return g;
}

/// Which factorizations assemble_gamma should build.
enum class GammaParts { bordered_only, with_inverse };

/// Semivariogram matrix of a site set plus its cached factorizations.
///
/// The matrix is stored at unit sill; sigma2 is applied on access. Bordered
/// solves are therefore exactly invariant under rescaling of sigma2.
class GammaMatrix {
 public:
  GammaMatrix(const SiteSet& sites, const MaternParams& params, GammaParts parts = GammaParts::with_inverse)
      : sites_(sites), params_(params) {
    params_.validate();
    const Eigen::Index n = sites.points().rows();
    unit_gamma_ = unit_semivariogram_matrix(sites, params_);

    bordered_lu_.compute(unit_bordered());
    rcond_ = bordered_lu_.rcond();
    if (!(rcond_ >= kMinReciprocalCondition)) ill_conditioned();

    if (parts == GammaParts::with_inverse && n >= 2) {
      gamma_lu_.compute(unit_gamma_);
      if (!(gamma_lu_.rcond() >= kMinReciprocalCondition)) ill_conditioned();
      has_gamma_lu_ = true;
    }
  }

  [[nodiscard]] const SiteSet& sites() const noexcept { return sites_; }
  [[nodiscard]] const MaternParams& params() const noexcept { return params_; }
  [[nodiscard]] std::size_t size() const noexcept { return sites_.size(); }
  [[nodiscard]] double reciprocal_condition() const noexcept { return rcond_; }

  [[nodiscard]] Eigen::MatrixXd gamma() const { return params_.sigma2 * unit_gamma_; }
  [[nodiscard]] const Eigen::MatrixXd& unit_gamma() const noexcept { return unit_gamma_; }

  [[nodiscard]] bool has_inverse() const noexcept { return has_gamma_lu_; }

  /// Gamma^{-1}. Requires n >= 2 and GammaParts::with_inverse.
  [[nodiscard]] Eigen::MatrixXd inverse() const { return unit_inverse() / params_.sigma2; }
  [[nodiscard]] Eigen::MatrixXd unit_inverse() const {
    if (!has_inverse()) throw ValidationError("Gamma inverse was not assembled");
    return gamma_lu_.inverse();
  }

  [[nodiscard]] const Eigen::PartialPivLU<Eigen::MatrixXd>& bordered_lu() const noexcept { return bordered_lu_; }

  /// [[G, 1], [1', 0]] at unit sill.
  [[nodiscard]] Eigen::MatrixXd unit_bordered() const {
    const Eigen::Index n = unit_gamma_.rows();
    Eigen::MatrixXd b(n + 1, n + 1);
    b.topLeftCorner(n, n) = unit_gamma_;
    b.col(n).head(n).setOnes();
    b.row(n).head(n).setOnes();
    b(n, n) = 0.0;
    return b;
  }

  /// Inverse of the unit-sill bordered matrix with one step of iterative
  /// refinement.
  [[nodiscard]] Eigen::MatrixXd unit_bordered_inverse() const {
    const Eigen::MatrixXd b = unit_bordered();
    Eigen::MatrixXd x = bordered_lu_.inverse();
    Eigen::MatrixXd r = -b * x;
    r.diagonal().array() += 1.0;
    x += bordered_lu_.solve(r);
    return x;
  }

  /// gamma(|x_i - x*|) at unit sill for a target already in model space.
  [[nodiscard]] Eigen::VectorXd unit_gamma_star(const Eigen::VectorXd& model_target) const {
    const MaternParams unit = params_.with_sigma2(1.0);
    const double unit_nugget = params_.nugget / params_.sigma2;
    const Eigen::Index n = sites_.points().rows();
    Eigen::VectorXd g(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double h = (sites_.points().row(i).transpose() - model_target).norm();
      g[i] = h == 0.0 ? 0.0 : matern(h, unit) + unit_nugget;
    }
    return g;
  }

  /// Index of a site that coincides with the model-space target, if any.
  [[nodiscard]] std::optional<std::size_t> coincident_site(const Eigen::VectorXd& model_target) const {
    for (Eigen::Index i = 0; i < sites_.points().rows(); ++i)
      if ((sites_.points().row(i).transpose() - model_target).squaredNorm() == 0.0)
        return static_cast<std::size_t>(i);
    return std::nullopt;
  }

  /// Solves the unit-sill bordered system for right-hand side [rhs; 1] with
  /// one step of iterative refinement. Returns [lambda; alpha_unit].
  [[nodiscard]] Eigen::VectorXd solve_bordered(const Eigen::VectorXd& rhs) const {
    const Eigen::Index n = unit_gamma_.rows();
    Eigen::VectorXd b(n + 1);
    b.head(n) = rhs;
    b[n] = 1.0;
    Eigen::VectorXd x = bordered_lu_.solve(b);
    Eigen::VectorXd r(n + 1);
    r.head(n) = b.head(n) - unit_gamma_ * x.head(n) - Eigen::VectorXd::Constant(n, x[n]);
    r[n] = 1.0 - x.head(n).sum();
    x += bordered_lu_.solve(r);
    return x;
  }

 private:
  [[noreturn]] void ill_conditioned() const {
    throw NumericalError("ill-conditioned Kriging system (" + params_.describe() + ")");
  }

  SiteSet sites_;
  MaternParams params_;
  Eigen::MatrixXd unit_gamma_;
  Eigen::PartialPivLU<Eigen::MatrixXd> gamma_lu_;
  bool has_gamma_lu_ = false;
  Eigen::PartialPivLU<Eigen::MatrixXd> bordered_lu_;
  double rcond_ = 0.0;
};

inline GammaMatrix assemble_gamma(const SiteSet& sites, const MaternParams& params,
                                  GammaParts parts = GammaParts::with_inverse) {
  return GammaMatrix(sites, params, parts);
}

namespace detail {

/// Spreads the unit-sum residual evenly so that sum(weights) == 1 to rounding.
inline void restore_unit_sum(Eigen::VectorXd& weights) {
  const double defect = 1.0 - weights.sum();
  weights.array() += defect / static_cast<double>(weights.size());
}

inline KrigingSolution point_mass(std::size_t n, std::size_t site, const Eigen::VectorXd& target) {
  KrigingSolution out;
  out.weights = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  out.weights[static_cast<Eigen::Index>(site)] = 1.0;
  out.multiplier = 0.0;
  out.target = target;
  return out;
}

}  // namespace detail

/// Unconstrained ordinary Kriging weights at `target` (original coordinates).
inline KrigingSolution solve_weights(const GammaMatrix& gm, const Eigen::VectorXd& target) {
  const Eigen::VectorXd model_target = gm.sites().to_model_space(target);
  if (auto site = gm.coincident_site(model_target)) return detail::point_mass(gm.size(), *site, target);

  const Eigen::VectorXd x = gm.solve_bordered(gm.unit_gamma_star(model_target));
  const auto n = static_cast<Eigen::Index>(gm.size());
  KrigingSolution out;
  out.weights = x.head(n);
  if (!out.weights.allFinite()) throw NumericalError("ill-conditioned Kriging system (" + gm.params().describe() + ")");
  detail::restore_unit_sum(out.weights);
  out.multiplier = x[n] * gm.params().sigma2;
  out.target = target;
  return out;
}

// ---------------------------------------------------------------------------
// Non-negative weights

namespace detail {

/// Euclidean projection onto the probability simplex (sort-and-threshold).
inline Eigen::VectorXd project_to_simplex(const Eigen::VectorXd& v) {
  std::vector<double> u(v.data(), v.data() + v.size());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0.0;
  double theta = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    cumulative += u[k];
    const double t = (cumulative - 1.0) / static_cast<double>(k + 1);
    if (u[k] - t > 0.0) theta = t;
  }
  return (v.array() - theta).cwiseMax(0.0).matrix();
}

/// Equality-constrained minimiser over the free set: solves
/// [[G_FF, 1], [1', 0]] [lambda_F; a] = [g_F; 1].
inline Eigen::VectorXd solve_free_set(const Eigen::MatrixXd& G, const Eigen::VectorXd& g,
                                      const std::vector<Eigen::Index>& free, double& multiplier) {
  const auto m = static_cast<Eigen::Index>(free.size());
  Eigen::MatrixXd A(m + 1, m + 1);
  Eigen::VectorXd b(m + 1);
  for (Eigen::Index r = 0; r < m; ++r) {
    for (Eigen::Index c = 0; c < m; ++c) A(r, c) = G(free[static_cast<std::size_t>(r)], free[static_cast<std::size_t>(c)]);
    A(r, m) = A(m, r) = 1.0;
    b[r] = g[free[static_cast<std::size_t>(r)]];
  }
  A(m, m) = 0.0;
  b[m] = 1.0;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(A);
  Eigen::VectorXd x = lu.solve(b);
  x += lu.solve(b - A * x);
  multiplier = x[m];
  Eigen::VectorXd lambda = Eigen::VectorXd::Zero(G.rows());
  for (Eigen::Index r = 0; r < m; ++r) lambda[free[static_cast<std::size_t>(r)]] = x[r];
  return lambda;
}

}  // namespace detail

/// Result of the KKT check for the simplex-constrained Kriging problem.
struct KktReport {
  double residual = 0.0;
  std::size_t iterations = 0;
};

/// Kriging weights restricted to the simplex: minimises the estimation
/// variance -l'Gl + 2l'g* subject to sum(l) = 1 and l >= 0 with a primal
/// active-set method started from the simplex projection of the
/// unconstrained solution.
inline KrigingSolution solve_weights_nonneg(const GammaMatrix& gm, const Eigen::VectorXd& target,
                                            KktReport* report = nullptr) {
  const Eigen::VectorXd model_target = gm.sites().to_model_space(target);
  if (auto site = gm.coincident_site(model_target)) {
    if (report) *report = {};
    return detail::point_mass(gm.size(), *site, target);
  }

  KrigingSolution unconstrained = solve_weights(gm, target);
  if ((unconstrained.weights.array() >= 0.0).all()) {
    if (report) *report = {};
    return unconstrained;
  }

  const Eigen::MatrixXd& G = gm.unit_gamma();
  const Eigen::VectorXd g = gm.unit_gamma_star(model_target);
  const auto n = G.rows();
  const double scale = std::max({1.0, G.cwiseAbs().maxCoeff(), g.cwiseAbs().maxCoeff()});
  const double step_tol = 1e-15;
  const double kkt_tol = 1e-8;

  Eigen::VectorXd lambda = detail::project_to_simplex(unconstrained.weights);
  std::vector<bool> active(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) active[static_cast<std::size_t>(i)] = lambda[i] == 0.0;

  double multiplier = 0.0;
  const std::size_t max_iterations = 10 * static_cast<std::size_t>(n) + 10;
  std::size_t iteration = 0;
  bool converged = false;
  for (; iteration < max_iterations; ++iteration) {
    std::vector<Eigen::Index> free;
    for (Eigen::Index i = 0; i < n; ++i)
      if (!active[static_cast<std::size_t>(i)]) free.push_back(i);

    const Eigen::VectorXd candidate = detail::solve_free_set(G, g, free, multiplier);
    const Eigen::VectorXd step = candidate - lambda;

    if (step.cwiseAbs().maxCoeff() <= step_tol) {
      lambda = candidate;
      // Gradient of the objective minus the equality part; must be >= 0 on
      // the clamped set at a minimiser.
      const Eigen::VectorXd slack = 2.0 * (g - G * lambda) - Eigen::VectorXd::Constant(n, 2.0 * multiplier);
      Eigen::Index release = -1;
      double most_negative = -kkt_tol * scale;
      for (Eigen::Index i = 0; i < n; ++i)
        if (active[static_cast<std::size_t>(i)] && slack[i] < most_negative) {
          most_negative = slack[i];
          release = i;
        }
      if (release < 0) {
        converged = true;
        break;
      }
      active[static_cast<std::size_t>(release)] = false;
      continue;
    }

    double alpha = 1.0;
    Eigen::Index blocking = -1;
    for (Eigen::Index i : free) {
      if (step[i] < 0.0) {
        const double ratio = lambda[i] / -step[i];
        if (ratio < alpha) {
          alpha = ratio;
          blocking = i;
        }
      }
    }
    lambda += alpha * step;
    if (blocking >= 0) {
      lambda[blocking] = 0.0;
      active[static_cast<std::size_t>(blocking)] = true;
    }
    for (Eigen::Index i = 0; i < n; ++i)
      if (active[static_cast<std::size_t>(i)]) lambda[i] = 0.0;
  }
  if (!converged) throw NumericalError("QP did not converge");

  lambda = lambda.cwiseMax(0.0);
  lambda /= lambda.sum();

  // Stationarity on the free set, complementarity on the clamped set.
  const Eigen::VectorXd grad_part = g - G * lambda;
  double residual = std::abs(lambda.sum() - 1.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double s = grad_part[i] - multiplier;
    residual = std::max(residual, active[static_cast<std::size_t>(i)] ? std::max(0.0, -s) : std::abs(s));
  }
  residual /= scale;
  if (!(residual <= kkt_tol)) throw NumericalError("QP did not converge");
  if (report) *report = {residual, iteration + 1};

  KrigingSolution out;
  out.weights = std::move(lambda);
  out.multiplier = multiplier * gm.params().sigma2;
  out.target = target;
  return out;
}

// ---------------------------------------------------------------------------
// Predictors

inline double predict_scalar(const GammaMatrix& gm, std::span<const double> values, const Eigen::VectorXd& target) {
  if (values.size() != gm.size()) throw ValidationError("value count does not match sites");
  const Eigen::VectorXd model_target = gm.sites().to_model_space(target);
  if (auto site = gm.coincident_site(model_target)) return values[*site];
  const KrigingSolution sol = solve_weights(gm, target);
  const Eigen::Map<const Eigen::VectorXd> y(values.data(), static_cast<Eigen::Index>(values.size()));
  return sol.weights.dot(y);
}

inline double predict_scalar(const SiteSet& sites, std::span<const double> values, const MaternParams& params,
                             const Eigen::VectorXd& target) {
  return predict_scalar(GammaMatrix(sites, params, GammaParts::bordered_only), values, target);
}

/// Quantile-curve Kriging over a fixed training set; the semivariogram
/// system is factorised once and shared by every prediction.
class QuantileKriging {
 public:
  QuantileKriging(SiteSet sites, std::vector<QuantileCurve> curves, const MaternParams& params)
      : curves_(std::move(curves)), gm_(sites, params, GammaParts::bordered_only) {
    if (curves_.size() != gm_.size()) throw ValidationError("curve count does not match sites");
    stacked_ = detail::stack_rows(std::span<const QuantileCurve>(curves_));
  }

  [[nodiscard]] const GammaMatrix& system() const noexcept { return gm_; }
  [[nodiscard]] const std::vector<QuantileCurve>& curves() const noexcept { return curves_; }
  [[nodiscard]] QuantileGrid grid() const { return curves_.front().grid(); }

  [[nodiscard]] KrigingSolution weights(const Eigen::VectorXd& target, PredictionMode mode) const {
    return mode == PredictionMode::constrained ? solve_weights_nonneg(gm_, target) : solve_weights(gm_, target);
  }

  /// Unconstrained linear predictor before any rearrangement.
  [[nodiscard]] RawCurve predict_raw(const Eigen::VectorXd& target) const {
    const KrigingSolution sol = solve_weights(gm_, target);
    return {grid(), stacked_.transpose() * sol.weights};
  }

  [[nodiscard]] QuantileCurve predict(const Eigen::VectorXd& target, PredictionMode mode) const {
    const Eigen::VectorXd model_target = gm_.sites().to_model_space(target);
    if (auto site = gm_.coincident_site(model_target)) return curves_[*site];
    const KrigingSolution sol = weights(target, mode);
    if (mode == PredictionMode::constrained) {
      return barycenter(std::span<const double>(sol.weights.data(), static_cast<std::size_t>(sol.weights.size())),
                        std::span<const QuantileCurve>(curves_));
    }
    return monotone_rearrange(RawCurve(grid(), stacked_.transpose() * sol.weights));
  }

 private:
  std::vector<QuantileCurve> curves_;
  GammaMatrix gm_;
  Eigen::MatrixXd stacked_;
};

inline QuantileCurve predict_quantile(const SiteSet& sites, std::span<const QuantileCurve> curves,
                                      const MaternParams& params, const Eigen::VectorXd& target,
                                      PredictionMode mode) {
  const QuantileKriging model(sites, std::vector<QuantileCurve>(curves.begin(), curves.end()), params);
  return model.predict(target, mode);
}

}  // namespace wkrige
