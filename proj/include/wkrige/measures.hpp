#pragma once

// Probability measures on the real line, represented by their quantile
// functions sampled on a shared midpoint grid of (0, 1). All W2 geometry is
// plain L2 geometry on these sample vectors.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "wkrige/error.hpp"
#include "wkrige/normal_quantile.hpp"

namespace wkrige {

/// Midpoint grid xi_k = (2k - 1) / (2M), k = 1..M. Fully determined by M.
class QuantileGrid {
 public:
  static constexpr std::size_t default_size = 100;

  explicit QuantileGrid(std::size_t size = default_size) : size_(size) {
    if (size == 0) throw ValidationError("quantile grid size must be positive");
  }

  [[nodiscard]] std::size_t size() const noexcept { return size_; }

  /// Node k, zero based.
  [[nodiscard]] double node(std::size_t k) const noexcept {
    return (2.0 * static_cast<double>(k) + 1.0) / (2.0 * static_cast<double>(size_));
  }

  [[nodiscard]] Eigen::VectorXd nodes() const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(size_));
    for (std::size_t k = 0; k < size_; ++k) out[static_cast<Eigen::Index>(k)] = node(k);
    return out;
  }

  /// Index of the node closest to level p; ties resolve to the lower node.
  [[nodiscard]] std::size_t nearest_node(double p) const noexcept {
    std::size_t best = 0;
    double best_gap = std::abs(node(0) - p);
    for (std::size_t k = 1; k < size_; ++k) {
      const double gap = std::abs(node(k) - p);
      if (gap < best_gap) {
        best = k;
        best_gap = gap;
      }
    }
    return best;
  }

  friend bool operator==(const QuantileGrid&, const QuantileGrid&) = default;

 private:
  std::size_t size_;
};

/// Curve values on a grid with no monotonicity requirement, e.g. an
/// unconstrained Kriging combination before rearrangement.
class RawCurve {
 public:
  RawCurve(QuantileGrid grid, Eigen::VectorXd values) : grid_(grid), values_(std::move(values)) {
    if (static_cast<std::size_t>(values_.size()) != grid_.size())
      throw ValidationError("curve length does not match grid size");
    if (!values_.allFinite()) throw ValidationError("non-finite curve value");
  }

  [[nodiscard]] const QuantileGrid& grid() const noexcept { return grid_; }
  [[nodiscard]] const Eigen::VectorXd& values() const noexcept { return values_; }
  [[nodiscard]] std::size_t size() const noexcept { return grid_.size(); }

  [[nodiscard]] bool is_monotone() const noexcept {
    for (Eigen::Index k = 1; k < values_.size(); ++k)
      if (values_[k] < values_[k - 1]) return false;
    return true;
  }

 private:
  QuantileGrid grid_;
  Eigen::VectorXd values_;
};

/// A quantile function: finite and non-decreasing on its grid.
class QuantileCurve {
 public:
  QuantileCurve(QuantileGrid grid, Eigen::VectorXd values) : grid_(grid), values_(std::move(values)) {
    if (static_cast<std::size_t>(values_.size()) != grid_.size())
      throw ValidationError("curve length does not match grid size");
    if (!values_.allFinite()) throw ValidationError("non-finite curve value");
    for (Eigen::Index k = 1; k < values_.size(); ++k)
      if (values_[k] < values_[k - 1]) throw ValidationError("quantile values must be non-decreasing");
  }

  /// Point mass at `value`.
  static QuantileCurve dirac(QuantileGrid grid, double value) {
    return {grid, Eigen::VectorXd::Constant(static_cast<Eigen::Index>(grid.size()), value)};
  }

  [[nodiscard]] const QuantileGrid& grid() const noexcept { return grid_; }
  [[nodiscard]] const Eigen::VectorXd& values() const noexcept { return values_; }
  [[nodiscard]] std::size_t size() const noexcept { return grid_.size(); }

  // NOLINTNEXTLINE(google-explicit-constructor)
  operator RawCurve() const { return {grid_, values_}; }

 private:
  QuantileGrid grid_;
  Eigen::VectorXd values_;
};

namespace detail {

/// Mean of (a_k - b_k)^2, accumulated relative to the first node so that
/// constant differences are reproduced exactly.
template <class A, class B>
inline double mean_squared_difference(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  const double d0 = a.coeff(0) - b.coeff(0);
  const double s0 = d0 * d0;
  return s0 + ((a - b).array().square() - s0).sum() / static_cast<double>(a.size());
}

template <class A, class B>
inline void require_same_grid(const A& a, const B& b) {
  if (a.grid() != b.grid()) throw ValidationError("grid mismatch");
}

/// Stacks curve values as rows of an n x M matrix. Requires a shared grid.
template <class Curve>
inline Eigen::MatrixXd stack_rows(std::span<const Curve> curves) {
  if (curves.empty()) throw ValidationError("no curves given");
  const auto grid = curves.front().grid();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(curves.size()), static_cast<Eigen::Index>(grid.size()));
  for (std::size_t i = 0; i < curves.size(); ++i) {
    require_same_grid(curves[i], curves.front());
    out.row(static_cast<Eigen::Index>(i)) = curves[i].values().transpose();
  }
  return out;
}

}  // namespace detail

/// Quantile curve of the empirical measure of `samples`: at each node xi,
/// the smallest sample x with F(x) >= xi, i.e. the ceil(xi * s)-th order
/// statistic. No interpolation between order statistics.
inline QuantileCurve empirical_quantile(std::span<const double> samples, QuantileGrid grid) {
  if (samples.empty()) throw ValidationError("empty sample set");
  std::vector<double> sorted(samples.begin(), samples.end());
  for (double s : sorted)
    if (!std::isfinite(s)) throw ValidationError("non-finite sample");
  std::sort(sorted.begin(), sorted.end());

  // Rank ceil(xi_k * s) with xi_k = (2k + 1) / (2M), in exact integer arithmetic.
  const std::size_t s = sorted.size();
  const std::size_t two_m = 2 * grid.size();
  Eigen::VectorXd values(static_cast<Eigen::Index>(grid.size()));
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const std::size_t numerator = (2 * k + 1) * s;
    const std::size_t rank = std::clamp<std::size_t>((numerator + two_m - 1) / two_m, 1, s);
    values[static_cast<Eigen::Index>(k)] = sorted[rank - 1];
  }
  return {grid, std::move(values)};
}

/// Midpoint-rule L2(0,1) inner product: (1/M) sum_k a_k b_k.
inline double l2_inner(const RawCurve& a, const RawCurve& b) {
  detail::require_same_grid(a, b);
  return a.values().dot(b.values()) / static_cast<double>(a.size());
}

inline double l2_norm_squared(const RawCurve& a) { return l2_inner(a, a); }

/// 2-Wasserstein distance between two measures via their quantile curves.
inline double wasserstein2(const QuantileCurve& a, const QuantileCurve& b) {
  detail::require_same_grid(a, b);
  const double sq = detail::mean_squared_difference(a.values(), b.values());
  return std::sqrt(sq);
}

/// Pointwise sum_i w_i * curve_i. Monotonicity is not enforced.
template <class Curve>
inline RawCurve linear_combination(std::span<const double> weights, std::span<const Curve> curves) {
  if (weights.size() != curves.size()) throw ValidationError("weights and curves differ in length");
  if (curves.empty()) throw ValidationError("no curves given");
  const auto grid = curves.front().grid();
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(grid.size()));
  for (std::size_t i = 0; i < curves.size(); ++i) {
    detail::require_same_grid(curves[i], curves.front());
    acc.noalias() += weights[i] * curves[i].values();
  }
  return {grid, std::move(acc)};
}

/// Sorts the values ascending, giving the closest quantile curve in L2.
inline QuantileCurve monotone_rearrange(const RawCurve& raw) {
  Eigen::VectorXd values = raw.values();
  std::sort(values.data(), values.data() + values.size());
  return {raw.grid(), std::move(values)};
}

/// Wasserstein barycenter: for non-negative weights summing to one this is
/// the weighted average of quantile curves, which stays monotone.
inline QuantileCurve barycenter(std::span<const double> weights, std::span<const QuantileCurve> curves) {
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ValidationError("invalid barycentric weights");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ValidationError("invalid barycentric weights");
  // Rounded products and sums are monotone, so non-negative combinations of
  // non-decreasing vectors stay non-decreasing in floating point as well.
  RawCurve combo = linear_combination(weights, curves);
  return {combo.grid(), combo.values()};
}

/// Quantile curve of N(mean, variance): mean + sqrt(variance) * Phi^{-1}(xi).
inline QuantileCurve gaussian_quantile_curve(double mean, double variance, QuantileGrid grid) {
  if (!(variance > 0.0) || !std::isfinite(variance)) throw ValidationError("variance must be positive");
  if (!std::isfinite(mean)) throw ValidationError("mean must be finite");
  const double sd = std::sqrt(variance);
  Eigen::VectorXd values(static_cast<Eigen::Index>(grid.size()));
  for (std::size_t k = 0; k < grid.size(); ++k)
    values[static_cast<Eigen::Index>(k)] = mean + sd * normal_quantile(grid.node(k));
  return {grid, std::move(values)};
}

/// Mean of the measure: midpoint quadrature of the integral of Q over (0, 1).
inline double curve_mean(const RawCurve& curve) { return curve.values().mean(); }

}  // namespace wkrige
