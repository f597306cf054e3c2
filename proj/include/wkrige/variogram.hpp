#pragma once

// Matérn semivariograms, experimental semivariograms for scalar and
// measure-valued observations, and least-squares fitting of the former to
// the latter.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "wkrige/error.hpp"
#include "wkrige/measures.hpp"

namespace wkrige {

/// Matérn smoothness, restricted to the half-integer closed forms.
enum class Smoothness { half, three_halves, five_halves };

inline constexpr Smoothness all_smoothness[] = {Smoothness::half, Smoothness::three_halves,
                                                Smoothness::five_halves};

inline double to_double(Smoothness nu) {
  switch (nu) {
    case Smoothness::half: return 0.5;
    case Smoothness::three_halves: return 1.5;
    case Smoothness::five_halves: return 2.5;
  }
  return 0.0;
}

inline std::string to_string(Smoothness nu) {
  switch (nu) {
    case Smoothness::half: return "1/2";
    case Smoothness::three_halves: return "3/2";
    case Smoothness::five_halves: return "5/2";
  }
  return "?";
}

/// Accepts "1/2", "3/2", "5/2" or their decimal forms.
inline Smoothness parse_smoothness(std::string_view text) {
  if (text == "1/2" || text == "0.5") return Smoothness::half;
  if (text == "3/2" || text == "1.5") return Smoothness::three_halves;
  if (text == "5/2" || text == "2.5") return Smoothness::five_halves;
  throw ValidationError("smoothness must be one of 1/2, 3/2, 5/2 (got '" + std::string(text) + "')");
}

inline Smoothness smoothness_from_double(double nu) {
  if (nu == 0.5) return Smoothness::half;
  if (nu == 1.5) return Smoothness::three_halves;
  if (nu == 2.5) return Smoothness::five_halves;
  throw ValidationError("smoothness must be one of 0.5, 1.5, 2.5");
}

struct MaternParams {
  double sigma2 = 1.0;
  double length_scale = 1.0;
  Smoothness nu = Smoothness::three_halves;
  /// Jump of the semivariogram at the origin; zero reproduces pure Matérn.
  double nugget = 0.0;

  void validate() const {
    if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) throw ValidationError("sigma2 must be positive");
    if (!(length_scale > 0.0) || !std::isfinite(length_scale))
      throw ValidationError("length_scale must be positive");
    if (!(nugget >= 0.0) || !std::isfinite(nugget)) throw ValidationError("nugget must be non-negative");
  }

  [[nodiscard]] MaternParams with_sigma2(double s2) const {
    MaternParams out = *this;
    out.sigma2 = s2;
    return out;
  }

  [[nodiscard]] std::string describe() const {
    return "sigma2=" + std::to_string(sigma2) + ", length_scale=" + std::to_string(length_scale) +
           ", nu=" + to_string(nu);
  }
};

/// Unit-sill Matérn correlation rho(h) = 1 - gamma(h) / sigma2.
inline double matern_correlation(double h, double length_scale, Smoothness nu) {
  const double r = h / length_scale;
  switch (nu) {
    case Smoothness::half: return std::exp(-r);
    case Smoothness::three_halves: {
      const double s = std::sqrt(3.0) * r;
      return (1.0 + s) * std::exp(-s);
    }
    case Smoothness::five_halves: {
      const double s = std::sqrt(5.0) * r;
      return (1.0 + s + 5.0 * r * r / 3.0) * std::exp(-s);
    }
  }
  return 0.0;
}

/// Matérn semivariogram sigma2 * (1 - rho(h)).
inline double matern(double h, const MaternParams& params) {
  if (!(h >= 0.0)) throw ValidationError("distance must be non-negative");
  if (h == 0.0) return 0.0;
  return params.sigma2 * (1.0 - matern_correlation(h, params.length_scale, params.nu));
}

/// Semivariogram used by the Kriging systems: Matérn plus the nugget for h > 0.
inline double semivariogram(double h, const MaternParams& params) {
  if (h == 0.0) return 0.0;
  return matern(h, params) + params.nugget;
}

// ---------------------------------------------------------------------------
// Experimental semivariogram

struct BinSpec {
  std::vector<double> edges;  // count + 1 strictly increasing, edges[0] >= 0

  [[nodiscard]] std::size_t count() const noexcept { return edges.empty() ? 0 : edges.size() - 1; }
  [[nodiscard]] double max_distance() const noexcept { return edges.empty() ? 0.0 : edges.back(); }
  [[nodiscard]] double center(std::size_t b) const { return 0.5 * (edges.at(b) + edges.at(b + 1)); }

  /// Equal-width bins covering [0, max_distance).
  static BinSpec uniform(std::size_t count, double max_distance) {
    if (count == 0) throw ValidationError("bin count must be positive");
    if (!(max_distance > 0.0) || !std::isfinite(max_distance))
      throw ValidationError("bin max distance must be positive");
    BinSpec spec;
    spec.edges.resize(count + 1);
    for (std::size_t b = 0; b <= count; ++b)
      spec.edges[b] = max_distance * static_cast<double>(b) / static_cast<double>(count);
    return spec;
  }

  void validate() const {
    if (edges.size() < 2) throw ValidationError("bin spec needs at least one bin");
    if (!(edges.front() >= 0.0)) throw ValidationError("bin edges must start at a non-negative distance");
    for (std::size_t b = 1; b < edges.size(); ++b)
      if (!(edges[b] > edges[b - 1])) throw ValidationError("bin edges must be strictly increasing");
  }
};

struct VariogramPoint {
  double h;              // bin center
  double gamma;          // semivariance estimate
  std::size_t pair_count;  // ordered pairs in the bin
};

struct EmpiricalVariogram {
  std::vector<VariogramPoint> points;
};

/// Euclidean distances between rows of `locations`.
inline Eigen::MatrixXd pairwise_distances(const Eigen::MatrixXd& locations) {
  const Eigen::Index n = locations.rows();
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) d(i, j) = d(j, i) = (locations.row(i) - locations.row(j)).norm();
  return d;
}

/// W2^2 between every pair of curves.
inline Eigen::MatrixXd pairwise_squared_w2(std::span<const QuantileCurve> curves) {
  if (curves.size() < 2) throw ValidationError("need at least two curves");
  const Eigen::MatrixXd q = detail::stack_rows(curves);
  const auto n = q.rows();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) out(i, j) = out(j, i) = detail::mean_squared_difference(q.row(i), q.row(j));
  return out;
}

/// |y_i - y_j|^2 for scalar observations.
inline Eigen::MatrixXd pairwise_squared_differences(std::span<const double> values) {
  const auto n = static_cast<Eigen::Index>(values.size());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double diff = values[static_cast<std::size_t>(i)] - values[static_cast<std::size_t>(j)];
      out(i, j) = out(j, i) = diff * diff;
    }
  return out;
}

/// Binned estimator gamma_b = sum_{(i,j) in N_b} sqdist(i,j) / (2 |N_b|) over
/// ordered pairs i != j whose separation lies in [edges[b], edges[b+1]).
inline EmpiricalVariogram empirical_variogram(const Eigen::MatrixXd& locations, const Eigen::MatrixXd& sqdist,
                                              const BinSpec& bins) {
  bins.validate();
  const Eigen::Index n = locations.rows();
  if (sqdist.rows() != n || sqdist.cols() != n) throw ValidationError("sqdist shape does not match locations");

  const Eigen::MatrixXd dist = pairwise_distances(locations);
  std::vector<double> sums(bins.count(), 0.0);
  std::vector<std::size_t> counts(bins.count(), 0);

  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double h = dist(i, j);
      if (h == 0.0) throw ValidationError("duplicate locations");
      const auto it = std::upper_bound(bins.edges.begin(), bins.edges.end(), h);
      if (it == bins.edges.begin() || it == bins.edges.end()) continue;
      const auto b = static_cast<std::size_t>(it - bins.edges.begin()) - 1;
      sums[b] += sqdist(i, j);
      ++counts[b];
    }
  }

  EmpiricalVariogram out;
  for (std::size_t b = 0; b < bins.count(); ++b) {
    if (counts[b] == 0) continue;
    out.points.push_back({bins.center(b), sums[b] / (2.0 * static_cast<double>(counts[b])), counts[b]});
  }
  if (out.points.empty()) throw ValidationError("no pairs in range");
  return out;
}

// ---------------------------------------------------------------------------
// Least-squares fit

struct LeastSquaresOptions {
  std::size_t grid_size = 200;
  /// Length-scale candidates span [lo_factor, hi_factor] * largest bin center.
  double lo_factor = 0.01;
  double hi_factor = 10.0;
  /// Weight each squared residual by the bin's pair count.
  bool weight_by_pairs = false;
};

/// Log-spaced values from lo to hi inclusive.
inline std::vector<double> log_spaced(double lo, double hi, std::size_t count) {
  if (count == 0) throw ValidationError("grid size must be positive");
  if (!(lo > 0.0) || !(hi >= lo)) throw ValidationError("log grid bounds must satisfy 0 < lo <= hi");
  std::vector<double> out(count);
  if (count == 1) {
    out[0] = lo;
    return out;
  }
  const double step = std::log(hi / lo) / static_cast<double>(count - 1);
  for (std::size_t k = 0; k < count; ++k) out[k] = lo * std::exp(step * static_cast<double>(k));
  out.back() = hi;
  return out;
}

struct LeastSquaresFit {
  MaternParams params;
  double objective = 0.0;
  std::vector<double> length_scale_grid;
  std::vector<double> objective_by_candidate;
};

namespace detail {

/// Profiled sill for a fixed shape g: argmin_s sum w (gamma - s g)^2.
inline double profiled_sill(const EmpiricalVariogram& emp, const std::vector<double>& g, bool weighted) {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t b = 0; b < emp.points.size(); ++b) {
    const double w = weighted ? static_cast<double>(emp.points[b].pair_count) : 1.0;
    num += w * emp.points[b].gamma * g[b];
    den += w * g[b] * g[b];
  }
  if (!(den > 0.0)) return std::numeric_limits<double>::min();
  return std::max(num / den, std::numeric_limits<double>::min());
}

}  // namespace detail

/// Sum over bins of (gamma_exp(h_b) - matern(h_b, params))^2, optionally pair-weighted.
inline double least_squares_objective(const EmpiricalVariogram& emp, const MaternParams& params,
                                      bool weight_by_pairs = false) {
  double total = 0.0;
  for (const auto& p : emp.points) {
    const double w = weight_by_pairs ? static_cast<double>(p.pair_count) : 1.0;
    const double r = p.gamma - matern(p.h, params);
    total += w * r * r;
  }
  return total;
}

/// Fits (sigma2, length_scale) at fixed smoothness: grid search over the
/// length scale, sill profiled in closed form per candidate.
inline LeastSquaresFit fit_least_squares(const EmpiricalVariogram& emp, Smoothness nu0,
                                         const LeastSquaresOptions& options = {}) {
  std::vector<double> distinct;
  for (const auto& p : emp.points) distinct.push_back(p.h);
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 2) throw ValidationError("fewer than 2 points");

  const bool any_positive = std::any_of(emp.points.begin(), emp.points.end(), [](const auto& p) { return p.gamma > 0.0; });
  if (!any_positive) throw ValidationError("zero variance data");

  const double h_max = distinct.back();
  LeastSquaresFit fit;
  fit.length_scale_grid = log_spaced(options.lo_factor * h_max, options.hi_factor * h_max, options.grid_size);
  fit.objective_by_candidate.reserve(options.grid_size);

  double best = std::numeric_limits<double>::infinity();
  std::vector<double> g(emp.points.size());
  for (double ell : fit.length_scale_grid) {
    for (std::size_t b = 0; b < emp.points.size(); ++b)
      g[b] = 1.0 - matern_correlation(emp.points[b].h, ell, nu0);
    const MaternParams candidate{detail::profiled_sill(emp, g, options.weight_by_pairs), ell, nu0, 0.0};
    const double obj = least_squares_objective(emp, candidate, options.weight_by_pairs);
    fit.objective_by_candidate.push_back(obj);
    if (obj < best) {
      best = obj;
      fit.params = candidate;
      fit.objective = obj;
    }
  }
  return fit;
}

}  // namespace wkrige
