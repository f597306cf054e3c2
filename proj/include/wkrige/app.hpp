#pragma once

// Command implementations behind the wkrige CLI. Everything here works on
// in-memory documents; file handling and exit codes live in tools/.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "wkrige/crossval.hpp"
#include "wkrige/error.hpp"
#include "wkrige/io.hpp"
#include "wkrige/kriging.hpp"
#include "wkrige/measures.hpp"
#include "wkrige/variogram.hpp"

namespace wkrige::app {

// ---------------------------------------------------------------------------
// Toy field: (u, v) in [0,1] x (0,2] -> N(u, v)

inline io::Dataset make_toy_dataset(std::size_t n, std::uint64_t seed, std::size_t grid_size = QuantileGrid::default_size) {
  if (n < 2) throw ValidationError("toy-gen needs n >= 2");
  const QuantileGrid grid(grid_size);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  io::Dataset data{2, grid, {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    const double u = unit(rng);
    const double v = 2.0 * (1.0 - unit(rng));  // (0, 2]
    Eigen::VectorXd x(2);
    x << u, v;
    data.locations.push_back(x);
    data.curves.push_back(gaussian_quantile_curve(u, v, grid));
  }
  return data;
}

/// Exact W2 between the toy measures at two locations.
inline double toy_w2(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double dm = a[0] - b[0];
  const double ds = std::sqrt(a[1]) - std::sqrt(b[1]);
  return std::sqrt(dm * dm + ds * ds);
}

// ---------------------------------------------------------------------------
// Fitting

enum class FitMethod { cv, variogram_ls };

inline FitMethod parse_fit_method(const std::string& s) {
  if (s == "cv") return FitMethod::cv;
  if (s == "variogram-ls") return FitMethod::variogram_ls;
  throw ValidationError("method must be cv or variogram-ls");
}

inline std::string to_string(FitMethod m) { return m == FitMethod::cv ? "cv" : "variogram-ls"; }

struct FitOptions {
  FitMethod method = FitMethod::cv;
  std::vector<Smoothness> nu_set{std::begin(all_smoothness), std::end(all_smoothness)};
  /// Smoothness held fixed by the least-squares fit.
  Smoothness ls_nu = Smoothness::three_halves;
  std::size_t ls_grid_size = 100;
  std::size_t bins = 15;
  /// Bins span (0, bin_fraction * max site separation].
  double bin_fraction = 0.5;
  bool weight_by_pairs = false;
  bool scale_coords = true;
  std::size_t threads = 1;
};

struct FitOutcome {
  io::Model model;
  io::Table report{{}};
  std::optional<CvReport> cv;
  std::optional<EmpiricalVariogram> variogram;
};

inline SiteSet make_sites(const io::Dataset& data, bool scale_coords) {
  return scale_coords ? SiteSet::with_min_max_scaling(data.location_matrix()) : SiteSet(data.location_matrix());
}

inline FitOutcome fit_dataset(const io::Dataset& data, const FitOptions& options) {
  if (data.size() < 2) throw ValidationError("fit needs at least two observations");
  const SiteSet sites = make_sites(data, options.scale_coords);
  const auto curves = std::span<const QuantileCurve>(data.curves);
  if (detail::all_rows_equal(detail::stack_rows(curves))) throw ValidationError("zero variance data");

  FitOutcome out;
  out.model.method = to_string(options.method);
  out.model.locations = data.location_matrix();
  out.model.scaling = sites.scaling();
  out.model.curves = data.curves;
  out.model.dataset_fingerprint = io::fingerprint(io::dataset_to_json(data));

  if (options.method == FitMethod::cv) {
    const auto grid = default_length_scale_grid(sites, options.ls_grid_size);
    CvReport cv = grid_search_cv(sites, curves, grid, options.nu_set, {options.threads, 1.0});
    out.model.params = cv.selected();

    io::Table table({"index", "length_scale", "nu", "mse_loo", "admissible", "diagnostic"});
    table.add_comment("virtual leave-one-out surface; selected index " + std::to_string(cv.best) +
                      ", sigma2_hat " + std::to_string(cv.sigma2_hat));
    for (std::size_t k = 0; k < cv.candidates.size(); ++k) {
      const auto& c = cv.candidates[k];
      table.add_row(k, c.length_scale, to_double(c.nu), c.mse_loo, c.admissible ? 1 : 0, c.diagnostic);
    }
    std::vector<io::json> skipped;
    for (const auto& c : cv.candidates)
      if (!c.admissible) skipped.push_back({{"length_scale", c.length_scale}, {"nu", to_double(c.nu)}, {"reason", c.diagnostic}});
    out.model.metadata = {{"selected_index", cv.best},
                          {"mse_loo", cv.candidates[cv.best].mse_loo},
                          {"sigma2_hat", cv.sigma2_hat},
                          {"candidates", cv.candidates.size()},
                          {"skipped", skipped}};
    out.report = std::move(table);
    out.cv = std::move(cv);
  } else {
    // Fewer than two bins can never give the two points the fit needs.
    if (options.bins < 2) throw ValidationError("fewer than 2 points");
    const double span = options.bin_fraction * sites.max_pairwise_distance();
    const BinSpec bins = BinSpec::uniform(options.bins, span);
    const EmpiricalVariogram emp = empirical_variogram(sites.points(), pairwise_squared_w2(curves), bins);
    const LeastSquaresFit fit = fit_least_squares(emp, options.ls_nu, {200, 0.01, 10.0, options.weight_by_pairs});
    out.model.params = fit.params;

    io::Table table({"h", "gamma", "pair_count"});
    table.add_comment("experimental semivariogram; fitted " + fit.params.describe());
    for (const auto& p : emp.points) table.add_row(p.h, p.gamma, p.pair_count);
    out.model.metadata = {{"bins", options.bins}, {"bin_max_distance", span}, {"objective", fit.objective},
                          {"weight_by_pairs", options.weight_by_pairs}};
    out.report = std::move(table);
    out.variogram = emp;
  }
  // Surface conditioning problems at fit time rather than at prediction time.
  (void)GammaMatrix(sites, out.model.params, GammaParts::bordered_only);
  return out;
}

// ---------------------------------------------------------------------------
// Prediction

inline std::string to_string(PredictionMode m) { return m == PredictionMode::sorted ? "sorted" : "constrained"; }

inline PredictionMode parse_mode(const std::string& s) {
  if (s == "sorted") return PredictionMode::sorted;
  if (s == "constrained") return PredictionMode::constrained;
  throw ValidationError("mode must be sorted or constrained");
}

/// Level used for the q95 summary: the grid node closest to 0.95.
inline double q95_level(const QuantileGrid& grid) { return grid.node(grid.nearest_node(0.95)); }

inline double q95(const QuantileCurve& c) { return c.values()[static_cast<Eigen::Index>(c.grid().nearest_node(0.95))]; }

struct Prediction {
  Eigen::VectorXd x;
  std::optional<QuantileCurve> curve;
  std::string error;
};

inline std::vector<Prediction> predict_targets(const io::Model& model, const std::vector<Eigen::VectorXd>& targets,
                                               PredictionMode mode) {
  std::vector<Prediction> out;
  if (targets.empty()) return out;
  const QuantileKriging kriging = model.kriging();
  for (const auto& x : targets) {
    Prediction p{x, std::nullopt, {}};
    try {
      p.curve = kriging.predict(x, mode);
    } catch (const NumericalError& e) {
      p.error = e.what();
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline io::json predictions_to_json(const std::vector<Prediction>& preds, const QuantileGrid& grid, PredictionMode mode) {
  io::json list = io::json::array();
  for (const auto& p : preds) {
    io::json rec = {{"x", io::detail::to_json_array(p.x)}};
    if (p.curve) {
      rec["quantiles"] = io::detail::to_json_array(p.curve->values());
      rec["mean"] = curve_mean(*p.curve);
      rec["q95"] = q95(*p.curve);
    } else {
      rec["error"] = p.error;
    }
    list.push_back(std::move(rec));
  }
  return {{"grid_size", grid.size()}, {"mode", to_string(mode)}, {"q95_level", q95_level(grid)}, {"predictions", std::move(list)}};
}

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  double rmse_mean = 0.0;
  double rmse_q95 = 0.0;
  double rmse_w = 0.0;
  std::size_t count = 0;
};

inline Metrics compute_metrics(std::span<const QuantileCurve> predicted, std::span<const QuantileCurve> truth) {
  if (predicted.size() != truth.size()) throw ValidationError("prediction and truth counts differ");
  if (truth.empty()) throw ValidationError("empty test set");
  double se_mean = 0.0, se_q95 = 0.0, se_w = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    detail::require_same_grid(predicted[i], truth[i]);
    const double dm = curve_mean(predicted[i]) - curve_mean(truth[i]);
    const double dq = q95(predicted[i]) - q95(truth[i]);
    const double w = wasserstein2(predicted[i], truth[i]);
    se_mean += dm * dm;
    se_q95 += dq * dq;
    se_w += w * w;
  }
  const auto n = static_cast<double>(truth.size());
  return {std::sqrt(se_mean / n), std::sqrt(se_q95 / n), std::sqrt(se_w / n), truth.size()};
}

inline Metrics evaluate_model(const io::Model& model, const io::Dataset& test, PredictionMode mode) {
  if (test.size() == 0) throw ValidationError("empty test set");
  if (test.grid != model.grid()) throw ValidationError("grid mismatch");
  if (test.dim != model.dim()) throw ValidationError("target dimension does not match model");
  const QuantileKriging kriging = model.kriging();
  std::vector<QuantileCurve> predicted;
  predicted.reserve(test.size());
  for (const auto& x : test.locations) predicted.push_back(kriging.predict(x, mode));
  return compute_metrics(predicted, test.curves);
}

// ---------------------------------------------------------------------------
// Repeated random train/test splits over the three model variants

struct ModelVariant {
  std::string name;
  FitMethod method;
  PredictionMode mode;
};

/// Variants compared in repeated-split evaluation.
inline std::vector<ModelVariant> standard_variants() {
  return {{"P_WK_LS", FitMethod::variogram_ls, PredictionMode::constrained},
          {"WK_LS", FitMethod::variogram_ls, PredictionMode::sorted},
          {"WK_CV", FitMethod::cv, PredictionMode::sorted}};
}

struct SplitOptions {
  double train_fraction = 0.8;
  std::size_t repeats = 100;
  std::uint64_t seed = 0;
  FitOptions fit;
};

struct SplitResult {
  std::size_t split = 0;
  std::string variant;
  std::optional<Metrics> metrics;
  std::string error;
};

/// Seeded shuffle of 0..n-1 split into (train, test).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> random_split(std::size_t n, double train_fraction,
                                                                                  std::mt19937_64& rng) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ValidationError("split fraction must lie in (0, 1)");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  if (n_train < 3 || n_train >= n) throw ValidationError("split leaves fewer than 3 training or no test observations");
  std::vector<std::size_t> train(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> test(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  return {train, test};
}

inline std::vector<SplitResult> evaluate_splits(const io::Dataset& data, const SplitOptions& options) {
  if (options.repeats == 0) throw ValidationError("repeats must be positive");
  std::mt19937_64 rng(options.seed);
  std::vector<SplitResult> out;
  for (std::size_t r = 0; r < options.repeats; ++r) {
    const auto [train_idx, test_idx] = random_split(data.size(), options.train_fraction, rng);
    const io::Dataset train = data.subset(train_idx);
    const io::Dataset test = data.subset(test_idx);
    for (const auto& variant : standard_variants()) {
      SplitResult res{r, variant.name, std::nullopt, {}};
      try {
        FitOptions fo = options.fit;
        fo.method = variant.method;
        const FitOutcome fit = fit_dataset(train, fo);
        res.metrics = evaluate_model(fit.model, test, variant.mode);
      } catch (const Error& e) {
        res.error = e.what();
      }
      out.push_back(std::move(res));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Naive versus virtual leave-one-out benchmark

struct BenchOptions {
  std::vector<std::size_t> sizes{50, 100, 200, 400};
  std::size_t ls_grid_size = 100;
  std::vector<Smoothness> nu_set{std::begin(all_smoothness), std::end(all_smoothness)};
  std::uint64_t seed = 0;
  std::size_t grid_size = QuantileGrid::default_size;
  bool scale_coords = true;
};

struct BenchPair {
  double length_scale;
  Smoothness nu;
  double mse_naive;
  double mse_virtual;
};

struct BenchRow {
  std::size_t n = 0;
  double t_naive = 0.0;
  double t_virtual = 0.0;
  double ratio = 0.0;
  double max_rel_diff = 0.0;
  std::size_t candidates = 0;
  std::size_t admissible = 0;
  std::vector<BenchPair> pairs;
};

/// Times the full candidate grid through both LOO routes for each size.
/// Candidates whose full system is ill-conditioned are rejected by the
/// virtual route and are not sent through the naive route.
inline std::vector<BenchRow> run_loo_bench(const io::Dataset* dataset, const BenchOptions& options) {
  if (options.sizes.empty()) throw ValidationError("no benchmark sizes given");
  const std::size_t largest = *std::max_element(options.sizes.begin(), options.sizes.end());
  if (*std::min_element(options.sizes.begin(), options.sizes.end()) < 3) throw ValidationError("benchmark sizes must be >= 3");
  io::Dataset generated;
  if (!dataset || dataset->size() < largest) {
    generated = make_toy_dataset(largest, options.seed, options.grid_size);
    dataset = &generated;
  }

  using clock = std::chrono::steady_clock;
  std::vector<BenchRow> rows;
  for (std::size_t n : options.sizes) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    const io::Dataset data = dataset->subset(idx);
    const SiteSet sites = make_sites(data, options.scale_coords);
    const auto curves = std::span<const QuantileCurve>(data.curves);
    const Eigen::MatrixXd q = detail::stack_rows(curves);
    const auto grid = default_length_scale_grid(sites, options.ls_grid_size);

    BenchRow row;
    row.n = n;
    std::vector<MaternParams> candidates;
    for (Smoothness nu : options.nu_set)
      for (double ell : grid) candidates.push_back({1.0, ell, nu, 0.0});
    row.candidates = candidates.size();

    std::vector<std::optional<double>> virtual_mse(candidates.size());
    const auto t0 = clock::now();
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      try {
        const GammaMatrix gm(sites, candidates[k]);
        virtual_mse[k] = detail::mean_l2_squared(detail::loo_residual_matrix(gamma_tilde(gm), q));
      } catch (const NumericalError&) {
      }
    }
    const auto t1 = clock::now();
    std::vector<std::optional<double>> naive_mse(candidates.size());
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      if (!virtual_mse[k]) continue;
      try {
        naive_mse[k] = loo_mse_naive(sites, curves, candidates[k]);
      } catch (const NumericalError&) {
      }
    }
    const auto t2 = clock::now();

    row.t_virtual = std::chrono::duration<double>(t1 - t0).count();
    row.t_naive = std::chrono::duration<double>(t2 - t1).count();
    row.ratio = row.t_virtual > 0.0 ? row.t_naive / row.t_virtual : std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      if (!virtual_mse[k] || !naive_mse[k]) continue;
      ++row.admissible;
      const double rel = std::abs(*virtual_mse[k] - *naive_mse[k]) / std::max(std::abs(*naive_mse[k]), std::numeric_limits<double>::min());
      row.max_rel_diff = std::max(row.max_rel_diff, rel);
      row.pairs.push_back({candidates[k].length_scale, candidates[k].nu, *naive_mse[k], *virtual_mse[k]});
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline io::Table bench_table(const std::vector<BenchRow>& rows) {
  io::Table t({"n", "t_naive", "t_virtual", "ratio", "max_rel_diff", "candidates", "admissible"});
  for (const auto& r : rows) t.add_row(r.n, r.t_naive, r.t_virtual, r.ratio, r.max_rel_diff, r.candidates, r.admissible);
  return t;
}

inline io::Table bench_pairs_table(const std::vector<BenchRow>& rows) {
  io::Table t({"n", "length_scale", "nu", "mse_naive", "mse_virtual"});
  for (const auto& r : rows)
    for (const auto& p : r.pairs) t.add_row(r.n, p.length_scale, to_double(p.nu), p.mse_naive, p.mse_virtual);
  return t;
}

}  // namespace wkrige::app
