#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "wkrige/crossval.hpp"

using namespace wkrige;

namespace {

Eigen::MatrixXd random_points(std::mt19937_64& rng, Eigen::Index n, Eigen::Index d) {
  std::uniform_real_distribution<double> u(0, 1);
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < d; ++k) x(i, k) = u(rng);
  return x;
}

MaternParams random_params(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ell(0.05, 0.6), s2(0.2, 5.0);
  std::uniform_int_distribution<int> nu(0, 2);
  return {s2(rng), ell(rng), all_smoothness[nu(rng)], 0.0};
}

std::vector<QuantileCurve> random_gaussian_curves(std::mt19937_64& rng, std::size_t n, QuantileGrid grid) {
  std::uniform_real_distribution<double> m(0, 1), v(0.05, 2);
  std::vector<QuantileCurve> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(gaussian_quantile_curve(m(rng), v(rng), grid));
  return out;
}

SiteSet line(std::initializer_list<double> xs) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(xs.size()), 1);
  Eigen::Index i = 0;
  for (double v : xs) x(i++, 0) = v;
  return SiteSet(x);
}

}  // namespace

TEST(GammaTilde, TwoSitesHandAlgebra) {
  const MaternParams p{1.7, 0.4, Smoothness::three_halves, 0.0};
  const SiteSet sites = line({0.0, 0.5});
  const double g = matern(0.5, p);
  const GammaTilde gt = gamma_tilde(GammaMatrix(sites, p));
  Eigen::Matrix2d expected;
  expected << -1, 1, 1, -1;
  expected /= 2.0 * g;
  EXPECT_LE((gt.matrix() - expected).cwiseAbs().maxCoeff(), 1e-12 * expected.cwiseAbs().maxCoeff());
  EXPECT_NEAR(gt.loo_variances()[0], 2.0 * g, 1e-12);
}

TEST(GammaTilde, InvariantsAndDualPath) {
  std::mt19937_64 rng(131);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index n = 3 + trial % 20;
    const SiteSet sites(random_points(rng, n, 2));
    const MaternParams p = random_params(rng);
    const GammaMatrix gm(sites, p);
    const GammaTilde gt = gamma_tilde(gm);
    const Eigen::MatrixXd m = gt.matrix();
    const double scale = m.cwiseAbs().maxCoeff();
    EXPECT_LE((m * Eigen::VectorXd::Ones(n)).cwiseAbs().maxCoeff(), 1e-10 * std::max(1.0, scale));
    EXPECT_LE((m - m.transpose()).cwiseAbs().maxCoeff(), 1e-10 * std::max(1.0, scale));
    EXPECT_TRUE((m.diagonal().array() < 0.0).all());

    // Definitional formula with an independent inversion routine.
    const Eigen::MatrixXd inv = gm.gamma().fullPivLu().inverse();
    const Eigen::VectorXd u = inv * Eigen::VectorXd::Ones(n);
    const Eigen::MatrixXd direct = inv - u * u.transpose() / u.sum();
    EXPECT_LE((direct - m).cwiseAbs().maxCoeff(), 1e-10 * std::max(1.0, scale));
  }
}

TEST(GammaTilde, SixSitesDualPathAbsolute) {
  std::mt19937_64 rng(137);
  const SiteSet sites(random_points(rng, 6, 2));
  const MaternParams p{1.0, 0.3, Smoothness::half, 0.0};
  const GammaMatrix gm(sites, p);
  const Eigen::MatrixXd inv = gm.gamma().fullPivLu().inverse();
  const Eigen::VectorXd u = inv.rowwise().sum();
  const Eigen::MatrixXd direct = inv - u * u.transpose() / u.sum();
  EXPECT_LE((direct - gamma_tilde(gm).matrix()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(GammaTilde, VarianceDoubleSumIdentity) {
  std::mt19937_64 rng(139);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index n = 3 + trial % 15;
    const SiteSet sites(random_points(rng, n, 2));
    const MaternParams p = random_params(rng).with_sigma2(1.0);
    const GammaMatrix gm(sites, p);
    const Eigen::MatrixXd t = gamma_tilde(gm).matrix();
    const Eigen::MatrixXd& G = gm.gamma();
    for (Eigen::Index i = 0; i < n; ++i) {
      double sum = 0.0;
      for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index k = 0; k < n; ++k) sum += t(i, j) * t(i, k) / (t(i, i) * t(i, i)) * G(j, k);
      EXPECT_NEAR(-1.0 / t(i, i), -sum, 1e-10);
    }
  }
}

TEST(LooResiduals, TwoSites) {
  const QuantileGrid grid(10);
  const std::vector<QuantileCurve> c{gaussian_quantile_curve(0.1, 0.5, grid), gaussian_quantile_curve(0.9, 1.5, grid)};
  const SiteSet sites = line({0.0, 0.7});
  const MaternParams p{1.0, 0.5, Smoothness::half, 0.0};
  const auto r = loo_residuals_virtual(gamma_tilde(GammaMatrix(sites, p)), c);
  EXPECT_LE((r[0].values() - (c[0].values() - c[1].values())).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((r[1].values() - (c[1].values() - c[0].values())).cwiseAbs().maxCoeff(), 1e-12);

  const double expected = 0.5 * (std::pow(wasserstein2(c[0], c[1]), 2) * 2.0);
  EXPECT_NEAR(loo_mse_naive(sites, c, p), expected, 1e-12);
  EXPECT_NEAR(loo_mse_virtual(gamma_tilde(GammaMatrix(sites, p)), c), expected, 1e-12);
}

TEST(LooResiduals, DiracPairMse) {
  const QuantileGrid grid(5);
  const std::vector<QuantileCurve> c{QuantileCurve::dirac(grid, 0.0), QuantileCurve::dirac(grid, 3.0)};
  const SiteSet sites = line({0.0, 1.0});
  const MaternParams p{2.0, 0.5, Smoothness::five_halves, 0.0};
  EXPECT_NEAR(loo_mse_virtual(gamma_tilde(GammaMatrix(sites, p)), c), 9.0, 1e-12);
  EXPECT_NEAR(loo_mse_naive(sites, c, p), 9.0, 1e-12);
}

TEST(LooResiduals, IdenticalCurvesGiveZero) {
  std::mt19937_64 rng(149);
  const SiteSet sites(random_points(rng, 9, 2));
  const std::vector<QuantileCurve> c(9, gaussian_quantile_curve(0.3, 0.2, QuantileGrid(20)));
  const MaternParams p{1.0, 0.3, Smoothness::three_halves, 0.0};
  const auto gt = gamma_tilde(GammaMatrix(sites, p));
  for (const auto& r : loo_residuals_virtual(gt, c)) EXPECT_LE(r.values().cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE(loo_mse_naive(sites, c, p), 1e-20);
}

TEST(LooResiduals, VirtualMatchesNaiveResiduals) {
  std::mt19937_64 rng(151);
  const QuantileGrid grid(30);
  for (int trial = 0; trial < 10; ++trial) {
    const SiteSet sites(random_points(rng, 5, 2));
    const auto curves = random_gaussian_curves(rng, 5, grid);
    const MaternParams p = random_params(rng);
    const auto v = loo_residuals_virtual(gamma_tilde(GammaMatrix(sites, p)), curves);
    const auto nv = loo_residuals_naive(sites, curves, p);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_LE((v[i].values() - nv[i].values()).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(LooMse, VirtualMatchesNaiveOnRandomConfigurations) {
  std::mt19937_64 rng(157);
  std::uniform_int_distribution<Eigen::Index> size(5, 30);
  const QuantileGrid grid(50);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index n = size(rng);
    const SiteSet sites(random_points(rng, n, 2));
    const auto curves = random_gaussian_curves(rng, static_cast<std::size_t>(n), grid);
    const MaternParams p = random_params(rng);
    const double v = loo_mse_virtual(gamma_tilde(GammaMatrix(sites, p)), curves);
    const double nv = loo_mse_naive(sites, curves, p);
    EXPECT_LE(std::abs(v - nv), 1e-8 * (1.0 + nv));
    EXPECT_LE(std::abs(v - nv), 1e-8 * nv);
  }
}

TEST(LooMse, DimensionMismatch) {
  std::mt19937_64 rng(163);
  const SiteSet sites(random_points(rng, 4, 2));
  const auto gt = gamma_tilde(GammaMatrix(sites, {}));
  EXPECT_THROW((void)loo_mse_virtual(gt, random_gaussian_curves(rng, 3, QuantileGrid(5))), ValidationError);
}

TEST(EstimateScale, TwoDiracs) {
  const QuantileGrid grid(7);
  const double d = 1.3;
  const std::vector<QuantileCurve> c{QuantileCurve::dirac(grid, 0.0), QuantileCurve::dirac(grid, d)};
  const SiteSet sites = line({0.0, 0.45});
  const MaternParams p{1.0, 0.25, Smoothness::half, 0.0};
  const double g = matern(0.45, p);
  EXPECT_NEAR(estimate_scale(gamma_tilde(GammaMatrix(sites, p)), c), d * d / (2.0 * g), 1e-12);

  // Residual norms equal to the LOO variances give the fixed point 1.
  const double d_unit = std::sqrt(2.0 * g);
  const std::vector<QuantileCurve> unit{QuantileCurve::dirac(grid, 0.0), QuantileCurve::dirac(grid, d_unit)};
  EXPECT_NEAR(estimate_scale(gamma_tilde(GammaMatrix(sites, p)), unit), 1.0, 1e-12);
  // Independent of the sill the matrix was built with.
  EXPECT_NEAR(estimate_scale(gamma_tilde(GammaMatrix(sites, p.with_sigma2(9.0))), unit), 1.0, 1e-12);
}

TEST(GridSearchCv, SingleCandidateAndTieRule) {
  std::mt19937_64 rng(167);
  const SiteSet sites(random_points(rng, 10, 2));
  const auto curves = random_gaussian_curves(rng, 10, QuantileGrid(20));
  const std::vector<double> one{0.3};
  const std::vector<Smoothness> nu{Smoothness::half};
  const auto r1 = grid_search_cv(sites, curves, one, nu);
  EXPECT_EQ(r1.best, 0u);
  EXPECT_EQ(r1.selected().length_scale, 0.3);
  EXPECT_GT(r1.sigma2_hat, 0.0);
  EXPECT_EQ(r1.residual_norms.size(), 10u);

  const std::vector<double> twice{0.3, 0.3};
  const auto r2 = grid_search_cv(sites, curves, twice, nu);
  EXPECT_EQ(r2.candidates[0].mse_loo, r2.candidates[1].mse_loo);
  EXPECT_EQ(r2.best, 0u);
}

TEST(GridSearchCv, SelectsArgminAndIsSillInvariant) {
  std::mt19937_64 rng(173);
  const SiteSet sites(random_points(rng, 25, 2));
  const auto curves = random_gaussian_curves(rng, 25, QuantileGrid(40));
  const auto grid = default_length_scale_grid(sites, 30);
  const std::vector<Smoothness> nus{Smoothness::five_halves, Smoothness::half, Smoothness::three_halves};
  const auto base = grid_search_cv(sites, curves, grid, nus);
  ASSERT_EQ(base.candidates.size(), 90u);
  EXPECT_EQ(base.candidates[0].nu, Smoothness::half);
  EXPECT_EQ(base.candidates[89].nu, Smoothness::five_halves);
  for (const auto& c : base.candidates)
    if (c.admissible) {
      EXPECT_GE(c.mse_loo, base.candidates[base.best].mse_loo);
    }

  for (double c : {1e-3, 7.0, 250.0}) {
    const auto scaled = grid_search_cv(sites, curves, grid, nus, {1, c});
    EXPECT_EQ(scaled.best, base.best);
    EXPECT_EQ(scaled.sigma2_hat, base.sigma2_hat);
    for (std::size_t k = 0; k < base.candidates.size(); ++k) {
      ASSERT_EQ(scaled.candidates[k].admissible, base.candidates[k].admissible);
      if (base.candidates[k].admissible) {
        EXPECT_NEAR(scaled.candidates[k].mse_loo, base.candidates[k].mse_loo, 1e-10 * base.candidates[k].mse_loo);
      }
    }
  }

  const auto threaded = grid_search_cv(sites, curves, grid, nus, {4, 1.0});
  EXPECT_EQ(threaded.best, base.best);
  EXPECT_EQ(threaded.sigma2_hat, base.sigma2_hat);
  for (std::size_t k = 0; k < base.candidates.size(); ++k)
    EXPECT_EQ(threaded.candidates[k].mse_loo == base.candidates[k].mse_loo || !base.candidates[k].admissible, true);
}

TEST(GridSearchCv, SkipsIllConditionedCandidates) {
  std::mt19937_64 rng(179);
  const SiteSet sites(random_points(rng, 40, 1));
  const auto curves = random_gaussian_curves(rng, 40, QuantileGrid(10));
  const std::vector<double> grid{0.05, 100.0};
  const std::vector<Smoothness> nu{Smoothness::five_halves};
  const auto r = grid_search_cv(sites, curves, grid, nu);
  EXPECT_TRUE(r.candidates[0].admissible);
  EXPECT_FALSE(r.candidates[1].admissible);
  EXPECT_FALSE(r.candidates[1].diagnostic.empty());
  EXPECT_EQ(r.best, 0u);

  const std::vector<double> bad{100.0, 200.0};
  try {
    (void)grid_search_cv(sites, curves, bad, nu);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_STREQ(e.what(), "no admissible candidate");
  }
}

TEST(GridSearchCv, ZeroVarianceData) {
  std::mt19937_64 rng(181);
  const SiteSet sites(random_points(rng, 5, 2));
  const std::vector<QuantileCurve> same(5, QuantileCurve::dirac(QuantileGrid(4), 1.0));
  const std::vector<double> grid{0.3};
  const std::vector<Smoothness> nu{Smoothness::half};
  try {
    (void)grid_search_cv(sites, same, grid, nu);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_STREQ(e.what(), "zero variance data");
  }
}
