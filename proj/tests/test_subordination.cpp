#include <gtest/gtest.h>

#include "freespike/subordination.hpp"

using namespace freespike;

namespace {

const AtomicMeasure& uniform_pair() {
  static const AtomicMeasure mu = discretize(DensitySpec::uniform(0.5, 1.5), 200);
  return mu;
}

}  // namespace

TEST(Subordination, PointMassPartner) {
  const AtomicMeasure a = uniform_pair();
  const AtomicMeasure b = AtomicMeasure::point_mass(1.0);
  for (Complex z : {Complex(1.2, 0.05), Complex(3.0, 0.5), Complex(0.2, 2.0)}) {
    const SubordinationValue v = solve(a, b, z);
    EXPECT_LT(std::abs(v.omega_b - z), 1e-10 * std::abs(z));
    EXPECT_LT(std::abs(v.omega_a - m_transform(a, z)), 1e-10 * std::abs(z));
  }
}

TEST(Subordination, ResidualConjugationAndArgument) {
  const AtomicMeasure& a = uniform_pair();
  for (double e : {0.3, 1.0, 1.8, 2.5}) {
    for (double eta : {1e-3, 0.1, 2.0}) {
      const Complex z(e, eta);
      const SubordinationValue v = solve(a, a, z);
      EXPECT_LE(system_residual(a, a, z, v.omega_a, v.omega_b), 1e-12 * (1.0 + std::norm(z)));
      const SubordinationValue c = solve(a, a, std::conj(z));
      EXPECT_LT(std::abs(c.omega_a - std::conj(v.omega_a)), 1e-9 * std::abs(v.omega_a));
      EXPECT_GE(std::arg(v.omega_a), std::arg(z) - 1e-12);
      EXPECT_GE(std::arg(v.omega_b), std::arg(z) - 1e-12);
    }
  }
}

TEST(Subordination, SymmetricPairHasEqualOmegas) {
  const AtomicMeasure& a = uniform_pair();
  const SubordinationValue v = solve(a, a, Complex(1.5, 0.02));
  EXPECT_LT(std::abs(v.omega_a - v.omega_b), 1e-10);
}

TEST(Subordination, DerivativeMatchesFiniteDifference) {
  const AtomicMeasure& a = uniform_pair();
  const AtomicMeasure b = discretize(DensitySpec::beta_like(0.5, 2.0, -0.5, 0.5), 150);
  const Complex z(2.6, 0.1);
  const double h = 1e-6;
  const auto [da, db] = omega_derivative(a, b, z);
  const Complex fa = (solve(a, b, z + h).omega_a - solve(a, b, z - h).omega_a) / (2.0 * h);
  const Complex fb = (solve(a, b, z + h).omega_b - solve(a, b, z - h).omega_b) / (2.0 * h);
  EXPECT_LT(std::abs(da - fa), 1e-6 * std::abs(da));
  EXPECT_LT(std::abs(db - fb), 1e-6 * std::abs(db));
}

TEST(Subordination, HandleSwapExchangesRoles) {
  const AtomicMeasure b = discretize(DensitySpec::uniform(0.2, 1.0), 100);
  const ConvolutionHandle h(uniform_pair(), b);
  const Complex z(1.3, 0.05);
  const SubordinationValue v = h.solve(z);
  const SubordinationValue w = h.swapped().solve(z);
  EXPECT_LT(std::abs(v.omega_a - w.omega_b), 1e-9);
  EXPECT_LT(std::abs(m_of_convolution(h, z).m - m_of_convolution(h.swapped(), z).m), 1e-9);
}

TEST(Subordination, StieltjesOfConvolutionAtInfinity) {
  const ConvolutionHandle h(uniform_pair(), uniform_pair());
  const Complex z(0.0, 1e4);
  EXPECT_LT(std::abs(m_of_convolution(h, z).m * z + 1.0), 1e-3);
}

TEST(Subordination, DensityOfPointMassConvolutionIsTheDilation) {
  const AtomicMeasure a = discretize(DensitySpec::uniform(0.5, 1.5), 400);
  const AtomicMeasure b = AtomicMeasure::point_mass(1.0);
  std::vector<double> grid;
  for (int k = 0; k <= 4000; ++k) grid.push_back(0.3 + 1.4 * k / 4000.0);
  const GridDensity d = density_on_grid(a, b, grid, 1e-3);
  EXPECT_NEAR(d.integral(), 1.0, 5e-3);
  EXPECT_NEAR(d.mean(), 1.0, 5e-3);
}

TEST(Subordination, RejectsBadOptions) {
  SolverOptions o;
  o.tolerance = 0.0;
  EXPECT_THROW(solve(uniform_pair(), uniform_pair(), Complex(1.0, 1.0), o), ConfigError);
  std::vector<double> grid{1.0, 0.5};
  EXPECT_THROW(density_on_grid(uniform_pair(), uniform_pair(), grid), ConfigError);
}
