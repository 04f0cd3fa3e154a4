#include <gtest/gtest.h>

#include <random>

#include "freespike/measure.hpp"

using namespace freespike;

namespace {

AtomicMeasure two_point() { return AtomicMeasure({0.5, 1.5}, {0.5, 0.5}); }

}  // namespace

TEST(AtomicMeasure, CanonicalizesAndMergesAtoms) {
  AtomicMeasure mu({2.0, 1.0, 1.0 + 1e-14}, {0.25, 0.5, 0.25});
  ASSERT_EQ(mu.size(), 2u);
  EXPECT_DOUBLE_EQ(mu.atoms()[0], 1.0);
  EXPECT_DOUBLE_EQ(mu.weights()[0], 0.75);
  EXPECT_DOUBLE_EQ(mu.max_atom(), 2.0);
  EXPECT_DOUBLE_EQ(mu.cdf(1.5), 0.75);
  EXPECT_DOUBLE_EQ(mu.cdf_left(1.0), 0.0);
}

TEST(AtomicMeasure, RejectsInvalidInput) {
  EXPECT_THROW(AtomicMeasure({1.0, 2.0}, {0.5, 0.4}), ConfigError);
  EXPECT_THROW(AtomicMeasure({-1.0}, {1.0}), ConfigError);
  EXPECT_THROW(AtomicMeasure({1.0}, {0.0}), ConfigError);
  EXPECT_THROW(AtomicMeasure({}, {}), ConfigError);
}

TEST(Transforms, TwoPointOracle) {
  const AtomicMeasure mu = two_point();
  const Complex m = stieltjes(mu, Complex(-1.0, 0.0));
  EXPECT_NEAR(m.real(), 8.0 / 15.0, 1e-15);
  EXPECT_NEAR(m.imag(), 0.0, 1e-15);
  const Complex M = m_transform(mu, Complex(-1.0, 0.0));
  EXPECT_NEAR(M.real(), -8.0 / 7.0, 1e-14);
  EXPECT_NEAR(m_transform_integral(mu, Complex(-1.0, 0.0)).real(), -8.0 / 7.0, 1e-14);
  EXPECT_NEAR(l_transform(mu, Complex(-1.0, 0.0)).real(), 8.0 / 7.0, 1e-14);
}

TEST(Transforms, PointMassIsIdentityForM) {
  const AtomicMeasure delta = AtomicMeasure::point_mass(1.0);
  for (Complex w : {Complex(0.3, 0.2), Complex(2.0, 1e-3), Complex(-1.0, 4.0)}) {
    EXPECT_LT(std::abs(m_transform(delta, w) - w), 1e-14);
  }
}

TEST(Transforms, RationalAndIntegralFormsAgree) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> atom(0.1, 3.0), re(-3.0, 5.0), im(0.01, 3.0);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> x(30);
    for (double& v : x) v = atom(rng);
    const AtomicMeasure mu = AtomicMeasure::empirical(x);
    for (int k = 0; k < 40; ++k) {
      const Complex z(re(rng), im(rng));
      const Complex a = m_transform(mu, z);
      const Complex b = m_transform_integral(mu, z);
      EXPECT_LE(std::abs(a - b), 1e-12 * std::max(1.0, std::abs(a)));
    }
  }
}

TEST(Transforms, DerivativeMatchesFiniteDifference) {
  const AtomicMeasure mu({0.7, 1.1, 2.0}, {0.2, 0.5, 0.3});
  const Complex z(0.4, 0.9);
  const double h = 1e-6;
  const Complex fd = (m_transform(mu, z + h) - m_transform(mu, z - h)) / (2.0 * h);
  EXPECT_LT(std::abs(fd - m_transform_derivative(mu, z)), 1e-8);
}

TEST(Transforms, EvaluationOnAnAtomIsADomainError) {
  EXPECT_THROW(stieltjes(two_point(), Complex(0.5, 0.0)), DomainError);
}

TEST(DensitySpec, UniformDiscretizesToMidpointQuantiles) {
  const AtomicMeasure mu = discretize(DensitySpec::uniform(0.5, 1.5), 2);
  ASSERT_EQ(mu.size(), 2u);
  EXPECT_NEAR(mu.atoms()[0], 0.75, 1e-15);
  EXPECT_NEAR(mu.atoms()[1], 1.25, 1e-15);
}

TEST(DensitySpec, NormalizationRescalesToUnitMean) {
  const DensitySpec s = DensitySpec::uniform(1.0, 3.0);
  EXPECT_NEAR(s.mean(), 1.0, 1e-12);
  const DensitySpec raw = DensitySpec::uniform(1.0, 3.0, false);
  EXPECT_NEAR(raw.mean(), 2.0, 1e-12);
  const DensitySpec b = DensitySpec::beta_like(0.5, 2.0, 0.5, 0.5);
  EXPECT_NEAR(b.mean(), 1.0, 1e-9);
  EXPECT_NEAR(b.cdf(b.quantile(0.3)), 0.3, 1e-9);
}

TEST(DensitySpec, TableIsNormalizedAndMonotone) {
  const DensitySpec t = DensitySpec::table({0.5, 1.0, 1.5}, {0.0, 2.0, 0.0});
  EXPECT_NEAR(t.mean(), 1.0, 1e-12);
  EXPECT_NEAR(t.cdf(1e9), 1.0, 1e-12);
  EXPECT_LE(t.cdf(0.9), t.cdf(1.1));
}

TEST(DensitySpec, RejectsBadIntervals) {
  EXPECT_THROW(DensitySpec::uniform(1.5, 0.5), ConfigError);
  EXPECT_THROW(DensitySpec::uniform(-1.0, 0.5), ConfigError);
}

TEST(Levy, ShiftedPointMasses) {
  EXPECT_NEAR(levy_distance(AtomicMeasure::point_mass(1.0), AtomicMeasure::point_mass(1.1)), 0.1, 1e-12);
  EXPECT_NEAR(levy_distance(two_point(), two_point()), 0.0, 1e-12);
}

TEST(Levy, DiscretizationConverges) {
  const DensitySpec u = DensitySpec::uniform(0.5, 1.5);
  const double d100 = levy_distance(discretize(u, 100), u);
  const double d1000 = levy_distance(discretize(u, 1000), u);
  EXPECT_LT(d1000, d100);
  EXPECT_LE(d1000, 1e-3);
}

TEST(Quantiles, TwoPointsOfUniform) {
  GridDensity d;
  for (int k = 0; k <= 100; ++k) {
    d.grid.push_back(0.5 + k / 100.0);
    d.values.push_back(1.0);
  }
  const QuantileResult q = quantile_locations(d, 2);
  ASSERT_EQ(q.gamma.size(), 2u);
  EXPECT_NEAR(q.gamma[0], 1.0, 1e-12);
  EXPECT_NEAR(q.gamma[1], 0.5, 1e-12);
}

TEST(Quantiles, RejectsUnnormalizedDensity) {
  GridDensity d{{0.0, 1.0}, {0.5, 0.5}, 0.0, {}};
  EXPECT_THROW(quantile_locations(d, 4), DomainError);
}
