#include <gtest/gtest.h>

#include "freespike/edge.hpp"

using namespace freespike;

namespace {

const AtomicMeasure& uniform1000() {
  static const AtomicMeasure mu = discretize(DensitySpec::uniform(0.5, 1.5), 1000);
  return mu;
}

const EdgeData& uniform_edge() {
  static const EdgeData e = locate_upper_edge(uniform1000(), uniform1000());
  return e;
}

}  // namespace

TEST(Edge, UniformPairFrozenValue) {
  const EdgeData& e = uniform_edge();
  EXPECT_NEAR(e.E_plus, 1.88907897866647, 1e-9);
  EXPECT_FALSE(e.degenerate);
  EXPECT_TRUE(e.cross_validated);
  EXPECT_NEAR(e.omega_a_edge, e.omega_b_edge, 1e-9);
  EXPECT_GT(e.omega_b_edge, uniform1000().max_atom());
  EXPECT_LT(e.im_m_outside, 1e-4);
  EXPECT_GT(e.im_m_inside, e.im_m_outside);
}

TEST(Edge, PointMassPartnerGivesLargestAtom) {
  const AtomicMeasure b = AtomicMeasure::point_mass(1.0);
  const EdgeData e = locate_upper_edge(uniform1000(), b);
  EXPECT_NEAR(e.E_plus, uniform1000().max_atom(), 1e-12);
  EXPECT_NEAR(e.omega_b_edge, uniform1000().max_atom(), 1e-12);
  EXPECT_TRUE(e.degenerate);
  EXPECT_DOUBLE_EQ(inverse_omega_B(e, uniform1000(), b, 2.3), 2.3);
}

TEST(Edge, InverseRoundTrip) {
  const AtomicMeasure& a = uniform1000();
  const EdgeData& e = uniform_edge();
  for (double a_hat : {e.omega_b_edge + 0.05, e.omega_b_edge + 0.5, 3.0}) {
    const double x = inverse_omega_B(e, a, a, a_hat);
    EXPECT_GT(x, e.E_plus);
    const SubordinationValue v = subordination_at_inverse_B(e, a, a, a_hat);
    EXPECT_LE(system_residual(a, a, v.z, v.omega_a, v.omega_b), 1e-10);
    const SubordinationValue w = solve(a, a, Complex(x, 1e-12));
    EXPECT_NEAR(w.omega_b.real(), a_hat, 1e-8);
  }
}

TEST(Edge, BelowThresholdMapsToEdge) {
  const EdgeData& e = uniform_edge();
  EXPECT_DOUBLE_EQ(inverse_omega_B(e, uniform1000(), uniform1000(), e.omega_b_edge - 0.1), e.E_plus);
  EXPECT_THROW(inverse_omega_B_derivative(e, uniform1000(), uniform1000(), e.omega_b_edge - 0.1), DomainError);
}

TEST(Edge, InverseDerivativeMatchesFiniteDifference) {
  const AtomicMeasure& a = uniform1000();
  const EdgeData& e = uniform_edge();
  const double v = e.omega_b_edge + 0.4, h = 1e-6;
  const double fd = (inverse_omega_B(e, a, a, v + h) - inverse_omega_B(e, a, a, v - h)) / (2.0 * h);
  EXPECT_NEAR(inverse_omega_B_derivative(e, a, a, v), fd, 1e-6 * std::abs(fd));
}

TEST(Edge, AsymmetricPairUsesBothSides) {
  const AtomicMeasure a = discretize(DensitySpec::uniform(0.5, 1.5), 300);
  const AtomicMeasure b = discretize(DensitySpec::beta_like(0.2, 2.0, 0.5, 0.5), 300);
  const EdgeData e = locate_upper_edge(a, b);
  const EdgeData f = locate_upper_edge(b, a);
  EXPECT_NEAR(e.E_plus, f.E_plus, 1e-9 * e.E_plus);
  EXPECT_NEAR(e.omega_a_edge, f.omega_b_edge, 1e-7);
  EXPECT_GT(e.omega_b_edge, a.max_atom());
  EXPECT_GT(e.omega_a_edge, b.max_atom());
}
