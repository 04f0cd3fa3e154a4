#include <gtest/gtest.h>

#include "freespike/rmt.hpp"
#include "freespike/spike.hpp"

using namespace freespike;

namespace {

std::vector<double> uniform_base(std::size_t n) { return base_diagonal(DensitySpec::uniform(0.5, 1.5), n); }

}  // namespace

TEST(Seeds, DeterministicAndTagged) {
  EXPECT_EQ(derive_seed(1, 2, "haar"), derive_seed(1, 2, "haar"));
  EXPECT_NE(derive_seed(1, 2, "haar"), derive_seed(1, 3, "haar"));
  EXPECT_NE(derive_seed(1, 2, "haar"), derive_seed(1, 2, "other"));
  EXPECT_NE(derive_seed(1, 2, "haar"), derive_seed(2, 2, "haar"));
}

TEST(Haar, OrthogonalAndUnitary) {
  const auto real = sample_haar<double>(60, 5);
  EXPECT_LE(unitarity_defect(real.U), 1e-12);
  const auto cplx = sample_haar<Complex>(60, 5);
  EXPECT_LE(unitarity_defect(cplx.U), 1e-12);
  EXPECT_EQ(cplx.field, Field::complex_unitary);
  EXPECT_THROW(sample_haar<double>(1, 5), ConfigError);
}

TEST(Haar, SameSeedSameMatrix) {
  EXPECT_EQ(sample_haar<double>(30, 9).U, sample_haar<double>(30, 9).U);
  EXPECT_NE(sample_haar<double>(30, 9).U, sample_haar<double>(30, 10).U);
}

TEST(Haar, FirstEntryHasHaarSecondMoment) {
  // E|U_11|^2 = 1/n for a Haar matrix
  const std::size_t n = 8;
  double s = 0.0;
  const int reps = 4000;
  for (int k = 0; k < reps; ++k) s += abs2(sample_haar<double>(n, 1000 + k).U(0, 0));
  EXPECT_NEAR(s / reps, 1.0 / n, 0.01);
}

TEST(Spectra, ConjugationInvariance) {
  const std::size_t n = 50;
  Matrix<double> m = Matrix<double>::Random(n, n);
  m = hermitian_part<double>(m);
  const auto u = sample_haar<double>(n, 3).U;
  const auto a = spectral_decomposition<double>(m, 0, false, false);
  const auto b = spectral_decomposition<double>(hermitian_part<double>(u * m * u.adjoint()), 0, false, false);
  EXPECT_LE((a.values - b.values).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Spectra, TopKMatchesFullAndIsComplete) {
  const std::size_t n = 80;
  const auto u = sample_haar<Complex>(n, 4);
  const auto q = gram(data_matrix<Complex>(uniform_base(n), u.U, uniform_base(n)));
  const auto full = spectral_decomposition(q);
  const auto top = spectral_decomposition(q, 7);
  ASSERT_EQ(top.count(), 7u);
  for (int k = 0; k < 7; ++k) EXPECT_NEAR(top.values(k), full.values(k), 1e-11);
  EXPECT_LE(full.residuals.maxCoeff(), 1e-9 * full.matrix_norm);
  // sum_k |<e_3, u_k>|^2 = 1
  double s = 0.0;
  for (std::size_t k = 1; k <= n; ++k) s += coordinate_overlap(full, k, 3);
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Model, IdentityPartnerGivesDiagonalGram) {
  const std::size_t n = 40;
  SpikeModel m(uniform_base(n), std::vector<double>(n, 1.0), {0.5}, {});
  const auto mats = build_model(m, sample_haar<double>(n, 2));
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(mats.Q1_hat(i, i), m.a_hat()[i], 1e-12);
  EXPECT_LE((mats.Q1_hat - Matrix<double>(mats.Q1_hat.diagonal().asDiagonal())).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LocalLaw, IdentityPairDiagonalIsExact) {
  const std::size_t n = 30;
  const std::vector<double> one(n, 1.0);
  const auto y = data_matrix<double>(one, sample_haar<double>(n, 8).U, one);
  const auto sys = singular_system(y, spectral_decomposition(gram(y)));
  const AtomicMeasure delta = AtomicMeasure::point_mass(1.0);
  const SubordinationValue sub = solve(delta, delta, Complex(1.5, 0.01));
  const ResolventDiagnostics d = local_law_residual<double>(one, one, sys, sub, 1.0);
  // diagonal blocks equal Theta; the off-diagonal blocks are U / (sqrt(z) (1 - z))
  const Complex z = sub.z;
  const double off = y.cwiseAbs().maxCoeff() / std::abs(std::sqrt(z) * (1.0 - z));
  EXPECT_NEAR(d.sup_entry_error, off, 1e-10);
  EXPECT_LE(d.averaged_error, 1e-10);
  EXPECT_EQ(d.domain, LocalLawDomain::outside);
}

TEST(LocalLaw, BlocksMatchDirectInverse) {
  const std::size_t n = 40;
  const std::vector<double> a = uniform_base(n);
  const auto y = data_matrix<double>(a, sample_haar<double>(n, 21).U, a);
  const auto sys = singular_system(y, spectral_decomposition(gram(y)));
  const AtomicMeasure mu = AtomicMeasure::empirical(a);
  const EdgeData e = locate_upper_edge(mu, mu);
  const SubordinationValue sub = solve(mu, mu, Complex(e.E_plus + 0.5, 0.01));
  const Complex z = sub.z;
  const Eigen::MatrixXcd yc = y.cast<Complex>();
  const Eigen::MatrixXcd id = Eigen::MatrixXcd::Identity(n, n);
  const Eigen::MatrixXcd g11 = (yc * yc.adjoint() - z * id).inverse();
  const Eigen::MatrixXcd g22 = (yc.adjoint() * yc - z * id).inverse();
  const Eigen::MatrixXcd g12 = g11 * yc / std::sqrt(z);
  const Eigen::MatrixXcd g21 = yc.adjoint() * g11 / std::sqrt(z);
  const Eigen::VectorXcd theta = theta_matrix(a, a, sub);
  Eigen::MatrixXcd d11 = g11, d22 = g22;
  for (std::size_t i = 0; i < n; ++i) {
    d11(i, i) -= theta(i);
    d22(i, i) -= theta(n + i);
  }
  const double direct = std::max({d11.cwiseAbs().maxCoeff(), d22.cwiseAbs().maxCoeff(),
                                  g12.cwiseAbs().maxCoeff(), g21.cwiseAbs().maxCoeff()});
  const ResolventDiagnostics r = local_law_residual<double>(a, a, sys, sub, e.E_plus);
  EXPECT_NEAR(r.sup_entry_error, direct, 1e-10);
  const Complex m_direct = g11.trace() / static_cast<double>(n);
  EXPECT_NEAR(r.averaged_error, std::abs(m_direct - transforms_from(mu, sub).m), 1e-10);
}

TEST(LocalLaw, DomainClassification) {
  EXPECT_EQ(classify_domain(Complex(2.5, 0.01), 2.0, 1000), LocalLawDomain::outside);
  EXPECT_EQ(classify_domain(Complex(1.95, 0.05), 2.0, 1000), LocalLawDomain::bulk_edge);
  EXPECT_THROW(classify_domain(Complex(1.0, 1e-6), 2.0, 1000), DomainError);
}

TEST(Estimator, IdentityPartnerRecoversLargestAtom) {
  const std::size_t n = 300;
  const std::vector<double> a = uniform_base(n);
  const std::vector<double> one(n, 1.0);
  const auto q = gram(data_matrix<double>(a, sample_haar<double>(n, 6).U, one));
  const Complex est = estimate_omega_beta_edge(spectral_decomposition(q), a, 0.1);
  EXPECT_LE(std::abs(est.real() - a[0]), 5.0 * std::pow(300.0, -1.0 / 3.0));
  EXPECT_THROW(estimate_omega_beta_edge(spectral_decomposition(q), a, 0.5), DomainError);
}

TEST(Reports, RigidityOfExactQuantilesIsZero) {
  const std::vector<double> eig{3.0, 2.0, 1.5, 1.0, 0.5, 0.2};
  const RigidityReport r = rigidity_report(eig, eig, 6);
  for (double d : r.deviation) EXPECT_EQ(d, 0.0);
}

TEST(Reports, DelocalizationFlagsDegenerateBasis) {
  const std::size_t n = 30;
  Matrix<double> id = Matrix<double>::Identity(n, n);
  const DelocalizationReport d = delocalization_report(spectral_decomposition(id));
  EXPECT_TRUE(d.degenerate);
  EXPECT_LE(d.max_norm_defect, 1e-10);
}

TEST(Reports, InterlacingOfRankOnePerturbation) {
  const std::size_t n = 60;
  SpikeModel m(uniform_base(n), uniform_base(n), {1.0}, {});
  const auto mats = build_model(m, sample_haar<double>(n, 12));
  const auto s = spectral_decomposition(mats.Q1_hat, 0, false, false);
  const auto u = spectral_decomposition(mats.Q1, 0, false, false);
  const std::span<const double> sv(s.values.data(), n), uv(u.values.data(), n);
  EXPECT_EQ(interlacing_violations(sv, uv, 1, 1e-9 * s.matrix_norm), 0u);
  std::vector<double> broken(sv.begin(), sv.end());
  broken[5] = uv[5] - 1.0;
  EXPECT_GT(interlacing_violations(broken, uv, 1, 1e-9 * s.matrix_norm), 0u);
}

TEST(Master, RealizedOutlierZeroesDeterminant) {
  const std::size_t n = 200;
  SpikeModel m(uniform_base(n), uniform_base(n), {1.0}, {0.8});
  const auto haar = sample_haar<double>(n, 17);
  const auto mats = build_model(m, haar);
  const auto sys = singular_system(mats.Y, spectral_decomposition(mats.Q1));
  const auto top = spectral_decomposition(mats.Q1_hat, 2, false, false);
  for (int k = 0; k < 2; ++k) {
    EXPECT_LE(master_determinant(m, sys, top.values(k)).relative, 1e-6);
  }
  EXPECT_GT(master_determinant(m, sys, top.values(0) + 0.05).relative, 1e-4);
}
