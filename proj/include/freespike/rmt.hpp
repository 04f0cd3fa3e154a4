#pragma once

// Random matrix side: Haar sampling, spiked model matrices, exact spectra and resolvents.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

// lapacke must see the C++ complex types before its first inclusion
#ifndef lapack_complex_float
#define lapack_complex_float std::complex<float>
#endif
#ifndef lapack_complex_double
#define lapack_complex_double std::complex<double>
#endif
#include <lapacke.h>

#include "freespike/errors.hpp"
#include "freespike/spike.hpp"
#include "freespike/subordination.hpp"

namespace freespike {

// ---------------------------------------------------------------------------
// Seeds

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Stream seed for (master seed, trial index, purpose). Independent of execution order.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t trial, std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the tag
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(splitmix64(master) ^ trial) ^ h);
}

// ---------------------------------------------------------------------------
// Scalar plumbing

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
inline constexpr bool is_complex_v = !std::is_same_v<Scalar, double>;

enum class Field { real_orthogonal, complex_unitary };

inline double abs2(double x) { return x * x; }
inline double abs2(Complex x) { return std::norm(x); }
inline double conj_of(double x) { return x; }
inline Complex conj_of(Complex x) { return std::conj(x); }

template <typename Scalar>
struct HaarSample {
  Field field;
  std::size_t N;
  std::uint64_t seed;
  Matrix<Scalar> U;
};

/// Haar-distributed orthogonal (double) or unitary (Complex) matrix.
///
/// A Gaussian matrix is QR-factored and the columns of Q are multiplied by the phases of
/// diag(R), which makes the factorization unique and the law of Q exactly Haar.
template <typename Scalar = double>
HaarSample<Scalar> sample_haar(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw ConfigError("sample_haar: N must be at least 2");
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix<Scalar> g(n, n);
  for (Eigen::Index j = 0; j < g.cols(); ++j) {
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      if constexpr (is_complex_v<Scalar>) {
        const double re = gauss(gen);
        const double im = gauss(gen);
        g(i, j) = Scalar(re, im) * M_SQRT1_2;
      } else {
        g(i, j) = gauss(gen);
      }
    }
  }
  Eigen::HouseholderQR<Matrix<Scalar>> qr(g);
  Matrix<Scalar> q = qr.householderQ();
  const auto& r = qr.matrixQR();
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    const Scalar d = r(j, j);
    const double mag = std::abs(d);
    if (mag > 0.0) q.col(j) *= d / mag;
  }
  return {is_complex_v<Scalar> ? Field::complex_unitary : Field::real_orthogonal, n, seed,
          std::move(q)};
}

template <typename Scalar>
double unitarity_defect(const Matrix<Scalar>& u) {
  const Matrix<Scalar> e = u * u.adjoint() - Matrix<Scalar>::Identity(u.rows(), u.cols());
  return e.cwiseAbs().maxCoeff();
}

// ---------------------------------------------------------------------------
// Model matrices

template <typename Scalar>
Matrix<Scalar> hermitian_part(const Matrix<Scalar>& x) {
  return (x + x.adjoint()) * 0.5;
}

/// Y = diag(sqrt a) U diag(sqrt b).
template <typename Scalar>
Matrix<Scalar> data_matrix(std::span<const double> a, const Matrix<Scalar>& u,
                           std::span<const double> b) {
  const Eigen::Index n = u.rows();
  if (static_cast<Eigen::Index>(a.size()) != n || static_cast<Eigen::Index>(b.size()) != n ||
      u.cols() != n) {
    throw ConfigError("data_matrix: dimension mismatch");
  }
  Eigen::VectorXd sa(n), sb(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    sa(i) = std::sqrt(a[static_cast<std::size_t>(i)]);
    sb(i) = std::sqrt(b[static_cast<std::size_t>(i)]);
  }
  return sa.asDiagonal() * u * sb.asDiagonal();
}

/// Y Y^*, symmetrized.
template <typename Scalar>
Matrix<Scalar> gram(const Matrix<Scalar>& y) {
  Matrix<Scalar> q = Matrix<Scalar>::Zero(y.rows(), y.rows());
  q.template selfadjointView<Eigen::Lower>().rankUpdate(y);
  q.template triangularView<Eigen::StrictlyUpper>() = q.adjoint();
  return q;
}

template <typename Scalar>
struct ModelMatrices {
  Matrix<Scalar> Y;      // unspiked data matrix
  Matrix<Scalar> Y_hat;  // spiked data matrix
  Matrix<Scalar> Q1;     // Y Y^*
  Matrix<Scalar> Q1_hat; // Y_hat Y_hat^*

  Matrix<Scalar> Q2_hat() const { return hermitian_part<Scalar>(Y_hat.adjoint() * Y_hat); }
};

/// Unspiked and spiked matrices built from the same U.
template <typename Scalar>
ModelMatrices<Scalar> build_model(const SpikeModel& model, const HaarSample<Scalar>& u) {
  if (u.U.rows() != static_cast<Eigen::Index>(model.N())) {
    throw ConfigError("build_model: Haar sample and model dimensions differ");
  }
  ModelMatrices<Scalar> m;
  m.Y = data_matrix<Scalar>(model.a(), u.U, model.b());
  m.Q1 = gram(m.Y);
  if (model.r() + model.s() == 0) {
    m.Y_hat = m.Y;
    m.Q1_hat = m.Q1;
  } else {
    m.Y_hat = data_matrix<Scalar>(model.a_hat(), u.U, model.b_hat());
    m.Q1_hat = gram(m.Y_hat);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Spectra

template <typename Scalar>
struct SpectralData {
  Eigen::VectorXd values;    // descending
  Matrix<Scalar> vectors;    // column k belongs to values(k); empty without vectors
  Eigen::VectorXd residuals; // ||M u_k - lambda_k u_k||
  double matrix_norm = 0.0;  // max |eigenvalue| of the full matrix estimate

  std::size_t count() const { return static_cast<std::size_t>(values.size()); }
  bool has_vectors() const { return vectors.cols() > 0; }
};

namespace detail {

inline lapack_int syevr(char jobz, char range, lapack_int n, double* a, lapack_int il,
                        lapack_int iu, lapack_int* m, double* w, double* z, lapack_int* isuppz) {
  return LAPACKE_dsyevr(LAPACK_COL_MAJOR, jobz, range, 'L', n, a, n, 0.0, 0.0, il, iu, 0.0, m, w,
                        z, n, isuppz);
}

inline lapack_int syevr(char jobz, char range, lapack_int n, Complex* a, lapack_int il,
                        lapack_int iu, lapack_int* m, double* w, Complex* z, lapack_int* isuppz) {
  return LAPACKE_zheevr(LAPACK_COL_MAJOR, jobz, range, 'L', n, a, n, 0.0, 0.0, il, iu, 0.0, m, w,
                        z, n, isuppz);
}

}  // namespace detail

/// Eigen-decomposition of a Hermitian matrix, largest `top` eigenpairs (0 = all), descending.
template <typename Scalar>
SpectralData<Scalar> spectral_decomposition(const Matrix<Scalar>& matrix, std::size_t top = 0,
                                            bool vectors = true, bool residuals = true) {
  const Eigen::Index n = matrix.rows();
  if (matrix.cols() != n || n == 0) throw ConfigError("spectral_decomposition: matrix must be square");
  const lapack_int ni = static_cast<lapack_int>(n);
  const lapack_int k = (top == 0 || top >= static_cast<std::size_t>(n)) ? ni
                                                                         : static_cast<lapack_int>(top);
  const char range = k == ni ? 'A' : 'I';
  Matrix<Scalar> work = matrix;
  Eigen::VectorXd w(n);
  Matrix<Scalar> z;
  if (vectors) z.resize(n, k);
  std::vector<lapack_int> isuppz(2 * static_cast<std::size_t>(std::max<lapack_int>(k, 1)));
  lapack_int found = 0;
  const lapack_int info =
      detail::syevr(vectors ? 'V' : 'N', range, ni, work.data(), ni - k + 1, ni, &found, w.data(),
                    vectors ? z.data() : nullptr, isuppz.data());
  if (info != 0 || found != k) {
    std::ostringstream os;
    os << "eigensolver failed (info = " << info << ", found " << found << " of " << k
       << " eigenpairs, N = " << n << ")";
    throw NumericError(os.str());
  }
  SpectralData<Scalar> out;
  out.values.resize(k);
  for (lapack_int i = 0; i < k; ++i) out.values(i) = w(k - 1 - i);
  if (vectors) {
    out.vectors.resize(n, k);
    for (lapack_int i = 0; i < k; ++i) out.vectors.col(i) = z.col(k - 1 - i);
    if (residuals) {
      const Matrix<Scalar> mv = matrix * out.vectors;
      out.residuals.resize(k);
      for (lapack_int i = 0; i < k; ++i) {
        out.residuals(i) = (mv.col(i) - out.values(i) * out.vectors.col(i)).norm();
      }
    }
  }
  out.matrix_norm = std::max(std::abs(out.values(0)), std::abs(out.values(k - 1)));
  return out;
}

/// sum_{k in S} |<u_k, v>|^2 over 1-based eigenvector indices S.
template <typename Scalar, typename V>
double empirical_overlap(const SpectralData<Scalar>& sd, std::span<const std::size_t> S, const V& v) {
  double s = 0.0;
  for (std::size_t k : S) {
    if (k < 1 || k > static_cast<std::size_t>(sd.vectors.cols())) {
      throw DomainError("empirical_overlap: index outside the computed eigenvectors");
    }
    s += abs2(sd.vectors.col(static_cast<Eigen::Index>(k - 1)).dot(v));
  }
  return s;
}

/// |<e_i, u_k>|^2 for a coordinate vector, without forming e_i.
template <typename Scalar>
double coordinate_overlap(const SpectralData<Scalar>& sd, std::size_t k, std::size_t i) {
  return abs2(sd.vectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k - 1)));
}

// ---------------------------------------------------------------------------
// Resolvent diagnostics

/// Diagonal of Theta(z): first the N entries for A, then the N entries for B.
inline Eigen::VectorXcd theta_matrix(std::span<const double> a, std::span<const double> b,
                                     const SubordinationValue& sub) {
  const std::size_t n = a.size();
  Eigen::VectorXcd t(static_cast<Eigen::Index>(2 * n));
  const Complex z = sub.z;
  auto entry = [&](double x, Complex omega, std::size_t idx) {
    const Complex gap = x - omega;
    if (std::abs(gap) <= 1e-12) {
      std::ostringstream os;
      os << "theta_matrix: entry " << idx << " sits on a pole (atom " << x << ")";
      throw SingularityError(os.str());
    }
    return omega / (z * gap);
  };
  for (std::size_t i = 0; i < n; ++i) t(static_cast<Eigen::Index>(i)) = entry(a[i], sub.omega_b, i);
  for (std::size_t m = 0; m < b.size(); ++m) {
    t(static_cast<Eigen::Index>(n + m)) = entry(b[m], sub.omega_a, n + m);
  }
  return t;
}

/// Full spectral data of the unspiked model: left vectors from Q1, right vectors from Y.
template <typename Scalar>
struct SingularSystem {
  Eigen::VectorXd lambda;  // descending eigenvalues of Q1
  Matrix<Scalar> u;        // left singular vectors (columns)
  Matrix<Scalar> v;        // right singular vectors (columns)
};

template <typename Scalar>
SingularSystem<Scalar> singular_system(const Matrix<Scalar>& y, const SpectralData<Scalar>& q1_full) {
  if (!q1_full.has_vectors() || q1_full.vectors.cols() != y.rows()) {
    throw DomainError("singular_system: needs the full eigendecomposition of Q1");
  }
  SingularSystem<Scalar> s;
  s.lambda = q1_full.values;
  s.u = q1_full.vectors;
  s.v = y.adjoint() * s.u;
  for (Eigen::Index k = 0; k < s.v.cols(); ++k) {
    const double lam = s.lambda(k);
    if (!(lam > 0.0)) throw SingularityError("singular_system: non-positive eigenvalue of Q1");
    s.v.col(k) /= std::sqrt(lam);
  }
  return s;
}

enum class LocalLawDomain { bulk_edge, outside };

inline const char* domain_name(LocalLawDomain d) {
  return d == LocalLawDomain::bulk_edge ? "T_tau(eta_L,eta_U)" : "T_tau(eta_U)";
}

struct LocalLawParams {
  double tau = 0.1;
  double xi = 0.1;
  double eta_upper = 10.0;
};

/// Domain tag for z; prefers the outlier domain when both apply.
inline LocalLawDomain classify_domain(Complex z, double e_plus, std::size_t n,
                                      const LocalLawParams& p = {}) {
  const double nd = static_cast<double>(n);
  const double e = z.real();
  const double eta = z.imag();
  const bool outside = e >= e_plus + std::pow(nd, -2.0 / 3.0 + p.tau) && e <= 1.0 / p.tau &&
                       std::abs(eta) < p.eta_upper;
  if (outside) return LocalLawDomain::outside;
  const bool bulk = e >= e_plus - p.tau && e <= 1.0 / p.tau && eta > std::pow(nd, -1.0 + p.xi) &&
                    eta < p.eta_upper;
  if (bulk) return LocalLawDomain::bulk_edge;
  std::ostringstream os;
  os << "local law requested at z = " << z << " outside both spectral domains";
  throw DomainError(os.str());
}

struct ResolventDiagnostics {
  Complex z;
  double sup_entry_error = 0.0;  // max_{k,l} |(G - Theta)_{kl}|
  double averaged_error = 0.0;   // |m_H - m|
  double kappa = 0.0;
  LocalLawDomain domain = LocalLawDomain::outside;
};

/// Linearized resolvent G(z) against Theta(z) for the unspiked model.
template <typename Scalar>
ResolventDiagnostics local_law_residual(std::span<const double> a, std::span<const double> b,
                                        const SingularSystem<Scalar>& sys,
                                        const SubordinationValue& sub, double e_plus,
                                        const LocalLawParams& p = {}) {
  const Eigen::Index n = sys.u.rows();
  ResolventDiagnostics d;
  d.z = sub.z;
  d.kappa = std::abs(sub.z.real() - e_plus);
  d.domain = classify_domain(sub.z, e_plus, static_cast<std::size_t>(n), p);
  const Complex z = sub.z;
  const Complex root = std::sqrt(z);  // principal branch
  const Eigen::VectorXcd theta = theta_matrix(a, b, sub);

  Eigen::VectorXcd inv(n), cross(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    inv(k) = 1.0 / (sys.lambda(k) - z);
    cross(k) = std::sqrt(sys.lambda(k)) * inv(k) / root;
  }
  double sup = 0.0;
  Complex trace{};
  if constexpr (is_complex_v<Scalar>) {
    auto scan = [&](const Eigen::MatrixXcd& blk, Eigen::Index diag_offset) {
      for (Eigen::Index j = 0; j < blk.cols(); ++j) {
        for (Eigen::Index i = 0; i < blk.rows(); ++i) {
          Complex g = blk(i, j);
          if (diag_offset >= 0 && i == j) g -= theta(diag_offset + i);
          sup = std::max(sup, std::abs(g));
        }
      }
    };
    Eigen::MatrixXcd blk = sys.u * inv.asDiagonal() * sys.u.adjoint();
    trace = blk.trace();
    scan(blk, 0);
    blk = sys.v * inv.asDiagonal() * sys.v.adjoint();
    scan(blk, n);
    blk = sys.u * cross.asDiagonal() * sys.v.adjoint();
    scan(blk, -1);
    blk = sys.v * cross.asDiagonal() * sys.u.adjoint();
    scan(blk, -1);
  } else {
    // real vectors: each block is L diag(w) R^T, split into real and imaginary products;
    // the lower-left block is the transpose of the upper-right one
    Eigen::MatrixXd re, im;
    auto block = [&](const Eigen::MatrixXd& l, const Eigen::VectorXcd& w, const Eigen::MatrixXd& r,
                     Eigen::Index diag_offset) {
      re.noalias() = l * w.real().asDiagonal() * r.transpose();
      im.noalias() = l * w.imag().asDiagonal() * r.transpose();
      for (Eigen::Index j = 0; j < re.cols(); ++j) {
        for (Eigen::Index i = 0; i < re.rows(); ++i) {
          Complex g(re(i, j), im(i, j));
          if (diag_offset >= 0 && i == j) g -= theta(diag_offset + i);
          sup = std::max(sup, std::abs(g));
        }
      }
    };
    block(sys.u, inv, sys.u, 0);
    trace = Complex(re.trace(), im.trace());
    block(sys.v, inv, sys.v, n);
    block(sys.u, cross, sys.v, -1);
  }
  d.sup_entry_error = sup;

  const Complex m_h = trace / static_cast<double>(n);
  const AtomicMeasure mu_a = AtomicMeasure::empirical(a);
  d.averaged_error = std::abs(m_h - transforms_from(mu_a, sub).m);
  return d;
}

/// Omega_B^c(z_hat) = z_hat tr(A G(z_hat)) / (1 + z_hat tr G(z_hat)), z_hat = lambda_1 + i N^{-2/3+eps}.
template <typename Scalar>
Complex estimate_omega_beta_edge(const SpectralData<Scalar>& q1_full, std::span<const double> a,
                                 double epsilon) {
  if (!(epsilon > 0.0 && epsilon < 1.0 / 3.0)) {
    throw DomainError("estimate_omega_beta_edge: epsilon must lie in (0, 1/3)");
  }
  const Eigen::Index n = q1_full.vectors.rows();
  if (!q1_full.has_vectors() || q1_full.vectors.cols() != n) {
    throw DomainError("estimate_omega_beta_edge: needs the full eigendecomposition of Q1");
  }
  const double nd = static_cast<double>(n);
  const Complex zh(q1_full.values(0), std::pow(nd, -2.0 / 3.0 + epsilon));
  Complex tr_g{}, tr_ag{};
  for (Eigen::Index k = 0; k < n; ++k) {
    double weight = 0.0;  // u_k^* A u_k
    for (Eigen::Index i = 0; i < n; ++i) {
      weight += a[static_cast<std::size_t>(i)] * abs2(q1_full.vectors(i, k));
    }
    const Complex inv = 1.0 / (q1_full.values(k) - zh);
    tr_g += inv;
    tr_ag += weight * inv;
  }
  tr_g /= nd;
  tr_ag /= nd;
  return zh * tr_ag / (1.0 + zh * tr_g);
}

struct RigidityReport {
  std::vector<double> deviation;   // |lambda_i - gamma_i|
  std::vector<double> normalized;  // deviation * i^{1/3} N^{2/3}
  double max_normalized_top = 0.0; // over i <= top
  double log_slope = 0.0;          // slope of log normalized vs log i over i <= top
};

inline RigidityReport rigidity_report(std::span<const double> eigenvalues,
                                      std::span<const double> quantiles, std::size_t n,
                                      std::size_t top = 50) {
  const std::size_t count = std::min({eigenvalues.size(), quantiles.size(), n / 3});
  RigidityReport r;
  const double nd = static_cast<double>(n);
  for (std::size_t i = 1; i <= count; ++i) {
    const double dev = std::abs(eigenvalues[i - 1] - quantiles[i - 1]);
    r.deviation.push_back(dev);
    r.normalized.push_back(dev * std::cbrt(static_cast<double>(i)) * std::pow(nd, 2.0 / 3.0));
  }
  const std::size_t t = std::min(top, count);
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t used = 0;
  for (std::size_t i = 1; i <= t; ++i) {
    r.max_normalized_top = std::max(r.max_normalized_top, r.normalized[i - 1]);
    if (r.normalized[i - 1] <= 0.0) continue;
    const double x = std::log(static_cast<double>(i));
    const double y = std::log(r.normalized[i - 1]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++used;
  }
  if (used >= 3) {
    const double u = static_cast<double>(used);
    r.log_slope = (u * sxy - sx * sy) / (u * sxx - sx * sx);
  }
  return r;
}

struct DelocalizationReport {
  std::vector<double> statistic;  // N max_i |u_k(i)|^2, k = 1..K
  double max_top = 0.0;           // over k <= top
  double max_norm_defect = 0.0;   // max_k |sum_i |u_k(i)|^2 - 1|
  bool degenerate = false;        // eigenvalues (numerically) coincide: basis not determined
};

template <typename Scalar>
DelocalizationReport delocalization_report(const SpectralData<Scalar>& sd, std::size_t top = 50) {
  DelocalizationReport r;
  const Eigen::Index n = sd.vectors.rows();
  const Eigen::Index k = std::min<Eigen::Index>(sd.vectors.cols(), std::max<Eigen::Index>(n / 3, 1));
  const double scale = std::max(std::abs(sd.values(0)), 1e-300);
  if (k >= 2 && std::abs(sd.values(0) - sd.values(k - 1)) <= 1e-10 * scale) r.degenerate = true;
  for (Eigen::Index c = 0; c < k; ++c) {
    double mx = 0.0, norm = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double w = abs2(sd.vectors(i, c));
      mx = std::max(mx, w);
      norm += w;
    }
    r.statistic.push_back(static_cast<double>(n) * mx);
    r.max_norm_defect = std::max(r.max_norm_defect, std::abs(norm - 1.0));
    if (static_cast<std::size_t>(c) < top) r.max_top = std::max(r.max_top, r.statistic.back());
  }
  return r;
}

/// Violations of lambda_i <= lambda_hat_i <= lambda_{i-r-s} over the computed indices.
inline std::size_t interlacing_violations(std::span<const double> spiked,
                                          std::span<const double> unspiked, std::size_t rank,
                                          double slack) {
  const std::size_t k = std::min(spiked.size(), unspiked.size());
  std::size_t bad = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (spiked[i] < unspiked[i] - slack) ++bad;
    if (i >= rank && spiked[i] > unspiked[i - rank] + slack) ++bad;
  }
  return bad;
}

struct MasterDeterminant {
  double determinant = 0.0;
  double relative = 0.0;  // |det| / product of the row sums of term magnitudes
};

/// det(D^{-1} + x U^* G(x) U) for real x > 0 outside spec(Q1), from the unspiked singular system.
template <typename Scalar>
MasterDeterminant master_determinant(const SpikeModel& model, const SingularSystem<Scalar>& sys,
                                     double x) {
  if (!(x > 0.0)) throw DomainError("master_determinant: x must be positive");
  std::vector<std::pair<Side, std::size_t>> active;
  std::vector<double> dinv;
  for (std::size_t i = 0; i < model.r(); ++i) {
    if (model.d_a()[i] > 0.0) {
      active.emplace_back(Side::a, i);
      dinv.push_back((model.d_a()[i] + 1.0) / model.d_a()[i]);
    }
  }
  for (std::size_t j = 0; j < model.s(); ++j) {
    if (model.d_b()[j] > 0.0) {
      active.emplace_back(Side::b, j);
      dinv.push_back((model.d_b()[j] + 1.0) / model.d_b()[j]);
    }
  }
  const Eigen::Index m = static_cast<Eigen::Index>(active.size());
  if (m == 0) throw DomainError("master_determinant: no active spikes");
  const Eigen::Index n = sys.u.rows();
  Eigen::VectorXd inv(n), cross(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const double gap = sys.lambda(k) - x;
    if (std::abs(gap) <= 1e-14 * std::max(1.0, x)) {
      throw SingularityError("master_determinant: x is an eigenvalue of Q1");
    }
    inv(k) = 1.0 / gap;
    cross(k) = std::sqrt(sys.lambda(k) / x) * inv(k);
  }
  auto row_of = [&](const std::pair<Side, std::size_t>& p) {
    return p.first == Side::a ? sys.u.row(static_cast<Eigen::Index>(p.second))
                              : sys.v.row(static_cast<Eigen::Index>(p.second));
  };
  Eigen::MatrixXcd mat(m, m);
  std::vector<double> row_scale(static_cast<std::size_t>(m), 0.0);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      const bool same = active[i].first == active[j].first;
      const Eigen::VectorXd& w = same ? inv : cross;
      Complex s{};
      const auto ri = row_of(active[i]);
      const auto rj = row_of(active[j]);
      for (Eigen::Index k = 0; k < n; ++k) s += Complex(ri(k)) * w(k) * conj_of(rj(k));
      mat(i, j) = x * s + (i == j ? Complex(dinv[i]) : Complex{});
      row_scale[i] += std::abs(x * s) + (i == j ? dinv[i] : 0.0);
    }
  }
  MasterDeterminant out;
  const Complex det = mat.determinant();
  double norms = 1.0;
  for (double r : row_scale) norms *= r;
  out.determinant = std::abs(det) * (det.real() < 0.0 ? -1.0 : 1.0);
  out.relative = std::abs(det) / norms;
  return out;
}

}  // namespace freespike
