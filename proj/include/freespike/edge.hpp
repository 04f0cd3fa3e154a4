#pragma once

// Upper spectral edge of mu_A x mu_B and the inverse subordination functions above it.

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <utility>

#include <boost/math/tools/roots.hpp>
#include <boost/math/tools/toms748_solve.hpp>

#include "freespike/errors.hpp"
#include "freespike/measure.hpp"
#include "freespike/subordination.hpp"

namespace freespike {

struct EdgeData {
  double E_plus = 0.0;
  double omega_a_edge = 0.0;  // Omega_A(E_+)
  double omega_b_edge = 0.0;  // Omega_B(E_+)
  double sqrt_coeff_a = 0.0;  // Omega_A(z) ~ omega_a_edge + C_A sqrt(z - E_+)
  double sqrt_coeff_b = 0.0;
  double density_coeff = 0.0;  // rho(E_+ - t) ~ density_coeff * sqrt(t)
  double bracket_lo = 0.0;     // search interval for omega_b_edge
  double bracket_hi = 0.0;
  double precision = 0.0;      // final bracket width around omega_b_edge
  double dist_b_to_supp_a = 0.0;
  double dist_a_to_supp_b = 0.0;
  bool degenerate = false;     // edge sits at a_max * b_max (an atom of the convolution)
  bool cross_validated = false;
  double im_m_outside = 0.0;
  double im_m_inside = 0.0;
};

namespace detail {

struct RealM {
  double value;
  double derivative;
};

inline RealM m_real(const AtomicMeasure& mu, double w) {
  double j = 0.0;
  double dj = 0.0;
  const auto x = mu.atoms();
  const auto p = mu.weights();
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double inv = 1.0 / (x[k] - w);
    const double term = p[k] * x[k] * inv;
    j += term;
    dj += term * inv;
  }
  return {1.0 - 1.0 / j, dj / (j * j)};
}

inline boost::math::tools::eps_tolerance<double> root_tol() {
  return boost::math::tools::eps_tolerance<double>(50);
}

/// The w > max atom with M_mu(w) = t, for t > 1. Solved for the offset s = w - max atom.
inline double inverse_m_above(const AtomicMeasure& mu, double t) {
  if (!(t > 1.0)) throw DomainError("inverse M-transform above the support needs t > 1");
  const double top = mu.max_atom();
  const double target = 1.0 / (1.0 - t);  // value of int x/(x-w) dmu, negative
  auto g = [&](double s) {
    double j = 0.0;
    const auto x = mu.atoms();
    const auto p = mu.weights();
    for (std::size_t k = 0; k < x.size(); ++k) j += p[k] * x[k] / (x[k] - top - s);
    return j - target;
  };
  double lo = top * (t - 1.0) / t;
  double glo = g(lo);
  for (int k = 0; glo >= 0.0; ++k) {
    if (k > 2000 || lo < 1e-300) throw NumericError("inverse M-transform: lower bracket failed");
    lo *= 0.125;
    glo = g(lo);
  }
  double hi = std::max(2.0 * lo, t + top);
  double ghi = g(hi);
  for (int k = 0; ghi <= 0.0; ++k) {
    if (k > 200) throw NumericError("inverse M-transform: upper bracket failed");
    hi *= 2.0;
    ghi = g(hi);
  }
  if (glo == 0.0) return top + lo;
  std::uintmax_t iters = 200;
  auto r = boost::math::tools::toms748_solve(g, lo, hi, glo, ghi, root_tol(), iters);
  return top + 0.5 * (r.first + r.second);
}

/// Point on the real curve z = x(omega) traced by Omega_B(z) = omega above supp mu_A.
/// `first` is the measure evaluated at omega, `second` the one that gets inverted.
struct CurvePoint {
  double omega;
  double t;            // M_first(omega)
  double dt;
  double omega_other;  // M_second^{-1}(t)
  double d_omega_other;
  double x;
  double dx;
};

inline CurvePoint curve_point(const AtomicMeasure& first, const AtomicMeasure& second,
                              double omega) {
  CurvePoint c{};
  c.omega = omega;
  const RealM mf = m_real(first, omega);
  c.t = mf.value;
  c.dt = mf.derivative;
  c.omega_other = inverse_m_above(second, c.t);
  const RealM ms = m_real(second, c.omega_other);
  c.d_omega_other = c.dt / ms.derivative;
  c.x = c.omega_other * omega / c.t;
  c.dx = (c.d_omega_other * omega + c.omega_other) / c.t - c.omega_other * omega * c.dt / (c.t * c.t);
  return c;
}

inline double imag_m(const AtomicMeasure& a, const AtomicMeasure& b, Complex z) {
  return transforms_from(a, solve(a, b, z)).m.imag();
}

}  // namespace detail

struct EdgeOptions {
  bool cross_validate = true;
  double scan_ratio = 0.85;  // geometric ratio of the downward scan for the critical point
};

/// Locates E_+ as the largest critical point of the real curve x(omega_B).
///
/// For real omega_B above supp mu_A the pair Omega_B = omega_B, Omega_A = M_B^{-1}(M_A(omega_B))
/// solves the subordination system at z = x(omega_B) = Omega_A Omega_B / M_A(omega_B). The edge
/// is where this curve turns around; if it never does the edge is the atom a_max * b_max.
inline EdgeData locate_upper_edge(const AtomicMeasure& a, const AtomicMeasure& b,
                                  const EdgeOptions& opts = {}) {
  EdgeData e;
  const double amax = a.max_atom();
  const double bmax = b.max_atom();
  auto dx = [&](double s) { return detail::curve_point(a, b, amax + s).dx; };

  double s_hi = std::max(1.0, amax);
  double d_hi = dx(s_hi);
  for (int k = 0; !(d_hi > 0.0); ++k) {
    if (k > 60) throw ConfigError("locate_upper_edge: no admissible bracket (x' never positive)");
    s_hi *= 2.0;
    d_hi = dx(s_hi);
  }
  e.bracket_hi = amax + s_hi;

  const double s_min = 1e-13 * amax;
  double s_prev = s_hi;
  double d_prev = d_hi;
  double s = s_hi;
  bool found = false;
  double d = d_hi;
  while (s > s_min) {
    s *= opts.scan_ratio;
    d = dx(s);
    if (d <= 0.0) {
      found = true;
      break;
    }
    s_prev = s;
    d_prev = d;
  }

  if (!found) {
    e.degenerate = true;
    e.E_plus = amax * bmax;
    e.omega_b_edge = amax;
    e.omega_a_edge = bmax;
    e.bracket_lo = amax;
    e.precision = s_prev;
    return e;
  }

  e.bracket_lo = amax + s;
  double s_star = s;
  if (d < 0.0) {
    std::uintmax_t iters = 200;
    auto r = boost::math::tools::toms748_solve(dx, s, s_prev, d, d_prev, detail::root_tol(), iters);
    s_star = 0.5 * (r.first + r.second);
    e.precision = r.second - r.first;
  }
  const detail::CurvePoint c = detail::curve_point(a, b, amax + s_star);
  e.E_plus = c.x;
  e.omega_b_edge = c.omega;
  e.omega_a_edge = c.omega_other;
  e.dist_b_to_supp_a = c.omega - amax;
  e.dist_a_to_supp_b = c.omega_other - bmax;

  // x(omega) ~ E_+ + x''/2 (omega - omega*)^2 near the turning point
  const double h = 1e-3 * s_star;
  const double curvature = (dx(s_star + h) - dx(s_star - h)) / (2.0 * h);
  if (curvature > 0.0) {
    e.sqrt_coeff_b = std::sqrt(2.0 / curvature);
    e.sqrt_coeff_a = c.d_omega_other * e.sqrt_coeff_b;
    const double one_minus = 1.0 - c.t;
    e.density_coeff = c.dt * e.sqrt_coeff_b / (M_PI * e.E_plus * one_minus * one_minus);
  }

  if (opts.cross_validate) {
    e.im_m_outside = detail::imag_m(a, b, Complex(e.E_plus + 1e-3, 1e-7));
    e.im_m_inside = detail::imag_m(a, b, Complex(e.E_plus - 1e-2, 1e-7));
    if (!(e.im_m_outside <= 1e-3 && e.im_m_inside >= 1e-2)) {
      std::ostringstream os;
      os.precision(12);
      os << "edge cross-check failed at E_+ = " << e.E_plus << ": Im m outside = " << e.im_m_outside
         << ", inside = " << e.im_m_inside;
      throw EdgeInconsistencyError(os.str(), e.E_plus, e.im_m_outside, e.im_m_inside);
    }
    e.cross_validated = true;
  }
  return e;
}

namespace detail {

// Inverse of Omega_first on (E_+, inf) evaluated at `value`: the x > E_+ with
// Omega_first(x) = value. The scalar equation M_second(x t / value) = t is solved in x on
// the part of the bracket where x t / value lies above supp mu_second, so M_second is
// monotone there and the root is unique.
inline double inverse_omega_impl(const AtomicMeasure& first_at, const AtomicMeasure& second,
                                 double e_plus, double value) {
  const double t = m_real(first_at, value).value;
  const double ratio = t / value;
  const double smax = second.max_atom();
  auto f = [&](double x) { return m_real(second, x * ratio).value - t; };
  double lo = smax / ratio;
  // step off the pole-free end where M_second tends to 1 < t
  double off = 1e-9 * lo;
  double flo = f(lo + off);
  for (int k = 0; !(flo < 0.0); ++k) {
    if (k > 400) throw NumericError("inverse subordination: cannot bracket from below");
    off *= 0.25;
    flo = f(lo + off);
  }
  lo += off;
  double hi = std::max(e_plus + 10.0 * (1.0 + value * value), 2.0 * lo);
  double fhi = f(hi);
  for (int k = 0; !(fhi > 0.0); ++k) {
    if (k >= 10) {
      std::ostringstream os;
      os << "inverse subordination: root escapes bracket ceiling " << hi << " for argument " << value;
      throw NumericError(os.str());
    }
    hi *= 2.0;
    fhi = f(hi);
  }
  std::uintmax_t iters = 300;
  auto r = boost::math::tools::toms748_solve(f, lo, hi, flo, fhi,
                                             boost::math::tools::eps_tolerance<double>(52), iters);
  return 0.5 * (r.first + r.second);
}

inline void check_positive(double v, const char* what) {
  if (!(v > 0.0)) throw DomainError(std::string(what) + ": argument must be positive");
}

}  // namespace detail

/// Omega_B^{-1}(a_hat) above threshold, E_+ at or below it.
inline double inverse_omega_B(const EdgeData& edge, const AtomicMeasure& a, const AtomicMeasure& b,
                              double a_hat) {
  detail::check_positive(a_hat, "inverse_omega_B");
  if (a_hat <= edge.omega_b_edge) return edge.E_plus;
  return detail::inverse_omega_impl(a, b, edge.E_plus, a_hat);
}

inline double inverse_omega_A(const EdgeData& edge, const AtomicMeasure& a, const AtomicMeasure& b,
                              double b_hat) {
  detail::check_positive(b_hat, "inverse_omega_A");
  if (b_hat <= edge.omega_a_edge) return edge.E_plus;
  return detail::inverse_omega_impl(b, a, edge.E_plus, b_hat);
}

/// The exact subordination point at x = Omega_B^{-1}(a_hat): Omega_B = a_hat.
inline SubordinationValue subordination_at_inverse_B(const EdgeData& edge, const AtomicMeasure& a,
                                                     const AtomicMeasure& b, double a_hat) {
  const double x = inverse_omega_B(edge, a, b, a_hat);
  const double t = detail::m_real(a, a_hat).value;
  SubordinationValue v{Complex(x), Complex(x * t / a_hat), Complex(a_hat), 0.0, 0};
  v.residual = system_residual(a, b, v.z, v.omega_a, v.omega_b);
  return v;
}

inline SubordinationValue subordination_at_inverse_A(const EdgeData& edge, const AtomicMeasure& a,
                                                     const AtomicMeasure& b, double b_hat) {
  const double x = inverse_omega_A(edge, a, b, b_hat);
  const double t = detail::m_real(b, b_hat).value;
  SubordinationValue v{Complex(x), Complex(b_hat), Complex(x * t / b_hat), 0.0, 0};
  v.residual = system_residual(a, b, v.z, v.omega_a, v.omega_b);
  return v;
}

/// (Omega_B^{-1})'(a_hat) = 1 / Omega_B'(Omega_B^{-1}(a_hat)).
inline double inverse_omega_B_derivative(const EdgeData& edge, const AtomicMeasure& a,
                                         const AtomicMeasure& b, double a_hat) {
  if (!(a_hat > edge.omega_b_edge)) {
    throw DomainError("inverse_omega_B_derivative: argument at or below the threshold");
  }
  const auto d = omega_derivative(a, b, subordination_at_inverse_B(edge, a, b, a_hat));
  return 1.0 / d.second.real();
}

inline double inverse_omega_A_derivative(const EdgeData& edge, const AtomicMeasure& a,
                                         const AtomicMeasure& b, double b_hat) {
  if (!(b_hat > edge.omega_a_edge)) {
    throw DomainError("inverse_omega_A_derivative: argument at or below the threshold");
  }
  const auto d = omega_derivative(a, b, subordination_at_inverse_A(edge, a, b, b_hat));
  return 1.0 / d.first.real();
}

}  // namespace freespike
