#pragma once

// Subordination functions of the free multiplicative convolution of two atomic measures.

#include <algorithm>
#include <cmath>
#include <complex>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "freespike/errors.hpp"
#include "freespike/measure.hpp"

namespace freespike {

struct SubordinationValue {
  Complex z;
  Complex omega_a;
  Complex omega_b;
  double residual = 0.0;
  int iterations = 0;
};

struct SolverOptions {
  double tolerance = 1e-12;
  int max_iterations = 500;
  double initial_damping = 1.0;
  bool adaptive_damping = true;
  bool newton_polish = true;
  std::optional<SubordinationValue> warm_start;

  void validate() const {
    if (!(tolerance > 0.0)) throw ConfigError("solver tolerance must be positive");
    if (max_iterations < 1) throw ConfigError("solver max_iterations must be >= 1");
    if (!(initial_damping > 0.0 && initial_damping <= 1.0)) {
      throw ConfigError("solver damping must lie in (0, 1]");
    }
  }
};

namespace detail {

struct SystemEval {
  Complex f1;  // z M_A(omega_b) - omega_a omega_b
  Complex f2;  // z M_B(omega_a) - omega_a omega_b
  MValue ma;   // M_A at omega_b
  MValue mb;   // M_B at omega_a
  double residual;
};

inline SystemEval evaluate_system(const AtomicMeasure& a, const AtomicMeasure& b, Complex z,
                                  Complex omega_a, Complex omega_b) {
  SystemEval e;
  e.ma = m_transform_with_derivative(a, omega_b);
  e.mb = m_transform_with_derivative(b, omega_a);
  const Complex prod = omega_a * omega_b;
  e.f1 = z * e.ma.value - prod;
  e.f2 = z * e.mb.value - prod;
  e.residual = std::max(std::abs(e.f1), std::abs(e.f2));
  return e;
}

// Iterates must stay on the same side of the real axis as z; on the real axis they must
// avoid the convex hull of the opposite measure's atoms.
inline bool admissible(const AtomicMeasure& a, const AtomicMeasure& b, Complex z, Complex wa,
                       Complex wb) {
  if (!std::isfinite(wa.real()) || !std::isfinite(wa.imag()) || !std::isfinite(wb.real()) ||
      !std::isfinite(wb.imag())) {
    return false;
  }
  if (z.imag() > 0.0) return wa.imag() > 0.0 && wb.imag() > 0.0;
  if (z.imag() < 0.0) return wa.imag() < 0.0 && wb.imag() < 0.0;
  auto outside = [](const AtomicMeasure& mu, Complex w) {
    if (w.imag() != 0.0) return true;
    return w.real() < mu.min_atom() || w.real() > mu.max_atom();
  };
  return outside(b, wa) && outside(a, wb);
}

// One Newton step on (omega_a, omega_b); nullopt if the Jacobian is singular.
inline std::optional<std::pair<Complex, Complex>> newton_step(const SystemEval& e, Complex z,
                                                              Complex wa, Complex wb) {
  const Complex j11 = -wb;
  const Complex j12 = z * e.ma.derivative - wa;
  const Complex j21 = z * e.mb.derivative - wb;
  const Complex j22 = -wa;
  const Complex det = j11 * j22 - j12 * j21;
  const double scale = std::abs(j11 * j22) + std::abs(j12 * j21);
  if (std::abs(det) <= 1e-15 * scale || det == Complex{}) return std::nullopt;
  const Complex da = (-e.f1 * j22 + e.f2 * j12) / det;
  const Complex db = (-e.f2 * j11 + e.f1 * j21) / det;
  return std::make_pair(da, db);
}

inline Complex real_if(Complex w, bool real) { return real ? Complex(w.real(), 0.0) : w; }

// Iteration from a given starting Omega_A. Throws SolverError on failure.
inline SubordinationValue solve_from(const AtomicMeasure& a, const AtomicMeasure& b, Complex z,
                                     Complex start_a, const SolverOptions& opts) {
  const bool real_line = z.imag() == 0.0;
  const double target = opts.tolerance * (1.0 + std::norm(z));
  double theta = opts.initial_damping;

  auto complete = [&](Complex wa) {
    // eliminate omega_b through the second equation
    return real_if(z * m_transform(b, wa) / wa, real_line);
  };

  Complex wa = real_if(start_a, real_line);
  Complex wb;
  SystemEval e;
  try {
    wb = complete(wa);
    e = evaluate_system(a, b, z, wa, wb);
  } catch (const DomainError&) {
    // starting point sits on a pole: nudge it once
    wa *= Complex(1.0 + 1e-7, real_line ? 0.0 : 1e-7);
    try {
      wb = complete(wa);
      e = evaluate_system(a, b, z, wa, wb);
    } catch (const DomainError& err) {
      throw SolverError(std::string("subordination: initial guess on a pole: ") + err.what(), z,
                        wa, Complex{}, std::numeric_limits<double>::infinity(), 0);
    }
  }

  int it = 0;
  for (; it < opts.max_iterations && !(e.residual <= target); ++it) {
    bool moved = false;
    if (opts.newton_polish) {
      if (auto step = newton_step(e, z, wa, wb)) {
        double lambda = 1.0;
        for (int ls = 0; ls < 6 && !moved; ++ls, lambda *= 0.5) {
          const Complex na = real_if(wa + lambda * step->first, real_line);
          const Complex nb = real_if(wb + lambda * step->second, real_line);
          if (!admissible(a, b, z, na, nb)) continue;
          try {
            SystemEval ne = evaluate_system(a, b, z, na, nb);
            if (ne.residual < e.residual) {
              wa = na;
              wb = nb;
              e = ne;
              moved = true;
            }
          } catch (const DomainError&) {
          }
        }
      }
    }
    if (moved) continue;

    // damped fixed-point step: omega_a <- z L_A(z L_B(omega_a))
    for (int tries = 0; tries < 12 && !moved; ++tries) {
      try {
        const Complex nb_full = complete(wa);
        const Complex image = real_if(z * m_transform(a, nb_full) / nb_full, real_line);
        const Complex na = (1.0 - theta) * wa + theta * image;
        const Complex nb = complete(na);
        if (admissible(a, b, z, na, nb)) {
          SystemEval ne = evaluate_system(a, b, z, na, nb);
          const bool worse = ne.residual > e.residual;
          if (!worse || !opts.adaptive_damping || theta <= 1.0 / 1024.0) {
            wa = na;
            wb = nb;
            e = ne;
            moved = true;
            break;
          }
        }
      } catch (const DomainError&) {
      }
      if (!opts.adaptive_damping) break;
      theta *= 0.5;
    }
    if (!moved) break;
  }
  if (!(e.residual <= target)) {
    throw SolverError("subordination iteration did not converge", z, wa, wb, e.residual, it);
  }
  return {z, wa, wb, e.residual, it};
}

}  // namespace detail

/// Solves z M_A(Omega_B) = z M_B(Omega_A) = Omega_A Omega_B.
///
/// Without a warm start, points with Re z > 0 close to the real axis are reached by
/// continuation in Im z from a point well inside the half-plane, which selects the
/// analytic branch that tends to z at infinity.
inline SubordinationValue solve(const AtomicMeasure& a, const AtomicMeasure& b, Complex z,
                                const SolverOptions& opts = {}) {
  opts.validate();
  if (opts.warm_start) return detail::solve_from(a, b, z, opts.warm_start->omega_a, opts);

  const double eta_far = 0.5 * (1.0 + std::abs(z));
  const double eta = std::abs(z.imag());
  if (z.real() <= 0.0 || eta >= eta_far) return detail::solve_from(a, b, z, z, opts);

  const double side = z.imag() < 0.0 ? -1.0 : 1.0;
  const double floor = std::max(eta, 1e-9 * (1.0 + std::abs(z)));
  double level = eta_far;
  SubordinationValue v = detail::solve_from(a, b, Complex(z.real(), side * level),
                                            Complex(z.real(), side * level), opts);
  int total = v.iterations;
  while (level > floor) {
    level = std::max(0.5 * level, floor);
    v = detail::solve_from(a, b, Complex(z.real(), side * level), v.omega_a, opts);
    total += v.iterations;
  }
  if (level != eta) {
    v = detail::solve_from(a, b, z, v.omega_a, opts);
    total += v.iterations;
  }
  v.iterations = total;
  return v;
}

/// Defect max(|z M_A(w_b) - w_a w_b|, |z M_B(w_a) - w_a w_b|) through the rational forms.
inline double system_residual(const AtomicMeasure& a, const AtomicMeasure& b, Complex z,
                              Complex omega_a, Complex omega_b) {
  const Complex prod = omega_a * omega_b;
  return std::max(std::abs(z * m_transform(a, omega_b) - prod),
                  std::abs(z * m_transform(b, omega_a) - prod));
}

/// A pair (mu_A, mu_B) together with solver settings.
class ConvolutionHandle {
 public:
  ConvolutionHandle(AtomicMeasure a, AtomicMeasure b, SolverOptions opts = {})
      : a_(std::make_shared<const AtomicMeasure>(std::move(a))),
        b_(std::make_shared<const AtomicMeasure>(std::move(b))),
        opts_(std::move(opts)) {
    opts_.validate();
  }

  const AtomicMeasure& a() const { return *a_; }
  const AtomicMeasure& b() const { return *b_; }
  const SolverOptions& options() const { return opts_; }

  SubordinationValue solve(Complex z) const { return freespike::solve(*a_, *b_, z, opts_); }

  SubordinationValue solve(Complex z, const SubordinationValue& warm) const {
    SolverOptions o = opts_;
    o.warm_start = warm;
    return freespike::solve(*a_, *b_, z, o);
  }

  /// Same pair with the roles of A and B exchanged.
  ConvolutionHandle swapped() const { return ConvolutionHandle(b_, a_, opts_); }

 private:
  ConvolutionHandle(std::shared_ptr<const AtomicMeasure> a, std::shared_ptr<const AtomicMeasure> b,
                    SolverOptions opts)
      : a_(std::move(a)), b_(std::move(b)), opts_(std::move(opts)) {}

  std::shared_ptr<const AtomicMeasure> a_;
  std::shared_ptr<const AtomicMeasure> b_;
  SolverOptions opts_;
};

struct ConvolutionTransform {
  SubordinationValue sub;
  Complex M;  // M-transform of mu_A x mu_B
  Complex m;  // Stieltjes transform of mu_A x mu_B
};

inline ConvolutionTransform transforms_from(const AtomicMeasure& a, const SubordinationValue& v) {
  const Complex M = m_transform(a, v.omega_b);
  if (std::abs(1.0 - M) <= 1e-14) throw DomainError("convolution M-transform equals 1 (pole)");
  if (v.z == Complex{}) throw DomainError("convolution Stieltjes transform requested at z = 0");
  return {v, M, M / (v.z * (1.0 - M))};
}

/// M and m of mu_A x mu_B at z.
inline ConvolutionTransform m_of_convolution(const ConvolutionHandle& h, Complex z) {
  return transforms_from(h.a(), h.solve(z));
}

/// Stieltjes inversion pi^{-1} Im m(x + i eta) along an ascending grid.
inline GridDensity density_on_grid(const AtomicMeasure& a, const AtomicMeasure& b,
                                   std::span<const double> grid, double eta = 1e-6,
                                   SolverOptions opts = {}) {
  if (!(eta >= 1e-8 && eta <= 1e-3)) throw ConfigError("density eta must lie in [1e-8, 1e-3]");
  if (grid.size() < 2 || !std::is_sorted(grid.begin(), grid.end())) {
    throw ConfigError("density grid must be ascending with at least two points");
  }
  GridDensity out;
  out.grid.assign(grid.begin(), grid.end());
  out.values.assign(grid.size(), 0.0);
  out.failed.assign(grid.size(), false);
  opts.warm_start.reset();
  std::optional<SubordinationValue> prev;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const Complex z(grid[k], eta);
    std::optional<SubordinationValue> v;
    if (prev) {
      SolverOptions warm = opts;
      warm.warm_start = prev;
      try {
        v = solve(a, b, z, warm);
      } catch (const NumericError&) {
      }
    }
    if (!v) {
      try {
        v = solve(a, b, z, opts);
      } catch (const NumericError&) {
      } catch (const DomainError&) {
      }
    }
    if (!v) {
      out.failed[k] = true;
      prev.reset();
      continue;
    }
    prev = v;
    double rho = 0.0;
    try {
      rho = transforms_from(a, *v).m.imag() / M_PI;
    } catch (const DomainError&) {
      out.failed[k] = true;
      continue;
    }
    if (rho < 0.0) {
      out.clipped_magnitude = std::max(out.clipped_magnitude, -rho);
      rho = 0.0;
    }
    out.values[k] = rho;
  }
  return out;
}

/// (Omega_A'(z), Omega_B'(z)) by implicit differentiation of the subordination system.
inline std::pair<Complex, Complex> omega_derivative(const AtomicMeasure& a, const AtomicMeasure& b,
                                                    const SubordinationValue& v) {
  const Complex wa = v.omega_a;
  const Complex wb = v.omega_b;
  const MValue ma = m_transform_with_derivative(a, wb);
  const MValue mb = m_transform_with_derivative(b, wa);
  const Complex z = v.z;
  const Complex j11 = -wb;
  const Complex j12 = z * ma.derivative - wa;
  const Complex j21 = z * mb.derivative - wb;
  const Complex j22 = -wa;
  const Complex det = j11 * j22 - j12 * j21;
  const double scale = std::abs(j11 * j22) + std::abs(j12 * j21);
  if (std::abs(det) <= 1e-13 * scale) {
    throw SingularityError("omega_derivative: singular linear system (z at the spectral edge?)");
  }
  const Complex ra = -ma.value;
  const Complex rb = -mb.value;
  const Complex da = (ra * j22 - rb * j12) / det;
  const Complex db = (rb * j11 - ra * j21) / det;
  return {da, db};
}

inline std::pair<Complex, Complex> omega_derivative(const AtomicMeasure& a, const AtomicMeasure& b,
                                                    Complex z, const SolverOptions& opts = {}) {
  return omega_derivative(a, b, solve(a, b, z, opts));
}

}  // namespace freespike
