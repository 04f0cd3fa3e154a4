#pragma once

#include <complex>
#include <stdexcept>
#include <string>

namespace freespike {

using Complex = std::complex<double>;

/// Root of the error hierarchy. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration: bad measure specs, malformed JSON, inconsistent sizes.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An argument lies outside the domain of the operation (pole, wrong half-line, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Generic numerical failure (eigensolver, root bracketing).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Fixed-point / Newton iteration for the subordination system did not converge.
class SolverError : public NumericError {
 public:
  SolverError(const std::string& what, Complex z, Complex omega_a, Complex omega_b,
              double residual, int iterations)
      : NumericError(what),
        z(z),
        omega_a(omega_a),
        omega_b(omega_b),
        residual(residual),
        iterations(iterations) {}

  Complex z;
  Complex omega_a;
  Complex omega_b;
  double residual;
  int iterations;
};

/// A linear system or diagonal entry is (numerically) singular.
class SingularityError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// The parametric edge and the Stieltjes-inversion cross-check disagree.
class EdgeInconsistencyError : public NumericError {
 public:
  EdgeInconsistencyError(const std::string& what, double parametric_edge, double im_m_outside,
                         double im_m_inside)
      : NumericError(what),
        parametric_edge(parametric_edge),
        im_m_outside(im_m_outside),
        im_m_inside(im_m_inside) {}

  double parametric_edge;
  double im_m_outside;
  double im_m_inside;
};

/// An experiment plan cannot run the requested suite.
class PlanError : public Error {
 public:
  using Error::Error;
};

}  // namespace freespike
