#pragma once

// Probability measures on (0, inf) and their analytic transforms.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/special_functions/beta.hpp>

#include "freespike/errors.hpp"

namespace freespike {

/// Empirical probability measure: strictly ascending positive atoms with positive weights.
///
/// Construction canonicalizes its input. Atoms closer than `kMergeTolerance` are merged
/// (weights summed) and the weights are renormalized so that they sum to one to
/// within 1e-12.
class AtomicMeasure {
 public:
  static constexpr double kMergeTolerance = 1e-12;

  AtomicMeasure(std::vector<double> atoms, std::vector<double> weights, std::string label = {})
      : label_(std::move(label)) {
    if (atoms.size() != weights.size()) {
      throw ConfigError("AtomicMeasure: atoms and weights differ in length");
    }
    if (atoms.empty()) {
      throw ConfigError("AtomicMeasure: empty measure");
    }
    std::vector<std::size_t> order(atoms.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t i, std::size_t j) { return atoms[i] < atoms[j]; });
    double total = 0.0;
    for (std::size_t k : order) {
      const double x = atoms[k];
      const double w = weights[k];
      if (!(x > 0.0) || !std::isfinite(x)) {
        throw ConfigError("AtomicMeasure: atoms must be finite and strictly positive");
      }
      if (!(w > 0.0) || !std::isfinite(w)) {
        throw ConfigError("AtomicMeasure: weights must be finite and strictly positive");
      }
      total += w;
      if (!atoms_.empty() && x - atoms_.back() <= kMergeTolerance) {
        weights_.back() += w;
      } else {
        atoms_.push_back(x);
        weights_.push_back(w);
      }
    }
    if (std::abs(total - 1.0) > 1e-8) {
      std::ostringstream os;
      os << "AtomicMeasure: weights sum to " << total << ", expected 1";
      throw ConfigError(os.str());
    }
    for (double& w : weights_) w /= total;
  }

  /// Equal-weight measure on the given (possibly repeated) atoms.
  static AtomicMeasure empirical(std::span<const double> atoms, std::string label = {}) {
    std::vector<double> x(atoms.begin(), atoms.end());
    std::vector<double> w(x.size(), 1.0 / static_cast<double>(x.size()));
    return AtomicMeasure(std::move(x), std::move(w), std::move(label));
  }

  static AtomicMeasure point_mass(double at) {
    return AtomicMeasure({at}, {1.0}, "delta");
  }

  std::span<const double> atoms() const { return atoms_; }
  std::span<const double> weights() const { return weights_; }
  const std::string& label() const { return label_; }
  std::size_t size() const { return atoms_.size(); }
  double min_atom() const { return atoms_.front(); }
  double max_atom() const { return atoms_.back(); }

  double mean() const {
    double s = 0.0;
    for (std::size_t k = 0; k < atoms_.size(); ++k) s += atoms_[k] * weights_[k];
    return s;
  }

  /// Right-continuous CDF, F(x) = mu((-inf, x]).
  double cdf(double x) const {
    auto it = std::upper_bound(atoms_.begin(), atoms_.end(), x);
    return prefix_mass(static_cast<std::size_t>(it - atoms_.begin()));
  }

  /// Left limit F(x-) = mu((-inf, x)).
  double cdf_left(double x) const {
    auto it = std::lower_bound(atoms_.begin(), atoms_.end(), x);
    return prefix_mass(static_cast<std::size_t>(it - atoms_.begin()));
  }

  /// Distance from a real point to the nearest atom.
  double distance_to_support(double x) const {
    auto it = std::lower_bound(atoms_.begin(), atoms_.end(), x);
    double d = std::numeric_limits<double>::infinity();
    if (it != atoms_.end()) d = std::min(d, std::abs(*it - x));
    if (it != atoms_.begin()) d = std::min(d, std::abs(*(it - 1) - x));
    return d;
  }

 private:
  double prefix_mass(std::size_t count) const {
    if (count == atoms_.size()) return 1.0;
    double s = 0.0;
    for (std::size_t k = 0; k < count; ++k) s += weights_[k];
    return std::min(s, 1.0);
  }

  std::vector<double> atoms_;
  std::vector<double> weights_;
  std::string label_;
};

namespace detail {

inline void check_off_atoms(const AtomicMeasure& mu, Complex z) {
  if (z.imag() != 0.0) return;
  const double d = mu.distance_to_support(z.real());
  if (d <= 1e-14) {
    std::ostringstream os;
    os.precision(17);
    os << "transform evaluated on an atom of '" << mu.label() << "' at x = " << z.real();
    throw DomainError(os.str());
  }
}

}  // namespace detail

/// Moments of 1/(x-z) needed by every transform, computed in one pass.
struct TransformSums {
  Complex s1;   // sum w/(x-z)            = m(z)
  Complex s2;   // sum w/(x-z)^2          = m'(z)
  Complex j1;   // sum w x/(x-z)          = 1 + z m(z)
  Complex j2;   // sum w x/(x-z)^2        = d/dz j1
};

inline TransformSums transform_sums(const AtomicMeasure& mu, Complex z) {
  detail::check_off_atoms(mu, z);
  TransformSums s{};
  const auto x = mu.atoms();
  const auto w = mu.weights();
  for (std::size_t k = 0; k < x.size(); ++k) {
    const Complex inv = 1.0 / (x[k] - z);
    const Complex winv = w[k] * inv;
    s.s1 += winv;
    s.s2 += winv * inv;
    s.j1 += x[k] * winv;
    s.j2 += x[k] * winv * inv;
  }
  return s;
}

/// Stieltjes transform m(z) = sum_k w_k / (x_k - z).
inline Complex stieltjes(const AtomicMeasure& mu, Complex z) {
  detail::check_off_atoms(mu, z);
  Complex s{};
  const auto x = mu.atoms();
  const auto w = mu.weights();
  for (std::size_t k = 0; k < x.size(); ++k) s += w[k] / (x[k] - z);
  return s;
}

/// M-transform in its rational form z m / (1 + z m).
inline Complex m_transform(const AtomicMeasure& mu, Complex z) {
  const Complex zm = z * stieltjes(mu, z);
  if (std::abs(1.0 + zm) <= 1e-14) {
    throw DomainError("m_transform: 1 + z m(z) vanishes (pole of the M-transform)");
  }
  return zm / (1.0 + zm);
}

/// M-transform in its integral form 1 - (int x/(x-z) dmu)^{-1}.
inline Complex m_transform_integral(const AtomicMeasure& mu, Complex z) {
  const TransformSums s = transform_sums(mu, z);
  if (std::abs(s.j1) <= 1e-14) {
    throw DomainError("m_transform: int x/(x-z) dmu vanishes (pole of the M-transform)");
  }
  return 1.0 - 1.0 / s.j1;
}

/// L-transform M(z)/z.
inline Complex l_transform(const AtomicMeasure& mu, Complex z) {
  if (z == Complex{}) throw DomainError("l_transform: z = 0");
  return m_transform(mu, z) / z;
}

/// Exact derivative of the rational function M.
inline Complex m_transform_derivative(const AtomicMeasure& mu, Complex z) {
  const TransformSums s = transform_sums(mu, z);
  if (std::abs(s.j1) <= 1e-14) {
    throw DomainError("m_transform_derivative: pole of the M-transform");
  }
  return s.j2 / (s.j1 * s.j1);
}

/// M and M' evaluated together from the integral form; used by the solvers.
struct MValue {
  Complex value;
  Complex derivative;
};

inline MValue m_transform_with_derivative(const AtomicMeasure& mu, Complex z) {
  const TransformSums s = transform_sums(mu, z);
  if (std::abs(s.j1) <= 1e-14) {
    throw DomainError("M-transform pole encountered");
  }
  return {1.0 - 1.0 / s.j1, s.j2 / (s.j1 * s.j1)};
}

// ---------------------------------------------------------------------------
// Piecewise-linear densities (tables and grid densities share this)

/// Density that is linear between nodes and zero outside [x.front(), x.back()].
class PiecewiseLinearDensity {
 public:
  PiecewiseLinearDensity() = default;

  PiecewiseLinearDensity(std::vector<double> x, std::vector<double> rho)
      : x_(std::move(x)), rho_(std::move(rho)) {
    if (x_.size() != rho_.size() || x_.size() < 2) {
      throw ConfigError("piecewise-linear density needs >= 2 matching nodes");
    }
    cum_.assign(x_.size(), 0.0);
    for (std::size_t k = 0; k + 1 < x_.size(); ++k) {
      if (!(x_[k + 1] > x_[k])) throw ConfigError("density nodes must be strictly ascending");
      if (rho_[k] < 0.0 || rho_[k + 1] < 0.0) throw ConfigError("density values must be >= 0");
      cum_[k + 1] = cum_[k] + 0.5 * (x_[k + 1] - x_[k]) * (rho_[k] + rho_[k + 1]);
    }
  }

  double total() const { return cum_.back(); }
  std::span<const double> nodes() const { return x_; }
  std::span<const double> values() const { return rho_; }

  /// Unnormalized mass of (-inf, x].
  double mass_below(double x) const {
    if (x <= x_.front()) return 0.0;
    if (x >= x_.back()) return total();
    const std::size_t k =
        static_cast<std::size_t>(std::upper_bound(x_.begin(), x_.end(), x) - x_.begin()) - 1;
    const double h = x_[k + 1] - x_[k];
    const double u = x - x_[k];
    const double slope = (rho_[k + 1] - rho_[k]) / h;
    return cum_[k] + rho_[k] * u + 0.5 * slope * u * u;
  }

  double density(double x) const {
    if (x < x_.front() || x > x_.back()) return 0.0;
    const std::size_t k = std::min<std::size_t>(
        static_cast<std::size_t>(std::upper_bound(x_.begin(), x_.end(), x) - x_.begin()) - 1,
        x_.size() - 2);
    const double t = (x - x_[k]) / (x_[k + 1] - x_[k]);
    return (1.0 - t) * rho_[k] + t * rho_[k + 1];
  }

  /// Smallest x with mass_below(x) = target, target in [0, total].
  double inverse_mass(double target) const {
    target = std::clamp(target, 0.0, total());
    // first cell whose cumulative end reaches the target and carries mass
    std::size_t k = 0;
    while (k + 2 < x_.size() && (cum_[k + 1] < target || cum_[k + 1] == cum_[k])) ++k;
    const double h = x_[k + 1] - x_[k];
    const double q = target - cum_[k];
    const double slope = (rho_[k + 1] - rho_[k]) / h;
    double u = 0.0;
    if (q > 0.0) {
      const double disc = std::max(rho_[k] * rho_[k] + 2.0 * slope * q, 0.0);
      const double denom = rho_[k] + std::sqrt(disc);
      u = denom > 0.0 ? 2.0 * q / denom : h;
    }
    return x_[k] + std::clamp(u, 0.0, h);
  }

  /// int x rho(x) dx, exact for the linear interpolant.
  double first_moment() const {
    double s = 0.0;
    for (std::size_t k = 0; k + 1 < x_.size(); ++k) {
      const double h = x_[k + 1] - x_[k];
      s += h / 6.0 * (rho_[k] * (2.0 * x_[k] + x_[k + 1]) + rho_[k + 1] * (x_[k] + 2.0 * x_[k + 1]));
    }
    return s;
  }

  double mass_in_cell(std::size_t k) const { return cum_[k + 1] - cum_[k]; }

 private:
  std::vector<double> x_;
  std::vector<double> rho_;
  std::vector<double> cum_;
};

// ---------------------------------------------------------------------------
// Limiting densities

enum class DensityKind { uniform, beta_like, table, point };

/// A limiting law mu_alpha / mu_beta. Absolutely continuous except for `point`, which
/// exists so that identity configurations (B = I) can be described in the same way.
class DensitySpec {
 public:
  static DensitySpec uniform(double lo, double hi, bool normalize_mean = true) {
    DensitySpec s(DensityKind::uniform);
    s.lo_ = lo;
    s.hi_ = hi;
    s.validate_interval();
    if (normalize_mean) s.rescale(1.0 / s.mean());
    return s;
  }

  /// Density proportional to (x-lo)^t_minus (hi-x)^t_plus on [lo, hi].
  static DensitySpec beta_like(double lo, double hi, double t_minus, double t_plus,
                               bool normalize_mean = true) {
    if (!(t_minus > -1.0 && t_minus < 1.0 && t_plus > -1.0 && t_plus < 1.0)) {
      throw ConfigError("beta-like density: edge exponents must lie in (-1, 1)");
    }
    DensitySpec s(DensityKind::beta_like);
    s.lo_ = lo;
    s.hi_ = hi;
    s.t_minus_ = t_minus;
    s.t_plus_ = t_plus;
    s.validate_interval();
    if (normalize_mean) s.rescale(1.0 / s.mean());
    return s;
  }

  /// Piecewise-linear density through (x_k, rho_k); the mass is normalized to one.
  static DensitySpec table(std::vector<double> x, std::vector<double> rho,
                           bool normalize_mean = true) {
    DensitySpec s(DensityKind::table);
    if (x.empty() || !(x.front() > 0.0)) {
      throw ConfigError("table density: support must lie in (0, inf)");
    }
    PiecewiseLinearDensity raw(x, rho);
    const double mass = raw.total();
    if (!(mass > 0.0) || !std::isfinite(mass)) {
      throw ConfigError("table density: cannot normalize (zero or non-finite mass)");
    }
    for (double& r : rho) r /= mass;
    s.table_ = PiecewiseLinearDensity(std::move(x), std::move(rho));
    s.lo_ = s.table_.nodes().front();
    s.hi_ = s.table_.nodes().back();
    if (normalize_mean) s.rescale(1.0 / s.mean());
    return s;
  }

  static DensitySpec point(double at, bool normalize_mean = true) {
    if (!(at > 0.0)) throw ConfigError("point mass must sit in (0, inf)");
    DensitySpec s(DensityKind::point);
    s.lo_ = s.hi_ = normalize_mean ? 1.0 : at;
    return s;
  }

  DensityKind kind() const { return kind_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }
  double t_minus() const { return t_minus_; }
  double t_plus() const { return t_plus_; }
  bool is_atomic() const { return kind_ == DensityKind::point; }
  const PiecewiseLinearDensity& table_density() const { return table_; }

  std::string name() const {
    std::ostringstream os;
    switch (kind_) {
      case DensityKind::uniform: os << "uniform(" << lo_ << "," << hi_ << ")"; break;
      case DensityKind::beta_like:
        os << "beta(" << lo_ << "," << hi_ << "," << t_minus_ << "," << t_plus_ << ")";
        break;
      case DensityKind::table: os << "table[" << table_.nodes().size() << "]"; break;
      case DensityKind::point: os << "delta(" << lo_ << ")"; break;
    }
    return os.str();
  }

  double mean() const {
    switch (kind_) {
      case DensityKind::uniform: return 0.5 * (lo_ + hi_);
      case DensityKind::beta_like: {
        const double a = t_minus_ + 1.0;
        const double b = t_plus_ + 1.0;
        return lo_ + (hi_ - lo_) * a / (a + b);
      }
      case DensityKind::table: return table_.first_moment();
      case DensityKind::point: return lo_;
    }
    return 0.0;
  }

  double cdf(double x) const {
    switch (kind_) {
      case DensityKind::uniform: return std::clamp((x - lo_) / (hi_ - lo_), 0.0, 1.0);
      case DensityKind::beta_like: {
        if (x <= lo_) return 0.0;
        if (x >= hi_) return 1.0;
        return boost::math::ibeta(t_minus_ + 1.0, t_plus_ + 1.0, (x - lo_) / (hi_ - lo_));
      }
      case DensityKind::table: return std::min(table_.mass_below(x), 1.0);
      case DensityKind::point: return x >= lo_ ? 1.0 : 0.0;
    }
    return 0.0;
  }

  double cdf_left(double x) const {
    if (kind_ == DensityKind::point) return x > lo_ ? 1.0 : 0.0;
    return cdf(x);
  }

  double density(double x) const {
    switch (kind_) {
      case DensityKind::uniform: return (x >= lo_ && x <= hi_) ? 1.0 / (hi_ - lo_) : 0.0;
      case DensityKind::beta_like: {
        if (x <= lo_ || x >= hi_) return 0.0;
        return boost::math::ibeta_derivative(t_minus_ + 1.0, t_plus_ + 1.0,
                                             (x - lo_) / (hi_ - lo_)) /
               (hi_ - lo_);
      }
      case DensityKind::table: return table_.density(x);
      case DensityKind::point: return 0.0;
    }
    return 0.0;
  }

  /// Left-continuous inverse of the CDF, p in [0, 1].
  double quantile(double p) const {
    p = std::clamp(p, 0.0, 1.0);
    switch (kind_) {
      case DensityKind::uniform: return lo_ + p * (hi_ - lo_);
      case DensityKind::beta_like:
        if (p <= 0.0) return lo_;
        if (p >= 1.0) return hi_;
        return lo_ + (hi_ - lo_) * boost::math::ibeta_inv(t_minus_ + 1.0, t_plus_ + 1.0, p);
      case DensityKind::table: return table_.inverse_mass(p * table_.total());
      case DensityKind::point: return lo_;
    }
    return lo_;
  }

 private:
  explicit DensitySpec(DensityKind kind) : kind_(kind) {}

  void validate_interval() const {
    if (!(lo_ > 0.0) || !(hi_ > lo_) || !std::isfinite(hi_)) {
      throw ConfigError("density support must be a non-empty interval inside (0, inf)");
    }
  }

  void rescale(double c) {
    lo_ *= c;
    hi_ *= c;
    if (kind_ == DensityKind::table) {
      std::vector<double> x(table_.nodes().begin(), table_.nodes().end());
      std::vector<double> rho(table_.values().begin(), table_.values().end());
      for (double& v : x) v *= c;
      for (double& v : rho) v /= c;
      table_ = PiecewiseLinearDensity(std::move(x), std::move(rho));
      lo_ = table_.nodes().front();
      hi_ = table_.nodes().back();
    }
  }

  DensityKind kind_;
  double lo_ = 0.0;
  double hi_ = 0.0;
  double t_minus_ = 0.0;
  double t_plus_ = 0.0;
  PiecewiseLinearDensity table_;
};

/// Atoms at the (j - 1/2)/n quantiles of the spec, each of weight 1/n.
inline AtomicMeasure discretize(const DensitySpec& spec, std::size_t n) {
  if (n < 2) throw ConfigError("discretize: need n >= 2 atoms");
  std::vector<double> atoms(n);
  for (std::size_t j = 0; j < n; ++j) {
    atoms[j] = spec.quantile((static_cast<double>(j) + 0.5) / static_cast<double>(n));
  }
  return AtomicMeasure::empirical(atoms, spec.name() + "[" + std::to_string(n) + "]");
}

// ---------------------------------------------------------------------------
// Levy distance

namespace detail {

struct CdfView {
  std::function<double(double)> right;
  std::function<double(double)> left;
  std::vector<double> jumps;
  double lo;
  double hi;
};

inline CdfView view_of(const AtomicMeasure& mu) {
  return {[&mu](double x) { return mu.cdf(x); }, [&mu](double x) { return mu.cdf_left(x); },
          std::vector<double>(mu.atoms().begin(), mu.atoms().end()), mu.min_atom(),
          mu.max_atom()};
}

inline CdfView view_of(const DensitySpec& spec) {
  std::vector<double> jumps;
  if (spec.is_atomic()) jumps.push_back(spec.lo());
  return {[&spec](double x) { return spec.cdf(x); },
          [&spec](double x) { return spec.cdf_left(x); }, std::move(jumps), spec.lo(), spec.hi()};
}

// sup_x [G(x) - F(x + eps)]. The supremum of a difference of nondecreasing
// right-continuous functions is attained at a jump of G or approached from the left of a
// shifted jump of F; two continuous CDFs fall back to a dense scan.
inline double sup_excess(const CdfView& g, const CdfView& f, double eps) {
  double best = 0.0;
  for (double x : g.jumps) best = std::max(best, g.right(x) - f.right(x + eps));
  for (double y : f.jumps) best = std::max(best, g.left(y - eps) - f.left(y));
  if (g.jumps.empty() && f.jumps.empty()) {
    const double lo = std::min(g.lo, f.lo - eps);
    const double hi = std::max(g.hi, f.hi - eps);
    constexpr int kScan = 8192;
    for (int k = 0; k <= kScan; ++k) {
      const double x = lo + (hi - lo) * k / kScan;
      best = std::max(best, g.right(x) - f.right(x + eps));
    }
  }
  return best;
}

inline double levy_from_views(const CdfView& f, const CdfView& g) {
  auto ok = [&](double eps) {
    return sup_excess(g, f, eps) <= eps && sup_excess(f, g, eps) <= eps;
  };
  if (ok(0.0)) return 0.0;
  double lo = 0.0;
  double hi = 1.0;
  for (int it = 0; it < 200 && hi - lo > 1e-17; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    (ok(mid) ? hi : lo) = mid;
  }
  return hi;
}

}  // namespace detail

/// Levy distance between two laws given as atomic measures and/or density specs.
///
/// For step CDFs the admissibility of a trial epsilon is decided exactly from the
/// breakpoints; the infimum is then located by bisection to double precision.
template <typename F, typename G>
  requires((std::same_as<F, AtomicMeasure> || std::same_as<F, DensitySpec>) &&
           (std::same_as<G, AtomicMeasure> || std::same_as<G, DensitySpec>))
double levy_distance(const F& a, const G& b) {
  return detail::levy_from_views(detail::view_of(a), detail::view_of(b));
}

// ---------------------------------------------------------------------------
// Densities sampled on grids

/// Density values on an ascending grid, as produced by Stieltjes inversion.
struct GridDensity {
  std::vector<double> grid;
  std::vector<double> values;
  double clipped_magnitude = 0.0;   // largest |negative value| clipped to zero
  std::vector<bool> failed;         // per-point solver failure mask (empty if none)

  double integral() const {
    double s = 0.0;
    for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
      s += 0.5 * (grid[k + 1] - grid[k]) * (values[k] + values[k + 1]);
    }
    return s;
  }

  double mean() const {
    double s = 0.0;
    for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
      s += 0.5 * (grid[k + 1] - grid[k]) * (grid[k] * values[k] + grid[k + 1] * values[k + 1]);
    }
    return s / integral();
  }

  bool any_failed() const { return std::find(failed.begin(), failed.end(), true) != failed.end(); }
};

struct QuantileResult {
  std::vector<double> gamma;       // gamma_1 >= gamma_2 >= ... >= gamma_N
  bool precision_warning = false;  // top-cell mass exceeds 1/N or support looks truncated
};

/// Typical locations: gamma_j with int_{gamma_j}^inf rho = j/N, j = 1..N.
inline QuantileResult quantile_locations(const GridDensity& density, std::size_t n) {
  if (n == 0) throw DomainError("quantile_locations: N must be positive");
  const double total = density.integral();
  if (std::abs(total - 1.0) > 5e-3) {
    std::ostringstream os;
    os << "quantile_locations: density integrates to " << total << ", not 1 +- 5e-3";
    throw DomainError(os.str());
  }
  PiecewiseLinearDensity pl(density.grid, density.values);
  QuantileResult out;
  out.gamma.resize(n);
  for (std::size_t j = 1; j <= n; ++j) {
    const double tail = static_cast<double>(j) / static_cast<double>(n);
    out.gamma[j - 1] = pl.inverse_mass(pl.total() * (1.0 - tail));
  }
  // resolution check: the topmost cell carrying mass should hold less than 1/N
  const double vmax = *std::max_element(density.values.begin(), density.values.end());
  for (std::size_t k = density.grid.size() - 1; k-- > 0;) {
    const double m = pl.mass_in_cell(k) / pl.total();
    if (m > 0.0) {
      out.precision_warning = m > 1.0 / static_cast<double>(n);
      break;
    }
  }
  if (density.values.back() > 1e-3 * vmax) out.precision_warning = true;
  return out;
}

}  // namespace freespike
