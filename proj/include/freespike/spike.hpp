#pragma once

// Spiked multiplicative model and the closed-form predictions for its outliers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "freespike/edge.hpp"
#include "freespike/errors.hpp"
#include "freespike/measure.hpp"
#include "freespike/subordination.hpp"

namespace freespike {

enum class Side { a, b };

inline const char* side_name(Side s) { return s == Side::a ? "a" : "b"; }

/// Descending diagonal of length N whose empirical law is discretize(spec, N).
inline std::vector<double> base_diagonal(const DensitySpec& spec, std::size_t n) {
  if (n < 2) throw ConfigError("matrix dimension N must be at least 2");
  std::vector<double> d(n);
  if (spec.is_atomic()) {
    std::fill(d.begin(), d.end(), spec.lo());
    return d;
  }
  for (std::size_t j = 0; j < n; ++j) {
    d[j] = spec.quantile((static_cast<double>(n - 1 - j) + 0.5) / static_cast<double>(n));
  }
  return d;
}

/// Base diagonals a, b and spike strengths. The first r entries of a carry the a-spikes and
/// are stored so that a_hat is descending (pairs (a_k, d_k) are reordered together); the same
/// holds for b.
class SpikeModel {
 public:
  static constexpr std::size_t kMaxSpikes = 32;

  SpikeModel(std::vector<double> base_a, std::vector<double> base_b, std::vector<double> d_a,
             std::vector<double> d_b) {
    if (base_a.size() != base_b.size()) throw ConfigError("SpikeModel: base diagonals differ in length");
    if (base_a.size() < 2) throw ConfigError("SpikeModel: N must be at least 2");
    if (d_a.size() > base_a.size() || d_b.size() > base_b.size()) {
      throw ConfigError("SpikeModel: more spikes than dimensions");
    }
    if (d_a.size() + d_b.size() > kMaxSpikes) throw ConfigError("SpikeModel: r + s must be <= 32");
    for (double v : base_a) check_positive(v, "base_a");
    for (double v : base_b) check_positive(v, "base_b");
    for (double v : d_a) check_strength(v);
    for (double v : d_b) check_strength(v);
    std::sort(base_a.begin(), base_a.end(), std::greater<>());
    std::sort(base_b.begin(), base_b.end(), std::greater<>());
    arrange(base_a, d_a, a_, d_a_, a_hat_);
    arrange(base_b, d_b, b_, d_b_, b_hat_);
  }

  static SpikeModel from_specs(const DensitySpec& alpha, const DensitySpec& beta, std::size_t n,
                               std::vector<double> d_a, std::vector<double> d_b) {
    return SpikeModel(base_diagonal(alpha, n), base_diagonal(beta, n), std::move(d_a), std::move(d_b));
  }

  std::size_t N() const { return a_.size(); }
  std::size_t r() const { return d_a_.size(); }
  std::size_t s() const { return d_b_.size(); }
  std::span<const double> a() const { return a_; }
  std::span<const double> b() const { return b_; }
  std::span<const double> d_a() const { return d_a_; }
  std::span<const double> d_b() const { return d_b_; }
  std::span<const double> a_hat() const { return a_hat_; }
  std::span<const double> b_hat() const { return b_hat_; }

  AtomicMeasure mu_a() const { return AtomicMeasure::empirical(a_, "mu_A"); }
  AtomicMeasure mu_b() const { return AtomicMeasure::empirical(b_, "mu_B"); }

  std::span<const double> base(Side s) const { return s == Side::a ? a() : b(); }
  std::span<const double> spiked(Side s) const { return s == Side::a ? a_hat() : b_hat(); }
  std::span<const double> strengths(Side s) const { return s == Side::a ? d_a() : d_b(); }

 private:
  static void check_positive(double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw ConfigError(std::string("SpikeModel: ") + what + " entries must be positive and finite");
    }
  }
  static void check_strength(double v) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("SpikeModel: spike strengths must be >= 0");
  }

  static void arrange(const std::vector<double>& base, const std::vector<double>& d,
                      std::vector<double>& out_base, std::vector<double>& out_d,
                      std::vector<double>& out_hat) {
    const std::size_t r = d.size();
    std::vector<std::size_t> order(r);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
      return base[i] * (1.0 + d[i]) > base[j] * (1.0 + d[j]);
    });
    out_base = base;
    out_d.resize(r);
    for (std::size_t k = 0; k < r; ++k) {
      out_base[k] = base[order[k]];
      out_d[k] = d[order[k]];
    }
    out_hat = out_base;
    for (std::size_t k = 0; k < r; ++k) out_hat[k] = out_base[k] * (1.0 + out_d[k]);
  }

  std::vector<double> a_, b_, d_a_, d_b_, a_hat_, b_hat_;
};

/// The model, the unspiked pair (mu_A, mu_B) and its edge.
struct SpikeContext {
  SpikeModel model;
  AtomicMeasure mu_a;
  AtomicMeasure mu_b;
  EdgeData edge;
  double threshold_multiplier = 1.0;  // O^+ requires a margin of multiplier * N^{-1/3}

  static SpikeContext build(SpikeModel model, const EdgeOptions& eopts = {},
                            double threshold_multiplier = 1.0) {
    AtomicMeasure a = model.mu_a();
    AtomicMeasure b = model.mu_b();
    EdgeData e = locate_upper_edge(a, b, eopts);
    return SpikeContext{std::move(model), std::move(a), std::move(b), e, threshold_multiplier};
  }

  double threshold(Side s) const { return s == Side::a ? edge.omega_b_edge : edge.omega_a_edge; }
  double margin_cut() const {
    return threshold_multiplier * std::pow(static_cast<double>(model.N()), -1.0 / 3.0);
  }

  /// Omega_B^{-1}(a_hat) (side a) or Omega_A^{-1}(b_hat) (side b), E_+ below threshold.
  double inverse(Side s, double value) const {
    return s == Side::a ? inverse_omega_B(edge, mu_a, mu_b, value)
                        : inverse_omega_A(edge, mu_a, mu_b, value);
  }
  double inverse_derivative(Side s, double value) const {
    return s == Side::a ? inverse_omega_B_derivative(edge, mu_a, mu_b, value)
                        : inverse_omega_A_derivative(edge, mu_a, mu_b, value);
  }
  /// Omega_A(Omega_B^{-1}(a_hat)) for side a, Omega_B(Omega_A^{-1}(b_hat)) for side b.
  double opposite_image(Side s, double value) const {
    if (value <= threshold(s)) {
      throw DomainError("opposite_image: argument is not above its threshold");
    }
    const SubordinationValue v = s == Side::a ? subordination_at_inverse_B(edge, mu_a, mu_b, value)
                                              : subordination_at_inverse_A(edge, mu_a, mu_b, value);
    return s == Side::a ? v.omega_a.real() : v.omega_b.real();
  }
};

struct LabelMap {
  std::vector<std::size_t> pi_a;  // pi_a[i] is the 1-based label of a-index i (0-based)
  std::vector<std::size_t> pi_b;
  std::vector<std::size_t> O;       // ascending labels
  std::vector<std::size_t> O_plus;  // ascending labels
  std::size_t r = 0, s = 0, r_plus = 0, s_plus = 0;
  std::vector<double> location_a;   // Omega_B^{-1}(a_hat_i), i < r
  std::vector<double> location_b;

  std::size_t label(Side side, std::size_t index) const {
    return side == Side::a ? pi_a[index] : pi_b[index];
  }
  bool in_O_plus(std::size_t lab) const {
    return std::binary_search(O_plus.begin(), O_plus.end(), lab);
  }
  bool in_O(std::size_t lab) const { return std::binary_search(O.begin(), O.end(), lab); }

  /// Spike (side, index) carrying label `lab`, if the label belongs to a spike.
  std::optional<std::pair<Side, std::size_t>> spike_with_label(std::size_t lab) const {
    for (std::size_t i = 0; i < r; ++i) {
      if (pi_a[i] == lab) return std::make_pair(Side::a, i);
    }
    for (std::size_t j = 0; j < s; ++j) {
      if (pi_b[j] == lab) return std::make_pair(Side::b, j);
    }
    return std::nullopt;
  }
};

/// Labels pi_a, pi_b and outlier sets O, O^+ for the spiked model.
inline LabelMap classify(const SpikeContext& ctx) {
  const SpikeModel& m = ctx.model;
  const std::size_t n = m.N();
  LabelMap L;
  L.r = m.r();
  L.s = m.s();
  L.pi_a.resize(n);
  L.pi_b.resize(n);
  struct Item {
    double loc;
    Side side;
    std::size_t index;
  };
  std::vector<Item> items;
  for (std::size_t i = 0; i < L.r; ++i) {
    L.location_a.push_back(ctx.inverse(Side::a, m.a_hat()[i]));
    items.push_back({L.location_a.back(), Side::a, i});
  }
  for (std::size_t j = 0; j < L.s; ++j) {
    L.location_b.push_back(ctx.inverse(Side::b, m.b_hat()[j]));
    items.push_back({L.location_b.back(), Side::b, j});
  }
  std::stable_sort(items.begin(), items.end(), [](const Item& x, const Item& y) {
    if (x.loc != y.loc) return x.loc > y.loc;
    if (x.side != y.side) return x.side == Side::a;
    return x.index < y.index;
  });
  for (std::size_t k = 0; k < items.size(); ++k) {
    (items[k].side == Side::a ? L.pi_a : L.pi_b)[items[k].index] = k + 1;
  }
  for (std::size_t i = L.r; i < n; ++i) L.pi_a[i] = std::min(i + 1 + L.s, n);
  for (std::size_t j = L.s; j < n; ++j) L.pi_b[j] = std::min(j + 1 + L.r, n);

  const double cut = ctx.margin_cut();
  for (Side side : {Side::a, Side::b}) {
    const std::size_t count = side == Side::a ? L.r : L.s;
    const double thr = ctx.threshold(side);
    for (std::size_t i = 0; i < count; ++i) {
      const double v = m.spiked(side)[i];
      const std::size_t lab = L.label(side, i);
      if (v > thr) L.O.push_back(lab);
      if (v >= thr + cut) {
        L.O_plus.push_back(lab);
        (side == Side::a ? L.r_plus : L.s_plus) += 1;
      }
    }
  }
  std::sort(L.O.begin(), L.O.end());
  std::sort(L.O_plus.begin(), L.O_plus.end());
  return L;
}

struct SpikePrediction {
  Side side = Side::a;
  std::size_t index = 0;  // 0-based position on its side
  std::size_t label = 0;
  double spiked_value = 0.0;
  double strength = 0.0;
  double threshold = 0.0;
  double margin = 0.0;  // spiked_value - threshold
  double Delta = 0.0;   // sqrt(margin) for supercritical spikes
  bool outlier = false;    // label in O
  bool resolved = false;   // label in O^+
  double location = 0.0;
  double rate_bound = 0.0;
  double overlap = std::numeric_limits<double>::quiet_NaN();  // g for S = {label}, v = e_index
  double overlap_budget = std::numeric_limits<double>::quiet_NaN();
};

struct ExtremalPrediction {
  std::size_t rank = 0;
  double location = 0.0;
  double rate_bound = 0.0;
};

struct StickingBound {
  double gamma = 0.0;
  double bound = 0.0;
  bool degenerate = false;     // gamma = 0: bound is infinite
  bool near_critical = false;  // gamma below N^{-1/3}
};

struct PredictionSet {
  std::size_t N = 0;
  EdgeData edge;
  LabelMap labels;
  std::vector<SpikePrediction> spikes;       // sorted by label
  std::vector<ExtremalPrediction> extremal;  // ranks r^+ + s^+ + 1 .. varpi
  std::optional<StickingBound> sticking;
};

/// Outlier locations and rate bounds for every spike, plus extremal non-outlier ranks.
inline PredictionSet predict_outlier_locations(const SpikeContext& ctx, const LabelMap& L,
                                               std::size_t varpi = 10) {
  const SpikeModel& m = ctx.model;
  const double n = static_cast<double>(m.N());
  PredictionSet P;
  P.N = m.N();
  P.edge = ctx.edge;
  P.labels = L;
  for (Side side : {Side::a, Side::b}) {
    const std::size_t count = side == Side::a ? L.r : L.s;
    for (std::size_t i = 0; i < count; ++i) {
      SpikePrediction p;
      p.side = side;
      p.index = i;
      p.label = L.label(side, i);
      p.spiked_value = m.spiked(side)[i];
      p.strength = m.strengths(side)[i];
      p.threshold = ctx.threshold(side);
      p.margin = p.spiked_value - p.threshold;
      p.outlier = L.in_O(p.label);
      p.resolved = L.in_O_plus(p.label);
      if (p.resolved) {
        p.Delta = std::sqrt(p.margin);
        p.location = side == Side::a ? L.location_a[i] : L.location_b[i];
        p.rate_bound = p.Delta / std::sqrt(n);
      } else {
        p.Delta = p.margin > 0.0 ? std::sqrt(p.margin) : 0.0;
        p.location = ctx.edge.E_plus;
        p.rate_bound = std::pow(n, -2.0 / 3.0);
      }
      P.spikes.push_back(p);
    }
  }
  std::sort(P.spikes.begin(), P.spikes.end(),
            [](const SpikePrediction& x, const SpikePrediction& y) { return x.label < y.label; });
  for (std::size_t k = L.r_plus + L.s_plus + 1; k <= std::min<std::size_t>(varpi, m.N()); ++k) {
    P.extremal.push_back({k, ctx.edge.E_plus, std::pow(n, -2.0 / 3.0)});
  }
  return P;
}

/// Separation quantities for a set S of resolved outlier labels.
struct SeparationTable {
  std::vector<double> delta_a;  // delta_{pi_a(i)}(S), i = 0..N-1
  std::vector<double> delta_b;  // delta_{pi_b(j)}(S)
  std::vector<double> image_a;  // Omega_A(Omega_B^{-1}(a_hat_i)) for a-spikes in S, NaN otherwise
  std::vector<double> image_b;  // Omega_B(Omega_A^{-1}(b_hat_j)) for b-spikes in S
};

namespace detail {

inline void check_subset(const LabelMap& L, std::span<const std::size_t> S) {
  for (std::size_t lab : S) {
    if (!L.in_O_plus(lab)) {
      std::ostringstream os;
      os << "label " << lab << " is not a resolved outlier (S must be a subset of O^+)";
      throw DomainError(os.str());
    }
  }
}

inline bool contains(std::span<const std::size_t> S, std::size_t lab) {
  return std::find(S.begin(), S.end(), lab) != S.end();
}

}  // namespace detail

inline SeparationTable separations(const SpikeContext& ctx, const LabelMap& L,
                                   std::span<const std::size_t> S) {
  detail::check_subset(L, S);
  const SpikeModel& m = ctx.model;
  const std::size_t n = m.N();
  const double inf = std::numeric_limits<double>::infinity();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  SeparationTable T;
  T.image_a.assign(L.r, nan);
  T.image_b.assign(L.s, nan);
  std::vector<std::size_t> in_a, in_b;  // spike indices whose labels lie in S
  for (std::size_t i = 0; i < L.r; ++i) {
    if (detail::contains(S, L.pi_a[i])) {
      in_a.push_back(i);
      T.image_a[i] = ctx.opposite_image(Side::a, m.a_hat()[i]);
    }
  }
  for (std::size_t j = 0; j < L.s; ++j) {
    if (detail::contains(S, L.pi_b[j])) {
      in_b.push_back(j);
      T.image_b[j] = ctx.opposite_image(Side::b, m.b_hat()[j]);
    }
  }
  auto a_in_S = [&](std::size_t i) { return i < L.r && detail::contains(S, L.pi_a[i]); };
  auto b_in_S = [&](std::size_t j) { return j < L.s && detail::contains(S, L.pi_b[j]); };
  const auto ah = m.a_hat();
  const auto bh = m.b_hat();

  T.delta_a.assign(n, inf);
  for (std::size_t i = 0; i < n; ++i) {
    double d = inf;
    if (a_in_S(i)) {
      for (std::size_t k = 0; k < n; ++k) {
        if (!a_in_S(k)) d = std::min(d, std::abs(ah[i] - ah[k]));
      }
      for (std::size_t j = 0; j < n; ++j) {
        if (!b_in_S(j)) d = std::min(d, std::abs(bh[j] - T.image_a[i]));
      }
    } else {
      for (std::size_t k : in_a) d = std::min(d, std::abs(ah[k] - ah[i]));
      for (std::size_t j : in_b) d = std::min(d, std::abs(ah[i] - T.image_b[j]));
    }
    T.delta_a[i] = d;
  }
  T.delta_b.assign(n, inf);
  for (std::size_t j = 0; j < n; ++j) {
    double d = inf;
    if (b_in_S(j)) {
      for (std::size_t k = 0; k < n; ++k) {
        if (!a_in_S(k)) d = std::min(d, std::abs(ah[k] - T.image_b[j]));
      }
      for (std::size_t l = 0; l < n; ++l) {
        if (!b_in_S(l)) d = std::min(d, std::abs(bh[j] - bh[l]));
      }
    } else {
      for (std::size_t k : in_a) d = std::min(d, std::abs(bh[j] - T.image_a[k]));
      for (std::size_t l : in_b) d = std::min(d, std::abs(bh[l] - bh[j]));
    }
    T.delta_b[j] = d;
  }
  return T;
}

struct OverlapPrediction {
  double g_a = 0.0;
  double g_b = 0.0;
  double budget_a = 0.0;
  double budget_b = 0.0;
  SeparationTable separations;
};

/// Limits g_a(v, S), g_b(v, S) of <v, P_S v> (left and right vectors) and their error budgets.
inline OverlapPrediction predict_overlaps(const SpikeContext& ctx, const LabelMap& L,
                                          std::span<const std::size_t> S, std::span<const double> v) {
  const SpikeModel& m = ctx.model;
  const std::size_t n = m.N();
  if (v.size() != n) throw DomainError("predict_overlaps: vector length differs from N");
  OverlapPrediction out;
  out.separations = separations(ctx, L, S);
  const double nd = static_cast<double>(n);

  auto side_terms = [&](Side side, std::size_t count, std::span<const std::size_t> pi,
                        const std::vector<double>& delta, double& g, double& budget) {
    const auto hat = m.spiked(side);
    const double thr = ctx.threshold(side);
    double first = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      if (!detail::contains(S, pi[i])) continue;
      const double w = v[i] * v[i];
      const double x = ctx.inverse(side, hat[i]);
      g += hat[i] * ctx.inverse_derivative(side, hat[i]) / x * w;
      first += w / std::sqrt(nd * (hat[i] - thr));
    }
    double second = 0.0;
    double outside = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double w = v[i] * v[i];
      if (w == 0.0) continue;
      const double term = w / (nd * delta[i]);
      second += term;
      if (!(i < count && detail::contains(S, pi[i]))) outside += term;
    }
    budget = first + second + std::sqrt(std::max(g, 0.0) * outside);
  };
  side_terms(Side::a, L.r, L.pi_a, out.separations.delta_a, out.g_a, out.budget_a);
  side_terms(Side::b, L.s, L.pi_b, out.separations.delta_b, out.g_b, out.budget_b);
  return out;
}

/// Fills the singleton overlap (S = {label}, v = e_index) for every resolved spike.
inline void attach_singleton_overlaps(const SpikeContext& ctx, PredictionSet& P) {
  const std::size_t n = ctx.model.N();
  for (SpikePrediction& p : P.spikes) {
    if (!p.resolved) continue;
    std::vector<double> e(n, 0.0);
    e[p.index] = 1.0;
    const std::size_t S[] = {p.label};
    const OverlapPrediction o = predict_overlaps(ctx, P.labels, S, e);
    p.overlap = p.side == Side::a ? o.g_a : o.g_b;
    p.overlap_budget = p.side == Side::a ? o.budget_a : o.budget_b;
  }
}

/// Delocalization bound for the non-outlier eigenvector with index i (1-based) on `side`.
inline double predict_nonoutlier_bound(const SpikeContext& ctx, const LabelMap& L, Side side,
                                       std::size_t i, std::span<const double> v, double tau = 0.1) {
  const SpikeModel& m = ctx.model;
  const std::size_t n = m.N();
  const double nd = static_cast<double>(n);
  if (i < 1 || static_cast<double>(i) > tau * nd) {
    throw DomainError("predict_nonoutlier_bound: index outside 1..tau N");
  }
  if (L.in_O_plus(L.label(side, i - 1))) {
    throw DomainError("predict_nonoutlier_bound: index carries a resolved outlier label");
  }
  if (v.size() != n) throw DomainError("predict_nonoutlier_bound: vector length differs from N");
  const double kappa = std::pow(static_cast<double>(i), 2.0 / 3.0) * std::pow(nd, -2.0 / 3.0);
  const auto hat = m.spiked(side);
  const double thr = ctx.threshold(side);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double gap = hat[j] - thr;
    s += v[j] * v[j] / (nd * (kappa + gap * gap));
  }
  return s;
}

/// gamma = min distance of any spike to its threshold and the sticking bound 1/(N gamma).
inline StickingBound sticking_bound(const SpikeContext& ctx) {
  const SpikeModel& m = ctx.model;
  if (m.r() + m.s() == 0) throw DomainError("sticking_bound: no spikes, gamma is vacuous");
  double gamma = std::numeric_limits<double>::infinity();
  for (Side side : {Side::a, Side::b}) {
    const std::size_t count = side == Side::a ? m.r() : m.s();
    for (std::size_t i = 0; i < count; ++i) {
      gamma = std::min(gamma, std::abs(m.spiked(side)[i] - ctx.threshold(side)));
    }
  }
  StickingBound sb;
  sb.gamma = gamma;
  const double n = static_cast<double>(m.N());
  sb.degenerate = gamma <= 1e-12 * (1.0 + ctx.edge.omega_b_edge + ctx.edge.omega_a_edge);
  sb.bound = sb.degenerate ? std::numeric_limits<double>::infinity() : 1.0 / (n * gamma);
  sb.near_critical = gamma < std::pow(n, -1.0 / 3.0);
  return sb;
}

/// Full prediction: labels, locations, singleton overlaps and the sticking bound.
inline PredictionSet predict(const SpikeContext& ctx, std::size_t varpi = 10) {
  const LabelMap L = classify(ctx);
  PredictionSet P = predict_outlier_locations(ctx, L, varpi);
  attach_singleton_overlaps(ctx, P);
  if (ctx.model.r() + ctx.model.s() > 0) P.sticking = sticking_bound(ctx);
  return P;
}

/// Asymptotic master-equation factors (d+1)/d + Omega/(base - Omega) at real x > E_+.
/// Returns the a-factors followed by the b-factors; spikes with d = 0 give +inf.
inline std::vector<double> master_equation_factors(const SpikeContext& ctx, double x) {
  if (!(x > ctx.edge.E_plus)) throw DomainError("master_equation_factors: x must exceed E_+");
  const SubordinationValue v = solve(ctx.mu_a, ctx.mu_b, Complex(x, 0.0));
  const double wa = v.omega_a.real();
  const double wb = v.omega_b.real();
  const SpikeModel& m = ctx.model;
  std::vector<double> f;
  for (std::size_t i = 0; i < m.r(); ++i) {
    const double d = m.d_a()[i];
    f.push_back(d > 0.0 ? (d + 1.0) / d + wb / (m.a()[i] - wb)
                        : std::numeric_limits<double>::infinity());
  }
  for (std::size_t j = 0; j < m.s(); ++j) {
    const double d = m.d_b()[j];
    f.push_back(d > 0.0 ? (d + 1.0) / d + wa / (m.b()[j] - wa)
                        : std::numeric_limits<double>::infinity());
  }
  return f;
}

}  // namespace freespike
