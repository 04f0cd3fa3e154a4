#pragma once

// Experiment plans, Monte Carlo suites, rate fits and persistence.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "freespike/edge.hpp"
#include "freespike/errors.hpp"
#include "freespike/io.hpp"
#include "freespike/measure.hpp"
#include "freespike/rmt.hpp"
#include "freespike/spike.hpp"
#include "freespike/subordination.hpp"

namespace freespike {

// ---------------------------------------------------------------------------
// Statistics helpers

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  std::vector<double> N;
  std::vector<double> medians;
};

/// Least squares of log(median) on log(N). Needs at least three distinct N.
inline RateFit fit_rate(std::span<const double> n, std::span<const double> medians) {
  if (n.size() != medians.size()) throw DomainError("fit_rate: N and median lists differ in length");
  std::vector<double> distinct(n.begin(), n.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 3) throw PlanError("fit_rate: at least three N values are required");
  const std::size_t k = n.size();
  std::vector<double> x(k), y(k);
  for (std::size_t i = 0; i < k; ++i) {
    if (!(n[i] > 0.0) || !(medians[i] > 0.0)) {
      throw DomainError("fit_rate: N and medians must be positive to take logarithms");
    }
    x[i] = std::log(n[i]);
    y[i] = std::log(medians[i]);
  }
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(k);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(k);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  RateFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double sse = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double r = y[i] - (f.intercept + f.slope * x[i]);
    sse += r * r;
  }
  f.r2 = syy > 0.0 ? 1.0 - sse / syy : 1.0;
  f.N.assign(n.begin(), n.end());
  f.medians.assign(medians.begin(), medians.end());
  return f;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t h = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h), v.end());
  const double upper = v[h];
  if (v.size() % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h));
  return 0.5 * (lower + upper);
}

/// Weighted pool-adjacent-violators fit, non-decreasing.
inline std::vector<double> isotonic_increasing(std::span<const double> y, std::span<const double> w) {
  if (y.size() != w.size()) throw DomainError("isotonic_increasing: values and weights differ in length");
  struct Block {
    double mean, weight;
    std::size_t count;
  };
  std::vector<Block> blocks;
  for (std::size_t i = 0; i < y.size(); ++i) {
    blocks.push_back({y[i], w[i], 1});
    while (blocks.size() > 1 && blocks[blocks.size() - 2].mean > blocks.back().mean) {
      Block b = blocks.back();
      blocks.pop_back();
      Block& a = blocks.back();
      const double wt = a.weight + b.weight;
      a.mean = wt > 0.0 ? (a.mean * a.weight + b.mean * b.weight) / wt : 0.5 * (a.mean + b.mean);
      a.weight = wt;
      a.count += b.count;
    }
  }
  std::vector<double> out;
  for (const Block& b : blocks) out.insert(out.end(), b.count, b.mean);
  return out;
}

// ---------------------------------------------------------------------------
// Plans

enum class SpikeSpecKind { margin, strength };

/// A spike is given either by its margin above the threshold (held fixed across N) or by d.
struct SpikeSpec {
  SpikeSpecKind kind = SpikeSpecKind::margin;
  double value = 0.0;
};

struct SuiteGrid {
  std::vector<std::size_t> N;
  std::size_t trials = 0;
};

inline const std::vector<std::string>& known_suites() {
  static const std::vector<std::string> names = {"outlier", "overlap",  "sticking", "nonoutlier",
                                                 "bbp",     "edge",     "locallaw", "master"};
  return names;
}

struct ExperimentPlan {
  DensitySpec alpha = DensitySpec::uniform(0.5, 1.5);
  DensitySpec beta = DensitySpec::uniform(0.5, 1.5);
  std::vector<std::size_t> N_grid{250, 500, 1000, 2000};
  std::size_t trials = 50;
  std::vector<SpikeSpec> spikes_a{{SpikeSpecKind::margin, 0.5}};
  std::vector<SpikeSpec> spikes_b;
  std::uint64_t master_seed = 20260101;
  std::vector<std::string> suites{"outlier", "overlap", "sticking", "nonoutlier"};
  std::size_t varpi = 10;
  double tau = 0.1;
  Field field = Field::real_orthogonal;
  std::map<std::string, SuiteGrid> grids;  // per-suite replacement of N_grid / trials
  std::vector<double> bbp_margins{-5, -4, -3, -2, -1, 0, 1, 2, 3, 4, 5};
  double bbp_detection_multiplier = 3.0;
  double local_law_offset = 0.5;
  double local_law_eta = 0.01;
  double estimator_epsilon = 0.1;
  double estimator_epsilon_alt = 0.05;
  std::size_t nonoutlier_indices = 10;
  std::size_t sticking_cap = 50;
  std::string output_dir = "freespike_out";

  /// mu_alpha or mu_beta is a point mass: outlier quantities are exact, rates do not apply.
  bool identity() const { return alpha.is_atomic() || beta.is_atomic(); }

  bool enabled(const std::string& suite) const {
    return std::find(suites.begin(), suites.end(), suite) != suites.end();
  }

  SuiteGrid grid(const std::string& suite) const {
    SuiteGrid g{N_grid, trials};
    auto it = grids.find(suite);
    if (it != grids.end()) {
      if (!it->second.N.empty()) g.N = it->second.N;
      if (it->second.trials > 0) g.trials = it->second.trials;
    }
    return g;
  }

  void validate() const {
    auto check_grid = [](const std::vector<std::size_t>& n, const std::string& where) {
      if (n.empty()) throw ConfigError(where + ": N grid is empty");
      for (std::size_t i = 0; i < n.size(); ++i) {
        if (n[i] < 4) throw ConfigError(where + ": N values must be at least 4");
        if (i > 0 && n[i] <= n[i - 1]) throw ConfigError(where + ": N grid must be strictly ascending");
      }
    };
    check_grid(N_grid, "plan");
    if (trials < 1) throw ConfigError("plan: trials must be >= 1");
    for (const auto& [name, g] : grids) {
      if (std::find(known_suites().begin(), known_suites().end(), name) == known_suites().end()) {
        throw ConfigError("plan: grid given for unknown suite '" + name + "'");
      }
      if (!g.N.empty()) check_grid(g.N, "grid '" + name + "'");
    }
    for (const std::string& s : suites) {
      if (std::find(known_suites().begin(), known_suites().end(), s) == known_suites().end()) {
        throw ConfigError("plan: unknown suite '" + s + "'");
      }
    }
    if (spikes_a.size() + spikes_b.size() > SpikeModel::kMaxSpikes) {
      throw ConfigError("plan: at most 32 spikes are supported");
    }
    for (const auto* list : {&spikes_a, &spikes_b}) {
      for (const SpikeSpec& s : *list) {
        if (!std::isfinite(s.value)) throw ConfigError("plan: spike values must be finite");
        if (s.kind == SpikeSpecKind::strength && s.value < 0.0) {
          throw ConfigError("plan: spike strengths must be >= 0");
        }
      }
    }
    if (varpi <= spikes_a.size() + spikes_b.size()) throw ConfigError("plan: varpi must exceed r + s");
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("plan: tau must lie in (0, 1)");
    if (bbp_margins.empty()) throw ConfigError("plan: bbp margin grid is empty");
    if (!std::is_sorted(bbp_margins.begin(), bbp_margins.end())) {
      throw ConfigError("plan: bbp margins must be ascending");
    }
    if (!(local_law_eta > 0.0)) throw ConfigError("plan: local law eta must be positive");
    for (double e : {estimator_epsilon, estimator_epsilon_alt}) {
      if (!(e > 0.0 && e < 1.0 / 3.0)) throw ConfigError("plan: estimator epsilon must lie in (0, 1/3)");
    }
    if (nonoutlier_indices < 1 || sticking_cap < 1) {
      throw ConfigError("plan: nonoutlier_indices and sticking_cap must be >= 1");
    }
  }
};

namespace detail {

inline SpikeSpec spike_from_json(const Json& j) {
  if (j.is_number()) return {SpikeSpecKind::margin, j.get<double>()};
  if (j.is_object()) {
    if (j.contains("margin")) return {SpikeSpecKind::margin, j.at("margin").get<double>()};
    if (j.contains("strength")) return {SpikeSpecKind::strength, j.at("strength").get<double>()};
  }
  throw ConfigError("spike entries must be numbers (margins) or {\"margin\": x} / {\"strength\": d}");
}

inline Json spikes_to_json(const std::vector<SpikeSpec>& v) {
  Json a = Json::array();
  for (const SpikeSpec& s : v) {
    a.push_back({{s.kind == SpikeSpecKind::margin ? "margin" : "strength", s.value}});
  }
  return a;
}

}  // namespace detail

inline ExperimentPlan plan_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("plan must be a JSON object");
  static const std::vector<std::string> keys = {
      "alpha",      "beta",   "N_grid",   "trials", "spikes",        "master_seed",
      "suites",     "varpi",  "tau",      "field",  "grids",         "bbp",
      "local_law",  "nonoutlier_indices", "sticking_cap", "output_dir", "description"};
  for (const auto& item : j.items()) {
    if (std::find(keys.begin(), keys.end(), item.key()) == keys.end()) {
      throw ConfigError("plan: unknown key '" + item.key() + "'");
    }
  }
  ExperimentPlan p;
  try {
    if (j.contains("alpha")) p.alpha = density_from_json(j.at("alpha"));
    if (j.contains("beta")) p.beta = density_from_json(j.at("beta"));
    if (j.contains("N_grid")) p.N_grid = j.at("N_grid").get<std::vector<std::size_t>>();
    if (j.contains("trials")) p.trials = j.at("trials").get<std::size_t>();
    if (j.contains("spikes")) {
      const Json& s = j.at("spikes");
      p.spikes_a.clear();
      p.spikes_b.clear();
      if (s.contains("a")) {
        for (const Json& e : s.at("a")) p.spikes_a.push_back(detail::spike_from_json(e));
      }
      if (s.contains("b")) {
        for (const Json& e : s.at("b")) p.spikes_b.push_back(detail::spike_from_json(e));
      }
    }
    if (j.contains("master_seed")) p.master_seed = j.at("master_seed").get<std::uint64_t>();
    if (j.contains("suites")) {
      const Json& s = j.at("suites");
      p.suites = s.is_string() ? std::vector<std::string>{s.get<std::string>()}
                               : s.get<std::vector<std::string>>();
      if (p.suites.size() == 1 && p.suites[0] == "all") p.suites = known_suites();
    }
    if (j.contains("varpi")) p.varpi = j.at("varpi").get<std::size_t>();
    if (j.contains("tau")) p.tau = j.at("tau").get<double>();
    if (j.contains("field")) {
      const auto f = j.at("field").get<std::string>();
      if (f == "real") p.field = Field::real_orthogonal;
      else if (f == "complex") p.field = Field::complex_unitary;
      else throw ConfigError("plan: field must be 'real' or 'complex'");
    }
    if (j.contains("grids")) {
      for (const auto& item : j.at("grids").items()) {
        SuiteGrid g;
        if (item.value().contains("N")) g.N = item.value().at("N").get<std::vector<std::size_t>>();
        if (item.value().contains("trials")) g.trials = item.value().at("trials").get<std::size_t>();
        p.grids[item.key()] = g;
      }
    }
    if (j.contains("bbp")) {
      const Json& b = j.at("bbp");
      if (b.contains("margins")) p.bbp_margins = b.at("margins").get<std::vector<double>>();
      if (b.contains("detection_multiplier")) {
        p.bbp_detection_multiplier = b.at("detection_multiplier").get<double>();
      }
    }
    if (j.contains("local_law")) {
      const Json& l = j.at("local_law");
      p.local_law_offset = detail::optional_value<double>(l, "offset", p.local_law_offset, "local_law");
      p.local_law_eta = detail::optional_value<double>(l, "eta", p.local_law_eta, "local_law");
      p.estimator_epsilon = detail::optional_value<double>(l, "epsilon", p.estimator_epsilon, "local_law");
      p.estimator_epsilon_alt =
          detail::optional_value<double>(l, "epsilon_alt", p.estimator_epsilon_alt, "local_law");
    }
    if (j.contains("nonoutlier_indices")) p.nonoutlier_indices = j.at("nonoutlier_indices").get<std::size_t>();
    if (j.contains("sticking_cap")) p.sticking_cap = j.at("sticking_cap").get<std::size_t>();
    if (j.contains("output_dir")) p.output_dir = j.at("output_dir").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("plan: ") + e.what());
  }
  p.validate();
  return p;
}

inline Json plan_to_json(const ExperimentPlan& p) {
  Json grids = Json::object();
  for (const auto& [name, g] : p.grids) grids[name] = {{"N", g.N}, {"trials", g.trials}};
  return {{"alpha", density_to_json(p.alpha)},
          {"beta", density_to_json(p.beta)},
          {"N_grid", p.N_grid},
          {"trials", p.trials},
          {"spikes", {{"a", detail::spikes_to_json(p.spikes_a)}, {"b", detail::spikes_to_json(p.spikes_b)}}},
          {"master_seed", p.master_seed},
          {"suites", p.suites},
          {"varpi", p.varpi},
          {"tau", p.tau},
          {"field", p.field == Field::real_orthogonal ? "real" : "complex"},
          {"grids", grids},
          {"bbp", {{"margins", p.bbp_margins}, {"detection_multiplier", p.bbp_detection_multiplier}}},
          {"local_law",
           {{"offset", p.local_law_offset},
            {"eta", p.local_law_eta},
            {"epsilon", p.estimator_epsilon},
            {"epsilon_alt", p.estimator_epsilon_alt}}},
          {"nonoutlier_indices", p.nonoutlier_indices},
          {"sticking_cap", p.sticking_cap},
          {"output_dir", p.output_dir}};
}

/// Reads a plan file and applies "key=value" overrides before validation.
inline ExperimentPlan load_plan(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  Json j = read_json_file(path);
  for (const std::string& o : overrides) apply_override(j, o);
  return plan_from_json(j);
}

// ---------------------------------------------------------------------------
// Per-N resolution

/// Base diagonals at size n with the plan's spikes turned into strengths.
/// Margins are measured from the threshold of the unspiked pair at the same n.
inline SpikeModel resolve_model(const ExperimentPlan& plan, std::size_t n) {
  std::vector<double> a = base_diagonal(plan.alpha, n);
  std::vector<double> b = base_diagonal(plan.beta, n);
  const bool any_margin = std::any_of(plan.spikes_a.begin(), plan.spikes_a.end(),
                                      [](const SpikeSpec& s) { return s.kind == SpikeSpecKind::margin; }) ||
                          std::any_of(plan.spikes_b.begin(), plan.spikes_b.end(),
                                      [](const SpikeSpec& s) { return s.kind == SpikeSpecKind::margin; });
  EdgeData e;
  if (any_margin) e = locate_upper_edge(AtomicMeasure::empirical(a), AtomicMeasure::empirical(b));
  auto strengths = [&](const std::vector<SpikeSpec>& specs, const std::vector<double>& base, double thr,
                       const char* side) {
    std::vector<double> d;
    for (std::size_t k = 0; k < specs.size(); ++k) {
      if (specs[k].kind == SpikeSpecKind::strength) {
        d.push_back(specs[k].value);
        continue;
      }
      const double target = thr + specs[k].value;
      const double dk = target / base[k] - 1.0;
      if (dk < 0.0) {
        std::ostringstream os;
        os << "spike " << side << (k + 1) << " with margin " << specs[k].value << " at N = " << n
           << " would need a negative strength (target " << target << " below base value " << base[k] << ")";
        throw PlanError(os.str());
      }
      d.push_back(dk);
    }
    return d;
  };
  std::vector<double> da = strengths(plan.spikes_a, a, e.omega_b_edge, "a");
  std::vector<double> db = strengths(plan.spikes_b, b, e.omega_a_edge, "b");
  return SpikeModel(std::move(a), std::move(b), std::move(da), std::move(db));
}

/// Typical locations gamma_j of mu_A boxtimes mu_B.
inline QuantileResult convolution_quantiles(const AtomicMeasure& a, const AtomicMeasure& b,
                                            const EdgeData& edge, std::size_t n) {
  if (a.size() == 1 || b.size() == 1) {
    // boxtimes with a point mass is a dilation
    const AtomicMeasure& other = a.size() == 1 ? b : a;
    const double c = a.size() == 1 ? a.atoms()[0] : b.atoms()[0];
    QuantileResult q;
    std::size_t k = other.size();
    double tail = 0.0;
    for (std::size_t j = 1; j <= n; ++j) {
      const double want = static_cast<double>(j) / static_cast<double>(n);
      while (k > 0 && tail < want - 1e-12) tail += other.weights()[--k];
      q.gamma.push_back(c * other.atoms()[k]);
    }
    return q;
  }
  const double lo = 0.95 * a.min_atom() * b.min_atom();
  const double span = edge.E_plus - lo;
  const double split = edge.E_plus - 0.05 * span;
  std::vector<double> grid;
  for (int k = 0; k < 2000; ++k) grid.push_back(lo + (split - lo) * k / 2000.0);
  for (int k = 0; k <= 3000; ++k) grid.push_back(split + (edge.E_plus + 1e-3 * span - split) * k / 3000.0);
  const GridDensity d = density_on_grid(a, b, grid);
  return quantile_locations(d, n);
}

/// Everything about one N that does not depend on the trial.
struct ResolvedN {
  std::size_t N = 0;
  SpikeContext ctx;
  PredictionSet prediction;
  bool exact = false;
  std::size_t top_k = 0;  // eigenpairs computed per trial
  QuantileResult quantiles;
  std::optional<SubordinationValue> ll_outside;
  std::optional<SubordinationValue> ll_bulk;
};

inline std::size_t sticking_range(const ExperimentPlan& plan, std::size_t n) {
  return std::max<std::size_t>(
      1, std::min(plan.sticking_cap, static_cast<std::size_t>(std::floor(plan.tau * static_cast<double>(n)))));
}

inline std::size_t nonoutlier_range(const ExperimentPlan& plan, std::size_t n) {
  return std::min(plan.nonoutlier_indices,
                  static_cast<std::size_t>(std::floor(plan.tau * static_cast<double>(n))));
}

inline ResolvedN resolve_n(const ExperimentPlan& plan, std::size_t n, bool need_quantiles,
                           bool need_local_law) {
  SpikeModel model = resolve_model(plan, n);
  ResolvedN r{n, SpikeContext::build(std::move(model)), {}, plan.identity(), 0, {}, {}, {}};
  r.prediction = predict(r.ctx, plan.varpi);
  const std::size_t rs = r.ctx.model.r() + r.ctx.model.s();
  r.top_k = std::min(n, std::max({plan.varpi, plan.nonoutlier_indices + rs, sticking_range(plan, n) + rs}) + 1);
  if (need_quantiles) r.quantiles = convolution_quantiles(r.ctx.mu_a, r.ctx.mu_b, r.ctx.edge, n);
  if (need_local_law) {
    const double e = r.ctx.edge.E_plus;
    r.ll_outside = solve(r.ctx.mu_a, r.ctx.mu_b, Complex(e + plan.local_law_offset, plan.local_law_eta));
    r.ll_bulk = solve(r.ctx.mu_a, r.ctx.mu_b, Complex(e - 0.5 * plan.tau, 0.05));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Records

struct TrialRecord {
  std::string suite;
  std::size_t N = 0;
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  std::string target;
  double predicted = 0.0;
  double realized = 0.0;
  double abs_error = 0.0;
  double bound = 0.0;
  bool pass = false;
};

inline const char* csv_header() {
  return "suite,N,trial,seed,target,predicted,realized,abs_error,bound,pass";
}

inline std::string csv_row(const TrialRecord& r) {
  return r.suite + "," + std::to_string(r.N) + "," + std::to_string(r.trial) + "," + std::to_string(r.seed) +
         "," + r.target + "," + fmt_double(r.predicted) + "," + fmt_double(r.realized) + "," +
         fmt_double(r.abs_error) + "," + fmt_double(r.bound) + "," + (r.pass ? "1" : "0");
}

inline std::string records_csv(const std::vector<TrialRecord>& rows) {
  std::string s = std::string(csv_header()) + "\n";
  for (const TrialRecord& r : rows) s += csv_row(r) + "\n";
  return s;
}

struct Gate {
  std::string name;
  double value = 0.0;
  double lower = -std::numeric_limits<double>::infinity();
  double upper = std::numeric_limits<double>::infinity();
  bool evaluated = true;
  bool pass = false;
  std::string note;
};

inline Gate make_gate(std::string name, double value, double lower, double upper, std::string note = {}) {
  Gate g{std::move(name), value, lower, upper, true, false, std::move(note)};
  g.pass = std::isfinite(value) && value >= lower && value <= upper;
  return g;
}

inline Gate skipped_gate(std::string name, std::string note) {
  Gate g;
  g.name = std::move(name);
  g.value = std::numeric_limits<double>::quiet_NaN();
  g.evaluated = false;
  g.pass = true;
  g.note = std::move(note);
  return g;
}

struct SuiteResult {
  std::string name;
  std::vector<TrialRecord> records;
  std::vector<Gate> gates;
  std::map<std::string, RateFit> fits;
  Json details = Json::object();
  std::string extra_csv;  // bbp transition curve
  double wall_seconds = 0.0;
  bool skipped = false;
  std::string skip_reason;

  bool pass() const {
    return std::all_of(gates.begin(), gates.end(), [](const Gate& g) { return g.pass; });
  }
};

// ---------------------------------------------------------------------------
// Per-trial workspace: matrices are built once per (N, trial) and shared by all suites.

template <typename Scalar>
class TrialWorkspace {
 public:
  TrialWorkspace(const ExperimentPlan& plan, const ResolvedN& rn, std::size_t trial)
      : plan_(plan), rn_(rn), trial_(trial),
        seed_(derive_seed(plan.master_seed, static_cast<std::uint64_t>(rn.N) * 1000003ULL + trial, "haar")) {}

  std::uint64_t seed() const { return seed_; }
  std::size_t trial() const { return trial_; }
  const ResolvedN& resolved() const { return rn_; }

  const HaarSample<Scalar>& haar() {
    if (!haar_) haar_ = sample_haar<Scalar>(rn_.N, seed_);
    return *haar_;
  }
  const ModelMatrices<Scalar>& matrices() {
    if (!mats_) mats_ = build_model(rn_.ctx.model, haar());
    return *mats_;
  }
  const SpectralData<Scalar>& spiked_top() {
    if (!spiked_top_) spiked_top_ = checked(spectral_decomposition(matrices().Q1_hat, rn_.top_k, true, true));
    return *spiked_top_;
  }
  const SpectralData<Scalar>& unspiked_top() {
    if (!unspiked_top_) unspiked_top_ = spectral_decomposition(matrices().Q1, rn_.top_k, false, false);
    return *unspiked_top_;
  }
  const SpectralData<Scalar>& unspiked_third() {
    if (!unspiked_third_) {
      unspiked_third_ = checked(spectral_decomposition(matrices().Q1, std::max<std::size_t>(rn_.N / 3, 1), true, true));
    }
    return *unspiked_third_;
  }
  const SpectralData<Scalar>& unspiked_full() {
    if (!unspiked_full_) unspiked_full_ = checked(spectral_decomposition(matrices().Q1, 0, true, true));
    return *unspiked_full_;
  }
  const SingularSystem<Scalar>& system() {
    if (!system_) system_ = singular_system(matrices().Y, unspiked_full());
    return *system_;
  }

  /// |<e_coord, w_k>|^2 for the k-th (1-based) left (side a) or right (side b) spiked vector.
  double component(Side side, std::size_t k, std::size_t coord) {
    const SpectralData<Scalar>& sd = spiked_top();
    if (k < 1 || k > sd.count()) throw DomainError("component: eigenvector index outside the computed range");
    const Eigen::Index c = static_cast<Eigen::Index>(k - 1);
    if (side == Side::a) return abs2(sd.vectors(static_cast<Eigen::Index>(coord), c));
    const auto& y = matrices().Y_hat;
    const Scalar s = y.col(static_cast<Eigen::Index>(coord)).dot(sd.vectors.col(c));
    return abs2(s) / sd.values(c);
  }

  /// Interlacing violations between the computed spiked and unspiked eigenvalues.
  std::size_t interlacing() {
    const auto& s = spiked_top();
    const auto& u = unspiked_top();
    const double slack = 1e-9 * std::max(s.matrix_norm, u.matrix_norm);
    return interlacing_violations(std::span<const double>(s.values.data(), s.count()),
                                  std::span<const double>(u.values.data(), u.count()),
                                  rn_.ctx.model.r() + rn_.ctx.model.s(), slack);
  }

  TrialRecord record(const std::string& suite, std::string target, double predicted, double realized,
                     double bound, bool pass) const {
    return {suite, rn_.N, trial_, seed_, std::move(target), predicted, realized,
            std::abs(realized - predicted), bound, pass};
  }

 private:
  SpectralData<Scalar> checked(SpectralData<Scalar> sd) const {
    const double tol = 1e-9 * std::max(sd.matrix_norm, 1e-300);
    if (sd.residuals.size() > 0 && sd.residuals.maxCoeff() > tol) {
      std::ostringstream os;
      os << "eigen-residual " << sd.residuals.maxCoeff() << " exceeds 1e-9 ||Q|| at N = " << rn_.N
         << ", trial " << trial_;
      throw NumericError(os.str());
    }
    for (Eigen::Index k = 0; k < sd.vectors.cols(); ++k) {
      if (std::abs(sd.vectors.col(k).squaredNorm() - 1.0) > 1e-10) {
        throw NumericError("eigenvector normalization lost beyond 1e-10");
      }
    }
    return sd;
  }

  const ExperimentPlan& plan_;
  const ResolvedN& rn_;
  std::size_t trial_;
  std::uint64_t seed_;
  std::optional<HaarSample<Scalar>> haar_;
  std::optional<ModelMatrices<Scalar>> mats_;
  std::optional<SpectralData<Scalar>> spiked_top_, unspiked_top_, unspiked_third_, unspiked_full_;
  std::optional<SingularSystem<Scalar>> system_;
};

inline std::string spike_tag(const SpikePrediction& p) {
  return std::string(side_name(p.side)) + std::to_string(p.index + 1);
}

namespace suites {

constexpr double kExact = 1e-9;

template <typename Scalar>
void interlacing_row(const std::string& suite, TrialWorkspace<Scalar>& ws, std::vector<TrialRecord>& out) {
  const double v = static_cast<double>(ws.interlacing());
  out.push_back(ws.record(suite, "interlacing_violations", 0.0, v, 0.0, v == 0.0));
}

template <typename Scalar>
void outlier(const ExperimentPlan& plan, TrialWorkspace<Scalar>& ws, std::vector<TrialRecord>& out) {
  const ResolvedN& rn = ws.resolved();
  const double n = static_cast<double>(rn.N);
  const auto& sd = ws.spiked_top();
  for (const SpikePrediction& p : rn.prediction.spikes) {
    if (!p.resolved) continue;
    const double lam = sd.values(static_cast<Eigen::Index>(p.label - 1));
    const double bound = rn.exact ? kExact : p.rate_bound * std::pow(n, 0.2);
    out.push_back(ws.record("outlier", "outlier:" + spike_tag(p), p.location, lam, bound,
                            std::abs(lam - p.location) <= bound));
  }
  for (const ExtremalPrediction& x : rn.prediction.extremal) {
    if (x.rank > sd.count()) break;
    const double lam = sd.values(static_cast<Eigen::Index>(x.rank - 1));
    const double bound = x.rate_bound * std::pow(n, 0.2);
    out.push_back(ws.record("outlier", "extremal:" + std::to_string(x.rank), x.location, lam, bound,
                            std::abs(lam - x.location) <= bound));
  }
  (void)plan;
  interlacing_row("outlier", ws, out);
}

template <typename Scalar>
void overlap(const ExperimentPlan& plan, TrialWorkspace<Scalar>& ws, std::vector<TrialRecord>& out) {
  const ResolvedN& rn = ws.resolved();
  const double n = static_cast<double>(rn.N);
  std::vector<std::size_t> resolved_labels;
  for (const SpikePrediction& p : rn.prediction.spikes) {
    if (!p.resolved) continue;
    resolved_labels.push_back(p.label);
    const double realized = ws.component(p.side, p.label, p.index);
    const double bound = rn.exact ? kExact : p.overlap_budget * std::pow(n, 0.2);
    out.push_back(ws.record("overlap", "overlap:" + spike_tag(p), p.overlap, realized, bound,
                            std::abs(realized - p.overlap) <= bound));
  }
  // a coordinate direction carrying no spike, projected on all resolved outliers
  const SpikeModel& m = rn.ctx.model;
  if (!resolved_labels.empty() && m.r() < rn.N) {
    const std::size_t coord = m.r();
    std::vector<double> v(rn.N, 0.0);
    v[coord] = 1.0;
    const OverlapPrediction op = predict_overlaps(rn.ctx, rn.prediction.labels, resolved_labels, v);
    double realized = 0.0;
    for (std::size_t lab : resolved_labels) realized += ws.component(Side::a, lab, coord);
    const double bound = rn.exact ? kExact : op.budget_a * std::pow(n, 0.1);
    out.push_back(ws.record("overlap", "orthogonal:a" + std::to_string(coord + 1), op.g_a, realized, bound,
                            realized <= op.g_a + bound));
  }
  (void)plan;
  interlacing_row("overlap", ws, out);
}

template <typename Scalar>
void sticking(const ExperimentPlan& plan, TrialWorkspace<Scalar>& ws, std::vector<TrialRecord>& out) {
  const ResolvedN& rn = ws.resolved();
  const double n = static_cast<double>(rn.N);
  const auto& s = ws.spiked_top();
  const auto& u = ws.unspiked_top();
  const std::size_t k0 = rn.prediction.labels.r_plus + rn.prediction.labels.s_plus;
  const std::size_t imax = sticking_range(plan, rn.N);
  double worst = 0.0;
  for (std::size_t i = 1; i <= imax && i + k0 <= s.count() && i <= u.count(); ++i) {
    worst = std::max(worst, std::abs(s.values(static_cast<Eigen::Index>(i + k0 - 1)) -
                                     u.values(static_cast<Eigen::Index>(i - 1))));
  }
  if (!rn.prediction.sticking) {
    out.push_back(ws.record("sticking", "sticking:max", 0.0, worst, 0.0, worst == 0.0));
  } else {
    const double bound = std::pow(n, 0.15) * rn.prediction.sticking->bound;
    out.push_back(ws.record("sticking", "sticking:max", 0.0, worst, bound, worst <= bound));
  }
  interlacing_row("sticking", ws, out);
}

template <typename Scalar>
void nonoutlier(const ExperimentPlan& plan, TrialWorkspace<Scalar>& ws, std::vector<TrialRecord>& out) {
  const ResolvedN& rn = ws.resolved();
  const double n = static_cast<double>(rn.N);
  const LabelMap& L = rn.prediction.labels;
  const std::size_t imax = nonoutlier_range(plan, rn.N);
  for (const SpikePrediction& p : rn.prediction.spikes) {
    if (!p.resolved) continue;
    std::vector<double> v(rn.N, 0.0);
    v[p.index] = 1.0;
    for (std::size_t i = 1; i <= imax; ++i) {
      const std::size_t lab = L.label(p.side, i - 1);
      if (L.in_O_plus(lab)) continue;
      const double bound =
          predict_nonoutlier_bound(rn.ctx, L, p.side, i, v, plan.tau) * std::pow(n, 0.2);
      const double realized = ws.component(p.side, lab, p.index);
      out.push_back(ws.record("nonoutlier", "nonoutlier:" + spike_tag(p) + ":i=" + std::to_string(i), 0.0,
                              realized, bound, realized <= bound));
    }
  }
  interlacing_row("nonoutlier", ws, out);
}

/// Coordinate carrying the sweep spike: the largest base value not above `target`,
/// so the strength target / a_k - 1 is never negative.
inline std::size_t bbp_coordinate(std::span<const double> base, double target) {
  std::size_t k = 0;
  while (k < base.size() && base[k] > target) ++k;
  if (k == base.size()) throw PlanError("bbp: margin places the spike below every base value");
  return k;
}

template <typename Scalar>
void bbp(const ExperimentPlan& plan, TrialWorkspace<Scalar>& ws, std::vector<TrialRecord>& out) {
  const ResolvedN& rn = ws.resolved();
  const double n = static_cast<double>(rn.N);
  const SpikeContext& ctx = rn.ctx;
  const double thr = ctx.threshold(Side::a);
  const double detect = ctx.edge.E_plus + plan.bbp_detection_multiplier * std::pow(n, -2.0 / 3.0);
  const auto& u = ws.unspiked_top();
  const double lam1 = u.values(0);
  const double slack = 1e-9 * u.matrix_norm;
  std::size_t violations = 0;
  for (double m : plan.bbp_margins) {
    const double target = thr + m * std::pow(n, -1.0 / 3.0);
    // only one entry of A changes, so Q1_hat = D Q1 D with D a one-coordinate rescaling
    const std::size_t k = bbp_coordinate(ctx.model.a(), target);
    const double f = std::sqrt(target / ctx.model.a()[k]);
    Matrix<Scalar> q = ws.matrices().Q1;
    q.row(static_cast<Eigen::Index>(k)) *= f;
    q.col(static_cast<Eigen::Index>(k)) *= f;
    const SpectralData<Scalar> top = spectral_decomposition(q, 1, false, false);
    const double lam = top.values(0);
    if (lam < lam1 - slack) ++violations;
    const double predicted = target > thr ? ctx.inverse(Side::a, target) : ctx.edge.E_plus;
    std::ostringstream tag;
    tag << "bbp:m=" << m;
    out.push_back(ws.record("bbp", tag.str(), predicted, lam, detect, lam > detect));
  }
  out.push_back(ws.record("bbp", "interlacing_violations", 0.0, static_cast<double>(violations), 0.0,
                          violations == 0));
}

template <typename Scalar>
void edge(const ExperimentPlan& plan, TrialWorkspace<Scalar>& ws, std::vector<TrialRecord>& out) {
  const ResolvedN& rn = ws.resolved();
  const double n = static_cast<double>(rn.N);
  const double e = rn.ctx.edge.E_plus;
  const auto& sd = ws.unspiked_third();
  const double lam1 = sd.values(0);
  const double b1 = 5.0 * std::pow(n, -2.0 / 3.0);
  out.push_back(ws.record("edge", "lambda1", e, lam1, b1, std::abs(lam1 - e) <= b1));
  const RigidityReport rig = rigidity_report(std::span<const double>(sd.values.data(), sd.count()),
                                             rn.quantiles.gamma, rn.N, 50);
  const double rb = std::pow(n, 0.15);
  out.push_back(ws.record("edge", "rigidity:max50", 0.0, rig.max_normalized_top, rb, rig.max_normalized_top <= rb));
  out.push_back(ws.record("edge", "rigidity:slope", 0.0, rig.log_slope, 0.3, std::abs(rig.log_slope) <= 0.3));
  if (!rn.exact) {
    const DelocalizationReport dl = delocalization_report(sd, 50);
    if (!dl.degenerate) {
      const double db = std::pow(n, 0.2);
      out.push_back(ws.record("edge", "delocalization:max50", 0.0, dl.max_top, db, dl.max_top <= db));
    }
  }
  (void)plan;
}

template <typename Scalar>
void locallaw(const ExperimentPlan& plan, TrialWorkspace<Scalar>& ws, std::vector<TrialRecord>& out) {
  const ResolvedN& rn = ws.resolved();
  const double n = static_cast<double>(rn.N);
  const SpikeModel& m = rn.ctx.model;
  const double e = rn.ctx.edge.E_plus;
  const LocalLawParams params{plan.tau, 0.1, 10.0};
  const auto& sys = ws.system();
  const ResolventDiagnostics far = local_law_residual(m.a(), m.b(), sys, *rn.ll_outside, e, params);
  const double rate = std::pow(n, -0.5) * std::pow(far.kappa + plan.local_law_eta, -0.25);
  out.push_back(ws.record("locallaw", "sup_entry:outside", 0.0, far.sup_entry_error, rate * std::pow(n, 0.2),
                          far.sup_entry_error <= rate * std::pow(n, 0.2)));
  const double avg_bound = std::pow(n, 0.2) / (n * (far.kappa + plan.local_law_eta));
  out.push_back(ws.record("locallaw", "averaged:outside", 0.0, far.averaged_error, avg_bound,
                          far.averaged_error <= avg_bound));
  const ResolventDiagnostics bulk = local_law_residual(m.a(), m.b(), sys, *rn.ll_bulk, e, params);
  out.push_back(ws.record("locallaw", "sup_entry:bulk", 0.0, bulk.sup_entry_error, 0.0, true));
  out.push_back(ws.record("locallaw", "averaged:bulk", 0.0, bulk.averaged_error, 1.1 * bulk.sup_entry_error,
                          bulk.averaged_error <= 1.1 * bulk.sup_entry_error));

  const double target = rn.ctx.edge.omega_b_edge;
  const double cut = 5.0 * std::pow(n, -1.0 / 3.0);
  const Complex est = estimate_omega_beta_edge(ws.unspiked_full(), m.a(), plan.estimator_epsilon);
  const Complex alt = estimate_omega_beta_edge(ws.unspiked_full(), m.a(), plan.estimator_epsilon_alt);
  std::ostringstream t1, t2;
  t1 << "omega_c:eps=" << plan.estimator_epsilon;
  t2 << "omega_c:eps=" << plan.estimator_epsilon_alt;
  out.push_back(ws.record("locallaw", t1.str(), target, est.real(), cut, std::abs(est.real() - target) <= cut));
  out.push_back(ws.record("locallaw", t2.str(), target, alt.real(), cut, std::abs(alt.real() - target) <= cut));
  const double sens = 3.0 * std::pow(n, -1.0 / 3.0);
  out.push_back(ws.record("locallaw", "omega_c:sensitivity", 0.0, std::abs(est.real() - alt.real()), sens,
                          std::abs(est.real() - alt.real()) <= sens));
}

template <typename Scalar>
void master(const ExperimentPlan& plan, TrialWorkspace<Scalar>& ws, std::vector<TrialRecord>& out) {
  const ResolvedN& rn = ws.resolved();
  const auto& sd = ws.spiked_top();
  const auto& sys = ws.system();
  const SpikeModel& m = rn.ctx.model;
  for (const SpikePrediction& p : rn.prediction.spikes) {
    if (!p.resolved) continue;
    const double lam = sd.values(static_cast<Eigen::Index>(p.label - 1));
    const MasterDeterminant md = master_determinant(m, sys, lam);
    out.push_back(ws.record("master", "master_det:" + spike_tag(p), 0.0, md.relative, 1e-6, md.relative <= 1e-6));
  }
  if (ws.trial() == 0) {
    for (const SpikePrediction& p : rn.prediction.spikes) {
      if (!p.resolved) continue;
      const std::vector<double> f = master_equation_factors(rn.ctx, p.location);
      const std::size_t pos = p.side == Side::a ? p.index : m.r() + p.index;
      const double scale = (p.strength + 1.0) / p.strength;
      const double rel = std::abs(f[pos]) / scale;
      out.push_back(ws.record("master", "master_factor:" + spike_tag(p), 0.0, rel, 1e-8, rel <= 1e-8));
    }
  }
  (void)plan;
}

}  // namespace suites

// ---------------------------------------------------------------------------
// Summaries and gates

namespace detail {

struct Grouped {
  std::map<std::size_t, std::map<std::size_t, std::vector<const TrialRecord*>>> by_n_trial;
};

inline bool starts_with(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

/// Per N, the median over trials of the per-trial max of `realized`/`abs_error` over matching rows.
inline std::map<std::size_t, double> median_of_trial_max(const std::vector<TrialRecord>& rows,
                                                         const std::string& prefix, bool use_abs_error) {
  std::map<std::size_t, std::map<std::size_t, double>> worst;
  for (const TrialRecord& r : rows) {
    if (!starts_with(r.target, prefix)) continue;
    const double v = use_abs_error ? r.abs_error : r.realized;
    auto& slot = worst[r.N].try_emplace(r.trial, -std::numeric_limits<double>::infinity()).first->second;
    slot = std::max(slot, v);
  }
  std::map<std::size_t, double> med;
  for (const auto& [n, trials] : worst) {
    std::vector<double> v;
    for (const auto& [t, x] : trials) v.push_back(x);
    med[n] = median(std::move(v));
  }
  return med;
}

inline double pass_fraction(const std::vector<TrialRecord>& rows, const std::string& prefix, std::size_t n) {
  std::size_t total = 0, ok = 0;
  for (const TrialRecord& r : rows) {
    if (r.N != n || !starts_with(r.target, prefix)) continue;
    ++total;
    ok += r.pass ? 1 : 0;
  }
  return total == 0 ? std::numeric_limits<double>::quiet_NaN() : static_cast<double>(ok) / static_cast<double>(total);
}

inline std::vector<std::string> targets_with_prefix(const std::vector<TrialRecord>& rows, const std::string& prefix) {
  std::vector<std::string> t;
  for (const TrialRecord& r : rows) {
    if (starts_with(r.target, prefix) && std::find(t.begin(), t.end(), r.target) == t.end()) t.push_back(r.target);
  }
  return t;
}

inline std::vector<std::size_t> ns_of(const std::vector<TrialRecord>& rows) {
  std::vector<std::size_t> n;
  for (const TrialRecord& r : rows) {
    if (std::find(n.begin(), n.end(), r.N) == n.end()) n.push_back(r.N);
  }
  std::sort(n.begin(), n.end());
  return n;
}

inline Json medians_json(const std::map<std::size_t, double>& m) {
  Json j = Json::object();
  for (const auto& [n, v] : m) j[std::to_string(n)] = json_number(v);
  return j;
}

inline void add_interlacing_gate(SuiteResult& s) {
  double total = 0.0;
  for (const TrialRecord& r : s.records) {
    if (r.target == "interlacing_violations") total += r.realized;
  }
  s.gates.push_back(make_gate("interlacing_violations", total, 0.0, 0.0, "all trials, 1e-9 solver slack"));
}

/// Slope gate on medians; exact-zero data and short grids are recorded as not evaluated.
inline void add_slope_gate(SuiteResult& s, const std::string& name, const std::map<std::size_t, double>& med,
                           double lo, double hi) {
  std::vector<double> n, v;
  for (const auto& [k, x] : med) {
    n.push_back(static_cast<double>(k));
    v.push_back(x);
  }
  if (n.size() < 3) {
    s.gates.push_back(skipped_gate(name, "fewer than three N values; no rate fit"));
    return;
  }
  if (std::all_of(v.begin(), v.end(), [](double x) { return x <= suites::kExact; })) {
    s.gates.push_back(skipped_gate(name, "errors are exact (<= 1e-9); slope undefined"));
    return;
  }
  try {
    const RateFit f = fit_rate(n, v);
    s.fits[name] = f;
    s.gates.push_back(make_gate(name, f.slope, lo, hi, "least squares of log median on log N"));
  } catch (const DomainError& e) {
    s.gates.push_back(make_gate(name, std::numeric_limits<double>::quiet_NaN(), lo, hi, e.what()));
  }
}

inline void add_pass_fraction_gates(SuiteResult& s, const std::string& prefix, double min_fraction) {
  Json fr = Json::object();
  for (std::size_t n : ns_of(s.records)) {
    const double f = pass_fraction(s.records, prefix, n);
    if (std::isnan(f)) continue;
    fr[std::to_string(n)] = f;
    s.gates.push_back(make_gate(prefix + "pass_fraction@N=" + std::to_string(n), f, min_fraction, 1.0));
  }
  s.details["pass_fraction:" + prefix] = fr;
}

}  // namespace detail

inline void summarize_outlier(const ExperimentPlan& plan, SuiteResult& s) {
  using namespace detail;
  const auto out = median_of_trial_max(s.records, "outlier:", true);
  const auto ext = median_of_trial_max(s.records, "extremal:", true);
  s.details["median_outlier_error"] = medians_json(out);
  s.details["median_extremal_error"] = medians_json(ext);
  if (plan.identity()) {
    double worst = 0.0;
    for (const TrialRecord& r : s.records) {
      if (starts_with(r.target, "outlier:")) worst = std::max(worst, r.abs_error);
    }
    s.gates.push_back(make_gate("outlier_exact", worst, 0.0, suites::kExact));
    s.gates.push_back(skipped_gate("extremal_slope", "identity configuration: non-outliers are base values"));
  } else {
    add_slope_gate(s, "outlier_slope", out, -0.65, -0.35);
    add_slope_gate(s, "extremal_slope", ext, -0.80, -0.50);
  }
  add_interlacing_gate(s);
}

inline void summarize_overlap(const ExperimentPlan& plan, SuiteResult& s) {
  using namespace detail;
  const auto med = median_of_trial_max(s.records, "overlap:", true);
  s.details["median_overlap_error"] = medians_json(med);
  if (plan.identity()) {
    double worst = 0.0;
    for (const TrialRecord& r : s.records) {
      if (starts_with(r.target, "overlap:") || starts_with(r.target, "orthogonal:")) {
        worst = std::max(worst, r.abs_error);
      }
    }
    s.gates.push_back(make_gate("overlap_exact", worst, 0.0, suites::kExact));
  } else {
    bool any = false;
    for (const auto& [n, v] : med) {
      if (n >= 1000) {
        s.gates.push_back(make_gate("median_overlap_error@N=" + std::to_string(n), v, 0.0, 0.05));
        any = true;
      }
    }
    if (!any && !med.empty()) {
      s.gates.push_back(make_gate("median_overlap_error@N=" + std::to_string(med.rbegin()->first),
                                  med.rbegin()->second, 0.0, 0.05, "largest N in the grid"));
    }
    add_slope_gate(s, "overlap_slope", med, -std::numeric_limits<double>::infinity(), -0.35);
    add_pass_fraction_gates(s, "orthogonal:", 0.9);
  }
  add_interlacing_gate(s);
}

inline void summarize_sticking(const ExperimentPlan&, SuiteResult& s) {
  detail::add_pass_fraction_gates(s, "sticking:", 0.9);
  detail::add_interlacing_gate(s);
}

inline void summarize_nonoutlier(const ExperimentPlan&, SuiteResult& s) {
  for (const std::string& t : detail::targets_with_prefix(s.records, "nonoutlier:")) {
    detail::add_pass_fraction_gates(s, t, 0.9);
  }
  detail::add_interlacing_gate(s);
}

inline void summarize_bbp(const ExperimentPlan& plan, SuiteResult& s) {
  using namespace detail;
  std::string csv = "N,margin,trials,detected,fraction,isotonic\n";
  Json curves = Json::object();
  for (std::size_t n : ns_of(s.records)) {
    std::vector<double> frac, weight;
    for (double m : plan.bbp_margins) {
      std::ostringstream tag;
      tag << "bbp:m=" << m;
      std::size_t total = 0, hit = 0;
      for (const TrialRecord& r : s.records) {
        if (r.N == n && r.target == tag.str()) {
          ++total;
          hit += r.pass ? 1 : 0;
        }
      }
      frac.push_back(total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0);
      weight.push_back(static_cast<double>(total));
    }
    const std::vector<double> iso = isotonic_increasing(frac, weight);
    Json c = Json::array();
    for (std::size_t k = 0; k < frac.size(); ++k) {
      const double m = plan.bbp_margins[k];
      csv += std::to_string(n) + "," + fmt_double(m) + "," + fmt_double(weight[k]) + "," +
             fmt_double(std::round(frac[k] * weight[k])) + "," + fmt_double(frac[k]) + "," + fmt_double(iso[k]) + "\n";
      c.push_back({{"margin", m}, {"fraction", frac[k]}, {"isotonic", iso[k]}});
      if (m <= -5.0) s.gates.push_back(make_gate("detection@m=" + fmt_double(m) + ",N=" + std::to_string(n), frac[k], 0.0, 0.1));
      if (m >= 5.0) s.gates.push_back(make_gate("detection@m=" + fmt_double(m) + ",N=" + std::to_string(n), frac[k], 0.9, 1.0));
    }
    std::size_t raw_inversions = 0;
    for (std::size_t k = 1; k < frac.size(); ++k) raw_inversions += frac[k] < frac[k - 1] ? 1 : 0;
    curves[std::to_string(n)] = {{"curve", c}, {"raw_monotonicity_violations", raw_inversions}};
  }
  s.details["transition"] = curves;
  s.extra_csv = csv;
  add_interlacing_gate(s);
}

inline void summarize_edge(const ExperimentPlan& plan, SuiteResult& s) {
  using namespace detail;
  const auto l1 = median_of_trial_max(s.records, "lambda1", true);
  const auto rig = median_of_trial_max(s.records, "rigidity:max50", false);
  const auto slope = median_of_trial_max(s.records, "rigidity:slope", false);
  const auto del = median_of_trial_max(s.records, "delocalization:max50", false);
  s.details["median_lambda1_error"] = medians_json(l1);
  s.details["median_rigidity_max50"] = medians_json(rig);
  s.details["median_rigidity_slope"] = medians_json(slope);
  s.details["median_delocalization_max50"] = medians_json(del);
  for (const auto& [n, v] : l1) {
    const double nd = static_cast<double>(n);
    s.gates.push_back(make_gate("lambda1_vs_edge@N=" + std::to_string(n), v, 0.0, 5.0 * std::pow(nd, -2.0 / 3.0)));
    s.gates.push_back(make_gate("rigidity_max50@N=" + std::to_string(n), rig.at(n), 0.0, std::pow(nd, 0.15)));
    s.gates.push_back(make_gate("rigidity_slope@N=" + std::to_string(n), slope.at(n), -0.3, 0.3));
    if (del.count(n)) {
      s.gates.push_back(make_gate("delocalization_max50@N=" + std::to_string(n), del.at(n), 0.0, std::pow(nd, 0.2)));
    }
  }
  if (plan.identity()) {
    s.gates.push_back(skipped_gate("delocalization", "identity configuration: eigenvectors are coordinate vectors"));
  }
}

inline void summarize_locallaw(const ExperimentPlan& plan, SuiteResult& s) {
  using namespace detail;
  const auto sup = median_of_trial_max(s.records, "sup_entry:outside", false);
  std::ostringstream t1;
  t1 << "omega_c:eps=" << plan.estimator_epsilon;
  const auto est = median_of_trial_max(s.records, t1.str(), true);
  const auto sens = median_of_trial_max(s.records, "omega_c:sensitivity", false);
  s.details["median_sup_entry_outside"] = medians_json(sup);
  s.details["median_omega_c_error"] = medians_json(est);
  if (sup.size() >= 2) {
    const auto lo = *sup.begin();
    const auto hi = *sup.rbegin();
    const double ratio = lo.second / hi.second;
    const double growth = static_cast<double>(hi.first) / static_cast<double>(lo.first);
    // [1.4, 2.9] for a factor 4 in N, rescaled to the grid actually used
    const double p = std::log(growth) / std::log(4.0);
    s.gates.push_back(make_gate("sup_entry_ratio:N=" + std::to_string(lo.first) + "/" + std::to_string(hi.first),
                                ratio, std::pow(1.4, p), std::pow(2.9, p)));
  } else {
    s.gates.push_back(skipped_gate("sup_entry_ratio", "needs at least two N values"));
  }
  for (const auto& [n, v] : est) {
    const double nd = static_cast<double>(n);
    s.gates.push_back(make_gate("omega_c_error@N=" + std::to_string(n), v, 0.0, 5.0 * std::pow(nd, -1.0 / 3.0)));
    s.gates.push_back(make_gate("omega_c_sensitivity@N=" + std::to_string(n), sens.at(n), 0.0,
                                3.0 * std::pow(nd, -1.0 / 3.0)));
  }
  add_pass_fraction_gates(s, "averaged:bulk", 0.9);
}

inline void summarize_master(const ExperimentPlan&, SuiteResult& s) {
  double worst_det = 0.0, worst_factor = 0.0;
  for (const TrialRecord& r : s.records) {
    if (detail::starts_with(r.target, "master_det:")) worst_det = std::max(worst_det, r.realized);
    if (detail::starts_with(r.target, "master_factor:")) worst_factor = std::max(worst_factor, r.realized);
  }
  s.gates.push_back(make_gate("master_det_relative_max", worst_det, 0.0, 1e-6));
  s.gates.push_back(make_gate("master_factor_relative_max", worst_factor, 0.0, 1e-8));
}

// ---------------------------------------------------------------------------
// Execution

/// Runs f(0..count-1) on `threads` workers; results must be written by index.
template <typename F>
void parallel_for(std::size_t count, std::size_t threads, F&& f) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          f(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct RunOptions {
  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
  std::function<void(const std::string&)> progress;  // called from worker threads under a lock
};

struct RunResult {
  ExperimentPlan plan;
  std::vector<SuiteResult> suites;

  bool all_pass() const {
    return std::all_of(suites.begin(), suites.end(), [](const SuiteResult& s) { return s.pass(); });
  }

  Json summary() const {
    Json js = Json::object();
    for (const SuiteResult& s : suites) {
      Json gates = Json::array();
      for (const Gate& g : s.gates) {
        gates.push_back({{"name", g.name},
                         {"value", json_number(g.value)},
                         {"lower", json_number(g.lower)},
                         {"upper", json_number(g.upper)},
                         {"evaluated", g.evaluated},
                         {"pass", g.pass},
                         {"note", g.note}});
      }
      Json fits = Json::object();
      for (const auto& [name, f] : s.fits) {
        fits[name] = {{"slope", f.slope}, {"intercept", f.intercept}, {"r2", f.r2}, {"N", f.N}, {"medians", f.medians}};
      }
      js[s.name] = {{"skipped", s.skipped},
                    {"skip_reason", s.skip_reason},
                    {"pass", s.pass()},
                    {"rows", s.records.size()},
                    {"wall_seconds", s.wall_seconds},
                    {"gates", gates},
                    {"rate_fits", fits},
                    {"details", s.details}};
    }
    return {{"plan", plan_to_json(plan)},
            {"operationalization",
             "stochastic-domination bounds are checked as slope fits of log median error on log N "
             "(windows of about +-0.15 around the predicted exponent) and as pass fractions >= 0.9 "
             "with N^0.1-N^0.2 slack multipliers on the per-trial bounds"},
            {"suites", js},
            {"all_pass", all_pass()}};
  }

  /// One CSV per suite, the bbp transition curve, and summary.json.
  void write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    for (const SuiteResult& s : suites) {
      write_text_file(dir / (s.name + ".csv"), records_csv(s.records));
      if (!s.extra_csv.empty()) write_text_file(dir / (s.name + "_transition.csv"), s.extra_csv);
    }
    write_json_file(dir / "summary.json", summary());
  }
};

namespace detail {

template <typename Scalar>
void run_trial(const std::string& suite, const ExperimentPlan& plan, TrialWorkspace<Scalar>& ws,
               std::vector<TrialRecord>& out) {
  if (suite == "outlier") suites::outlier(plan, ws, out);
  else if (suite == "overlap") suites::overlap(plan, ws, out);
  else if (suite == "sticking") suites::sticking(plan, ws, out);
  else if (suite == "nonoutlier") suites::nonoutlier(plan, ws, out);
  else if (suite == "bbp") suites::bbp(plan, ws, out);
  else if (suite == "edge") suites::edge(plan, ws, out);
  else if (suite == "locallaw") suites::locallaw(plan, ws, out);
  else if (suite == "master") suites::master(plan, ws, out);
}

inline void summarize(const std::string& suite, const ExperimentPlan& plan, SuiteResult& s) {
  if (suite == "outlier") summarize_outlier(plan, s);
  else if (suite == "overlap") summarize_overlap(plan, s);
  else if (suite == "sticking") summarize_sticking(plan, s);
  else if (suite == "nonoutlier") summarize_nonoutlier(plan, s);
  else if (suite == "bbp") summarize_bbp(plan, s);
  else if (suite == "edge") summarize_edge(plan, s);
  else if (suite == "locallaw") summarize_locallaw(plan, s);
  else if (suite == "master") summarize_master(plan, s);
}

template <typename Scalar>
RunResult run_plan_impl(const ExperimentPlan& plan, const RunOptions& opts) {
  plan.validate();
  RunResult result;
  result.plan = plan;
  std::vector<std::string> active;
  for (const std::string& s : known_suites()) {
    if (plan.enabled(s)) active.push_back(s);
  }

  // per-N preparation, serial and deterministic
  std::map<std::size_t, ResolvedN> resolved;
  std::map<std::string, std::string> skipped;
  for (const std::string& s : active) {
    for (std::size_t n : plan.grid(s).N) {
      if (!resolved.count(n)) {
        bool need_q = false, need_ll = false;
        for (const std::string& t : active) {
          const auto g = plan.grid(t).N;
          const bool has = std::find(g.begin(), g.end(), n) != g.end();
          need_q |= has && t == "edge";
          need_ll |= has && t == "locallaw";
        }
        resolved.emplace(n, resolve_n(plan, n, need_q, need_ll));
      }
    }
  }
  for (const std::string& s : active) {
    for (std::size_t n : plan.grid(s).N) {
      const PredictionSet& P = resolved.at(n).prediction;
      const bool any_resolved =
          std::any_of(P.spikes.begin(), P.spikes.end(), [](const SpikePrediction& p) { return p.resolved; });
      if ((s == "outlier" || s == "overlap" || s == "nonoutlier" || s == "master") && !any_resolved) {
        throw PlanError("suite '" + s + "' needs a supercritical spike with margin >= N^{-1/3} (N = " +
                        std::to_string(n) + ")");
      }
      if (s == "sticking" && P.sticking && P.sticking->degenerate) {
        skipped[s] = "gamma is zero: a spike sits exactly at its threshold";
      }
    }
  }

  struct Job {
    std::size_t n, trial;
    std::vector<std::string> suites;
  };
  std::vector<Job> jobs;
  std::map<std::size_t, std::size_t> max_trials;
  for (const std::string& s : active) {
    if (skipped.count(s)) continue;
    const SuiteGrid g = plan.grid(s);
    for (std::size_t n : g.N) max_trials[n] = std::max(max_trials[n], g.trials);
  }
  for (const auto& [n, tmax] : max_trials) {
    for (std::size_t t = 0; t < tmax; ++t) {
      Job j{n, t, {}};
      for (const std::string& s : active) {
        if (skipped.count(s)) continue;
        const SuiteGrid g = plan.grid(s);
        if (t < g.trials && std::find(g.N.begin(), g.N.end(), n) != g.N.end()) j.suites.push_back(s);
      }
      if (!j.suites.empty()) jobs.push_back(std::move(j));
    }
  }
  // largest matrices first for better load balance; output order is restored below
  std::vector<std::size_t> order(jobs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return jobs[x].n > jobs[y].n; });

  std::vector<std::map<std::string, std::vector<TrialRecord>>> rows(jobs.size());
  std::vector<std::map<std::string, double>> seconds(jobs.size());
  std::mutex log_mutex;
  std::atomic<std::size_t> done{0};
  parallel_for(jobs.size(), opts.threads, [&](std::size_t k) {
    const std::size_t idx = order[k];
    const Job& job = jobs[idx];
    TrialWorkspace<Scalar> ws(plan, resolved.at(job.n), job.trial);
    for (const std::string& s : job.suites) {
      const auto t0 = std::chrono::steady_clock::now();
      run_trial(s, plan, ws, rows[idx][s]);
      seconds[idx][s] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    const std::size_t d = ++done;
    if (opts.progress) {
      std::lock_guard<std::mutex> lock(log_mutex);
      std::ostringstream os;
      os << "trial " << d << "/" << jobs.size() << " done (N = " << job.n << ", trial " << job.trial << ")";
      opts.progress(os.str());
    }
  });

  for (const std::string& s : active) {
    SuiteResult sr;
    sr.name = s;
    if (skipped.count(s)) {
      sr.skipped = true;
      sr.skip_reason = skipped.at(s);
      sr.gates.push_back(skipped_gate(s, sr.skip_reason));
      result.suites.push_back(std::move(sr));
      continue;
    }
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      auto it = rows[j].find(s);
      if (it == rows[j].end()) continue;
      sr.records.insert(sr.records.end(), it->second.begin(), it->second.end());
      sr.wall_seconds += seconds[j].at(s);
    }
    summarize(s, plan, sr);
    result.suites.push_back(std::move(sr));
  }
  return result;
}

}  // namespace detail

inline RunResult run_plan(const ExperimentPlan& plan, const RunOptions& opts = {}) {
  return plan.field == Field::real_orthogonal ? detail::run_plan_impl<double>(plan, opts)
                                              : detail::run_plan_impl<Complex>(plan, opts);
}

inline SuiteResult run_single_suite(ExperimentPlan plan, const std::string& suite, const RunOptions& opts = {}) {
  plan.suites = {suite};
  RunResult r = run_plan(plan, opts);
  return std::move(r.suites.front());
}

inline SuiteResult run_outlier_suite(const ExperimentPlan& plan, const RunOptions& opts = {}) {
  return run_single_suite(plan, "outlier", opts);
}
inline SuiteResult run_sticking_suite(const ExperimentPlan& plan, const RunOptions& opts = {}) {
  return run_single_suite(plan, "sticking", opts);
}
inline SuiteResult run_overlap_suite(const ExperimentPlan& plan, const RunOptions& opts = {}) {
  return run_single_suite(plan, "overlap", opts);
}
inline SuiteResult run_nonoutlier_suite(const ExperimentPlan& plan, const RunOptions& opts = {}) {
  return run_single_suite(plan, "nonoutlier", opts);
}
inline SuiteResult run_bbp_sweep(const ExperimentPlan& plan, const RunOptions& opts = {}) {
  return run_single_suite(plan, "bbp", opts);
}

}  // namespace freespike
