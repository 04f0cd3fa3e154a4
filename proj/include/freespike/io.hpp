#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "freespike/edge.hpp"
#include "freespike/errors.hpp"
#include "freespike/measure.hpp"
#include "freespike/spike.hpp"

namespace freespike {

using Json = nlohmann::ordered_json;

/// %.17g formatting: round-trips every double.
inline std::string fmt_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

/// JSON has no inf/nan; they are written as null.
inline Json json_number(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

namespace detail {

template <typename T>
T required(const Json& j, const char* key, const char* where) {
  if (!j.contains(key)) throw ConfigError(std::string(where) + ": missing key '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(where) + ": bad value for '" + key + "': " + e.what());
  }
}

template <typename T>
T optional_value(const Json& j, const char* key, T fallback, const char* where) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(where) + ": bad value for '" + key + "': " + e.what());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Density specs

inline DensitySpec density_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("density spec must be a JSON object");
  const auto kind = detail::required<std::string>(j, "kind", "density spec");
  const bool norm = detail::optional_value<bool>(j, "normalize", true, "density spec");
  if (kind == "uniform") {
    return DensitySpec::uniform(detail::required<double>(j, "lo", "uniform"),
                                detail::required<double>(j, "hi", "uniform"), norm);
  }
  if (kind == "beta_like" || kind == "beta") {
    return DensitySpec::beta_like(detail::required<double>(j, "lo", "beta_like"),
                                  detail::required<double>(j, "hi", "beta_like"),
                                  detail::required<double>(j, "t_minus", "beta_like"),
                                  detail::required<double>(j, "t_plus", "beta_like"), norm);
  }
  if (kind == "table") {
    return DensitySpec::table(detail::required<std::vector<double>>(j, "x", "table"),
                              detail::required<std::vector<double>>(j, "rho", "table"), norm);
  }
  if (kind == "point" || kind == "identity") {
    return DensitySpec::point(detail::optional_value<double>(j, "at", 1.0, "point"), norm);
  }
  throw ConfigError("unknown density kind '" + kind + "'");
}

inline Json density_to_json(const DensitySpec& s) {
  Json j;
  switch (s.kind()) {
    case DensityKind::uniform:
      j = {{"kind", "uniform"}, {"lo", s.lo()}, {"hi", s.hi()}};
      break;
    case DensityKind::beta_like:
      j = {{"kind", "beta_like"}, {"lo", s.lo()}, {"hi", s.hi()},
           {"t_minus", s.t_minus()}, {"t_plus", s.t_plus()}};
      break;
    case DensityKind::table:
      j = {{"kind", "table"}, {"x", s.table_density().nodes()}, {"rho", s.table_density().values()}};
      break;
    case DensityKind::point:
      j = {{"kind", "point"}, {"at", s.lo()}};
      break;
  }
  j["normalize"] = false;  // values above are already the rescaled ones
  return j;
}

// ---------------------------------------------------------------------------
// Overrides: --set a.b.c=value

/// Parses `value` as JSON when possible, otherwise keeps it as a string.
inline Json parse_override_value(const std::string& value) {
  try {
    return Json::parse(value);
  } catch (const nlohmann::json::exception&) {
    return Json(value);
  }
}

/// Applies "key.sub=value" to a JSON document; intermediate objects are created.
inline void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  Json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("override key '" + key + "' descends into a non-object");
      *node = Json::object();
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = parse_override_value(assignment.substr(eq + 1));
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  try {
    return Json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse '" + path.string() + "': " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Results

inline Json edge_to_json(const EdgeData& e) {
  return {{"E_plus", e.E_plus},
          {"omega_a_edge", e.omega_a_edge},
          {"omega_b_edge", e.omega_b_edge},
          {"sqrt_coeff_a", e.sqrt_coeff_a},
          {"sqrt_coeff_b", e.sqrt_coeff_b},
          {"density_coeff", e.density_coeff},
          {"bracket", {e.bracket_lo, e.bracket_hi}},
          {"precision", e.precision},
          {"dist_b_to_supp_a", e.dist_b_to_supp_a},
          {"dist_a_to_supp_b", e.dist_a_to_supp_b},
          {"degenerate", e.degenerate},
          {"cross_validated", e.cross_validated},
          {"im_m_outside", e.im_m_outside},
          {"im_m_inside", e.im_m_inside}};
}

inline Json prediction_to_json(const PredictionSet& P) {
  Json spikes = Json::array();
  for (const SpikePrediction& p : P.spikes) {
    spikes.push_back({{"side", side_name(p.side)},
                      {"index", p.index + 1},
                      {"label", p.label},
                      {"spiked_value", p.spiked_value},
                      {"strength", p.strength},
                      {"threshold", p.threshold},
                      {"margin", p.margin},
                      {"status", p.resolved ? "resolved" : (p.outlier ? "near_critical" : "subcritical")},
                      {"Delta", p.Delta},
                      {"location", p.location},
                      {"rate_bound", p.rate_bound},
                      {"overlap", json_number(p.overlap)},
                      {"overlap_budget", json_number(p.overlap_budget)}});
  }
  Json extremal = Json::array();
  for (const ExtremalPrediction& x : P.extremal) {
    extremal.push_back({{"rank", x.rank}, {"location", x.location}, {"rate_bound", x.rate_bound}});
  }
  Json j = {{"N", P.N},
            {"edge", edge_to_json(P.edge)},
            {"r_plus", P.labels.r_plus},
            {"s_plus", P.labels.s_plus},
            {"O", P.labels.O},
            {"O_plus", P.labels.O_plus},
            {"spikes", spikes},
            {"extremal", extremal}};
  if (P.sticking) {
    j["sticking"] = {{"gamma", P.sticking->gamma},
                     {"bound", json_number(P.sticking->bound)},
                     {"degenerate", P.sticking->degenerate},
                     {"near_critical", P.sticking->near_critical}};
  } else {
    j["sticking"] = nullptr;
  }
  return j;
}

/// Two-column CSV "x,density".
inline std::string density_csv(const GridDensity& d) {
  std::string s = "x,density,failed\n";
  for (std::size_t k = 0; k < d.grid.size(); ++k) {
    const bool f = !d.failed.empty() && d.failed[k];
    s += fmt_double(d.grid[k]) + "," + fmt_double(d.values[k]) + "," + (f ? "1" : "0") + "\n";
  }
  return s;
}

/// "atom,weight" CSV of an atomic measure.
inline std::string measure_csv(const AtomicMeasure& mu) {
  std::string s = "atom,weight\n";
  for (std::size_t k = 0; k < mu.size(); ++k) {
    s += fmt_double(mu.atoms()[k]) + "," + fmt_double(mu.weights()[k]) + "\n";
  }
  return s;
}

inline AtomicMeasure measure_from_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open measure file '" + path.string() + "'");
  std::vector<double> atoms, weights;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.rfind("atom", 0) == 0 || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string a, w;
    if (!std::getline(ls, a, ',')) continue;
    std::getline(ls, w, ',');
    try {
      atoms.push_back(std::stod(a));
      weights.push_back(w.empty() ? 1.0 : std::stod(w));
    } catch (const std::exception&) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": not a number");
    }
  }
  if (atoms.empty()) throw ConfigError("measure file '" + path.string() + "' has no atoms");
  double total = 0.0;
  for (double w : weights) total += w;
  for (double& w : weights) w /= total;
  return AtomicMeasure(atoms, weights, path.filename().string());
}

}  // namespace freespike
