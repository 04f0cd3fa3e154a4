#include <gtest/gtest.h>

#include <random>

#include "freespike/harness.hpp"

using namespace freespike;

namespace {

ExperimentPlan small_identity_plan() {
  ExperimentPlan p;
  p.beta = DensitySpec::point(1.0);
  p.N_grid = {60, 90, 120};
  p.trials = 2;
  p.suites = {"outlier", "overlap", "sticking", "nonoutlier", "master"};
  return p;
}

}  // namespace

TEST(FitRate, ExactPowerLaw) {
  const std::vector<double> n{250, 500, 1000, 2000};
  std::vector<double> m;
  for (double x : n) m.push_back(3.0 * std::pow(x, -0.5));
  const RateFit f = fit_rate(n, m);
  EXPECT_NEAR(f.slope, -0.5, 1e-12);
  EXPECT_NEAR(f.r2, 1.0, 1e-12);
}

TEST(FitRate, NoisyTwoThirds) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> noise(0.9, 1.1);
  const std::vector<double> n{250, 500, 1000, 2000};
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> m;
    for (double x : n) m.push_back(std::pow(x, -2.0 / 3.0) * noise(rng));
    const RateFit f = fit_rate(n, m);
    EXPECT_GE(f.slope, -0.75);
    EXPECT_LE(f.slope, -0.58);
  }
}

TEST(FitRate, NeedsThreePoints) {
  const std::vector<double> n{250, 500}, m{0.1, 0.05};
  EXPECT_THROW(fit_rate(n, m), PlanError);
  const std::vector<double> n3{250, 500, 1000}, bad{0.1, 0.0, 0.05};
  EXPECT_THROW(fit_rate(n3, bad), DomainError);
}

TEST(Isotonic, NonDecreasingAndWeighted) {
  const std::vector<double> y{0.0, 0.3, 0.1, 0.8, 0.7, 1.0};
  const std::vector<double> w{1, 1, 3, 1, 1, 1};
  const auto f = isotonic_increasing(y, w);
  for (std::size_t k = 1; k < f.size(); ++k) EXPECT_LE(f[k - 1], f[k]);
  EXPECT_NEAR(f[1], 0.15, 1e-15);
  EXPECT_NEAR(f[3], 0.75, 1e-15);
}

TEST(Median, EvenAndOdd) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 3.0, 2.0}), 2.5);
}

TEST(Plan, JsonRoundTrip) {
  ExperimentPlan p = small_identity_plan();
  p.spikes_b = {{SpikeSpecKind::strength, 0.7}};
  p.grids["master"] = {{60}, 1};
  const ExperimentPlan q = plan_from_json(plan_to_json(p));
  EXPECT_EQ(plan_to_json(q).dump(), plan_to_json(p).dump());
}

TEST(Plan, Validation) {
  Json j = plan_to_json(ExperimentPlan{});
  j["N_grid"] = {500, 250};
  EXPECT_THROW(plan_from_json(j), ConfigError);
  j = plan_to_json(ExperimentPlan{});
  j["trials"] = 0;
  EXPECT_THROW(plan_from_json(j), ConfigError);
  j = plan_to_json(ExperimentPlan{});
  j["bogus"] = 1;
  EXPECT_THROW(plan_from_json(j), ConfigError);
  j = plan_to_json(ExperimentPlan{});
  j["suites"] = {"outlier", "nope"};
  EXPECT_THROW(plan_from_json(j), ConfigError);
}

TEST(Plan, OverridesReachNestedKeys) {
  Json j = plan_to_json(ExperimentPlan{});
  apply_override(j, "trials=3");
  apply_override(j, "local_law.eta=0.02");
  apply_override(j, "spikes.a=[0.7]");
  const ExperimentPlan p = plan_from_json(j);
  EXPECT_EQ(p.trials, 3u);
  EXPECT_DOUBLE_EQ(p.local_law_eta, 0.02);
  ASSERT_EQ(p.spikes_a.size(), 1u);
  EXPECT_DOUBLE_EQ(p.spikes_a[0].value, 0.7);
  EXPECT_THROW(apply_override(j, "novalue"), ConfigError);
}

TEST(Plan, MarginsResolveToStrengthsPerN) {
  ExperimentPlan p;
  const SpikeModel m = resolve_model(p, 400);
  const SpikeContext ctx = SpikeContext::build(m);
  EXPECT_NEAR(ctx.model.a_hat()[0] - ctx.threshold(Side::a), 0.5, 1e-12);
  p.spikes_a = {{SpikeSpecKind::margin, -0.5}};
  EXPECT_THROW(resolve_model(p, 400), PlanError);
}

TEST(Run, IdentityPlanIsExactAndPasses) {
  RunOptions o;
  o.threads = 1;
  const RunResult r = run_plan(small_identity_plan(), o);
  EXPECT_TRUE(r.all_pass()) << r.summary().dump(2);
  for (const SuiteResult& s : r.suites) {
    for (const TrialRecord& rec : s.records) {
      if (rec.target.rfind("outlier:", 0) == 0 || rec.target.rfind("overlap:", 0) == 0) {
        EXPECT_LE(rec.abs_error, 1e-9) << rec.target;
      }
    }
  }
}

TEST(Run, DeterministicAcrossThreadCounts) {
  ExperimentPlan p = small_identity_plan();
  p.alpha = DensitySpec::uniform(0.5, 1.5);
  p.beta = DensitySpec::uniform(0.5, 1.5);
  p.suites = {"outlier", "sticking"};
  RunOptions one, two;
  one.threads = 1;
  two.threads = 2;
  const RunResult a = run_plan(p, one);
  const RunResult b = run_plan(p, two);
  ASSERT_EQ(a.suites.size(), b.suites.size());
  for (std::size_t k = 0; k < a.suites.size(); ++k) {
    EXPECT_EQ(records_csv(a.suites[k].records), records_csv(b.suites[k].records));
  }
  const std::string csv = records_csv(a.suites[0].records);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), csv_header());
}

TEST(Run, NoSpikesMeansExactSticking) {
  ExperimentPlan p;
  p.N_grid = {80};
  p.trials = 2;
  p.spikes_a.clear();
  p.suites = {"sticking"};
  RunOptions o;
  o.threads = 1;
  const SuiteResult s = run_sticking_suite(p, o);
  ASSERT_FALSE(s.records.empty());
  for (const TrialRecord& r : s.records) EXPECT_EQ(r.realized, 0.0) << r.target;
  EXPECT_TRUE(s.pass());
}

TEST(Run, AllSubcriticalPlanIsAPlanError) {
  ExperimentPlan p;
  p.N_grid = {80};
  p.trials = 1;
  p.spikes_a = {{SpikeSpecKind::strength, 0.01}};
  EXPECT_THROW(run_outlier_suite(p), PlanError);
}

TEST(Run, BbpSweepDetectsStrongSpikes) {
  ExperimentPlan p;
  p.N_grid = {150};
  p.trials = 4;
  p.bbp_margins = {-5, 5, 8};
  RunOptions o;
  o.threads = 1;
  const SuiteResult s = run_bbp_sweep(p, o);
  EXPECT_NE(s.extra_csv.find("N,margin,trials,detected,fraction,isotonic"), std::string::npos);
  for (const Gate& g : s.gates) EXPECT_TRUE(g.pass) << g.name << " " << g.value;
}

TEST(Run, WritesCsvAndSummary) {
  RunOptions o;
  o.threads = 1;
  ExperimentPlan p = small_identity_plan();
  p.suites = {"outlier"};
  const RunResult r = run_plan(p, o);
  const auto dir = std::filesystem::temp_directory_path() / "freespike_harness_test";
  std::filesystem::remove_all(dir);
  r.write(dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "outlier.csv"));
  const Json s = read_json_file(dir / "summary.json");
  EXPECT_TRUE(s.at("all_pass").get<bool>());
  EXPECT_TRUE(s.contains("operationalization"));
}
