#include <gtest/gtest.h>

#include "freespike/spike.hpp"

using namespace freespike;

namespace {

SpikeContext uniform_context(std::size_t n, std::vector<double> da, std::vector<double> db = {}) {
  const DensitySpec u = DensitySpec::uniform(0.5, 1.5);
  return SpikeContext::build(SpikeModel::from_specs(u, u, n, std::move(da), std::move(db)));
}

/// Strength placing a-spike 0 exactly `margin` above its threshold.
double strength_for_margin(std::size_t n, double margin) {
  const SpikeContext c = uniform_context(n, {});
  return (c.threshold(Side::a) + margin) / c.model.a()[0] - 1.0;
}

}  // namespace

TEST(SpikeModel, SortsAndPlacesSpikes) {
  SpikeModel m({1.0, 3.0, 2.0}, {1.0, 1.0, 1.0}, {0.1, 1.0}, {});
  EXPECT_DOUBLE_EQ(m.a()[0], 2.0);  // base 2 with d = 1 overtakes base 3 with d = 0.1
  EXPECT_DOUBLE_EQ(m.a_hat()[0], 4.0);
  EXPECT_NEAR(m.a_hat()[1], 3.3, 1e-15);
  EXPECT_DOUBLE_EQ(m.a_hat()[2], 1.0);
}

TEST(SpikeModel, RejectsBadInput) {
  EXPECT_THROW(SpikeModel({1.0, 2.0}, {1.0}, {}, {}), ConfigError);
  EXPECT_THROW(SpikeModel({1.0, 2.0}, {1.0, 1.0}, {-0.5}, {}), ConfigError);
  std::vector<double> many(33, 0.1);
  std::vector<double> base(40, 1.0);
  EXPECT_THROW(SpikeModel(base, base, many, {}), ConfigError);
}

TEST(Predict, IdentityPartnerIsExact) {
  const DensitySpec u = DensitySpec::uniform(0.5, 1.5);
  const SpikeContext ctx = SpikeContext::build(SpikeModel::from_specs(u, DensitySpec::point(1.0), 500, {0.8}, {}));
  const PredictionSet P = predict(ctx);
  ASSERT_EQ(P.spikes.size(), 1u);
  const SpikePrediction& p = P.spikes[0];
  EXPECT_NEAR(P.edge.E_plus, ctx.model.a()[0], 1e-12);
  EXPECT_TRUE(p.resolved);
  EXPECT_NEAR(p.location, ctx.model.a_hat()[0], 1e-12);
  EXPECT_NEAR(p.overlap, 1.0, 1e-12);
}

TEST(Predict, SubcriticalSpikeSticksToTheEdge) {
  const SpikeContext ctx = uniform_context(500, {0.01});
  const PredictionSet P = predict(ctx);
  const SpikePrediction& p = P.spikes[0];
  EXPECT_FALSE(p.outlier);
  EXPECT_FALSE(p.resolved);
  EXPECT_LT(p.margin, 0.0);
  EXPECT_DOUBLE_EQ(p.location, P.edge.E_plus);
  EXPECT_EQ(P.labels.r_plus, 0u);
  EXPECT_EQ(P.extremal.front().rank, 1u);
}

TEST(Predict, NearCriticalSpikeIsAnOutlierButNotResolved) {
  const std::size_t n = 1000;
  const SpikeContext ctx = uniform_context(n, {strength_for_margin(n, 0.5 * std::pow(1000.0, -1.0 / 3.0))});
  const LabelMap L = classify(ctx);
  EXPECT_EQ(L.O.size(), 1u);
  EXPECT_TRUE(L.O_plus.empty());
}

TEST(Predict, LabelsFollowLocations) {
  const std::size_t n = 400;
  const SpikeContext ctx = uniform_context(n, {strength_for_margin(n, 0.3)}, {1.2});
  const LabelMap L = classify(ctx);
  ASSERT_EQ(L.location_a.size(), 1u);
  ASSERT_EQ(L.location_b.size(), 1u);
  const bool a_first = L.location_a[0] > L.location_b[0];
  EXPECT_EQ(L.pi_a[0], a_first ? 1u : 2u);
  EXPECT_EQ(L.pi_b[0], a_first ? 2u : 1u);
  EXPECT_EQ(L.pi_a[1], 3u);
  EXPECT_EQ(L.O_plus.size(), 2u);
}

TEST(Predict, MasterFactorVanishesAtPrediction) {
  const std::size_t n = 1000;
  const SpikeContext ctx = uniform_context(n, {strength_for_margin(n, 0.5)}, {0.9});
  const PredictionSet P = predict(ctx);
  for (const SpikePrediction& p : P.spikes) {
    ASSERT_TRUE(p.resolved);
    const std::vector<double> f = master_equation_factors(ctx, p.location);
    const std::size_t pos = p.side == Side::a ? p.index : ctx.model.r() + p.index;
    EXPECT_LE(std::abs(f[pos]) / ((p.strength + 1.0) / p.strength), 1e-8);
  }
}

TEST(Predict, UniformMarginHalfFrozenValues) {
  const std::size_t n = 1000;
  const SpikeContext ctx = uniform_context(n, {strength_for_margin(n, 0.5)});
  const PredictionSet P = predict(ctx);
  const SpikePrediction& p = P.spikes[0];
  EXPECT_NEAR(p.margin, 0.5, 1e-12);
  EXPECT_NEAR(p.location, 2.24497803565228, 1e-9);
  EXPECT_NEAR(p.overlap, 0.8318, 5e-4);
  ASSERT_TRUE(P.sticking.has_value());
  EXPECT_NEAR(P.sticking->gamma, 0.5, 1e-12);
  EXPECT_NEAR(P.sticking->bound, 1.0 / (1000.0 * 0.5), 1e-15);
}

TEST(Overlaps, OrthogonalDirectionHasZeroLimit) {
  const std::size_t n = 300;
  const SpikeContext ctx = uniform_context(n, {strength_for_margin(n, 0.5)});
  const LabelMap L = classify(ctx);
  std::vector<double> v(n, 0.0);
  v[5] = 1.0;
  const std::size_t S[] = {L.pi_a[0]};
  const OverlapPrediction o = predict_overlaps(ctx, L, S, v);
  EXPECT_EQ(o.g_a, 0.0);
  EXPECT_GT(o.budget_a, 0.0);
}

TEST(Overlaps, RejectsUnresolvedLabels) {
  const SpikeContext ctx = uniform_context(300, {0.01});
  const LabelMap L = classify(ctx);
  std::vector<double> v(300, 0.0);
  v[0] = 1.0;
  const std::size_t S[] = {1};
  EXPECT_ANY_THROW(predict_overlaps(ctx, L, S, v));
}

TEST(NonOutlier, BoundDecreasesWithMargin) {
  const std::size_t n = 1000;
  std::vector<double> v(n, 0.0);
  v[0] = 1.0;
  double prev = std::numeric_limits<double>::infinity();
  for (double margin : {0.2, 0.5, 1.0, 2.0}) {
    const SpikeContext ctx = uniform_context(n, {strength_for_margin(n, margin)});
    const LabelMap L = classify(ctx);
    const double b = predict_nonoutlier_bound(ctx, L, Side::a, 2, v);
    EXPECT_LT(b, prev);
    prev = b;
  }
}

TEST(NonOutlier, RejectsOutlierIndicesAndLargeIndices) {
  const std::size_t n = 200;
  const SpikeContext ctx = uniform_context(n, {strength_for_margin(n, 0.5)});
  const LabelMap L = classify(ctx);
  std::vector<double> v(n, 0.0);
  v[0] = 1.0;
  EXPECT_THROW(predict_nonoutlier_bound(ctx, L, Side::a, 1, v), DomainError);
  EXPECT_THROW(predict_nonoutlier_bound(ctx, L, Side::a, 50, v), DomainError);
}

TEST(Sticking, NeedsSpikesAndFlagsDegenerateGamma) {
  EXPECT_THROW(sticking_bound(uniform_context(100, {})), DomainError);
  const std::size_t n = 300;
  const SpikeContext ctx = uniform_context(n, {strength_for_margin(n, 0.0)});
  const StickingBound sb = sticking_bound(ctx);
  EXPECT_TRUE(sb.degenerate);
  EXPECT_TRUE(std::isinf(sb.bound));
}
