#include <gtest/gtest.h>

#include "freespike/io.hpp"

using namespace freespike;

TEST(Format, DoublesRoundTrip) {
  for (double x : {0.1, 1.0 / 3.0, 2.24497803565228, 1e-300, -7.5}) {
    EXPECT_EQ(std::stod(fmt_double(x)), x);
  }
  EXPECT_EQ(fmt_double(std::numeric_limits<double>::infinity()), "inf");
  EXPECT_TRUE(json_number(std::nan("")).is_null());
}

TEST(DensityJson, AllKindsRoundTrip) {
  const std::vector<Json> docs = {
      {{"kind", "uniform"}, {"lo", 0.5}, {"hi", 1.5}},
      {{"kind", "beta_like"}, {"lo", 0.5}, {"hi", 2.0}, {"t_minus", -0.5}, {"t_plus", 0.5}},
      {{"kind", "table"}, {"x", {0.5, 1.0, 1.5}}, {"rho", {0.0, 1.0, 0.0}}},
      {{"kind", "point"}, {"at", 2.0}}};
  for (const Json& d : docs) {
    const DensitySpec s = density_from_json(d);
    const DensitySpec t = density_from_json(density_to_json(s));
    EXPECT_EQ(density_to_json(s).dump(), density_to_json(t).dump());
    EXPECT_NEAR(t.mean(), 1.0, 1e-9);
  }
}

TEST(DensityJson, Errors) {
  EXPECT_THROW(density_from_json(Json{{"kind", "gaussian"}}), ConfigError);
  EXPECT_THROW(density_from_json(Json{{"kind", "uniform"}, {"lo", 0.5}}), ConfigError);
  EXPECT_THROW(density_from_json(Json{{"kind", "uniform"}, {"lo", "a"}, {"hi", 1.0}}), ConfigError);
  EXPECT_THROW(density_from_json(Json::array()), ConfigError);
}

TEST(Overrides, CreateAndReplace) {
  Json j = {{"a", {{"b", 1}}}};
  apply_override(j, "a.b=2.5");
  apply_override(j, "a.c.d=\"x\"");
  apply_override(j, "e=word");
  EXPECT_DOUBLE_EQ(j["a"]["b"].get<double>(), 2.5);
  EXPECT_EQ(j["a"]["c"]["d"].get<std::string>(), "x");
  EXPECT_EQ(j["e"].get<std::string>(), "word");
  EXPECT_THROW(apply_override(j, "a.b.c=1"), ConfigError);
  EXPECT_THROW(apply_override(j, "a..b=1"), ConfigError);
}

TEST(MeasureCsv, RoundTrip) {
  const AtomicMeasure mu({0.5, 1.25, 2.0}, {0.25, 0.5, 0.25});
  const auto path = std::filesystem::temp_directory_path() / "freespike_measure.csv";
  write_text_file(path, measure_csv(mu));
  const AtomicMeasure nu = measure_from_csv(path);
  ASSERT_EQ(nu.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(nu.atoms()[k], mu.atoms()[k]);
    EXPECT_EQ(nu.weights()[k], mu.weights()[k]);
  }
}

TEST(PredictionJson, SubcriticalStatus) {
  const DensitySpec u = DensitySpec::uniform(0.5, 1.5);
  const SpikeContext ctx = SpikeContext::build(SpikeModel::from_specs(u, u, 200, {0.01}, {}));
  const Json j = prediction_to_json(predict(ctx));
  EXPECT_EQ(j["spikes"][0]["status"], "subcritical");
  EXPECT_EQ(j["spikes"][0]["location"].get<double>(), j["edge"]["E_plus"].get<double>());
  EXPECT_TRUE(j["spikes"][0]["overlap"].is_null());
}
