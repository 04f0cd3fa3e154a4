#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "freespike/io.hpp"

using namespace freespike;
namespace fs = std::filesystem;

namespace {

const fs::path kScratch = FREESPIKE_SCRATCH;
const fs::path kConfigs = FREESPIKE_CONFIGS;

int run(const std::string& args) {
  const std::string cmd = std::string(FREESPIKE_CLI) + " " + args + " --log-level warn > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path fresh(const std::string& name) {
  const fs::path d = kScratch / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// small grid so the identity plan runs in seconds
const std::string kSmall = " --set 'N_grid=[100,150,200]' --set 'grids={}' --set trials=2";

}  // namespace

TEST(Cli, VerifyIdentityPlanPasses) {
  const fs::path out = fresh("verify");
  const std::string cfg = (kConfigs / "identity.json").string();
  EXPECT_EQ(run("verify --config " + cfg + " --out " + out.string() + kSmall +
                " --suite outlier --suite overlap --suite master --threads 1"),
            0);
  const Json s = read_json_file(out / "summary.json");
  EXPECT_TRUE(s.at("all_pass").get<bool>());
  EXPECT_TRUE(fs::exists(out / "outlier.csv"));
}

TEST(Cli, PredictionsRoundTripThroughVerify) {
  const fs::path out = fresh("roundtrip");
  const std::string cfg = (kConfigs / "uniform2.json").string();
  const std::string common = " --config " + cfg + " --out " + out.string() + kSmall + " --threads 1";
  ASSERT_EQ(run("predict" + common), 0);
  ASSERT_TRUE(fs::exists(out / "predictions.json"));
  run("verify" + common + " --suite outlier --predictions " + (out / "predictions.json").string());
  const Json s = read_json_file(out / "summary.json");
  bool seen = false;
  for (const Json& g : s.at("suites").at("outlier").at("gates")) {
    if (g.at("name") == "prediction_round_trip_mismatches") {
      seen = true;
      EXPECT_TRUE(g.at("pass").get<bool>()) << g.dump();
    }
  }
  EXPECT_TRUE(seen);
}

TEST(Cli, SubcriticalSpikeSitsAtEdge) {
  const fs::path out = fresh("subcritical");
  const std::string cfg = (kConfigs / "uniform2.json").string();
  ASSERT_EQ(run("predict --config " + cfg + " --out " + out.string() +
                " --set 'N_grid=[200,400,800]' --set 'spikes.a=[{\"strength\":0.01}]'"),
            0);
  const Json j = read_json_file(out / "predictions.json");
  for (const Json& p : j.at("predictions")) {
    const Json& spike = p.at("spikes").at(0);
    EXPECT_EQ(spike.at("status"), "subcritical");
    EXPECT_EQ(spike.at("location").get<double>(), p.at("edge").at("E_plus").get<double>());
  }
}

TEST(Cli, ConvolveDensityIntegratesToOne) {
  const fs::path out = fresh("convolve");
  const std::string cfg = (kConfigs / "uniform2.json").string();
  ASSERT_EQ(run("convolve --config " + cfg + " --out " + out.string() + " --atoms 400 --points 3000"), 0);
  std::ifstream in(out / "density.csv");
  std::string line;
  std::getline(in, line);
  std::vector<double> x, y;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string a, b;
    std::getline(ls, a, ',');
    std::getline(ls, b, ',');
    x.push_back(std::stod(a));
    y.push_back(std::stod(b));
  }
  ASSERT_GT(x.size(), 100u);
  double integral = 0.0;
  for (std::size_t k = 1; k < x.size(); ++k) integral += 0.5 * (y[k] + y[k - 1]) * (x[k] - x[k - 1]);
  EXPECT_NEAR(integral, 1.0, 5e-3);
  EXPECT_TRUE(fs::exists(out / "edge.json"));
}

TEST(Cli, ConfigProblemsExitWithTwo) {
  const fs::path out = fresh("bad");
  write_text_file(out / "bad.json", "{\"alpha\": {\"kind\": \"nope\"}}");
  EXPECT_EQ(run("predict --config " + (out / "bad.json").string() + " --out " + out.string()), 2);
  EXPECT_EQ(run("predict --config " + (out / "missing.json").string()), 2);
  const std::string cfg = (kConfigs / "uniform2.json").string();
  EXPECT_EQ(run("predict --config " + cfg + " --out " + out.string() + " --set trials=0"), 2);
  EXPECT_EQ(run("verify --config " + cfg + " --out " + out.string() + kSmall +
                " --suite outlier --set 'spikes.a=[{\"strength\":0.01}]'"),
            2);
}
