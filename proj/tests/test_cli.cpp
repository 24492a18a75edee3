#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "nufe/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kCli = NUFE_CLI_PATH;
const std::string kDefaultConfig = std::string(NUFE_CONFIG_DIR) + "/default.json";

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("nufe_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = kCli + " " + args + " > " + (log.string() + ".out") + " 2> " + (log.string() + ".err");
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) rows.push_back(nufe::split_csv_line(line));
  return rows;
}

}  // namespace

TEST(Cli, OptimaAndCache) {
  const auto dir = fresh_dir("optima");
  const std::string args = "--config " + kDefaultConfig + " --out " + dir.string() + " optima";
  ASSERT_EQ(run(args, dir / "first"), 0) << slurp(dir / "first.err");
  const auto j = json::parse(slurp(dir / "optima.json"));
  ASSERT_EQ(j["optima"].size(), 2u);
  EXPECT_NEAR(j["optima"][0][0].get<double>(), 5.13, 0.02);
  EXPECT_NEAR(j["optima"][0][1].get<double>(), 7.71, 0.02);
  EXPECT_NEAR(j["optima"][1][0].get<double>(), -5.13, 0.02);
  EXPECT_NEAR(j["optima"][1][1].get<double>(), 7.71, 0.02);
  EXPECT_TRUE(j.contains("config_hash"));
  EXPECT_TRUE(j.contains("master_seed"));
  const std::string first = slurp(dir / "optima.json");

  ASSERT_EQ(run(args, dir / "second"), 0);
  EXPECT_EQ(slurp(dir / "optima.json"), first);
  EXPECT_NE(slurp(dir / "second.err").find("using cache"), std::string::npos);
  EXPECT_EQ(slurp(dir / "first.err").find("using cache"), std::string::npos);
}

TEST(Cli, RestrictedBoxGivesOneOptimum) {
  const auto dir = fresh_dir("restricted");
  ASSERT_EQ(run("--prior-a 0.5 20 --out " + dir.string() + " optima", dir / "log"), 0) << slurp(dir / "log.err");
  const auto j = json::parse(slurp(dir / "optima.json"));
  EXPECT_EQ(j["optima"].size(), 1u);
}

TEST(Cli, TheoryCoefficients) {
  const auto dir = fresh_dir("theory");
  ASSERT_EQ(run("--config " + kDefaultConfig + " --out " + dir.string() + " theory", dir / "log"), 0)
      << slurp(dir / "log.err");
  const auto c = json::parse(slurp(dir / "coefficients.json"));
  const auto opt = nufe::optimum_set_from_json(json::parse(slurp(dir / "cache" / ("optima-" + c["config_hash"].get<std::string>() + ".json"))));
  const auto vc = nufe::variance_condition_check(opt.optima[0], opt.optima[1], nufe::ModelSpec{});
  const double var_log_ratio = vc.second_moment - vc.mean * vc.mean;
  EXPECT_NEAR(c["mu"].get<double>(), std::sqrt(var_log_ratio / (2 * std::numbers::pi)), 1e-8);
  EXPECT_EQ(c["lambda_hat"].get<double>(), 1.0);
  EXPECT_EQ(c["m_hat"].get<double>(), 1.0);

  const auto rows = read_csv(dir / "theory.csv");
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"n", "theory_F_minus_nL0", "theory_G"}));
}

TEST(Cli, BetaHalvesLogCoefficient) {
  const auto d1 = fresh_dir("beta1"), d2 = fresh_dir("beta2");
  ASSERT_EQ(run("--config " + kDefaultConfig + " --out " + d1.string() + " theory", d1 / "log"), 0);
  ASSERT_EQ(run("--config " + kDefaultConfig + " --beta 2 --out " + d2.string() + " theory", d2 / "log"), 0)
      << slurp(d2 / "log.err");
  const double mu = json::parse(slurp(d1 / "coefficients.json"))["mu"].get<double>();
  const auto r1 = read_csv(d1 / "theory.csv"), r2 = read_csv(d2 / "theory.csv");
  for (std::size_t i = 1; i < r1.size(); ++i) {
    const double n = std::stod(r1[i][0]);
    const double log1 = std::stod(r1[i][1]) + mu * std::sqrt(n);
    const double log2 = std::stod(r2[i][1]) + mu * std::sqrt(n);
    EXPECT_NEAR(log2, 0.5 * log1, 1e-9);
    EXPECT_EQ(r2[i][2], "nan");
  }
}

TEST(Cli, ExperimentSmokeRunIsDeterministic) {
  const auto d1 = fresh_dir("exp1"), d2 = fresh_dir("exp2");
  const std::string common = "--config " + kDefaultConfig + " --replications 2 --sample-sizes 100,200 ";
  ASSERT_EQ(run(common + "--out " + d1.string() + " experiment", d1 / "log"), 0) << slurp(d1 / "log.err");
  ASSERT_EQ(run(common + "--out " + d2.string() + " experiment", d2 / "log"), 0);
  const auto rows = read_csv(d1 / "summary.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0][0], "n");
  EXPECT_EQ(rows[1][0], "100");
  EXPECT_EQ(rows[2][0], "200");
  for (const char* f : {"summary.csv", "runs.csv", "fit.json"}) EXPECT_EQ(slurp(d1 / f), slurp(d2 / f)) << f;
  EXPECT_EQ(read_csv(d1 / "runs.csv").size(), 5u);
}

TEST(Cli, Validation) {
  const auto dir = fresh_dir("validation");
  EXPECT_NE(run("--config " + kDefaultConfig + " --replications 1 --out " + dir.string() + " clt", dir / "a"), 0);
  EXPECT_NE(run("--config " + kDefaultConfig + " --sample-sizes 200,100 --out " + dir.string() + " experiment", dir / "b"), 0);
  EXPECT_NE(run("--config /nonexistent.json optima", dir / "c"), 0);
  EXPECT_NE(run("--out " + dir.string(), dir / "d"), 0);
}

TEST(Cli, CltSmallRun) {
  const auto dir = fresh_dir("clt");
  ASSERT_EQ(run("--config " + kDefaultConfig + " --replications 200 --out " + dir.string() + " clt --n 100", dir / "log"), 0)
      << slurp(dir / "log.err");
  const auto j = json::parse(slurp(dir / "clt.json"));
  EXPECT_EQ(j["n"].get<int>(), 100);
  EXPECT_EQ(j["replications"].get<int>(), 200);
  EXPECT_EQ(j["covariance"].size(), 2u);
}
