#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "nufe/population.hpp"

using namespace nufe;

namespace {

const ModelSpec& spec() {
  static const ModelSpec s;
  return s;
}

const OptimumSet& optima() {
  static const OptimumSet opt = find_optima(spec());
  return opt;
}

}  // namespace

TEST(LogLoss, EntropyPlusMeanSquaredGap) {
  // midpoint rule on 10^6 cells as the independent route for E[(f - s)^2]
  const Parameter w{3.0, 2.0};
  const int cells = 1'000'000;
  double acc = 0.0;
  for (int k = 0; k < cells; ++k) {
    const double x = -2.0 + 4.0 * (k + 0.5) / cells;
    const double d = true_regression(x) - model_mean(x, w);
    acc += d * d;
  }
  const double gap = acc / cells / (2 * 0.04);
  const double entropy = std::log(std::sqrt(2 * std::numbers::pi) * 0.2) + 0.5;
  EXPECT_NEAR(log_loss(w, spec()), entropy + gap, 1e-8);
  EXPECT_GT(log_loss(w, spec()), entropy);
}

TEST(LogLoss, MirrorSymmetry) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-20.0, 20.0);
  for (int k = 0; k < 50; ++k) {
    const double a = u(rng), b = u(rng);
    EXPECT_NEAR(log_loss({a, b}, spec()), log_loss({-a, b}, spec()), 1e-10);
  }
}

TEST(LogLoss, GradientMatchesFiniteDifference) {
  const Parameter w{4.0, 6.0};
  const auto g = log_loss_gradient(w, spec());
  const double h = 1e-5;
  EXPECT_NEAR(g(0), (log_loss({w.a + h, w.b}, spec()) - log_loss({w.a - h, w.b}, spec())) / (2 * h), 1e-7);
  EXPECT_NEAR(g(1), (log_loss({w.a, w.b + h}, spec()) - log_loss({w.a, w.b - h}, spec())) / (2 * h), 1e-7);
}

TEST(FindOptima, PaperValues) {
  const auto& opt = optima();
  ASSERT_EQ(opt.size(), 2u);
  EXPECT_NEAR(opt.optima[0].a, 5.13, 0.02);
  EXPECT_NEAR(opt.optima[0].b, 7.71, 0.02);
  EXPECT_NEAR(opt.optima[1].a, -5.13, 0.02);
  EXPECT_NEAR(opt.optima[1].b, 7.71, 0.02);
  EXPECT_EQ(opt.lambda, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(opt.multiplicity, (std::vector<int>{1, 1}));
}

TEST(FindOptima, Mirrored) {
  const auto& opt = optima();
  EXPECT_NEAR(opt.optima[0].a, -opt.optima[1].a, 1e-6);
  EXPECT_NEAR(opt.optima[0].b, opt.optima[1].b, 1e-6);
}

TEST(FindOptima, LossAtOptimaEqualsL0) {
  const auto& opt = optima();
  for (const auto& w : opt.optima) EXPECT_NEAR(log_loss(w, spec()) - opt.L0, 0.0, 1e-8);
  EXPECT_NEAR(avg_error(opt.optima[0], opt, spec()), 0.0, 1e-10);
  const auto g = log_loss_gradient(opt.optima[0], spec());
  EXPECT_LT(g.norm(), 1e-8);
}

TEST(FindOptima, BranchesPartitionBySignOfA) {
  const auto& opt = optima();
  EXPECT_EQ(opt.branch_of({0.0, 3.0}), std::optional<std::size_t>(0));
  EXPECT_EQ(opt.branch_of({-1e-300, 3.0}), std::optional<std::size_t>(1));
  EXPECT_EQ(opt.branch_of({7.0, -20.0}), std::optional<std::size_t>(0));
  EXPECT_EQ(opt.branch_of(opt.optima[1]), std::optional<std::size_t>(1));
}

TEST(FindOptima, RestrictedBoxHasOneOptimum) {
  ModelSpec s;
  s.prior_a = {0.5, 20.0};
  const auto opt = find_optima(s);
  ASSERT_EQ(opt.size(), 1u);
  EXPECT_NEAR(opt.optima[0].a, optima().optima[0].a, 1e-6);
  EXPECT_EQ(opt.branches.size(), 1u);
  EXPECT_TRUE(opt.branches[0].contains({-100.0, 100.0}));
}

TEST(FindOptima, StableUnderScanRefinement) {
  OptimaSearchOptions fine;
  fine.scan_resolution = 162;
  const auto opt = find_optima(spec(), fine);
  ASSERT_EQ(opt.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_LT(distance(opt.optima[i], optima().optima[i]), 1e-6);
}

TEST(FindOptima, BoundaryOnlyBoxIsAConfigError) {
  ModelSpec s;
  s.prior_a = {-0.5, 0.5};
  s.prior_b = {-20.0, -19.0};
  EXPECT_THROW(find_optima(s), ConfigError);
}

TEST(AvgError, NonNegativeAndDefinitional) {
  const auto& opt = optima();
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(-20.0, 20.0);
  for (int k = 0; k < 300; ++k) {
    const Parameter w{u(rng), u(rng)};
    const double K = avg_error(w, opt, spec());
    EXPECT_GE(K, -1e-10);
    EXPECT_NEAR(log_loss(w, spec()), K + opt.L0, 1e-12);
  }
}

TEST(AvgError, MirrorSymmetry) {
  const auto& opt = optima();
  for (const Parameter w : {Parameter{1.0, 2.0}, Parameter{7.5, -3.0}, Parameter{15.0, 12.0}})
    EXPECT_NEAR(avg_error(w, opt, spec()), avg_error({-w.a, w.b}, opt, spec()), 1e-10);
}

TEST(AvgError, FarPointAgainstMonteCarlo) {
  const auto& opt = optima();
  const Parameter w{0.0, -20.0};
  const double K = avg_error(w, opt, spec());
  EXPECT_GT(K, 0.0);
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> ux(-2.0, 2.0);
  std::normal_distribution<double> ne;
  const int draws = 1'000'000;
  double s = 0, s2 = 0;
  for (int k = 0; k < draws; ++k) {
    const double x = ux(rng), y = true_regression(x) + 0.2 * ne(rng);
    const double f = log_model_density(x, y, opt.optima[0], spec()) - log_model_density(x, y, w, spec());
    s += f;
    s2 += f * f;
  }
  const double mean = s / draws, se = std::sqrt((s2 / draws - mean * mean) / draws);
  EXPECT_LT(std::abs(mean - K), 3 * se);
}

TEST(Covariance, SymmetricPsdAndMirrored) {
  const auto V = covariance(optima(), spec());
  EXPECT_NO_THROW(validate_covariance(V));
  EXPECT_NEAR(V(0, 0), V(1, 1), 1e-8);
  EXPECT_DOUBLE_EQ(V(0, 1), V(1, 0));
  EXPECT_GE(V(0, 0), 0.0);
}

TEST(Covariance, MatchesMonteCarlo) {
  const auto& opt = optima();
  const auto V = covariance(opt, spec());
  std::mt19937_64 rng(37);
  std::uniform_real_distribution<double> ux(-2.0, 2.0);
  std::normal_distribution<double> ne;
  const int draws = 1'000'000;
  double s[2][2] = {}, s2[2][2] = {};
  for (int k = 0; k < draws; ++k) {
    const double x = ux(rng), y = true_regression(x) + 0.2 * ne(rng);
    const double l[2] = {log_model_density(x, y, opt.optima[0], spec()) + opt.L0,
                         log_model_density(x, y, opt.optima[1], spec()) + opt.L0};
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        s[i][j] += l[i] * l[j];
        s2[i][j] += l[i] * l[i] * l[j] * l[j];
      }
  }
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      const double mean = s[i][j] / draws, se = std::sqrt((s2[i][j] / draws - mean * mean) / draws);
      EXPECT_LT(std::abs(mean - V(i, j)), 3 * se) << i << "," << j;
    }
}

TEST(Covariance, DuplicatedOptimumGivesEqualEntries) {
  OptimumSet dup = optima();
  dup.optima[1] = dup.optima[0];
  const auto V = covariance(dup, spec());
  EXPECT_NEAR(V(0, 0), V(0, 1), 1e-12);
  EXPECT_NEAR(V(1, 1), V(0, 1), 1e-12);
}

TEST(Covariance, LogRatioVarianceIdentity) {
  const auto& opt = optima();
  const auto V = covariance(opt, spec());
  const auto c = variance_condition_check(opt.optima[0], opt.optima[1], spec());
  EXPECT_NEAR(c.second_moment - c.mean * c.mean, V(0, 0) + V(1, 1) - 2 * V(0, 1), 1e-8);
}

TEST(Covariance, ValidationRejectsBadMatrices) {
  Eigen::MatrixXd asym(2, 2);
  asym << 1, 0.5, 0.2, 1;
  EXPECT_THROW(validate_covariance(asym), std::invalid_argument);
  Eigen::MatrixXd indefinite(2, 2);
  indefinite << 1, 2, 2, 1;
  EXPECT_THROW(validate_covariance(indefinite), std::invalid_argument);
}

TEST(VarianceCondition, IdenticalParameters) {
  const auto w = optima().optima[0];
  const auto c = variance_condition_check(w, w, spec());
  EXPECT_EQ(c.mean, 0.0);
  EXPECT_EQ(c.second_moment, 0.0);
  EXPECT_TRUE(c.holds);
}

TEST(VarianceCondition, MirroredOptimaViolateIt) {
  const auto& opt = optima();
  const auto c = variance_condition_check(opt.optima[0], opt.optima[1], spec());
  EXPECT_LT(std::abs(c.mean), 1e-6);
  EXPECT_GT(c.second_moment, 0.1);
  EXPECT_FALSE(c.holds);
}

TEST(VarianceCondition, GenericPairHasNonzeroMean) {
  const auto c = variance_condition_check(optima().optima[0], {2.0, 1.0}, spec());
  EXPECT_GT(c.mean, 1e-3);
  EXPECT_NEAR(c.mean, avg_error({2.0, 1.0}, optima(), spec()), 1e-8);
  EXPECT_TRUE(c.holds);
}

TEST(OptimumSetJson, RoundTrip) {
  const auto& opt = optima();
  const auto back = optimum_set_from_json(nlohmann::json::parse(to_json(opt).dump()));
  ASSERT_EQ(back.size(), opt.size());
  for (std::size_t i = 0; i < opt.size(); ++i) {
    EXPECT_EQ(back.optima[i], opt.optima[i]);
    EXPECT_EQ(back.branches[i], opt.branches[i]);
  }
  EXPECT_EQ(back.L0, opt.L0);
}

TEST(OptimumSetJson, Invalid) {
  EXPECT_THROW(optimum_set_from_json(nlohmann::json::parse(R"({"optima": [[1, 2]]})")), ConfigError);
  auto j = to_json(optima());
  j["lambda"] = {1.0};
  EXPECT_THROW(optimum_set_from_json(j), ConfigError);
  j = to_json(optima());
  j["multiplicity"] = {0, 1};
  EXPECT_THROW(optimum_set_from_json(j), ConfigError);
}
