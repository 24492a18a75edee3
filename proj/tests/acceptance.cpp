// Acceptance checks, one per criterion. Usage: acceptance <criterion>|all
// Prints one PASS/FAIL line per criterion; exit code 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "nufe/nufe.hpp"

using namespace nufe;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[1024];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

unsigned worker_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

struct Setup {
  ModelSpec spec;
  OptimumSet opt;
  CovarianceMatrix V;
  AsymptoticCoefficients coeff;
};

const Setup& setup() {
  static const Setup s = [] {
    Setup out;
    out.opt = find_optima(out.spec);
    out.V = covariance(out.opt, out.spec);
    out.coeff = compute_coefficients(out.opt, out.V, 1.0);
    return out;
  }();
  return s;
}

Outcome optimum_recovery() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto opt = find_optima(ModelSpec{});
  const double t = seconds_since(t0);
  bool ok = opt.size() == 2 && t < 30.0;
  if (opt.size() == 2) {
    ok = ok && std::abs(opt.optima[0].a - 5.13) <= 0.02 && std::abs(opt.optima[0].b - 7.71) <= 0.02 &&
         std::abs(opt.optima[1].a + 5.13) <= 0.02 && std::abs(opt.optima[1].b - 7.71) <= 0.02;
    return {ok, fmt("w01=(%.4f, %.4f) w02=(%.4f, %.4f) in %.2fs", opt.optima[0].a, opt.optima[0].b, opt.optima[1].a,
                    opt.optima[1].b, t)};
  }
  return {false, fmt("found %zu optima", opt.size())};
}

Outcome appendix_closed_form() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Eigen::MatrixXd> cases{setup().V};
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> z;
  for (int k = 0; k < 20; ++k) {
    Eigen::MatrixXd A(2, 2);
    A << z(rng), z(rng), z(rng), z(rng);
    cases.push_back(A * A.transpose());
  }
  double worst = 0.0;
  std::size_t fails = 0;
  for (std::size_t k = 0; k < cases.size(); ++k) {
    const auto mc = expected_max_mc(GaussianMaxProblem::untied(cases[k]), 1'000'000, 100 + k);
    const double zscore = std::abs(mc.estimate - mu_closed_form_two(cases[k])) / mc.se;
    worst = std::max(worst, zscore);
    fails += zscore > 3.0;
  }
  const double t = seconds_since(t0);
  return {fails == 0 && t < 60.0,
          fmt("%zu matrices, worst |closed - MC| = %.2f SE, %zu beyond 3 SE, %.1fs", cases.size(), worst, fails, t)};
}

Outcome variance_condition() {
  const auto& s = setup();
  const auto c = variance_condition_check(s.opt.optima[0], s.opt.optima[1], s.spec);
  const bool ok = std::abs(c.mean) < 1e-6 && c.second_moment > 0.1 && !c.holds;
  return {ok, fmt("E[f] = %.3e, E[f^2] = %.4f, holds = %s", c.mean, c.second_moment, c.holds ? "true" : "false")};
}

Outcome decomposition_identities() {
  const auto& s = setup();
  const auto grid = build_grid(s.opt, s.spec);
  double recomb = 0.0, split = 0.0, sum_a = 0.0;
  for (std::size_t n : {100u, 600u})
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const auto est = free_energy(sample_dataset(n, stream_seed(77, {n, seed}), s.spec), grid, s.opt, s.spec, 1.0);
      recomb = std::max(recomb, std::abs(est.log_Z_recombined - est.log_Z));
      double a = 0.0;
      for (const auto& br : est.branches) {
        split = std::max(split, std::abs(br.log_Z0 - log_add_exp(br.log_Z1, br.log_Z2)));
        a += br.a;
      }
      sum_a = std::max(sum_a, std::abs(a - 1.0));
    }
  // sum a_i = 1 up to the rounding of one addition
  const bool ok = recomb <= 1e-9 && split <= 1e-12 && sum_a <= 2.3e-16;
  return {ok, fmt("100 datasets: max |recombined - direct| = %.2e, max |Z0 - (Z1+Z2)| (log) = %.2e, max |sum a - 1| = %.2e",
                  recomb, split, sum_a)};
}

Outcome clt_check() {
  const auto& s = setup();
  const auto t0 = std::chrono::steady_clock::now();
  const auto c = clt_diagnostic(500, 5000, 1, s.opt, s.spec, s.V, worker_threads());
  const double t = seconds_since(t0);
  bool ok = t < 300.0;
  std::string entries;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      const double tol = 0.05 * std::abs(s.V(i, j)) + 3 * c.cov_se(i, j);
      ok = ok && std::abs(c.cov(i, j) - s.V(i, j)) <= tol;
      entries += fmt(" V%d%d %.3f vs %.3f (tol %.3f);", i + 1, j + 1, c.cov(i, j), s.V(i, j), tol);
    }
  const double mu = mu_closed_form_two(s.V);
  ok = ok && std::abs(c.max_mean - mu) <= 3 * c.max_se;
  return {ok, fmt("%s E[max] %.4f +- %.4f vs mu %.4f, %.1fs", entries.c_str(), c.max_mean, c.max_se, mu, t)};
}

Outcome expansion_recovery() {
  const auto& s = setup();
  const auto t0 = std::chrono::steady_clock::now();
  const auto grid = build_grid(s.opt, s.spec);
  ExperimentPlan plan;
  plan.threads = worker_threads();
  const auto rep = run_experiment(plan, s.spec, s.opt, grid, s.coeff);
  const double t = seconds_since(t0);
  if (!rep.fit) return {false, "fit failed: " + rep.fit_error};
  const double c_sqrt = rep.fit->at("sqrt_n"), se = rep.fit->se_of("sqrt_n");
  const double rel = std::abs(c_sqrt + s.coeff.mu) / s.coeff.mu;
  const double slope = rep.residual_trend->at("sqrt_n"), slope_se = rep.residual_trend->se_of("sqrt_n");
  const bool ok = rel <= 0.15 && std::abs(slope) <= 3 * slope_se && t <= 600.0;
  return {ok, fmt("c_sqrt = %.3f +- %.3f vs -mu = %.3f (rel err %.1f%%, limit 15%%); residual slope %.4f +- %.4f; %.0fs",
                  c_sqrt, se, -s.coeff.mu, 100 * rel, slope, slope_se, t)};
}

Outcome generalization_loss() {
  const auto& s = setup();
  const auto grid = build_grid(s.opt, s.spec);
  const auto g = gen_loss_check(100, 500, 1, grid, s.opt, s.spec, s.coeff, worker_threads());
  const bool agree = std::abs(g.mean_gap) <= 3 * g.se_gap;
  const bool diff_below = g.mean_diff + 2 * g.se_diff < g.L0;
  const bool g_below = g.mean_G + 2 * g.se_G < g.L0;
  return {agree && diff_below && g_below,
          fmt("E[F101 - F100] = %.4f +- %.4f, E[G100] = %.4f +- %.4f, paired gap %.4f +- %.4f, L0 = %.4f, "
              "predicted %.4f",
              g.mean_diff, g.se_diff, g.mean_G, g.se_G, g.mean_gap, g.se_gap, g.L0, g.predicted_G)};
}

Outcome beta_scaling() {
  const auto& s = setup();
  const auto grid = build_grid(s.opt, s.spec);
  const ExperimentPlan plan;
  const std::size_t reps = 100;
  const auto records = run_replications(plan.sample_sizes, reps, plan.master_seed, {1.0, 2.0}, grid, s.opt, s.spec,
                                        worker_threads());
  const auto c2 = compute_coefficients(s.opt, s.V, 2.0);
  const auto f1 = fit_expansion(summarize(records, 0, reps, s.coeff, true), s.coeff.m_hat);
  const auto f2 = fit_expansion(summarize(records, 1, reps, c2, true), c2.m_hat);
  const double ratio = f2.at("log_n") / f1.at("log_n");
  const double sqrt_change = std::abs(f2.at("sqrt_n") - f1.at("sqrt_n")) / std::abs(f1.at("sqrt_n"));
  const bool ok = std::abs(ratio - 0.5) <= 0.25 * 0.5 && sqrt_change < 0.15;
  return {ok, fmt("c_log: beta=1 %.3f +- %.3f, beta=2 %.3f +- %.3f, ratio %.3f (target 0.5 +- 25%%); "
                  "c_sqrt: %.3f -> %.3f (change %.1f%%, limit 15%%)",
                  f1.at("log_n"), f1.se_of("log_n"), f2.at("log_n"), f2.se_of("log_n"), ratio, f1.at("sqrt_n"),
                  f2.at("sqrt_n"), 100 * sqrt_change)};
}

struct Criterion {
  const char* name;
  const char* title;
  std::function<Outcome()> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all{
      {"optimum_recovery", "Optimum recovery", optimum_recovery},
      {"appendix_closed_form", "Appendix closed form", appendix_closed_form},
      {"variance_condition", "Relative-finite-variance falsification", variance_condition},
      {"decomposition_identities", "Decomposition identities", decomposition_identities},
      {"clt_diagnostic", "CLT diagnostic", clt_check},
      {"expansion_recovery", "Expansion recovery", expansion_recovery},
      {"generalization_loss", "Generalization-loss identity", generalization_loss},
      {"beta_scaling", "Beta scaling", beta_scaling},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  const std::string which = argc > 1 ? argv[1] : "all";
  bool any = false, all_pass = true;
  for (const auto& c : criteria()) {
    if (which != "all" && which != c.name) continue;
    any = true;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", c.title, o.detail.c_str());
    std::fflush(stdout);
    all_pass = all_pass && o.pass;
  }
  if (!any) {
    std::fprintf(stderr, "unknown criterion '%s'\n", which.c_str());
    return 2;
  }
  return all_pass ? 0 : 1;
}
