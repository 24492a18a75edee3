// Small sweep: locate the optima, evaluate the predicted curve and compare it
// with a few Monte Carlo free energies.

#include <cmath>
#include <cstdio>

#include "nufe/nufe.hpp"

int main() {
  const nufe::ModelSpec spec;
  const auto opt = nufe::find_optima(spec);
  const auto V = nufe::covariance(opt, spec);
  const auto coeff = nufe::compute_coefficients(opt, V, 1.0);
  std::printf("optima: (%.4f, %.4f) (%.4f, %.4f)  L0 = %.6f  mu = %.4f\n", opt.optima[0].a, opt.optima[0].b,
              opt.optima[1].a, opt.optima[1].b, opt.L0, coeff.mu);

  const auto grid = nufe::build_grid(opt, spec);
  const auto records = nufe::run_replications({100, 200, 400}, 20, 7, {1.0}, grid, opt, spec);
  const auto rows = nufe::summarize(records, 0, 20, coeff, true);
  std::printf("%6s %14s %10s %14s\n", "n", "mean F - nL0", "se", "theory");
  for (const auto& r : rows)
    std::printf("%6zu %14.4f %10.4f %14.4f\n", r.n, r.mean_F - r.L0_times_n, r.se_F, r.theory_minus_nL0);
  return 0;
}
