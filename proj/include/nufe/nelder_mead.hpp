#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace nufe {

struct NelderMeadOptions {
  double initial_step = 0.5;
  double x_tol = 1e-10;
  double f_tol = 1e-15;
  int max_evaluations = 20000;
};

struct NelderMeadResult {
  std::vector<double> x;
  double value = std::numeric_limits<double>::infinity();
  int evaluations = 0;
  bool converged = false;
};

/// Downhill simplex minimization. The objective may return +inf to reject a
/// point (used for box constraints).
template <class F>
NelderMeadResult nelder_mead(F&& objective, std::vector<double> start, const NelderMeadOptions& opt = {}) {
  const std::size_t dim = start.size();
  std::vector<std::vector<double>> simplex(dim + 1, start);
  std::vector<double> values(dim + 1);
  NelderMeadResult result;

  auto eval = [&](const std::vector<double>& p) {
    ++result.evaluations;
    return objective(p);
  };

  for (std::size_t i = 0; i < dim; ++i) simplex[i + 1][i] += opt.initial_step;
  for (std::size_t i = 0; i <= dim; ++i) values[i] = eval(simplex[i]);

  std::vector<std::size_t> order(dim + 1);
  std::vector<double> centroid(dim), trial(dim), second(dim);

  auto point_along = [&](double coef, std::vector<double>& out) {
    const auto& worst = simplex[order[dim]];
    for (std::size_t k = 0; k < dim; ++k) out[k] = centroid[k] + coef * (worst[k] - centroid[k]);
  };

  while (result.evaluations < opt.max_evaluations) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) { return values[l] < values[r]; });

    const double best = values[order[0]];
    const double worst = values[order[dim]];
    double size = 0.0;
    for (std::size_t i = 1; i <= dim; ++i)
      for (std::size_t k = 0; k < dim; ++k)
        size = std::max(size, std::abs(simplex[order[i]][k] - simplex[order[0]][k]));
    if (std::isfinite(worst) && worst - best <= opt.f_tol && size <= opt.x_tol) {
      result.converged = true;
      break;
    }
    if (size <= opt.x_tol * 1e-3) {
      result.converged = true;
      break;
    }

    std::fill(centroid.begin(), centroid.end(), 0.0);
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t k = 0; k < dim; ++k) centroid[k] += simplex[order[i]][k] / static_cast<double>(dim);

    point_along(-1.0, trial);
    const double reflected = eval(trial);
    const double second_worst = values[order[dim - 1]];

    if (reflected < best) {
      point_along(-2.0, second);
      const double expanded = eval(second);
      if (expanded < reflected) {
        simplex[order[dim]] = second;
        values[order[dim]] = expanded;
      } else {
        simplex[order[dim]] = trial;
        values[order[dim]] = reflected;
      }
      continue;
    }
    if (reflected < second_worst) {
      simplex[order[dim]] = trial;
      values[order[dim]] = reflected;
      continue;
    }
    const bool outside = reflected < worst;
    point_along(outside ? -0.5 : 0.5, second);
    const double contracted = eval(second);
    if (contracted < (outside ? reflected : worst)) {
      simplex[order[dim]] = second;
      values[order[dim]] = contracted;
      continue;
    }
    // shrink toward the best vertex
    const auto anchor = simplex[order[0]];
    for (std::size_t i = 1; i <= dim; ++i) {
      auto& p = simplex[order[i]];
      for (std::size_t k = 0; k < dim; ++k) p[k] = anchor[k] + 0.5 * (p[k] - anchor[k]);
      values[order[i]] = eval(p);
    }
  }

  const auto best_it = std::min_element(values.begin(), values.end());
  result.x = simplex[static_cast<std::size_t>(best_it - values.begin())];
  result.value = *best_it;
  return result;
}

}  // namespace nufe
