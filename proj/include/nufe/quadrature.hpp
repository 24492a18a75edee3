#pragma once

#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <boost/math/quadrature/gauss.hpp>

namespace nufe {

/// Raised when an integral fails to settle under node doubling.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct QuadratureOptions {
  double rel_tol = 1e-10;
  double abs_tol = 1e-14;
  int max_subpanels = 4096;
};

/// Fixed set of nodes and weights. Applying it is `sum(w_i * g(x_i))`.
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;

  std::size_t size() const { return nodes.size(); }

  template <class F>
  double apply(F&& g) const {
    double acc = 0.0;
    for (std::size_t i = 0; i < nodes.size(); ++i) acc += weights[i] * g(nodes[i]);
    return acc;
  }
};

namespace detail {

inline constexpr unsigned kLegendreOrder = 20;

/// 20-point Gauss-Legendre on [-1, 1], expanded from Boost's half table.
inline const std::array<std::pair<double, double>, kLegendreOrder>& legendre_table() {
  static const auto table = [] {
    using Rule = boost::math::quadrature::gauss<double, kLegendreOrder>;
    const auto& x = Rule::abscissa();
    const auto& w = Rule::weights();
    std::array<std::pair<double, double>, kLegendreOrder> out{};
    std::size_t k = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      out[k++] = {-x[i], w[i]};
      out[k++] = {x[i], w[i]};
    }
    return out;
  }();
  return table;
}

template <class F>
double composite_legendre(F& f, double lo, double hi, int subpanels) {
  const auto& table = legendre_table();
  const double width = (hi - lo) / subpanels;
  double total = 0.0;
  for (int s = 0; s < subpanels; ++s) {
    const double mid = lo + (s + 0.5) * width;
    const double half = 0.5 * width;
    double acc = 0.0;
    for (const auto& [t, w] : table) acc += w * f(mid + half * t);
    total += half * acc;
  }
  return total;
}

}  // namespace detail

/// Composite 20-point Gauss-Legendre on [lo, hi]; subpanels double until two
/// successive estimates agree to the requested tolerance.
template <class F>
double integrate_panel(F&& f, double lo, double hi, const QuadratureOptions& opt = {}) {
  if (!(hi > lo)) return 0.0;
  int subpanels = 1;
  double prev = detail::composite_legendre(f, lo, hi, subpanels);
  while (subpanels < opt.max_subpanels) {
    subpanels *= 2;
    const double next = detail::composite_legendre(f, lo, hi, subpanels);
    if (std::abs(next - prev) <= std::max(opt.abs_tol, opt.rel_tol * std::abs(next))) return next;
    prev = next;
  }
  throw NumericalError("quadrature on [" + std::to_string(lo) + ", " + std::to_string(hi) +
                       "] did not converge within " + std::to_string(opt.max_subpanels) +
                       " subpanels");
}

/// Integrates over consecutive panels given by sorted breakpoints.
template <class F>
double integrate_piecewise(F&& f, std::span<const double> breakpoints, const QuadratureOptions& opt = {}) {
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < breakpoints.size(); ++i)
    total += integrate_panel(f, breakpoints[i], breakpoints[i + 1], opt);
  return total;
}

/// Fixed composite Gauss-Legendre rule over the panels between breakpoints.
inline QuadratureRule composite_gauss_legendre(std::span<const double> breakpoints, int subpanels_per_panel) {
  if (subpanels_per_panel < 1) throw std::invalid_argument("subpanels_per_panel must be >= 1");
  QuadratureRule rule;
  const auto& table = detail::legendre_table();
  for (std::size_t p = 0; p + 1 < breakpoints.size(); ++p) {
    const double lo = breakpoints[p];
    const double width = (breakpoints[p + 1] - lo) / subpanels_per_panel;
    for (int s = 0; s < subpanels_per_panel; ++s) {
      const double mid = lo + (s + 0.5) * width;
      for (const auto& [t, w] : table) {
        rule.nodes.push_back(mid + 0.5 * width * t);
        rule.weights.push_back(0.5 * width * w);
      }
    }
  }
  return rule;
}

/// Gauss-Hermite rule for the standard normal measure (Golub-Welsch on the
/// probabilists' Hermite recurrence). Weights sum to one.
inline QuadratureRule gauss_hermite_normal(int order) {
  if (order < 1) throw std::invalid_argument("Gauss-Hermite order must be >= 1");
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(order, order);
  for (int k = 1; k < order; ++k) {
    jacobi(k, k - 1) = std::sqrt(static_cast<double>(k));
    jacobi(k - 1, k) = jacobi(k, k - 1);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(jacobi);
  if (solver.info() != Eigen::Success) throw NumericalError("Gauss-Hermite eigen-solve failed");
  QuadratureRule rule;
  rule.nodes.resize(order);
  rule.weights.resize(order);
  double total = 0.0;
  for (int i = 0; i < order; ++i) {
    rule.nodes[i] = solver.eigenvalues()(i);
    const double v0 = solver.eigenvectors()(0, i);
    rule.weights[i] = v0 * v0;
    total += rule.weights[i];
  }
  for (double& w : rule.weights) w /= total;
  return rule;
}

}  // namespace nufe
