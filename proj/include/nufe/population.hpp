#pragma once

// Population (n = infinity) functionals of the sigmoid model: log loss L(w),
// average error K(w), the optimal-parameter set, the log-loss covariance at
// the optima and the relative-finite-variance check.

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "nufe/model.hpp"
#include "nufe/nelder_mead.hpp"
#include "nufe/quadrature.hpp"

namespace nufe {

/// Axis-aligned region, lower bounds inclusive and upper bounds exclusive.
/// Unbounded sides are infinite.
struct Region {
  double a_lo = -std::numeric_limits<double>::infinity();
  double a_hi = std::numeric_limits<double>::infinity();
  double b_lo = -std::numeric_limits<double>::infinity();
  double b_hi = std::numeric_limits<double>::infinity();

  bool contains(Parameter w) const { return w.a >= a_lo && w.a < a_hi && w.b >= b_lo && w.b < b_hi; }
  bool operator==(const Region&) const = default;
};

struct OptimumSet {
  std::vector<Parameter> optima;
  std::vector<Region> branches;
  std::vector<double> lambda;
  std::vector<int> multiplicity;
  double L0 = 0.0;

  std::size_t size() const { return optima.size(); }

  /// Index of the branch containing w, if any.
  std::optional<std::size_t> branch_of(Parameter w) const {
    for (std::size_t i = 0; i < branches.size(); ++i)
      if (branches[i].contains(w)) return i;
    return std::nullopt;
  }

  void validate() const {
    const std::size_t m = optima.size();
    if (m == 0) throw ConfigError("optimum set is empty");
    if (branches.size() != m || lambda.size() != m || multiplicity.size() != m)
      throw ConfigError("optimum set: optima, branches, lambda and multiplicity must have equal length");
    for (std::size_t i = 0; i < m; ++i) {
      if (!(lambda[i] > 0.0)) throw ConfigError("optimum set: lambda must be positive");
      if (multiplicity[i] < 1) throw ConfigError("optimum set: multiplicity must be >= 1");
      if (branch_of(optima[i]) != i) throw ConfigError("optimum set: optimum " + std::to_string(i + 1) +
                                                       " is not inside its own branch");
    }
  }
};

using CovarianceMatrix = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Log loss and average error

/// L(w) = -E[log p(y|x,w)]. The y-integral is closed form; x is integrated by
/// composite Gauss-Legendre with panels split at the kinks of the truth.
inline double log_loss(Parameter w, const ModelSpec& spec, const QuadratureOptions& qopt = {}) {
  const double var = spec.noise_sigma * spec.noise_sigma;
  const double base = spec.log_normalizer() + 0.5;
  const auto breaks = spec.x_breakpoints();
  const double gap = integrate_piecewise(
      [&](double x) {
        const double d = true_regression(x) - model_mean(x, w);
        return d * d;
      },
      breaks, qopt);
  return base + gap / spec.x_support.width() / (2.0 * var);
}

/// Gradient of L with respect to (a, b).
inline Eigen::Vector2d log_loss_gradient(Parameter w, const ModelSpec& spec, const QuadratureOptions& qopt = {}) {
  const double var = spec.noise_sigma * spec.noise_sigma;
  const auto breaks = spec.x_breakpoints();
  auto component = [&](bool wrt_a) {
    return integrate_piecewise(
        [&](double x) {
          const double s = model_mean(x, w);
          const double g = -(true_regression(x) - s) * s * (1.0 - s);
          return wrt_a ? g * x : g;
        },
        breaks, qopt);
  };
  const double scale = 1.0 / (spec.x_support.width() * var);
  return {component(true) * scale, component(false) * scale};
}

/// K(w) = L(w) - L(w_0).
inline double avg_error(Parameter w, const OptimumSet& opt, const ModelSpec& spec, const QuadratureOptions& qopt = {}) {
  return log_loss(w, spec, qopt) - opt.L0;
}

// ---------------------------------------------------------------------------
// Optimum search

struct OptimaSearchOptions {
  int scan_resolution = 81;
  int max_starts = 16;
  double merge_radius = 1e-3;
  double acceptance_band = 1e-8;  ///< accept K(w*) <= min K + band
  double boundary_tol = 1e-6;     ///< minimizers this close to the box edge are rejected
  double default_lambda = 1.0;
  int default_multiplicity = 1;
  QuadratureOptions quadrature{1e-12, 1e-15, 4096};
};

namespace detail {

/// Newton iterations on the analytic gradient; resolves the flat valley
/// direction far beyond what function values alone allow.
inline Parameter polish_minimizer(Parameter w, const ModelSpec& spec, const QuadratureOptions& qopt) {
  constexpr double h = 1e-5;
  for (int it = 0; it < 50; ++it) {
    const Eigen::Vector2d g = log_loss_gradient(w, spec, qopt);
    Eigen::Matrix2d hess;
    hess.col(0) = (log_loss_gradient({w.a + h, w.b}, spec, qopt) - log_loss_gradient({w.a - h, w.b}, spec, qopt)) / (2 * h);
    hess.col(1) = (log_loss_gradient({w.a, w.b + h}, spec, qopt) - log_loss_gradient({w.a, w.b - h}, spec, qopt)) / (2 * h);
    hess = 0.5 * (hess + hess.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(hess);
    if (es.eigenvalues().minCoeff() <= 0.0) break;
    const Eigen::Vector2d step = -hess.ldlt().solve(g);
    const Parameter next{w.a + step(0), w.b + step(1)};
    if (!spec.in_prior(next) || step.norm() > 0.1) break;
    w = next;
    if (step.norm() < 1e-13) break;
  }
  return w;
}

inline bool on_boundary(Parameter w, const ModelSpec& spec, double tol) {
  return w.a - spec.prior_a.lo < tol || spec.prior_a.hi - w.a < tol || w.b - spec.prior_b.lo < tol ||
         spec.prior_b.hi - w.b < tol;
}

inline std::vector<Region> sign_split_branches(const std::vector<Parameter>& optima) {
  if (optima.size() == 1) return {Region{}};
  if (optima.size() == 2 && optima[0].a >= 0.0 && optima[1].a < 0.0) {
    Region pos, neg;
    pos.a_lo = 0.0;
    neg.a_hi = 0.0;
    return {pos, neg};
  }
  throw ConfigError("optima are not separated by the sign of a; supply branch regions explicitly");
}

}  // namespace detail

/// Grid scan of L over the prior box, Nelder-Mead refinement from each
/// discrete basin, then a gradient polish. Returns every interior minimizer
/// attaining the global minimum, ordered by decreasing a.
inline OptimumSet find_optima(const ModelSpec& spec, const OptimaSearchOptions& opt = {}) {
  spec.validate();
  const int res = opt.scan_resolution;
  if (res < 3) throw std::invalid_argument("scan_resolution must be >= 3");
  const double ha = spec.prior_a.width() / res;
  const double hb = spec.prior_b.width() / res;
  std::vector<double> grid(static_cast<std::size_t>(res) * res);
  auto at = [&](int i, int j) -> double& { return grid[static_cast<std::size_t>(i) * res + j]; };
  auto node = [&](int i, int j) { return Parameter{spec.prior_a.lo + (i + 0.5) * ha, spec.prior_b.lo + (j + 0.5) * hb}; };
  const QuadratureOptions scan_q{1e-8, 1e-12, 4096};
  for (int i = 0; i < res; ++i)
    for (int j = 0; j < res; ++j) at(i, j) = log_loss(node(i, j), spec, scan_q);

  struct Start {
    Parameter w;
    double value;
  };
  std::vector<Start> starts;
  for (int i = 0; i < res; ++i)
    for (int j = 0; j < res; ++j) {
      bool is_min = true;
      for (int di = -1; di <= 1 && is_min; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          const int ii = i + di, jj = j + dj;
          if ((di == 0 && dj == 0) || ii < 0 || jj < 0 || ii >= res || jj >= res) continue;
          if (at(ii, jj) < at(i, j)) {
            is_min = false;
            break;
          }
        }
      if (is_min) starts.push_back({node(i, j), at(i, j)});
    }
  std::sort(starts.begin(), starts.end(), [](const Start& l, const Start& r) { return l.value < r.value; });
  if (static_cast<int>(starts.size()) > opt.max_starts) starts.resize(static_cast<std::size_t>(opt.max_starts));

  auto objective = [&](const std::vector<double>& p) {
    const Parameter w{p[0], p[1]};
    if (!spec.in_prior(w)) return std::numeric_limits<double>::infinity();
    return log_loss(w, spec, opt.quadrature);
  };

  std::vector<Start> minimizers;
  for (const auto& s : starts) {
    NelderMeadOptions nm;
    nm.initial_step = 0.5 * std::min(ha, hb);
    nm.x_tol = 1e-9;
    nm.f_tol = 1e-15;
    const auto r = nelder_mead(objective, {s.w.a, s.w.b}, nm);
    Parameter w{r.x[0], r.x[1]};
    if (detail::on_boundary(w, spec, opt.boundary_tol)) continue;
    w = detail::polish_minimizer(w, spec, opt.quadrature);
    minimizers.push_back({w, log_loss(w, spec, opt.quadrature)});
  }
  if (minimizers.empty()) throw ConfigError("find_optima: no minimizer found inside the prior box interior");

  const double best = std::min_element(minimizers.begin(), minimizers.end(), [](const Start& l, const Start& r) {
                        return l.value < r.value;
                      })->value;
  std::sort(minimizers.begin(), minimizers.end(), [](const Start& l, const Start& r) { return l.value < r.value; });

  OptimumSet out;
  out.L0 = best;
  for (const auto& m : minimizers) {
    if (m.value > best + opt.acceptance_band) continue;
    const bool duplicate = std::any_of(out.optima.begin(), out.optima.end(),
                                       [&](Parameter p) { return distance(p, m.w) < opt.merge_radius; });
    if (duplicate) {
      // warn only for distinct points, not the same optimum reached from another start
      const bool identical = std::any_of(out.optima.begin(), out.optima.end(),
                                         [&](Parameter p) { return distance(p, m.w) < 1e-7; });
      if (!identical)
        std::clog << "find_optima: warning: merged minimizer (" << m.w.a << ", " << m.w.b
                  << ") into an optimum within radius " << opt.merge_radius << '\n';
      continue;
    }
    out.optima.push_back(m.w);
  }
  std::sort(out.optima.begin(), out.optima.end(),
            [](Parameter l, Parameter r) { return l.a != r.a ? l.a > r.a : l.b > r.b; });
  out.branches = detail::sign_split_branches(out.optima);
  out.lambda.assign(out.optima.size(), opt.default_lambda);
  out.multiplicity.assign(out.optima.size(), opt.default_multiplicity);
  return out;
}

// ---------------------------------------------------------------------------
// Covariance at the optima

/// V_ij = E[(log p(X|w_i) + L0)(log p(X|w_j) + L0)], x by adaptive
/// Gauss-Legendre and y by Gauss-Hermite under q(y|x).
inline CovarianceMatrix covariance(const OptimumSet& opt, const ModelSpec& spec, int gh_order = 40,
                                   const QuadratureOptions& qopt = {}) {
  const std::size_t m = opt.size();
  const auto gh = gauss_hermite_normal(gh_order);
  const auto breaks = spec.x_breakpoints();
  CovarianceMatrix V(m, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i; j < m; ++j) {
      const double v = integrate_piecewise(
          [&](double x) {
            const double fx = true_regression(x);
            return gh.apply([&](double t) {
              const double y = fx + spec.noise_sigma * t;
              return (log_model_density(x, y, opt.optima[i], spec) + opt.L0) *
                     (log_model_density(x, y, opt.optima[j], spec) + opt.L0);
            });
          },
          breaks, qopt);
      V(i, j) = V(j, i) = v / spec.x_support.width();
    }
  return V;
}

/// Throws unless V is square, symmetric and PSD within `tol` (scaled by its size).
inline void validate_covariance(const CovarianceMatrix& V, double tol = 1e-10) {
  if (V.rows() != V.cols() || V.rows() == 0) throw std::invalid_argument("covariance must be a non-empty square matrix");
  const double scale = std::max(1.0, V.cwiseAbs().maxCoeff());
  if ((V - V.transpose()).cwiseAbs().maxCoeff() > tol * scale) throw std::invalid_argument("covariance is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(V);
  if (es.eigenvalues().minCoeff() < -tol * scale) throw std::invalid_argument("covariance is not positive semidefinite");
}

// ---------------------------------------------------------------------------
// Relative finite variance

struct VarianceCondition {
  double mean = 0.0;           ///< E[f(X, w1, w2)]
  double second_moment = 0.0;  ///< E[f(X, w1, w2)^2]
  bool holds = true;           ///< false when the mean vanishes but the second moment does not
};

/// Moments of the log density ratio f = log p(X|w1) - log p(X|w2). A vanishing
/// mean with a positive second moment rules out `E f >= c E f^2` for any c > 0.
inline VarianceCondition variance_condition_check(Parameter w1, Parameter w2, const ModelSpec& spec,
                                                  double mean_tol = 1e-6, double second_tol = 1e-12,
                                                  int gh_order = 40) {
  const auto gh = gauss_hermite_normal(gh_order);
  const auto breaks = spec.x_breakpoints();
  auto moment = [&](int power) {
    return integrate_piecewise(
               [&](double x) {
                 const double fx = true_regression(x);
                 return gh.apply([&](double t) {
                   const double y = fx + spec.noise_sigma * t;
                   const double f = log_model_density(x, y, w1, spec) - log_model_density(x, y, w2, spec);
                   return power == 1 ? f : f * f;
                 });
               },
               breaks, QuadratureOptions{1e-12, 1e-16, 4096}) /
           spec.x_support.width();
  };
  VarianceCondition out;
  out.mean = moment(1);
  out.second_moment = moment(2);
  out.holds = !(std::abs(out.mean) <= mean_tol && out.second_moment > second_tol);
  return out;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const Region& r) {
  nlohmann::json j = nlohmann::json::object();
  if (std::isfinite(r.a_lo)) j["a_lo"] = r.a_lo;
  if (std::isfinite(r.a_hi)) j["a_hi"] = r.a_hi;
  if (std::isfinite(r.b_lo)) j["b_lo"] = r.b_lo;
  if (std::isfinite(r.b_hi)) j["b_hi"] = r.b_hi;
  return j;
}

inline Region region_from_json(const nlohmann::json& j) {
  Region r;
  if (j.contains("a_lo")) r.a_lo = j.at("a_lo").get<double>();
  if (j.contains("a_hi")) r.a_hi = j.at("a_hi").get<double>();
  if (j.contains("b_lo")) r.b_lo = j.at("b_lo").get<double>();
  if (j.contains("b_hi")) r.b_hi = j.at("b_hi").get<double>();
  return r;
}

inline nlohmann::json to_json(const OptimumSet& opt) {
  nlohmann::json optima = nlohmann::json::array();
  nlohmann::json branches = nlohmann::json::array();
  for (const auto& w : opt.optima) optima.push_back({w.a, w.b});
  for (const auto& r : opt.branches) branches.push_back(to_json(r));
  return {{"optima", optima},
          {"branches", branches},
          {"lambda", opt.lambda},
          {"multiplicity", opt.multiplicity},
          {"L0", opt.L0}};
}

inline OptimumSet optimum_set_from_json(const nlohmann::json& j) {
  OptimumSet opt;
  try {
    for (const auto& w : j.at("optima")) opt.optima.push_back({w.at(0).get<double>(), w.at(1).get<double>()});
    for (const auto& r : j.at("branches")) opt.branches.push_back(region_from_json(r));
    opt.lambda = j.at("lambda").get<std::vector<double>>();
    opt.multiplicity = j.at("multiplicity").get<std::vector<int>>();
    opt.L0 = j.at("L0").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("optimum set JSON: ") + e.what());
  }
  opt.validate();
  return opt;
}

}  // namespace nufe
