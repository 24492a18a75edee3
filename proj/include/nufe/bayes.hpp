#pragma once

// Finite-n Bayesian quantities for one dataset, integrated over the 2-D
// parameter space on a deterministic grid: marginal likelihood and free
// energy with their per-branch decomposition, branch weights, the maximum
// statistic and the generalization loss of the predictive distribution.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nufe/asymptotics.hpp"
#include "nufe/model.hpp"
#include "nufe/nelder_mead.hpp"
#include "nufe/population.hpp"
#include "nufe/quadrature.hpp"

namespace nufe {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// log(sum(exp(v))) with a max shift; -inf for an empty range.
template <class Range>
double log_sum_exp(const Range& values) {
  double mx = kNegInf;
  for (double v : values) mx = std::max(mx, v);
  if (mx == kNegInf) return kNegInf;
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - mx);
  return mx + std::log(acc);
}

inline double log_add_exp(double x, double y) {
  if (x == kNegInf) return y;
  if (y == kNegInf) return x;
  const double mx = std::max(x, y);
  return mx + std::log1p(std::exp(-std::abs(x - y)));
}

/// Near/far threshold on K separating the two parts of each branch integral.
struct EpsilonSchedule {
  double exponent = 0.25;

  double operator()(double n) const { return std::pow(n, -exponent); }
};

// ---------------------------------------------------------------------------
// Grid

struct GridConfig {
  int coarse_resolution = 200;
  double patch_radius = 1.5;
  int patch_resolution = 80;  ///< approximate nodes per side of each patch
  bool patches = true;
};

/// Midpoint-rule nodes over the prior box. Coarse cells that touch a patch
/// around an optimum are split into k x k sub-cells; cell edges always include
/// branch boundaries, so each node lies in exactly one branch.
struct QuadratureGrid {
  std::vector<double> a;
  std::vector<double> b;
  std::vector<double> weight;    ///< cell area
  std::vector<double> log_mass;  ///< log(weight * prior density)
  std::vector<double> K;         ///< population average error at the node
  std::vector<std::uint32_t> branch;
  std::size_t num_branches = 0;

  std::size_t size() const { return a.size(); }
  Parameter node(std::size_t k) const { return {a[k], b[k]}; }
};

namespace detail {

inline std::vector<double> cell_edges(Interval range, int resolution, const std::vector<double>& extra) {
  std::vector<double> edges;
  for (int i = 0; i <= resolution; ++i) edges.push_back(range.lo + range.width() * i / resolution);
  edges.back() = range.hi;
  for (double e : extra)
    if (std::isfinite(e) && e > range.lo && e < range.hi) edges.push_back(e);
  std::sort(edges.begin(), edges.end());
  const double tol = 1e-12 * range.width();
  edges.erase(std::unique(edges.begin(), edges.end(), [&](double l, double r) { return r - l < tol; }), edges.end());
  return edges;
}

}  // namespace detail

inline QuadratureGrid build_grid(const OptimumSet& opt, const ModelSpec& spec, const GridConfig& cfg = {},
                                 const QuadratureOptions& qopt = {1e-9, 1e-13, 4096}) {
  if (cfg.coarse_resolution < 1) throw std::invalid_argument("coarse_resolution must be >= 1");
  opt.validate();
  std::vector<double> a_extra, b_extra;
  for (const auto& r : opt.branches) {
    a_extra.insert(a_extra.end(), {r.a_lo, r.a_hi});
    b_extra.insert(b_extra.end(), {r.b_lo, r.b_hi});
  }
  const auto ea = detail::cell_edges(spec.prior_a, cfg.coarse_resolution, a_extra);
  const auto eb = detail::cell_edges(spec.prior_b, cfg.coarse_resolution, b_extra);
  const double ha = spec.prior_a.width() / cfg.coarse_resolution;
  const double hb = spec.prior_b.width() / cfg.coarse_resolution;

  const int cells_per_side = std::max(1, static_cast<int>(std::ceil(2.0 * cfg.patch_radius / std::min(ha, hb))));
  const int split = cfg.patches ? std::max(1, static_cast<int>(std::lround(
                                                  static_cast<double>(cfg.patch_resolution) / cells_per_side)))
                                : 1;

  QuadratureGrid g;
  g.num_branches = opt.branches.size();
  const double log_prior = std::log(spec.prior_density());
  std::vector<std::size_t> per_branch(g.num_branches, 0);

  for (std::size_t i = 0; i + 1 < ea.size(); ++i) {
    for (std::size_t j = 0; j + 1 < eb.size(); ++j) {
      const double a0 = ea[i], a1 = ea[i + 1], b0 = eb[j], b1 = eb[j + 1];
      int k = 1;
      if (cfg.patches)
        for (const auto& w : opt.optima)
          if (a1 > w.a - cfg.patch_radius && a0 < w.a + cfg.patch_radius && b1 > w.b - cfg.patch_radius &&
              b0 < w.b + cfg.patch_radius)
            k = split;
      const double da = (a1 - a0) / k, db = (b1 - b0) / k;
      for (int si = 0; si < k; ++si)
        for (int sj = 0; sj < k; ++sj) {
          const Parameter w{a0 + (si + 0.5) * da, b0 + (sj + 0.5) * db};
          const auto br = opt.branch_of(w);
          if (!br) throw ConfigError("grid node outside every branch region");
          g.a.push_back(w.a);
          g.b.push_back(w.b);
          g.weight.push_back(da * db);
          g.log_mass.push_back(std::log(da * db) + log_prior);
          g.branch.push_back(static_cast<std::uint32_t>(*br));
          ++per_branch[*br];
        }
    }
  }
  for (std::size_t i = 0; i < per_branch.size(); ++i)
    if (per_branch[i] == 0) throw ConfigError("branch " + std::to_string(i + 1) + " has no grid nodes inside the prior box");

  g.K.resize(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) g.K[k] = log_loss(g.node(k), spec, qopt) - opt.L0;
  return g;
}

// ---------------------------------------------------------------------------
// Empirical quantities

/// L_n(w) = -(1/n) sum_j log p(y_j | x_j, w).
inline double empirical_log_loss(const Dataset& data, Parameter w, const ModelSpec& spec) {
  if (data.n() == 0) throw std::invalid_argument("empirical_log_loss: empty dataset");
  double acc = 0.0;
  for (std::size_t j = 0; j < data.n(); ++j) acc -= log_model_density(data.x[j], data.y[j], w, spec);
  return acc / static_cast<double>(data.n());
}

/// sum_j log p(y_j | x_j, w_k) for every grid node k.
inline std::vector<double> node_log_likelihood(const Dataset& data, const QuadratureGrid& grid, const ModelSpec& spec) {
  const std::size_t n = data.n();
  const double* x = data.x.data();
  const double* y = data.y.data();
  const double inv2var = 1.0 / (2.0 * spec.noise_sigma * spec.noise_sigma);
  const double base = -static_cast<double>(n) * spec.log_normalizer();
  std::vector<double> ll(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const double a = grid.a[k], b = grid.b[k];
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      // exp overflow for very negative arguments gives s = 0, the correct limit
      const double s = 1.0 / (1.0 + std::exp(-(a * x[j] + b)));
      const double r = y[j] - s;
      ss += r * r;
    }
    ll[k] = base - ss * inv2var;
  }
  return ll;
}

struct BranchTerms {
  double L_n = 0.0;     ///< empirical log loss at the branch optimum
  double log_Z0 = 0.0;  ///< log of the branch integral of exp(-n beta K_ni) phi
  double log_Z1 = 0.0;  ///< part with K < epsilon
  double log_Z2 = 0.0;  ///< part with K >= epsilon
  double a = 0.0;       ///< branch weight
};

struct FreeEnergyEstimate {
  std::size_t n = 0;
  double beta = 1.0;
  double F = 0.0;
  double log_Z = 0.0;             ///< direct sum over all nodes
  double log_Z_recombined = 0.0;  ///< log sum_i exp(-n beta L_ni) Z0i
  double epsilon = 0.0;
  std::size_t i_max = 0;
  std::vector<BranchTerms> branches;
};

/// a_i proportional to exp(-n beta L_ni - lambda_i log n + (m_i - 1) log log n).
inline std::vector<double> branch_weights(const FreeEnergyEstimate& est, const OptimumSet& opt) {
  if (est.n < 3) throw std::domain_error("branch_weights: n must be >= 3");
  const double n = static_cast<double>(est.n);
  const double logn = std::log(n), loglogn = std::log(logn);
  std::vector<double> e(est.branches.size());
  for (std::size_t i = 0; i < e.size(); ++i)
    e[i] = -n * est.beta * est.branches[i].L_n - opt.lambda[i] * logn + (opt.multiplicity[i] - 1) * loglogn;
  const double mx = *std::max_element(e.begin(), e.end());
  double total = 0.0;
  for (double& v : e) total += (v = std::exp(v - mx));
  for (double& v : e) v /= total;
  return e;
}

/// Assembles the estimate from per-node log likelihoods (see node_log_likelihood)
/// and the empirical losses at the optima.
inline FreeEnergyEstimate free_energy_from_loglik(const std::vector<double>& ll, std::size_t n,
                                                  const std::vector<double>& L_opt, const QuadratureGrid& grid,
                                                  const OptimumSet& opt, double beta,
                                                  const EpsilonSchedule& schedule = {}) {
  if (!(beta > 0.0)) throw std::invalid_argument("free_energy: beta must be positive");
  if (ll.size() != grid.size()) throw std::invalid_argument("free_energy: log-likelihood size mismatch");
  const std::size_t m = grid.num_branches;
  FreeEnergyEstimate est;
  est.n = n;
  est.beta = beta;
  est.epsilon = schedule(static_cast<double>(n));
  est.branches.resize(m);

  const double nb = static_cast<double>(n) * beta;
  double global_max = kNegInf;
  std::vector<double> branch_max(m, kNegInf), near_max(m, kNegInf), far_max(m, kNegInf);
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const double u = beta * ll[k] + grid.log_mass[k];
    const auto i = grid.branch[k];
    global_max = std::max(global_max, u);
    branch_max[i] = std::max(branch_max[i], u);
    auto& side = grid.K[k] < est.epsilon ? near_max[i] : far_max[i];
    side = std::max(side, u);
  }
  double global_acc = 0.0;
  std::vector<double> branch_acc(m, 0.0), near_acc(m, 0.0), far_acc(m, 0.0);
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const double u = beta * ll[k] + grid.log_mass[k];
    const auto i = grid.branch[k];
    global_acc += std::exp(u - global_max);
    branch_acc[i] += std::exp(u - branch_max[i]);
    if (grid.K[k] < est.epsilon)
      near_acc[i] += std::exp(u - near_max[i]);
    else
      far_acc[i] += std::exp(u - far_max[i]);
  }
  auto finish = [](double mx, double acc) { return mx == kNegInf ? kNegInf : mx + std::log(acc); };

  est.log_Z = finish(global_max, global_acc);
  est.F = -est.log_Z / beta;
  std::vector<double> terms(m), neg_loss(m);
  for (std::size_t i = 0; i < m; ++i) {
    auto& br = est.branches[i];
    br.L_n = L_opt[i];
    const double shift = nb * br.L_n;
    br.log_Z0 = finish(branch_max[i], branch_acc[i]) + shift;
    br.log_Z1 = finish(near_max[i], near_acc[i]) + shift;
    br.log_Z2 = finish(far_max[i], far_acc[i]) + shift;
    terms[i] = -nb * br.L_n + br.log_Z0;
    neg_loss[i] = -br.L_n;
  }
  est.log_Z_recombined = log_sum_exp(terms);
  est.i_max = select_max_branch(neg_loss, opt.lambda, opt.multiplicity);
  if (n >= 3) {
    const auto w = branch_weights(est, opt);
    for (std::size_t i = 0; i < m; ++i) est.branches[i].a = w[i];
  } else {
    for (auto& br : est.branches) br.a = std::numeric_limits<double>::quiet_NaN();
  }
  return est;
}

inline std::vector<double> optimum_losses(const Dataset& data, const OptimumSet& opt, const ModelSpec& spec) {
  std::vector<double> out;
  for (const auto& w : opt.optima) out.push_back(empirical_log_loss(data, w, spec));
  return out;
}

/// F_n(beta) = -(1/beta) log Z_n(beta) with the per-branch decomposition.
inline FreeEnergyEstimate free_energy(const Dataset& data, const QuadratureGrid& grid, const OptimumSet& opt,
                                      const ModelSpec& spec, double beta, const EpsilonSchedule& schedule = {}) {
  return free_energy_from_loglik(node_log_likelihood(data, grid, spec), data.n(), optimum_losses(data, opt, spec), grid,
                                 opt, beta, schedule);
}

// ---------------------------------------------------------------------------
// Maximum statistic

struct MaxStatistic {
  double y_over_beta = 0.0;    ///< -n L_{n, i_max}
  std::vector<double> scaled;  ///< sqrt(n) (-L_ni + L0)
  std::size_t i_max = 0;
};

inline MaxStatistic max_statistic(const Dataset& data, const OptimumSet& opt, const ModelSpec& spec) {
  const auto losses = optimum_losses(data, opt, spec);
  const double n = static_cast<double>(data.n());
  MaxStatistic out;
  std::vector<double> neg(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i) {
    neg[i] = -losses[i];
    out.scaled.push_back(std::sqrt(n) * (opt.L0 - losses[i]));
  }
  out.i_max = select_max_branch(neg, opt.lambda, opt.multiplicity);
  out.y_over_beta = -n * losses[out.i_max];
  return out;
}

// ---------------------------------------------------------------------------
// Posterior and predictive

struct WeightedParameter {
  Parameter w;
  double weight = 0.0;
};

/// Posterior over grid nodes, proportional to exp(beta ll) * prior * cell area.
/// The smallest weights are dropped until at most `tail_mass` is discarded.
inline std::vector<WeightedParameter> posterior_nodes(const std::vector<double>& ll, const QuadratureGrid& grid,
                                                      double beta = 1.0, double tail_mass = 1e-13) {
  std::vector<double> u(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) u[k] = beta * ll[k] + grid.log_mass[k];
  const double norm = log_sum_exp(u);
  std::vector<std::size_t> order(grid.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) { return u[l] > u[r] || (u[l] == u[r] && l < r); });
  std::vector<WeightedParameter> out;
  double kept = 0.0;
  for (std::size_t k : order) {
    const double p = std::exp(u[k] - norm);
    if (1.0 - kept <= tail_mass && !out.empty()) break;
    out.push_back({grid.node(k), p});
    kept += p;
  }
  for (auto& wp : out) wp.weight /= kept;
  return out;
}

/// Posterior average of the population log loss, sum_k pi_k L(w_k).
inline double posterior_mean_log_loss(const std::vector<double>& ll, const QuadratureGrid& grid, double L0) {
  std::vector<double> u(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) u[k] = ll[k] + grid.log_mass[k];
  const double norm = log_sum_exp(u);
  double acc = 0.0;
  for (std::size_t k = 0; k < grid.size(); ++k) acc += std::exp(u[k] - norm) * (grid.K[k] + L0);
  return acc;
}

struct GenLossOptions {
  int subpanels_per_panel = 2;
  int gh_order = 40;
};

/// -E_{q(x)q(y|x)}[log sum_k pi_k p(y|x,w_k)] for a finite mixture of model
/// densities: composite Gauss-Legendre in x, Gauss-Hermite in y.
inline double gen_loss(const std::vector<WeightedParameter>& mixture, const ModelSpec& spec,
                       const GenLossOptions& gopt = {}) {
  if (mixture.empty()) throw std::invalid_argument("gen_loss: empty mixture");
  const auto breaks = spec.x_breakpoints();
  const auto xr = composite_gauss_legendre(breaks, gopt.subpanels_per_panel);
  const auto gh = gauss_hermite_normal(gopt.gh_order);
  const double inv2var = 1.0 / (2.0 * spec.noise_sigma * spec.noise_sigma);
  const std::size_t m = mixture.size();
  std::vector<double> log_pi(m), s(m), e(m);
  for (std::size_t k = 0; k < m; ++k) log_pi[k] = std::log(mixture[k].weight);

  double total = 0.0;
  for (std::size_t ix = 0; ix < xr.size(); ++ix) {
    const double x = xr.nodes[ix];
    const double fx = true_regression(x);
    for (std::size_t k = 0; k < m; ++k) s[k] = model_mean(x, mixture[k].w);
    double inner = 0.0;
    for (std::size_t it = 0; it < gh.size(); ++it) {
      const double y = fx + spec.noise_sigma * gh.nodes[it];
      double mx = kNegInf;
      for (std::size_t k = 0; k < m; ++k) {
        const double r = y - s[k];
        e[k] = log_pi[k] - r * r * inv2var;
        mx = std::max(mx, e[k]);
      }
      double acc = 0.0;
      for (std::size_t k = 0; k < m; ++k) acc += std::exp(e[k] - mx);
      inner += gh.weights[it] * (mx + std::log(acc));
    }
    total += xr.weights[ix] * inner;
  }
  return spec.log_normalizer() - total / spec.x_support.width();
}

/// G_n(1) of the grid posterior for this dataset.
inline double gen_loss_direct(const Dataset& data, const QuadratureGrid& grid, const ModelSpec& spec,
                              const GenLossOptions& gopt = {}) {
  return gen_loss(posterior_nodes(node_log_likelihood(data, grid, spec), grid), spec, gopt);
}

/// -log p(x, y | X^n) under the grid posterior with log likelihoods `ll`.
inline double predictive_log_loss(double x, double y, const std::vector<double>& ll, const QuadratureGrid& grid,
                                  const ModelSpec& spec) {
  std::vector<double> u(grid.size()), v(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) {
    u[k] = ll[k] + grid.log_mass[k];
    v[k] = u[k] + log_model_density(x, y, grid.node(k), spec);
  }
  return log_sum_exp(u) - log_sum_exp(v);
}

// ---------------------------------------------------------------------------
// Laplace cross-check

/// Per-branch Laplace approximation of log Z_n(beta) around the empirical
/// minimizer of L_n nearest each optimum. Only meaningful at large n.
inline double laplace_log_evidence(const Dataset& data, const OptimumSet& opt, const ModelSpec& spec, double beta = 1.0) {
  const double n = static_cast<double>(data.n());
  std::vector<double> terms;
  for (std::size_t i = 0; i < opt.size(); ++i) {
    auto objective = [&](const std::vector<double>& p) {
      const Parameter w{p[0], p[1]};
      if (!spec.in_prior(w) || opt.branch_of(w) != i) return std::numeric_limits<double>::infinity();
      return empirical_log_loss(data, w, spec);
    };
    NelderMeadOptions nm;
    nm.initial_step = 0.1;
    nm.x_tol = 1e-8;
    const auto r = nelder_mead(objective, {opt.optima[i].a, opt.optima[i].b}, nm);
    const Parameter w{r.x[0], r.x[1]};
    constexpr double h = 1e-4;
    auto Ln = [&](double da, double db) { return empirical_log_loss(data, {w.a + da, w.b + db}, spec); };
    Eigen::Matrix2d H;
    H(0, 0) = (Ln(h, 0) - 2 * Ln(0, 0) + Ln(-h, 0)) / (h * h);
    H(1, 1) = (Ln(0, h) - 2 * Ln(0, 0) + Ln(0, -h)) / (h * h);
    H(0, 1) = H(1, 0) = (Ln(h, h) - Ln(h, -h) - Ln(-h, h) + Ln(-h, -h)) / (4 * h * h);
    const double logdet = std::log((n * beta * H).determinant());
    terms.push_back(-n * beta * r.value + std::log(spec.prior_density()) + std::log(2.0 * std::numbers::pi) - 0.5 * logdet);
  }
  return log_sum_exp(terms);
}

// ---------------------------------------------------------------------------
// CSV

inline std::string free_energy_csv_header(std::size_t m) {
  std::ostringstream os;
  os << "n,seed,beta,F";
  for (std::size_t i = 1; i <= m; ++i) os << ",L_n" << i;
  for (std::size_t i = 1; i <= m; ++i) os << ",logZ0" << i;
  for (std::size_t i = 1; i <= m; ++i) os << ",logZ1" << i;
  for (std::size_t i = 1; i <= m; ++i) os << ",logZ2" << i;
  for (std::size_t i = 1; i <= m; ++i) os << ",a_" << i;
  os << ",i_max,epsilon";
  return os.str();
}

inline std::string csv_number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

/// One CSV row; i_max is reported 1-based like the column suffixes.
inline std::string free_energy_csv_row(const FreeEnergyEstimate& est, std::uint64_t seed) {
  std::ostringstream os;
  os << est.n << ',' << seed << ',' << csv_number(est.beta) << ',' << csv_number(est.F);
  for (const auto& br : est.branches) os << ',' << csv_number(br.L_n);
  for (const auto& br : est.branches) os << ',' << csv_number(br.log_Z0);
  for (const auto& br : est.branches) os << ',' << csv_number(br.log_Z1);
  for (const auto& br : est.branches) os << ',' << csv_number(br.log_Z2);
  for (const auto& br : est.branches) os << ',' << csv_number(br.a);
  os << ',' << est.i_max + 1 << ',' << csv_number(est.epsilon);
  return os.str();
}

}  // namespace nufe
