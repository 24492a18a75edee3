#pragma once

// Monte Carlo replication of the sample-size sweep: per-replication free
// energies, ensemble summaries against the predicted curve, least-squares
// fits of the expansion, the CLT diagnostic and the predictive-loss check.

#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "nufe/asymptotics.hpp"
#include "nufe/bayes.hpp"
#include "nufe/model.hpp"
#include "nufe/population.hpp"
#include "nufe/rng.hpp"

namespace nufe {

class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A replication failed; the message carries (n, r, seed).
class ReplicationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

inline std::string config_hash(const ModelSpec& spec) { return hex64(fnv1a(to_json(spec).dump())); }

/// Runs body(i) for i in [0, count) on `threads` workers with a static
/// strided assignment. The exception of the lowest failing index is rethrown.
template <class Body>
void parallel_for(std::size_t count, unsigned threads, Body&& body) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(count, 1))));
  std::vector<std::exception_ptr> errors(count);
  auto worker = [&](unsigned t) {
    for (std::size_t i = t; i < count; i += threads) {
      try {
        body(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker, t);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Plan and replications

struct ExperimentPlan {
  std::vector<std::size_t> sample_sizes{100, 200, 300, 400, 500, 600};
  std::size_t replications = 200;
  std::uint64_t master_seed = 1;
  double beta = 1.0;
  unsigned threads = 1;
  /// Subtract mean_i(n L_ni) - n L0, which has expectation exactly zero, from
  /// each F before averaging.
  bool control_variate = true;
  std::string output_dir;

  void validate() const {
    if (sample_sizes.empty()) throw ConfigError("sample_sizes must not be empty");
    for (std::size_t k = 0; k < sample_sizes.size(); ++k) {
      if (sample_sizes[k] < 3) throw ConfigError("sample sizes must be >= 3");
      if (k > 0 && sample_sizes[k] <= sample_sizes[k - 1]) throw ConfigError("sample sizes must be strictly increasing");
    }
    if (replications < 2) throw ConfigError("replications must be >= 2");
    if (!(beta > 0.0)) throw ConfigError("beta must be positive");
  }
};

/// Seed of replication r at sample size n.
inline std::uint64_t replication_seed(std::uint64_t master, std::size_t n, std::size_t r) {
  return stream_seed(master, {static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(r)});
}

struct ReplicationRecord {
  std::size_t n = 0;
  std::size_t r = 0;
  std::uint64_t seed = 0;
  std::vector<FreeEnergyEstimate> per_beta;  ///< one estimate per requested beta
};

/// records[k][r] for sample_sizes[k]; the same dataset and node log likelihoods
/// serve every beta in `betas`.
inline std::vector<std::vector<ReplicationRecord>> run_replications(
    const std::vector<std::size_t>& sample_sizes, std::size_t replications, std::uint64_t master_seed,
    const std::vector<double>& betas, const QuadratureGrid& grid, const OptimumSet& opt, const ModelSpec& spec,
    unsigned threads = 1, const EpsilonSchedule& schedule = {}) {
  std::vector<std::vector<ReplicationRecord>> out(sample_sizes.size(), std::vector<ReplicationRecord>(replications));
  const std::size_t total = sample_sizes.size() * replications;
  parallel_for(total, threads, [&](std::size_t job) {
    const std::size_t k = job / replications, r = job % replications;
    const std::size_t n = sample_sizes[k];
    const std::uint64_t seed = replication_seed(master_seed, n, r);
    try {
      const Dataset data = sample_dataset(n, seed, spec);
      const auto ll = node_log_likelihood(data, grid, spec);
      const auto losses = optimum_losses(data, opt, spec);
      ReplicationRecord rec{n, r, seed, {}};
      for (double beta : betas) rec.per_beta.push_back(free_energy_from_loglik(ll, n, losses, grid, opt, beta, schedule));
      out[k][r] = std::move(rec);
    } catch (const std::exception& e) {
      throw ReplicationError("replication failed at n=" + std::to_string(n) + ", r=" + std::to_string(r) +
                             ", seed=" + std::to_string(seed) + ": " + e.what());
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Summary

struct SummaryRow {
  std::size_t n = 0;
  std::size_t reps = 0;
  double mean_F = 0.0;
  double se_F = 0.0;
  double L0_times_n = 0.0;
  double theory_minus_nL0 = 0.0;
  double residual = 0.0;  ///< mean_F - n L0 - theory_minus_nL0
};

inline constexpr const char* kSummaryHeader = "n,reps,mean_F,se_F,L0_times_n,theory_minus_nL0,residual";

inline double control_term(const FreeEnergyEstimate& est, double L0) {
  double acc = 0.0;
  for (const auto& br : est.branches) acc += br.L_n;
  const double n = static_cast<double>(est.n);
  return n * (acc / static_cast<double>(est.branches.size()) - L0);
}

/// Aggregates the first `reps` replications of each sample size for the beta
/// at `beta_index`.
inline std::vector<SummaryRow> summarize(const std::vector<std::vector<ReplicationRecord>>& records,
                                         std::size_t beta_index, std::size_t reps,
                                         const AsymptoticCoefficients& coeff, bool control_variate) {
  std::vector<SummaryRow> rows;
  for (const auto& per_n : records) {
    if (reps < 2 || reps > per_n.size()) throw std::invalid_argument("summarize: bad replication count");
    SummaryRow row;
    row.n = per_n.front().n;
    row.reps = reps;
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t r = 0; r < reps; ++r) {
      const auto& est = per_n[r].per_beta.at(beta_index);
      const double v = est.F - (control_variate ? control_term(est, coeff.L0) : 0.0);
      sum += v;
      sum_sq += v * v;
    }
    const double k = static_cast<double>(reps);
    row.mean_F = sum / k;
    row.se_F = std::sqrt(std::max(0.0, (sum_sq - k * row.mean_F * row.mean_F) / (k - 1.0)) / k);
    const double n = static_cast<double>(row.n);
    row.L0_times_n = n * coeff.L0;
    row.theory_minus_nL0 = predicted_free_energy_excess(n, coeff);
    row.residual = row.mean_F - row.L0_times_n - row.theory_minus_nL0;
    rows.push_back(row);
  }
  return rows;
}

inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << kSummaryHeader << '\n';
  for (const auto& r : rows)
    os << r.n << ',' << r.reps << ',' << csv_number(r.mean_F) << ',' << csv_number(r.se_F) << ','
       << csv_number(r.L0_times_n) << ',' << csv_number(r.theory_minus_nL0) << ',' << csv_number(r.residual) << '\n';
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  return out;
}

inline std::vector<SummaryRow> read_summary_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw FitError("summary CSV is empty");
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* name : {"n", "reps", "mean_F", "se_F", "L0_times_n", "theory_minus_nL0", "residual"})
    if (!col.count(name)) throw FitError(std::string("summary CSV is missing column '") + name + "'");
  std::vector<SummaryRow> rows;
  while (std::getline(is, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) throw FitError("summary CSV row has " + std::to_string(cells.size()) + " cells");
    try {
      SummaryRow r;
      r.n = std::stoul(cells[col["n"]]);
      r.reps = std::stoul(cells[col["reps"]]);
      r.mean_F = std::stod(cells[col["mean_F"]]);
      r.se_F = std::stod(cells[col["se_F"]]);
      r.L0_times_n = std::stod(cells[col["L0_times_n"]]);
      r.theory_minus_nL0 = std::stod(cells[col["theory_minus_nL0"]]);
      r.residual = std::stod(cells[col["residual"]]);
      rows.push_back(r);
    } catch (const std::logic_error& e) {
      throw FitError(std::string("summary CSV: unparsable number: ") + e.what());
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Least squares

struct LinearFit {
  std::vector<std::string> names;
  std::vector<double> coef;
  std::vector<double> se;

  double at(const std::string& name) const { return coef.at(index(name)); }
  double se_of(const std::string& name) const { return se.at(index(name)); }
  bool has(const std::string& name) const { return std::find(names.begin(), names.end(), name) != names.end(); }

 private:
  std::size_t index(const std::string& name) const {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw std::out_of_range("fit has no term '" + name + "'");
    return static_cast<std::size_t>(it - names.begin());
  }
};

/// OLS of y on the columns of X. With `sigma` (per-point standard errors,
/// all positive) the coefficient covariance is propagated from them;
/// otherwise it comes from the residual variance.
inline LinearFit ordinary_least_squares(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                        const std::vector<std::string>& names,
                                        const std::vector<double>& sigma = {}) {
  const Eigen::Index rows = X.rows(), p = X.cols();
  if (rows < p) throw FitError("fit needs at least as many points as terms");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < p) throw FitError("rank-deficient design matrix");
  const Eigen::VectorXd beta = qr.solve(y);
  const Eigen::MatrixXd XtX_inv = (X.transpose() * X).inverse();

  Eigen::MatrixXd cov;
  const bool known = !sigma.empty() && std::all_of(sigma.begin(), sigma.end(), [](double s) { return s > 0.0; });
  if (known) {
    Eigen::VectorXd w(rows);
    for (Eigen::Index i = 0; i < rows; ++i) w(i) = sigma[static_cast<std::size_t>(i)] * sigma[static_cast<std::size_t>(i)];
    cov = XtX_inv * X.transpose() * w.asDiagonal() * X * XtX_inv;
  } else {
    if (rows == p) throw FitError("residual standard errors need more points than terms");
    const double s2 = (y - X * beta).squaredNorm() / static_cast<double>(rows - p);
    cov = s2 * XtX_inv;
  }
  LinearFit fit;
  fit.names = names;
  for (Eigen::Index j = 0; j < p; ++j) {
    fit.coef.push_back(beta(j));
    fit.se.push_back(std::sqrt(std::max(0.0, cov(j, j))));
  }
  return fit;
}

/// Fits mean_F - n L0 on {sqrt n, log n, 1}, plus log log n when m_hat != 1.
/// Terms are named sqrt_n, log_n, log_log_n, const.
inline LinearFit fit_expansion(const std::vector<SummaryRow>& rows, double m_hat = 1.0) {
  std::vector<double> ns;
  for (const auto& r : rows)
    if (std::find(ns.begin(), ns.end(), static_cast<double>(r.n)) == ns.end()) ns.push_back(static_cast<double>(r.n));
  if (ns.size() < 4) throw FitError("fit_expansion needs at least 4 distinct sample sizes");
  const bool loglog = m_hat != 1.0;
  std::vector<std::string> names{"sqrt_n", "log_n"};
  if (loglog) names.push_back("log_log_n");
  names.push_back("const");
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(names.size()));
  Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
  std::vector<double> sigma;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double n = static_cast<double>(rows[i].n);
    if (n < 3) throw FitError("fit_expansion: n must be >= 3");
    const auto ii = static_cast<Eigen::Index>(i);
    Eigen::Index c = 0;
    X(ii, c++) = std::sqrt(n);
    X(ii, c++) = std::log(n);
    if (loglog) X(ii, c++) = std::log(std::log(n));
    X(ii, c) = 1.0;
    y(ii) = rows[i].mean_F - rows[i].L0_times_n;
    sigma.push_back(rows[i].se_F);
  }
  return ordinary_least_squares(X, y, names, sigma);
}

inline LinearFit fit_expansion_file(const std::string& summary_csv, double m_hat = 1.0) {
  std::ifstream in(summary_csv);
  if (!in) throw FitError("cannot open '" + summary_csv + "'");
  return fit_expansion(read_summary_csv(in), m_hat);
}

/// Regression of the residual on {1, sqrt n}; terms const and sqrt_n.
inline LinearFit fit_residual_trend(const std::vector<SummaryRow>& rows) {
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), 2);
  Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
  std::vector<double> sigma;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    X(ii, 0) = 1.0;
    X(ii, 1) = std::sqrt(static_cast<double>(rows[i].n));
    y(ii) = rows[i].residual;
    sigma.push_back(rows[i].se_F);
  }
  return ordinary_least_squares(X, y, {"const", "sqrt_n"}, sigma);
}

inline nlohmann::json to_json(const LinearFit& fit) {
  nlohmann::json coef = nlohmann::json::object(), se = nlohmann::json::object();
  for (std::size_t i = 0; i < fit.names.size(); ++i) {
    coef[fit.names[i]] = fit.coef[i];
    se[fit.names[i]] = fit.se[i];
  }
  return {{"coefficients", coef}, {"standard_errors", se}};
}

// ---------------------------------------------------------------------------
// Experiment

struct ExperimentReport {
  std::vector<SummaryRow> rows;
  std::optional<LinearFit> fit;  ///< absent with fewer than 4 sample sizes
  std::string fit_error;
  std::optional<LinearFit> residual_trend;
  AsymptoticCoefficients coefficients;
  std::string config_hash;
  std::uint64_t master_seed = 0;
};

inline nlohmann::json to_json(const ExperimentReport& rep) {
  nlohmann::json fit = rep.fit ? to_json(*rep.fit) : nlohmann::json(nullptr);
  nlohmann::json trend = rep.residual_trend ? to_json(*rep.residual_trend) : nlohmann::json(nullptr);
  return {{"fit", fit},
          {"fit_error", rep.fit_error},
          {"residual_trend", trend},
          {"coefficients",
           {{"L0", rep.coefficients.L0},
            {"mu", rep.coefficients.mu},
            {"lambda_hat", rep.coefficients.lambda_hat},
            {"m_hat", rep.coefficients.m_hat},
            {"beta", rep.coefficients.beta}}},
          {"config_hash", rep.config_hash},
          {"master_seed", rep.master_seed}};
}

/// Runs the sweep. When plan.output_dir is set, writes runs.csv, summary.csv
/// and fit.json there.
inline ExperimentReport run_experiment(const ExperimentPlan& plan, const ModelSpec& spec, const OptimumSet& opt,
                                       const QuadratureGrid& grid, const AsymptoticCoefficients& coeff,
                                       const EpsilonSchedule& schedule = {}) {
  plan.validate();
  if (coeff.beta != plan.beta) throw ConfigError("coefficients were computed for a different beta");
  const auto records = run_replications(plan.sample_sizes, plan.replications, plan.master_seed, {plan.beta}, grid, opt,
                                        spec, plan.threads, schedule);
  ExperimentReport rep;
  rep.rows = summarize(records, 0, plan.replications, coeff, plan.control_variate);
  try {
    rep.fit = fit_expansion(rep.rows, coeff.m_hat);
    rep.residual_trend = fit_residual_trend(rep.rows);
  } catch (const FitError& e) {
    rep.fit_error = e.what();
  }
  rep.coefficients = coeff;
  rep.config_hash = config_hash(spec);
  rep.master_seed = plan.master_seed;

  if (!plan.output_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(plan.output_dir);
    std::ofstream runs(fs::path(plan.output_dir) / "runs.csv");
    runs << free_energy_csv_header(opt.size()) << '\n';
    for (const auto& per_n : records)
      for (const auto& rec : per_n) runs << free_energy_csv_row(rec.per_beta[0], rec.seed) << '\n';
    std::ofstream summary(fs::path(plan.output_dir) / "summary.csv");
    write_summary_csv(summary, rep.rows);
    std::ofstream fit(fs::path(plan.output_dir) / "fit.json");
    fit << to_json(rep).dump(2) << '\n';
    if (!runs || !summary || !fit) throw std::runtime_error("failed writing experiment outputs to " + plan.output_dir);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// CLT diagnostic

struct CltSummary {
  std::size_t n = 0;
  std::size_t replications = 0;
  Eigen::VectorXd mean;
  Eigen::VectorXd mean_se;
  Eigen::MatrixXd cov;
  Eigen::MatrixXd cov_se;
  double max_mean = 0.0;
  double max_se = 0.0;
  double mu = 0.0;  ///< expected maximum implied by V
  CovarianceMatrix V;
};

/// Ensemble statistics of sqrt(n)(-L_n(w_0i) + L0) over independent datasets.
inline CltSummary clt_diagnostic(std::size_t n, std::size_t replications, std::uint64_t seed, const OptimumSet& opt,
                                 const ModelSpec& spec, const CovarianceMatrix& V, unsigned threads = 1) {
  if (replications < 2) throw ConfigError("replications must be >= 2");
  if (n < 1) throw ConfigError("n must be >= 1");
  const std::size_t m = opt.size();
  std::vector<MaxStatistic> stats(replications);
  parallel_for(replications, threads, [&](std::size_t r) {
    stats[r] = max_statistic(sample_dataset(n, stream_seed(seed, {0x636c74ULL, n, r}), spec), opt, spec);
  });

  const auto Mi = static_cast<Eigen::Index>(m);
  const double R = static_cast<double>(replications);
  CltSummary out;
  out.n = n;
  out.replications = replications;
  out.V = V;
  out.mu = m == 2 ? mu_closed_form_two(V) : (m == 1 ? 0.0 : expected_max_mc(GaussianMaxProblem::untied(V), 1'000'000, seed).estimate);
  out.mean = Eigen::VectorXd::Zero(Mi);
  for (const auto& s : stats)
    for (Eigen::Index i = 0; i < Mi; ++i) out.mean(i) += s.scaled[static_cast<std::size_t>(i)] / R;

  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(Mi, Mi), sum_sq = Eigen::MatrixXd::Zero(Mi, Mi);
  double max_sum = 0.0, max_sq = 0.0;
  for (const auto& s : stats) {
    for (Eigen::Index i = 0; i < Mi; ++i)
      for (Eigen::Index j = 0; j < Mi; ++j) {
        const double p = (s.scaled[static_cast<std::size_t>(i)] - out.mean(i)) * (s.scaled[static_cast<std::size_t>(j)] - out.mean(j));
        sum(i, j) += p;
        sum_sq(i, j) += p * p;
      }
    const double mx = *std::max_element(s.scaled.begin(), s.scaled.end());
    max_sum += mx;
    max_sq += mx * mx;
  }
  out.cov = sum / (R - 1.0);
  out.cov_se.resize(Mi, Mi);
  out.mean_se.resize(Mi);
  for (Eigen::Index i = 0; i < Mi; ++i) {
    out.mean_se(i) = std::sqrt(out.cov(i, i) / R);
    for (Eigen::Index j = 0; j < Mi; ++j) {
      const double mean_p = sum(i, j) / R;
      const double var_p = std::max(0.0, (sum_sq(i, j) - R * mean_p * mean_p) / (R - 1.0));
      out.cov_se(i, j) = std::sqrt(var_p / R);
    }
  }
  out.max_mean = max_sum / R;
  out.max_se = std::sqrt(std::max(0.0, (max_sq - R * out.max_mean * out.max_mean) / (R - 1.0)) / R);
  return out;
}

inline nlohmann::json matrix_json(const Eigen::MatrixXd& M) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
    out.push_back(row);
  }
  return out;
}

inline nlohmann::json to_json(const CltSummary& s) {
  return {{"n", s.n},
          {"replications", s.replications},
          {"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
          {"mean_se", std::vector<double>(s.mean_se.data(), s.mean_se.data() + s.mean_se.size())},
          {"covariance", matrix_json(s.cov)},
          {"covariance_se", matrix_json(s.cov_se)},
          {"V", matrix_json(s.V)},
          {"max_mean", s.max_mean},
          {"max_se", s.max_se},
          {"mu", s.mu}};
}

// ---------------------------------------------------------------------------
// Generalization loss against the free-energy difference

struct GenLossCheck {
  std::size_t n = 0;
  std::size_t replications = 0;
  double L0 = 0.0;
  double mean_diff = 0.0;  ///< ensemble mean of F_{n+1} - F_n, control variate applied
  double se_diff = 0.0;
  double mean_diff_raw = 0.0;  ///< without the control variate
  double se_diff_raw = 0.0;
  double mean_G = 0.0;
  double se_G = 0.0;
  double mean_gap = 0.0;  ///< mean of (diff - G) over paired replications
  double se_gap = 0.0;
  double predicted_G = 0.0;
};

namespace detail {

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

inline MeanSe mean_se(const std::vector<double>& v) {
  const double k = static_cast<double>(v.size());
  double s = 0.0, s2 = 0.0;
  for (double x : v) s += x;
  const double mean = s / k;
  for (double x : v) s2 += (x - mean) * (x - mean);
  return {mean, std::sqrt(s2 / (k - 1.0) / k)};
}

}  // namespace detail

/// For each replication: a dataset of size n + 1 and its n-prefix give
/// F_{n+1} - F_n = -log p(X_{n+1} | X^n); G_n comes from the posterior of the
/// prefix. The control variate -log sum_i c_i p(X_{n+1}|w_0i) - L_mix(c), with
/// c the posterior branch masses, has conditional mean zero given X^n.
inline GenLossCheck gen_loss_check(std::size_t n, std::size_t replications, std::uint64_t seed,
                                   const QuadratureGrid& grid, const OptimumSet& opt, const ModelSpec& spec,
                                   const AsymptoticCoefficients& coeff, unsigned threads = 1,
                                   const GenLossOptions& gopt = {}) {
  if (replications < 2) throw ConfigError("replications must be >= 2");
  if (n < 3) throw ConfigError("n must be >= 3");
  std::vector<double> diff(replications), diff_raw(replications), G(replications);
  parallel_for(replications, threads, [&](std::size_t r) {
    const std::uint64_t s = stream_seed(seed, {0x67656eULL, n, r});
    const Dataset full = sample_dataset(n + 1, s, spec);
    const Dataset data = full.prefix(n);
    const double x = full.x[n], y = full.y[n];

    auto ll = node_log_likelihood(data, grid, spec);
    const auto est_n = free_energy_from_loglik(ll, n, optimum_losses(data, opt, spec), grid, opt, 1.0);
    G[r] = gen_loss(posterior_nodes(ll, grid), spec, gopt);

    for (std::size_t k = 0; k < grid.size(); ++k) ll[k] += log_model_density(x, y, grid.node(k), spec);
    const auto est_n1 = free_energy_from_loglik(ll, n + 1, optimum_losses(full, opt, spec), grid, opt, 1.0);
    diff_raw[r] = est_n1.F - est_n.F;

    std::vector<double> log_mass(opt.size()), at_new(opt.size());
    for (std::size_t i = 0; i < opt.size(); ++i)
      log_mass[i] = -static_cast<double>(n) * est_n.branches[i].L_n + est_n.branches[i].log_Z0 - est_n.log_Z;
    std::vector<WeightedParameter> mix;
    for (std::size_t i = 0; i < opt.size(); ++i) {
      mix.push_back({opt.optima[i], std::exp(log_mass[i])});
      at_new[i] = log_mass[i] + log_model_density(x, y, opt.optima[i], spec);
    }
    const double control = -log_sum_exp(at_new) - gen_loss(mix, spec, gopt);
    diff[r] = diff_raw[r] - control;
  });

  GenLossCheck out;
  out.n = n;
  out.replications = replications;
  out.L0 = coeff.L0;
  const auto d = detail::mean_se(diff), dr = detail::mean_se(diff_raw), g = detail::mean_se(G);
  std::vector<double> gap(replications);
  for (std::size_t r = 0; r < replications; ++r) gap[r] = diff[r] - G[r];
  const auto gp = detail::mean_se(gap);
  out.mean_diff = d.mean;
  out.se_diff = d.se;
  out.mean_diff_raw = dr.mean;
  out.se_diff_raw = dr.se;
  out.mean_G = g.mean;
  out.se_G = g.se;
  out.mean_gap = gp.mean;
  out.se_gap = gp.se;
  out.predicted_G = coeff.beta == 1.0 ? predicted_gen_loss(static_cast<double>(n), coeff)
                                      : std::numeric_limits<double>::quiet_NaN();
  return out;
}

}  // namespace nufe
