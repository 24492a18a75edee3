#pragma once

// Coefficients of the free-energy and generalization-loss expansions when the
// optimal distribution is not unique: the expected maximum of the limiting
// Gaussian log-likelihood vector, branch probabilities, lambda-hat, m-hat.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <boost/random/normal_distribution.hpp>
#include <json.hpp>

#include "nufe/population.hpp"
#include "nufe/rng.hpp"

namespace nufe {

/// Mean-zero Gaussian vector with covariance V, one component per optimum.
/// `lambda` and `multiplicity` break exact ties in the argmax.
struct GaussianMaxProblem {
  CovarianceMatrix V;
  std::vector<double> lambda;
  std::vector<int> multiplicity;

  std::size_t size() const { return static_cast<std::size_t>(V.rows()); }

  static GaussianMaxProblem from(const CovarianceMatrix& V, const OptimumSet& opt) {
    return {V, opt.lambda, opt.multiplicity};
  }
  static GaussianMaxProblem untied(const CovarianceMatrix& V) {
    return {V, std::vector<double>(static_cast<std::size_t>(V.rows()), 1.0),
            std::vector<int>(static_cast<std::size_t>(V.rows()), 1)};
  }
};

/// Index of the largest value; ties go to the smallest lambda, then the
/// largest multiplicity, then the lowest index.
template <class Values>
std::size_t select_max_branch(const Values& values, const std::vector<double>& lambda,
                              const std::vector<int>& multiplicity) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < static_cast<std::size_t>(values.size()); ++i) {
    if (values[i] > values[best]) {
      best = i;
    } else if (values[i] == values[best]) {
      if (lambda[i] < lambda[best] || (lambda[i] == lambda[best] && multiplicity[i] > multiplicity[best])) best = i;
    }
  }
  return best;
}

/// E[max(L1, L2)] = sqrt((V11 + V22 - 2 V12) / (2 pi)) for a mean-zero pair.
inline double mu_closed_form_two(const CovarianceMatrix& V, double tol = 1e-12) {
  if (V.rows() != 2 || V.cols() != 2) throw std::invalid_argument("mu_closed_form_two needs a 2x2 covariance");
  const double diff_var = V(0, 0) + V(1, 1) - V(0, 1) - V(1, 0);
  if (diff_var < -tol * std::max(1.0, V.cwiseAbs().maxCoeff()))
    throw std::invalid_argument("mu_closed_form_two: V11 + V22 - 2 V12 is negative");
  return std::sqrt(std::max(diff_var, 0.0) / (2.0 * std::numbers::pi));
}

/// Symmetric square root Q diag(sqrt(ev)) Q^T; throws when V is not PSD.
inline Eigen::MatrixXd symmetric_sqrt(const CovarianceMatrix& V, double tol = 1e-10) {
  validate_covariance(V, tol);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(V);
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

struct MonteCarloEstimate {
  double estimate = 0.0;
  double se = 0.0;
};

struct MaxSampling {
  double sum_max = 0.0;
  double sum_max_sq = 0.0;
  std::vector<std::uint64_t> wins;
};

namespace detail {

inline constexpr std::size_t kDrawsPerChunk = 1u << 16;

/// Draws are split into fixed-size chunks, each with its own substream, so the
/// result depends only on (seed, draws) and not on the thread count.
inline MaxSampling sample_maxima(const GaussianMaxProblem& problem, std::size_t draws, std::uint64_t seed,
                                 unsigned threads) {
  if (draws < 10'000) throw std::invalid_argument("Monte Carlo maximum needs at least 10^4 draws");
  const Eigen::MatrixXd root = symmetric_sqrt(problem.V);
  const std::size_t m = problem.size();
  const std::size_t chunks = (draws + kDrawsPerChunk - 1) / kDrawsPerChunk;
  std::vector<MaxSampling> partial(chunks);

  auto run_chunk = [&](std::size_t c) {
    Engine engine = make_engine(stream_seed(seed, {0x6d61785fULL, c}));
    boost::random::normal_distribution<double> normal;
    MaxSampling acc;
    acc.wins.assign(m, 0);
    Eigen::VectorXd z(m), v(m);
    const std::size_t begin = c * kDrawsPerChunk;
    const std::size_t end = std::min(draws, begin + kDrawsPerChunk);
    for (std::size_t d = begin; d < end; ++d) {
      for (std::size_t k = 0; k < m; ++k) z(static_cast<Eigen::Index>(k)) = normal(engine);
      v.noalias() = root * z;
      const std::size_t i = select_max_branch(v, problem.lambda, problem.multiplicity);
      const double mx = v(static_cast<Eigen::Index>(i));
      acc.sum_max += mx;
      acc.sum_max_sq += mx * mx;
      ++acc.wins[i];
    }
    partial[c] = std::move(acc);
  };

  threads = std::max(1u, threads);
  if (threads == 1) {
    for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t c = t; c < chunks; c += threads) run_chunk(c);
      });
    for (auto& th : pool) th.join();
  }

  MaxSampling total;
  total.wins.assign(m, 0);
  for (const auto& p : partial) {
    total.sum_max += p.sum_max;
    total.sum_max_sq += p.sum_max_sq;
    for (std::size_t k = 0; k < m; ++k) total.wins[k] += p.wins[k];
  }
  return total;
}

}  // namespace detail

/// Monte Carlo estimate of E[max_i L_i] with its standard error.
inline MonteCarloEstimate expected_max_mc(const GaussianMaxProblem& problem, std::size_t draws, std::uint64_t seed,
                                          unsigned threads = 1) {
  const auto s = detail::sample_maxima(problem, draws, seed, threads);
  const double n = static_cast<double>(draws);
  const double mean = s.sum_max / n;
  const double var = std::max(0.0, (s.sum_max_sq - n * mean * mean) / (n - 1.0));
  return {mean, std::sqrt(var / n)};
}

/// Fraction of draws in which each component is the (tie-broken) maximum.
inline std::vector<double> branch_probabilities(const GaussianMaxProblem& problem, std::size_t draws,
                                                std::uint64_t seed, unsigned threads = 1) {
  const auto s = detail::sample_maxima(problem, draws, seed, threads);
  std::vector<double> alpha(problem.size());
  for (std::size_t i = 0; i < alpha.size(); ++i) alpha[i] = static_cast<double>(s.wins[i]) / static_cast<double>(draws);
  return alpha;
}

// ---------------------------------------------------------------------------

struct AsymptoticCoefficients {
  double L0 = 0.0;
  CovarianceMatrix V;
  double mu = 0.0;
  std::vector<double> alpha;
  double lambda_hat = 1.0;
  double m_hat = 1.0;
  double beta = 1.0;
  double offset = 0.0;  ///< optional O(1) constant, fitted elsewhere; zero by default
};

struct CoefficientOptions {
  std::size_t mc_draws = 1'000'000;
  std::uint64_t seed = 1;
  unsigned threads = 1;
};

/// mu and alpha use the closed forms for one or two optima, Monte Carlo otherwise.
inline AsymptoticCoefficients compute_coefficients(const OptimumSet& opt, const CovarianceMatrix& V, double beta,
                                                   const CoefficientOptions& copt = {}) {
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  validate_covariance(V);
  const std::size_t m = opt.size();
  AsymptoticCoefficients c;
  c.L0 = opt.L0;
  c.V = V;
  c.beta = beta;
  const auto problem = GaussianMaxProblem::from(V, opt);
  if (m == 1) {
    c.mu = 0.0;
    c.alpha = {1.0};
  } else if (m == 2) {
    c.mu = mu_closed_form_two(V);
    if (c.mu > 0.0) {
      c.alpha = {0.5, 0.5};
    } else {
      // the two components coincide: the tie-break decides every draw
      c.alpha = {0.0, 0.0};
      c.alpha[select_max_branch(std::vector<double>{0.0, 0.0}, opt.lambda, opt.multiplicity)] = 1.0;
    }
  } else {
    c.mu = expected_max_mc(problem, copt.mc_draws, copt.seed, copt.threads).estimate;
    c.alpha = branch_probabilities(problem, copt.mc_draws, copt.seed, copt.threads);
  }
  c.lambda_hat = 0.0;
  c.m_hat = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    c.lambda_hat += c.alpha[i] * opt.lambda[i];
    c.m_hat += c.alpha[i] * opt.multiplicity[i];
  }
  return c;
}

/// -mu sqrt(n) + (lambda_hat log n - (m_hat - 1) log log n) / beta + offset,
/// i.e. the expected free energy with n L0 removed.
inline double predicted_free_energy_excess(double n, const AsymptoticCoefficients& c) {
  if (!(n >= 3.0)) throw std::domain_error("predicted_free_energy: n must be >= 3");
  const double logn = std::log(n);
  return -c.mu * std::sqrt(n) + (c.lambda_hat * logn - (c.m_hat - 1.0) * std::log(logn)) / c.beta + c.offset;
}

inline double predicted_free_energy(double n, const AsymptoticCoefficients& c) {
  return n * c.L0 + predicted_free_energy_excess(n, c);
}

/// L0 - mu / (2 sqrt(n)); defined for beta = 1 only.
inline double predicted_gen_loss(double n, const AsymptoticCoefficients& c) {
  if (c.beta != 1.0) throw std::invalid_argument("predicted_gen_loss is only defined for beta = 1");
  if (!(n >= 1.0)) throw std::domain_error("predicted_gen_loss: n must be >= 1");
  return c.L0 - c.mu / (2.0 * std::sqrt(n));
}

inline nlohmann::json to_json(const AsymptoticCoefficients& c) {
  nlohmann::json V = nlohmann::json::array();
  for (Eigen::Index i = 0; i < c.V.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < c.V.cols(); ++j) row.push_back(c.V(i, j));
    V.push_back(row);
  }
  return {{"L0", c.L0},         {"V", V},         {"mu", c.mu},     {"alpha", c.alpha},
          {"lambda_hat", c.lambda_hat}, {"m_hat", c.m_hat}, {"beta", c.beta}, {"offset", c.offset}};
}

inline AsymptoticCoefficients coefficients_from_json(const nlohmann::json& j) {
  AsymptoticCoefficients c;
  try {
    c.L0 = j.at("L0").get<double>();
    const auto& V = j.at("V");
    c.V.resize(static_cast<Eigen::Index>(V.size()), static_cast<Eigen::Index>(V.size()));
    for (std::size_t i = 0; i < V.size(); ++i)
      for (std::size_t k = 0; k < V.size(); ++k)
        c.V(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = V.at(i).at(k).get<double>();
    c.mu = j.at("mu").get<double>();
    c.alpha = j.at("alpha").get<std::vector<double>>();
    c.lambda_hat = j.at("lambda_hat").get<double>();
    c.m_hat = j.at("m_hat").get<double>();
    c.beta = j.at("beta").get<double>();
    c.offset = j.value("offset", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("coefficients JSON: ") + e.what());
  }
  return c;
}

}  // namespace nufe
