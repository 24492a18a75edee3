#pragma once

// True distribution, the one-sigmoid regression model, its prior box, and
// dataset sampling.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>
#include <json.hpp>

#include "nufe/rng.hpp"

namespace nufe {

/// Malformed or inconsistent configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  double width() const { return hi - lo; }
  bool contains(double v) const { return v >= lo && v <= hi; }
  bool operator==(const Interval&) const = default;
};

struct Parameter {
  double a = 0.0;
  double b = 0.0;

  bool operator==(const Parameter&) const = default;
};

inline double distance(Parameter p, Parameter q) { return std::hypot(p.a - q.a, p.b - q.b); }

enum class RegressionKind { piecewise_sigmoid };

struct ModelSpec {
  double noise_sigma = 0.2;
  Interval x_support{-2.0, 2.0};
  Interval prior_a{-20.0, 20.0};
  Interval prior_b{-20.0, 20.0};
  RegressionKind regression_kind = RegressionKind::piecewise_sigmoid;

  void validate() const {
    if (!(noise_sigma > 0.0) || !std::isfinite(noise_sigma))
      throw ConfigError("noise_sigma must be positive and finite");
    if (!(x_support.hi > x_support.lo)) throw ConfigError("x_support must be a non-empty interval");
    if (x_support.lo < -2.0 || x_support.hi > 2.0)
      throw ConfigError("x_support must lie inside [-2, 2], where the true regression is defined");
    if (!(prior_a.hi > prior_a.lo) || !(prior_b.hi > prior_b.lo))
      throw ConfigError("prior box must have positive area");
  }

  double prior_area() const { return prior_a.width() * prior_b.width(); }
  double prior_density() const { return 1.0 / prior_area(); }
  bool in_prior(Parameter w) const { return prior_a.contains(w.a) && prior_b.contains(w.b); }
  double x_density(double x) const { return x_support.contains(x) ? 1.0 / x_support.width() : 0.0; }
  double log_normalizer() const { return std::log(std::sqrt(2.0 * std::numbers::pi) * noise_sigma); }

  /// Support endpoints plus the kinks of the true regression inside it.
  std::vector<double> x_breakpoints() const {
    std::vector<double> out{x_support.lo};
    for (double kink : {-1.0, 1.0})
      if (kink > x_support.lo && kink < x_support.hi) out.push_back(kink);
    out.push_back(x_support.hi);
    return out;
  }
};

/// Piecewise-linear truth: x+2 on [-2,-1), 1 on [-1,1), 2-x on [1,2].
inline double true_regression(double x) {
  if (!(x >= -2.0 && x <= 2.0)) throw std::domain_error("true_regression: x outside [-2, 2]");
  if (x < -1.0) return x + 2.0;
  if (x < 1.0) return 1.0;
  return 2.0 - x;
}

inline double sigmoid(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

inline double model_mean(double x, Parameter w) { return sigmoid(w.a * x + w.b); }

inline double log_model_density(double x, double y, Parameter w, const ModelSpec& spec) {
  const double r = y - model_mean(x, w);
  return -spec.log_normalizer() - r * r / (2.0 * spec.noise_sigma * spec.noise_sigma);
}

/// Observations stored column-wise; `x[j], y[j]` is the j-th pair.
struct Dataset {
  std::vector<double> x;
  std::vector<double> y;
  std::uint64_t seed = 0;

  std::size_t n() const { return x.size(); }

  /// The first `count` pairs, keeping the seed.
  Dataset prefix(std::size_t count) const {
    if (count > n()) throw std::out_of_range("Dataset::prefix beyond dataset size");
    return Dataset{{x.begin(), x.begin() + static_cast<std::ptrdiff_t>(count)},
                   {y.begin(), y.begin() + static_cast<std::ptrdiff_t>(count)},
                   seed};
  }
};

/// Draws pairs sequentially (x then noise), so a dataset of size n is a prefix
/// of the dataset of size n+1 drawn from the same seed.
inline Dataset sample_dataset(std::size_t n, std::uint64_t seed, const ModelSpec& spec) {
  if (n == 0) throw std::invalid_argument("sample_dataset: n must be >= 1");
  Engine engine = make_engine(seed);
  boost::random::uniform_real_distribution<double> ux(spec.x_support.lo, spec.x_support.hi);
  boost::random::normal_distribution<double> noise(0.0, 1.0);
  Dataset d;
  d.seed = seed;
  d.x.reserve(n);
  d.y.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double x = ux(engine);
    const double eps = noise(engine);
    d.x.push_back(x);
    d.y.push_back(true_regression(x) + spec.noise_sigma * eps);
  }
  return d;
}

// JSON

inline Interval interval_from_json(const nlohmann::json& j, const char* key) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
    throw ConfigError(std::string(key) + " must be a two-element numeric array");
  return Interval{j[0].get<double>(), j[1].get<double>()};
}

inline ModelSpec model_from_json(const nlohmann::json& j) {
  ModelSpec spec;
  if (j.contains("noise_sigma")) spec.noise_sigma = j.at("noise_sigma").get<double>();
  if (j.contains("x_support")) spec.x_support = interval_from_json(j.at("x_support"), "x_support");
  if (j.contains("prior_a")) spec.prior_a = interval_from_json(j.at("prior_a"), "prior_a");
  if (j.contains("prior_b")) spec.prior_b = interval_from_json(j.at("prior_b"), "prior_b");
  if (j.contains("regression_kind")) {
    const auto kind = j.at("regression_kind").get<std::string>();
    if (kind != "piecewise_sigmoid") throw ConfigError("unknown regression_kind '" + kind + "'");
  }
  spec.validate();
  return spec;
}

inline nlohmann::json to_json(const ModelSpec& spec) {
  return {{"noise_sigma", spec.noise_sigma},
          {"x_support", {spec.x_support.lo, spec.x_support.hi}},
          {"prior_a", {spec.prior_a.lo, spec.prior_a.hi}},
          {"prior_b", {spec.prior_b.lo, spec.prior_b.hi}},
          {"regression_kind", "piecewise_sigmoid"}};
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
}

inline ModelSpec load_model_spec(const std::string& path) { return model_from_json(read_json_file(path)); }

}  // namespace nufe
