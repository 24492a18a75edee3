// Command-line driver: optima, theory, experiment, clt.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nufe/nufe.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::string out = "out";
  std::string cache;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::optional<double> beta;
  std::optional<std::size_t> replications;
  std::string sample_sizes;
  std::vector<double> prior_a;
  std::vector<double> prior_b;
  std::optional<std::size_t> clt_n;
  bool no_control_variate = false;
};

struct RunConfig {
  nufe::ModelSpec spec;
  std::vector<double> lambda;
  std::vector<int> multiplicity;
  nufe::ExperimentPlan plan;
  nufe::GridConfig grid;
  nufe::EpsilonSchedule schedule;
  std::size_t clt_n = 500;
  std::size_t clt_replications = 5000;
  std::string cache_dir;

  /// Identifies everything the cached optima depend on.
  std::string model_hash() const {
    json j = nufe::to_json(spec);
    j["lambda"] = lambda;
    j["multiplicity"] = multiplicity;
    return nufe::hex64(nufe::fnv1a(j.dump()));
  }
};

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(item, &pos);
    if (pos != item.size()) throw nufe::ConfigError("bad sample size '" + item + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

RunConfig resolve(const Options& o) {
  RunConfig rc;
  json file = json::object();
  if (!o.config.empty()) file = nufe::read_json_file(o.config);
  if (!file.is_object()) throw nufe::ConfigError("config must be a JSON object");

  json model = file;
  if (!o.prior_a.empty()) model["prior_a"] = o.prior_a;
  if (!o.prior_b.empty()) model["prior_b"] = o.prior_b;
  try {
    rc.spec = nufe::model_from_json(model);
    rc.lambda = file.value("lambda", std::vector<double>{});
    rc.multiplicity = file.value("multiplicity", std::vector<int>{});
    if (file.contains("plan")) {
      const auto& p = file.at("plan");
      rc.plan.sample_sizes = p.value("sample_sizes", rc.plan.sample_sizes);
      rc.plan.replications = p.value("replications", rc.plan.replications);
      rc.plan.master_seed = p.value("master_seed", rc.plan.master_seed);
      rc.plan.beta = p.value("beta", rc.plan.beta);
      rc.plan.threads = p.value("threads", rc.plan.threads);
      rc.plan.control_variate = p.value("control_variate", rc.plan.control_variate);
    }
    if (file.contains("grid")) {
      const auto& g = file.at("grid");
      rc.grid.coarse_resolution = g.value("coarse_resolution", rc.grid.coarse_resolution);
      rc.grid.patch_radius = g.value("patch_radius", rc.grid.patch_radius);
      rc.grid.patch_resolution = g.value("patch_resolution", rc.grid.patch_resolution);
    }
    rc.schedule.exponent = file.value("epsilon_exponent", rc.schedule.exponent);
    if (file.contains("clt")) {
      rc.clt_n = file.at("clt").value("n", rc.clt_n);
      rc.clt_replications = file.at("clt").value("replications", rc.clt_replications);
    }
  } catch (const json::exception& e) {
    throw nufe::ConfigError(std::string("config: ") + e.what());
  }

  if (o.seed) rc.plan.master_seed = *o.seed;
  if (o.threads) rc.plan.threads = *o.threads;
  if (o.beta) rc.plan.beta = *o.beta;
  if (o.replications) {
    rc.plan.replications = *o.replications;
    rc.clt_replications = *o.replications;
  }
  if (!o.sample_sizes.empty()) rc.plan.sample_sizes = parse_sizes(o.sample_sizes);
  if (o.clt_n) rc.clt_n = *o.clt_n;
  if (o.no_control_variate) rc.plan.control_variate = false;
  rc.plan.output_dir = o.out;
  rc.cache_dir = o.cache.empty() ? (fs::path(o.out) / "cache").string() : o.cache;
  if (!(rc.schedule.exponent > 0.0 && rc.schedule.exponent < 0.5))
    throw nufe::ConfigError("epsilon_exponent must lie in (0, 0.5)");
  return rc;
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

json with_provenance(json j, const RunConfig& rc) {
  j["config_hash"] = rc.model_hash();
  j["master_seed"] = rc.plan.master_seed;
  return j;
}

nufe::OptimumSet load_or_find_optima(const RunConfig& rc) {
  const fs::path cached = fs::path(rc.cache_dir) / ("optima-" + rc.model_hash() + ".json");
  if (fs::exists(cached)) {
    std::cerr << "optima: using cache " << cached.string() << '\n';
    return nufe::optimum_set_from_json(nufe::read_json_file(cached.string()));
  }
  nufe::OptimaSearchOptions search;
  auto opt = nufe::find_optima(rc.spec, search);
  if (!rc.lambda.empty()) {
    if (rc.lambda.size() != opt.size()) throw nufe::ConfigError("lambda override needs one value per optimum");
    opt.lambda = rc.lambda;
  }
  if (!rc.multiplicity.empty()) {
    if (rc.multiplicity.size() != opt.size()) throw nufe::ConfigError("multiplicity override needs one value per optimum");
    opt.multiplicity = rc.multiplicity;
  }
  opt.validate();
  write_json(cached, nufe::to_json(opt));
  return opt;
}

nufe::AsymptoticCoefficients coefficients_for(const RunConfig& rc, const nufe::OptimumSet& opt) {
  const auto V = nufe::covariance(opt, rc.spec);
  nufe::CoefficientOptions copt;
  copt.seed = rc.plan.master_seed;
  copt.threads = rc.plan.threads;
  return nufe::compute_coefficients(opt, V, rc.plan.beta, copt);
}

int cmd_optima(const RunConfig& rc) {
  const auto opt = load_or_find_optima(rc);
  write_json(fs::path(rc.plan.output_dir) / "optima.json", with_provenance(nufe::to_json(opt), rc));
  for (std::size_t i = 0; i < opt.size(); ++i)
    std::cout << "w0" << i + 1 << " = (" << opt.optima[i].a << ", " << opt.optima[i].b << ")\n";
  std::cout << "L0 = " << opt.L0 << '\n';
  return 0;
}

int cmd_theory(const RunConfig& rc) {
  rc.plan.validate();
  const auto opt = load_or_find_optima(rc);
  const auto c = coefficients_for(rc, opt);
  write_json(fs::path(rc.plan.output_dir) / "coefficients.json", with_provenance(nufe::to_json(c), rc));
  std::ofstream csv(fs::path(rc.plan.output_dir) / "theory.csv");
  csv << "n,theory_F_minus_nL0,theory_G\n";
  for (std::size_t n : rc.plan.sample_sizes) {
    const double G = c.beta == 1.0 ? nufe::predicted_gen_loss(static_cast<double>(n), c)
                                   : std::numeric_limits<double>::quiet_NaN();
    csv << n << ',' << nufe::csv_number(nufe::predicted_free_energy_excess(static_cast<double>(n), c)) << ','
        << nufe::csv_number(G) << '\n';
  }
  if (!csv) throw std::runtime_error("cannot write theory.csv");
  std::cout << "mu = " << c.mu << ", lambda_hat = " << c.lambda_hat << ", m_hat = " << c.m_hat << '\n';
  return 0;
}

int cmd_experiment(const RunConfig& rc) {
  rc.plan.validate();
  const auto opt = load_or_find_optima(rc);
  const auto c = coefficients_for(rc, opt);
  const auto grid = nufe::build_grid(opt, rc.spec, rc.grid);
  const auto rep = nufe::run_experiment(rc.plan, rc.spec, opt, grid, c, rc.schedule);
  // run_experiment writes fit.json; add the model hash used by the cache
  write_json(fs::path(rc.plan.output_dir) / "fit.json", with_provenance(nufe::to_json(rep), rc));
  nufe::write_summary_csv(std::cout, rep.rows);
  if (rep.fit)
    std::cout << "c_sqrt = " << rep.fit->at("sqrt_n") << " +- " << rep.fit->se_of("sqrt_n") << " (theory " << -c.mu
              << ")\n";
  else
    std::cout << "no expansion fit: " << rep.fit_error << '\n';
  return 0;
}

int cmd_clt(const RunConfig& rc) {
  if (rc.clt_replications < 2) throw nufe::ConfigError("replications must be >= 2");
  const auto opt = load_or_find_optima(rc);
  const auto V = nufe::covariance(opt, rc.spec);
  const auto s = nufe::clt_diagnostic(rc.clt_n, rc.clt_replications, rc.plan.master_seed, opt, rc.spec, V,
                                      rc.plan.threads);
  write_json(fs::path(rc.plan.output_dir) / "clt.json", with_provenance(nufe::to_json(s), rc));
  std::cout << "E[max] = " << s.max_mean << " +- " << s.max_se << " (mu = " << s.mu << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Free energy and generalization loss with non-unique optimal distributions"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "model/plan JSON file")->check(CLI::ExistingFile);
  app.add_option("--out", o.out, "output directory");
  app.add_option("--cache", o.cache, "cache directory (default OUT/cache)");
  app.add_option("--seed", o.seed, "master seed");
  app.add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--beta", o.beta, "inverse temperature")->check(CLI::PositiveNumber);
  app.add_option("--replications", o.replications, "replications per sample size");
  app.add_option("--sample-sizes", o.sample_sizes, "comma-separated sample sizes");
  app.add_option("--prior-a", o.prior_a, "prior box for a: LO HI")->expected(2);
  app.add_option("--prior-b", o.prior_b, "prior box for b: LO HI")->expected(2);
  app.add_flag("--no-control-variate", o.no_control_variate, "average raw free energies");

  auto* optima = app.add_subcommand("optima", "locate the optimal parameters");
  auto* theory = app.add_subcommand("theory", "asymptotic coefficients and predicted curves");
  auto* experiment = app.add_subcommand("experiment", "Monte Carlo sweep over sample sizes");
  auto* clt = app.add_subcommand("clt", "CLT diagnostic of the scaled log likelihoods");
  clt->add_option("--n", o.clt_n, "sample size");

  CLI11_PARSE(app, argc, argv);
  try {
    const RunConfig rc = resolve(o);
    if (optima->parsed()) return cmd_optima(rc);
    if (theory->parsed()) return cmd_theory(rc);
    if (experiment->parsed()) return cmd_experiment(rc);
    if (clt->parsed()) return cmd_clt(rc);
  } catch (const nufe::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
