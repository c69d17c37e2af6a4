// Batch CLI for smoothed quasi-binomial mixed model fitting, regional
// testing, simulation and self-validation.

#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "qbmm/error_model.hpp"
#include "qbmm/inference.hpp"
#include "qbmm/results_io.hpp"
#include "qbmm/simulate.hpp"
#include "qbmm/validate.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitPartial = 2;
constexpr int kExitValidation = 3;

struct CommonOpts {
  std::vector<std::string> inputs;
  std::vector<std::string> covariates;
  double p0 = 0.0, p1 = 1.0;
  std::vector<int> ranks;
  std::string rank_rule = "real_data";
  double tol = 1e-6;
  unsigned threads = 0;
  std::uint64_t seed = 1;
  std::string out = "qbmm_out";
  int bootstrap = 0;
  double level = 0.95;
  bool no_random_effect = false;
  std::string covariate_filter;
};

unsigned resolve_threads(unsigned requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("QBMM_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return 1;
}

qbmm::ModelSpec make_spec(const CommonOpts& o) {
  qbmm::ModelSpec spec;
  spec.basis_ranks = o.ranks;
  spec.rank_rule =
      o.rank_rule == "simulation" ? qbmm::RankRule::simulation : qbmm::RankRule::real_data;
  spec.error_rates = {o.p0, o.p1};
  spec.tol = o.tol;
  spec.use_random_effect = !o.no_random_effect;
  spec.validate();
  return spec;
}

struct NamedRegion {
  std::string name;
  qbmm::RegionData region;
  qbmm::LoadReport report;
};

// One region per file, or several when a Region column is present.
std::vector<NamedRegion> load_inputs(const std::vector<std::string>& paths,
                                     const std::vector<std::string>& covariates) {
  std::vector<NamedRegion> out;
  for (const auto& path : paths) {
    std::ifstream in(path);
    if (!in) throw qbmm::parse_error("cannot open '" + path + "'");
    std::string header;
    if (!std::getline(in, header)) throw qbmm::parse_error(path + ": empty file");
    const auto cols = qbmm::detail::split_tab(header);
    const auto region_col = std::find(cols.begin(), cols.end(), "Region");
    const std::string stem = fs::path(path).stem().string();
    if (region_col == cols.end()) {
      std::ifstream whole(path);
      NamedRegion r;
      r.name = stem;
      r.region = qbmm::load_region(whole, covariates, &r.report);
      r.report.file = path;
      out.push_back(std::move(r));
      continue;
    }
    const std::size_t rc = region_col - cols.begin();
    std::map<std::string, std::string> chunks;   // region value -> TSV body
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto fields = qbmm::detail::split_tab(line);
      if (fields.size() <= rc) throw qbmm::parse_error(path + ": short row");
      chunks[fields[rc]] += line + "\n";
    }
    for (auto& [name, body] : chunks) {
      std::istringstream sub(header + "\n" + body);
      NamedRegion r;
      r.name = stem + ":" + name;
      r.region = qbmm::load_region(sub, covariates, &r.report);
      r.report.file = path;
      out.push_back(std::move(r));
    }
  }
  return out;
}

struct RegionOutcome {
  std::string name;
  bool ok = false;
  std::string message;
  json summary;
};

std::vector<double> curve_grid(const qbmm::RegionData& region) {
  return region.distinct_positions();
}

// Fits one region and writes its artifacts; exceptions bubble up as failures.
RegionOutcome run_region(const NamedRegion& item, const qbmm::ModelSpec& spec,
                         const CommonOpts& opts, bool with_tests) {
  RegionOutcome outcome;
  outcome.name = item.name;
  const qbmm::RegionData& region = item.region;
  qbmm::ModelSpec sp = spec;
  if (sp.basis_ranks.empty()) sp.basis_ranks = qbmm::default_basis_ranks(region, sp.rank_rule);
  if (static_cast<int>(sp.basis_ranks.size()) != region.n_covariates() + 1)
    throw qbmm::domain_error(item.name + ": rank count != covariate count + 1");
  const auto distinct = region.distinct_positions();
  std::vector<qbmm::SplineBasis> bases;
  for (int L : sp.basis_ranks) bases.push_back(qbmm::build_basis(distinct, L));
  const qbmm::DesignSystem design = qbmm::build_design(region, bases, sp.use_random_effect);
  const qbmm::PenaltyStructure penalty(design);
  const Eigen::VectorXd Y = qbmm::flatten_counts(region, region.meth_reads);

  const qbmm::FitResult fit = qbmm::fit_with_error(design, penalty, Y, sp.error_rates,
                                                   {sp.tol, sp.max_inner_iter, sp.max_outer_iter,
                                                    sp.max_es_iter});
  const Eigen::MatrixXd cov = qbmm::coef_covariance(fit, design, penalty, Y, sp.error_rates);

  json result = qbmm::to_json(fit, item.name, sp.error_rates);
  result["load_report"] = qbmm::to_json(item.report);

  std::vector<std::string> term_names{"intercept"};
  for (const auto& n : region.covariate_names) term_names.push_back(n);

  if (with_tests) {
    qbmm::RegionTest tests = qbmm::test_all_covariates(fit, cov, design.n_rows());
    if (opts.bootstrap > 0) {
      for (auto& t : tests.tests) {
        if (!opts.covariate_filter.empty() &&
            region.covariate_names.at(t.term - 1) != opts.covariate_filter)
          continue;
        t.p_bootstrap = qbmm::bootstrap_pvalue(region, sp, t.term, opts.bootstrap, opts.seed,
                                               resolve_threads(opts.threads))
                            .p_value;
      }
    }
    if (!opts.covariate_filter.empty()) {
      std::erase_if(tests.tests, [&](const qbmm::RegionTestEntry& t) {
        return region.covariate_names.at(t.term - 1) != opts.covariate_filter;
      });
    }
    result["tests"] = qbmm::to_json(tests, item.name, region.covariate_names)["tests"];
    json rows = json::array();
    for (const auto& t : tests.tests)
      rows.push_back({{"region", item.name},
                      {"covariate", region.covariate_names.at(t.term - 1)},
                      {"statistic", t.statistic},
                      {"df1", t.df1},
                      {"df2", t.df2},
                      {"p_value", t.p_value},
                      {"p_bootstrap", t.p_bootstrap}});
    outcome.summary["test_rows"] = rows;
  }

  const fs::path results_dir = fs::path(opts.out) / "results";
  const fs::path curves_dir = fs::path(opts.out) / "curves";
  fs::create_directories(results_dir);
  fs::create_directories(curves_dir);

  // atomic per-region writes keep partial runs resumable
  const fs::path json_tmp = results_dir / (item.name + ".json.tmp");
  qbmm::write_json(result, json_tmp.string());
  fs::rename(json_tmp, results_dir / (item.name + ".json"));

  const fs::path curve_tmp = curves_dir / (item.name + ".tsv.tmp");
  {
    std::ofstream cf(curve_tmp);
    qbmm::write_curves(cf, fit, design, cov, term_names, curve_grid(region), opts.level);
  }
  fs::rename(curve_tmp, curves_dir / (item.name + ".tsv"));

  outcome.ok = true;
  outcome.summary["region"] = item.name;
  outcome.summary["status"] = "ok";
  outcome.summary["phi_fletcher"] = fit.phi_fletcher;
  outcome.summary["phi_used"] = fit.phi();
  outcome.summary["sigma0_sq"] = fit.sigma0_sq_marginal();
  outcome.summary["lambda"] = std::vector<double>(fit.theta.lambda.begin(),
                                                  fit.theta.lambda.end());
  outcome.summary["edf_total"] = fit.edf_total;
  outcome.summary["outer_iterations"] = fit.outer_iterations;
  outcome.summary["es_iterations"] = fit.es_iterations;
  outcome.summary["degenerate"] = fit.degenerate;
  return outcome;
}

int run_batch(const CommonOpts& opts, bool with_tests) {
  const qbmm::ModelSpec spec = make_spec(opts);
  const auto items = load_inputs(opts.inputs, opts.covariates);
  if (items.empty()) {
    std::cerr << "no regions loaded\n";
    return kExitUsage;
  }
  std::vector<RegionOutcome> outcomes(items.size());
  qbmm::parallel_for(items.size(), resolve_threads(opts.threads), [&](std::size_t i) {
    try {
      outcomes[i] = run_region(items[i], spec, opts, with_tests);
    } catch (const std::exception& e) {
      outcomes[i].name = items[i].name;
      outcomes[i].ok = false;
      outcomes[i].message = e.what();
    }
  });

  fs::create_directories(opts.out);
  std::ofstream summary(fs::path(opts.out) / "summary.tsv");
  summary << "region\tstatus\tphi_fletcher\tphi_used\tsigma0_sq\tedf_total\touter_iterations\t"
             "es_iterations\tdegenerate\tmessage\n";
  std::ofstream tests_tsv;
  if (with_tests) {
    tests_tsv.open(fs::path(opts.out) / "tests.tsv");
    tests_tsv << "region\tcovariate\tstatistic\tdf1\tdf2\tp_value\tp_bootstrap\n";
  }
  int failures = 0;
  for (const auto& oc : outcomes) {
    if (!oc.ok) {
      ++failures;
      summary << oc.name << "\tfailed\tnan\tnan\tnan\tnan\t0\t0\tfalse\t" << oc.message << "\n";
      std::cerr << oc.name << ": " << oc.message << "\n";
      continue;
    }
    const json& s = oc.summary;
    summary << oc.name << "\tok\t" << s["phi_fletcher"].get<double>() << '\t'
            << s["phi_used"].get<double>() << '\t' << s["sigma0_sq"].get<double>() << '\t'
            << s["edf_total"].get<double>() << '\t' << s["outer_iterations"].get<int>() << '\t'
            << s["es_iterations"].get<int>() << '\t'
            << (s["degenerate"].get<bool>() ? "true" : "false") << "\t\n";
    if (with_tests && s.contains("test_rows")) {
      for (const auto& row : s["test_rows"]) {
        tests_tsv << row["region"].get<std::string>() << '\t'
                  << row["covariate"].get<std::string>() << '\t'
                  << row["statistic"].get<double>() << '\t' << row["df1"].get<double>() << '\t'
                  << row["df2"].get<double>() << '\t' << row["p_value"].get<double>() << '\t';
        if (row["p_bootstrap"].is_number() && !std::isnan(row["p_bootstrap"].get<double>()))
          tests_tsv << row["p_bootstrap"].get<double>();
        else
          tests_tsv << "NA";
        tests_tsv << '\n';
      }
    }
  }
  if (failures == static_cast<int>(outcomes.size())) return kExitPartial;
  return failures > 0 ? kExitPartial : kExitOk;
}

int run_simulate(const CommonOpts& opts, qbmm::SimScenario sc, int replicates) {
  fs::create_directories(opts.out);
  json manifest;
  manifest["schema_version"] = qbmm::kSchemaVersion;
  manifest["scenario"] = sc.scenario;
  manifest["setting"] = sc.setting;
  manifest["n_samples"] = sc.n_samples;
  manifest["n_sites"] = sc.n_sites;
  manifest["phi"] = sc.phi;
  manifest["sigma0_sq"] = sc.sigma0_sq;
  manifest["p0"] = sc.rates.p0;
  manifest["p1"] = sc.rates.p1;
  manifest["seed"] = opts.seed;
  manifest["replicates"] = replicates;
  manifest["files"] = json::array();
  for (int r = 0; r < replicates; ++r) {
    sc.seed = qbmm::mix_seed(opts.seed, r);
    const qbmm::SimulatedRegion sim = qbmm::simulate_region(sc);
    char name[64];
    std::snprintf(name, sizeof(name), "sim_s%d_rep%03d.tsv", sc.scenario, r);
    qbmm::save_region(sim.region, (fs::path(opts.out) / name).string());
    manifest["files"].push_back(name);
  }
  qbmm::write_json(manifest, (fs::path(opts.out) / "manifest.json").string());
  std::cout << "wrote " << replicates << " replicate(s) to " << opts.out << "\n";
  return kExitOk;
}

int run_validate(const CommonOpts& opts, bool quick) {
  qbmm::ValidationOptions vopts;
  vopts.seed = opts.seed;
  vopts.quick = quick;
  vopts.threads = resolve_threads(opts.threads);
  const auto checks = qbmm::run_validation_checks(vopts);
  json report;
  report["schema_version"] = qbmm::kSchemaVersion;
  report["seed"] = opts.seed;
  report["checks"] = json::array();
  bool all_pass = true;
  for (const auto& c : checks) {
    report["checks"].push_back(
        {{"name", c.name}, {"pass", c.pass}, {"value", c.value}, {"detail", c.detail}});
    all_pass = all_pass && c.pass;
    std::cout << (c.pass ? "[pass] " : "[FAIL] ") << c.name << " = " << c.value << "  ("
              << c.detail << ")\n";
  }
  fs::create_directories(opts.out);
  qbmm::write_json(report, (fs::path(opts.out) / "validate_report.json").string());
  return all_pass ? kExitOk : kExitValidation;
}

int run_bootstrap(const CommonOpts& opts) {
  const qbmm::ModelSpec spec = make_spec(opts);
  const auto items = load_inputs(opts.inputs, opts.covariates);
  if (items.size() != 1) {
    std::cerr << "bootstrap expects exactly one region\n";
    return kExitUsage;
  }
  const auto& item = items.front();
  const auto it = std::find(item.region.covariate_names.begin(),
                            item.region.covariate_names.end(), opts.covariate_filter);
  if (it == item.region.covariate_names.end()) {
    std::cerr << "unknown covariate '" << opts.covariate_filter << "'\n";
    return kExitUsage;
  }
  const int term = 1 + static_cast<int>(it - item.region.covariate_names.begin());
  const qbmm::BootstrapResult res = qbmm::bootstrap_pvalue(
      item.region, spec, term, std::max(99, opts.bootstrap), opts.seed,
      resolve_threads(opts.threads));
  json j;
  j["region"] = item.name;
  j["covariate"] = opts.covariate_filter;
  j["p_value"] = res.p_value;
  j["observed_statistic"] = res.observed_statistic;
  j["replicates_used"] = res.replicates_used;
  j["replicates_failed"] = res.replicates_failed;
  std::cout << j.dump(2) << "\n";
  fs::create_directories(opts.out);
  qbmm::write_json(j, (fs::path(opts.out) / ("bootstrap_" + item.name + ".json")).string());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"smoothed quasi-binomial mixed models for regional count data"};
  app.require_subcommand(1);
  CommonOpts opts;

  auto add_common = [&](CLI::App* cmd, bool needs_input) {
    if (needs_input)
      cmd->add_option("--input", opts.inputs, "input TSV file(s)")->required();
    cmd->add_option("--covariates", opts.covariates, "covariate column names");
    cmd->add_option("--p0", opts.p0, "false methylation call rate");
    cmd->add_option("--p1", opts.p1, "true positive call rate");
    cmd->add_option("--ranks", opts.ranks, "explicit basis ranks (intercept first)");
    cmd->add_option("--rank-rule", opts.rank_rule, "real_data or simulation")
        ->check(CLI::IsMember({"real_data", "simulation"}));
    cmd->add_option("--tol", opts.tol, "convergence tolerance");
    cmd->add_option("--threads", opts.threads, "worker threads (QBMM_THREADS fallback)");
    cmd->add_option("--seed", opts.seed, "base RNG seed");
    cmd->add_option("--out", opts.out, "output directory");
    cmd->add_option("--level", opts.level, "confidence level for bands");
    cmd->add_flag("--no-random-effect", opts.no_random_effect,
                  "fit the multiplicative-dispersion-only submodel");
  };

  CLI::App* cmd_fit = app.add_subcommand("fit", "fit regions and write curves");
  add_common(cmd_fit, true);

  CLI::App* cmd_test = app.add_subcommand("test", "fit regions and run regional F tests");
  add_common(cmd_test, true);
  cmd_test->add_option("--bootstrap", opts.bootstrap, "bootstrap replicates for empirical p");
  cmd_test->add_option("--covariate", opts.covariate_filter, "restrict tests to one covariate");

  CLI::App* cmd_sim = app.add_subcommand("simulate", "generate datasets from the paper design");
  qbmm::SimScenario sc;
  int replicates = 1;
  cmd_sim->add_option("--scenario", sc.scenario, "1 or 2");
  cmd_sim->add_option("--setting", sc.setting, "scenario 2 setting index (0..14)");
  cmd_sim->add_option("--n-samples", sc.n_samples, "samples per region");
  cmd_sim->add_option("--sites", sc.n_sites, "CpG sites per region");
  cmd_sim->add_option("--phi", sc.phi, "multiplicative dispersion");
  cmd_sim->add_option("--sigma0-sq", sc.sigma0_sq, "RE variance");
  cmd_sim->add_option("--depth", sc.depth_profile, "per-site depth profile");
  cmd_sim->add_option("--replicates", replicates, "number of datasets");
  cmd_sim->add_option("--p0", opts.p0, "false methylation call rate");
  cmd_sim->add_option("--p1", opts.p1, "true positive call rate");
  cmd_sim->add_option("--seed", opts.seed, "base RNG seed");
  cmd_sim->add_option("--out", opts.out, "output directory");

  CLI::App* cmd_validate = app.add_subcommand("validate", "run numerical self-checks");
  bool quick = false;
  cmd_validate->add_option("--seed", opts.seed, "base RNG seed");
  cmd_validate->add_option("--threads", opts.threads, "worker threads");
  cmd_validate->add_option("--out", opts.out, "output directory");
  cmd_validate->add_flag("--quick", quick, "smaller Monte Carlo sizes");

  CLI::App* cmd_boot = app.add_subcommand("bootstrap", "parametric bootstrap p-value");
  add_common(cmd_boot, true);
  cmd_boot->add_option("--covariate", opts.covariate_filter, "covariate to test")->required();
  cmd_boot->add_option("--bootstrap", opts.bootstrap, "bootstrap replicates")->default_val(199);

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_fit->parsed()) return run_batch(opts, false);
    if (cmd_test->parsed()) return run_batch(opts, true);
    if (cmd_sim->parsed()) {
      sc.rates = {opts.p0, opts.p1};
      return run_simulate(opts, sc, replicates);
    }
    if (cmd_validate->parsed()) return run_validate(opts, quick);
    if (cmd_boot->parsed()) return run_bootstrap(opts);
  } catch (const qbmm::parse_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitPartial;
  }
  return kExitUsage;
}
