#pragma once

#include <fstream>
#include <json.hpp>
#include <string>

#include "qbmm/fit.hpp"
#include "qbmm/inference.hpp"

namespace qbmm {

inline constexpr int kSchemaVersion = 1;

inline nlohmann::json to_json(const LoadReport& rep) {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["file"] = rep.file;
  j["rows_total"] = rep.rows_total;
  j["rows_kept"] = rep.rows_kept;
  j["dropped_rows"] = nlohmann::json::array();
  for (const auto& [line, reason] : rep.dropped_rows)
    j["dropped_rows"].push_back({{"line", line}, {"reason", reason}});
  j["dropped_samples"] = rep.dropped_samples;
  return j;
}

inline nlohmann::json to_json(const FitResult& fit, const std::string& region_name,
                              const ErrorRates& rates) {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["region"] = region_name;
  j["converged"] = fit.converged;
  j["degenerate"] = fit.degenerate;
  j["outer_iterations"] = fit.outer_iterations;
  j["inner_iterations"] = fit.inner_iterations;
  j["es_iterations"] = fit.es_iterations;
  j["error_rates"] = {{"p0", rates.p0}, {"p1", rates.p1}};
  j["phi"] = {{"fletcher", fit.phi_fletcher},
              {"pearson", fit.phi_pearson},
              {"likelihood", fit.phi_lik},
              {"floored", fit.phi_floored},
              {"used", fit.phi()}};
  if (!std::isnan(fit.phi_plugin)) {
    j["phi"]["plugin"] = fit.phi_plugin;
    j["phi"]["observed_scale"] = fit.phi_y;
  }
  j["theta"]["lambda"] = std::vector<double>(fit.theta.lambda.begin(), fit.theta.lambda.end());
  j["theta"]["sigma0_sq_effective"] = fit.include_re ? fit.theta.sigma0_sq : 0.0;
  j["theta"]["sigma0_sq"] = fit.sigma0_sq_marginal();
  j["edf"] = {{"total", fit.edf_total},
              {"per_term", std::vector<double>(fit.edf_per_term.begin(), fit.edf_per_term.end())}};
  auto& coefs = j["coefficients"];
  coefs["alpha"] = nlohmann::json::array();
  for (std::size_t p = 0; p < fit.blocks.size(); ++p) {
    const Eigen::VectorXd a = fit.alpha(static_cast<int>(p));
    coefs["alpha"].push_back(std::vector<double>(a.begin(), a.end()));
  }
  if (fit.include_re) {
    const Eigen::VectorXd u = fit.u();
    coefs["u"] = std::vector<double>(u.begin(), u.end());
  }
  return j;
}

inline nlohmann::json to_json(const RegionTest& tests, const std::string& region_name,
                              const std::vector<std::string>& covariate_names) {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["region"] = region_name;
  j["n_obs"] = tests.n_obs;
  j["edf_total"] = tests.edf_total;
  j["tests"] = nlohmann::json::array();
  for (const auto& t : tests.tests) {
    nlohmann::json e;
    e["covariate"] = covariate_names.at(t.term - 1);
    e["statistic"] = t.statistic;
    e["df1"] = t.df1;
    e["df2"] = t.df2;
    e["p_value"] = t.p_value;
    e["effective_rank"] = t.effective_rank;
    if (!std::isnan(t.p_bootstrap)) e["p_bootstrap"] = t.p_bootstrap;
    j["tests"].push_back(e);
  }
  return j;
}

// Curve grid TSV: one block of rows per smooth term.
inline void write_curves(std::ostream& out, const FitResult& fit, const DesignSystem& design,
                         const Eigen::MatrixXd& covariance,
                         const std::vector<std::string>& term_names,
                         const std::vector<double>& grid, double level) {
  out << "term\tposition\testimate\tse\tlower\tupper\n";
  for (int p = 0; p < static_cast<int>(fit.blocks.size()); ++p) {
    const CurveBand band = pointwise_ci(fit, covariance, design, p, grid, level);
    for (std::size_t i = 0; i < band.position.size(); ++i)
      out << term_names.at(p) << '\t' << band.position[i] << '\t' << band.estimate[i] << '\t'
          << band.se[i] << '\t' << band.lower[i] << '\t' << band.upper[i] << '\n';
  }
}

inline void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw parse_error("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

}  // namespace qbmm
