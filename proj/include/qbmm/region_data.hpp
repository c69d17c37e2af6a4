#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "qbmm/common.hpp"

namespace qbmm {

// One genomic region: per-sample counts at (possibly ragged) CpG positions
// plus sample-level covariates. Immutable after construction.
struct RegionData {
  std::vector<std::string> sample_ids;              // N
  std::vector<std::vector<double>> positions;       // per sample, strictly increasing
  std::vector<std::vector<int>> total_reads;        // X_ij >= 1
  std::vector<std::vector<int>> meth_reads;         // Y_ij in [0, X_ij]
  Eigen::MatrixXd covariates;                       // N x P
  std::vector<std::string> covariate_names;         // P

  int n_samples() const { return static_cast<int>(sample_ids.size()); }
  int n_covariates() const { return static_cast<int>(covariates.cols()); }

  int n_obs() const {
    int m = 0;
    for (const auto& p : positions) m += static_cast<int>(p.size());
    return m;
  }

  std::vector<double> distinct_positions() const {
    std::set<double> s;
    for (const auto& ps : positions) s.insert(ps.begin(), ps.end());
    return {s.begin(), s.end()};
  }

  void validate() const {
    const std::size_t n = sample_ids.size();
    if (positions.size() != n || total_reads.size() != n || meth_reads.size() != n)
      throw domain_error("region: ragged field lengths disagree with sample count");
    if (covariates.rows() != static_cast<Eigen::Index>(n))
      throw domain_error("region: covariate row count != number of samples");
    if (static_cast<std::size_t>(covariates.cols()) != covariate_names.size())
      throw domain_error("region: covariate name count != covariate columns");
    for (std::size_t i = 0; i < n; ++i) {
      const auto& pos = positions[i];
      if (pos.size() != total_reads[i].size() || pos.size() != meth_reads[i].size())
        throw domain_error("region: per-sample vectors disagree for " + sample_ids[i]);
      for (std::size_t j = 0; j < pos.size(); ++j) {
        if (j > 0 && pos[j] <= pos[j - 1])
          throw domain_error("region: positions not strictly increasing for " + sample_ids[i]);
        if (total_reads[i][j] < 1)
          throw domain_error("region: zero-depth observation retained for " + sample_ids[i]);
        if (meth_reads[i][j] < 0 || meth_reads[i][j] > total_reads[i][j])
          throw domain_error("region: methylated count outside [0, depth] for " + sample_ids[i]);
      }
    }
    if (!covariates.allFinite())
      throw domain_error("region: covariates contain non-finite entries");
  }
};

struct ErrorRates {
  double p0 = 0.0;  // false methylation call rate
  double p1 = 1.0;  // true positive call rate

  void validate() const {
    if (!(p0 >= 0.0 && p1 <= 1.0 && p0 < p1))
      throw domain_error("error rates require 0 <= p0 < p1 <= 1");
  }
  bool error_free() const { return p0 == 0.0 && p1 == 1.0; }
};

enum class RankRule { real_data, simulation };

struct ModelSpec {
  std::vector<int> basis_ranks;     // L_p, p = 0..P; empty -> derive from rank_rule
  RankRule rank_rule = RankRule::real_data;
  ErrorRates error_rates;
  double tol = 1e-6;
  int max_inner_iter = 200;
  int max_outer_iter = 200;
  int max_es_iter = 100;
  bool use_random_effect = true;    // false fits the multiplicative-only submodel

  void validate() const {
    for (int L : basis_ranks)
      if (L < 3) throw domain_error("basis rank below cubic minimum of 3");
    if (!(tol > 0)) throw domain_error("tolerance must be positive");
    error_rates.validate();
  }
};

struct LoadReport {
  std::string file;
  int rows_total = 0;
  int rows_kept = 0;
  std::vector<std::pair<int, std::string>> dropped_rows;     // (line number, reason)
  std::vector<std::string> dropped_samples;
};

namespace detail {

inline std::vector<std::string> split_tab(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  if (!out.empty() && !out.back().empty() && out.back().back() == '\r')
    out.back().pop_back();
  return out;
}

inline bool is_missing(const std::string& s) {
  return s.empty() || s == "NA" || s == "na" || s == "NaN" || s == "nan" || s == ".";
}

inline int parse_count(const std::string& s, int line_no, const char* what) {
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(s, &used);
  } catch (const std::exception&) {
    throw parse_error(std::string("line ") + std::to_string(line_no) + ": " + what +
                      " '" + s + "' is not an integer");
  }
  if (used != s.size())
    throw parse_error(std::string("line ") + std::to_string(line_no) + ": " + what +
                      " '" + s + "' is not an integer");
  if (v < 0)
    throw parse_error(std::string("line ") + std::to_string(line_no) + ": " + what +
                      " is negative");
  return static_cast<int>(v);
}

inline double parse_real(const std::string& s, int line_no, const char* what) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw parse_error(std::string("line ") + std::to_string(line_no) + ": " + what +
                      " '" + s + "' is not numeric");
  }
  if (used != s.size())
    throw parse_error(std::string("line ") + std::to_string(line_no) + ": " + what +
                      " '" + s + "' is not numeric");
  return v;
}

}  // namespace detail

// Loads one region from a TSV with header columns Meth_Counts, Total_Counts,
// Position, ID plus one column per requested covariate. Zero-depth rows are
// dropped (they carry no likelihood contribution); samples with any missing
// covariate are dropped whole. Malformed rows are hard errors.
inline RegionData load_region(std::istream& in, const std::vector<std::string>& covariate_names,
                              LoadReport* report = nullptr) {
  std::string line;
  if (!std::getline(in, line)) throw parse_error("empty input: missing header");
  const auto header = detail::split_tab(line);
  auto col_of = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw parse_error("missing required column '" + name + "'");
    return static_cast<int>(it - header.begin());
  };
  const int c_meth = col_of("Meth_Counts");
  const int c_total = col_of("Total_Counts");
  const int c_pos = col_of("Position");
  const int c_id = col_of("ID");
  std::vector<int> c_cov;
  for (const auto& name : covariate_names) c_cov.push_back(col_of(name));

  struct Row {
    double pos;
    int total, meth;
    int line_no;
  };
  std::map<std::string, std::vector<Row>> rows;                  // keyed by sample id
  std::map<std::string, std::vector<double>> covs;
  std::set<std::string> incomplete;
  LoadReport rep;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    ++rep.rows_total;
    const auto f = detail::split_tab(line);
    if (static_cast<int>(f.size()) < static_cast<int>(header.size()))
      throw parse_error("line " + std::to_string(line_no) + ": expected " +
                        std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
    const int total = detail::parse_count(f[c_total], line_no, "Total_Counts");
    const int meth = detail::parse_count(f[c_meth], line_no, "Meth_Counts");
    if (meth > total)
      throw parse_error("line " + std::to_string(line_no) + ": Meth_Counts " +
                        std::to_string(meth) + " exceeds Total_Counts " + std::to_string(total));
    const double pos = detail::parse_real(f[c_pos], line_no, "Position");
    const std::string& id = f[c_id];
    if (total == 0) {
      rep.dropped_rows.emplace_back(line_no, "zero depth");
      continue;
    }
    std::vector<double> z(covariate_names.size());
    bool missing = false;
    for (std::size_t k = 0; k < c_cov.size(); ++k) {
      if (detail::is_missing(f[c_cov[k]])) {
        missing = true;
        break;
      }
      z[k] = detail::parse_real(f[c_cov[k]], line_no, covariate_names[k].c_str());
    }
    if (missing) {
      incomplete.insert(id);
      rows[id].push_back({pos, total, meth, line_no});  // still recorded; dropped below
      continue;
    }
    auto it = covs.find(id);
    if (it == covs.end()) {
      covs.emplace(id, z);
    } else if (it->second != z) {
      throw parse_error("line " + std::to_string(line_no) + ": covariates for sample '" + id +
                        "' disagree with an earlier row");
    }
    rows[id].push_back({pos, total, meth, line_no});
  }

  RegionData region;
  for (auto& [id, rs] : rows) {
    if (incomplete.count(id)) {
      rep.dropped_samples.push_back(id);
      for (const auto& r : rs) rep.dropped_rows.emplace_back(r.line_no, "sample with missing covariate");
      continue;
    }
    std::sort(rs.begin(), rs.end(), [](const Row& a, const Row& b) { return a.pos < b.pos; });
    for (std::size_t j = 1; j < rs.size(); ++j)
      if (rs[j].pos == rs[j - 1].pos)
        throw parse_error("line " + std::to_string(rs[j].line_no) + ": duplicate position " +
                          std::to_string(rs[j].pos) + " for sample '" + id + "'");
    region.sample_ids.push_back(id);
    std::vector<double> pos;
    std::vector<int> tot, meth;
    for (const auto& r : rs) {
      pos.push_back(r.pos);
      tot.push_back(r.total);
      meth.push_back(r.meth);
      ++rep.rows_kept;
    }
    region.positions.push_back(std::move(pos));
    region.total_reads.push_back(std::move(tot));
    region.meth_reads.push_back(std::move(meth));
  }
  const int n = region.n_samples();
  region.covariate_names = covariate_names;
  region.covariates.resize(n, static_cast<int>(covariate_names.size()));
  for (int i = 0; i < n; ++i) {
    const auto& z = covs.at(region.sample_ids[i]);
    for (std::size_t k = 0; k < z.size(); ++k) region.covariates(i, static_cast<int>(k)) = z[k];
  }
  if (region.n_obs() == 0) throw parse_error("no observations survive filtering");
  region.validate();
  if (report) *report = rep;
  return region;
}

inline RegionData load_region(const std::string& path, const std::vector<std::string>& covariate_names,
                              LoadReport* report = nullptr) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open '" + path + "'");
  LoadReport rep;
  RegionData r = load_region(in, covariate_names, &rep);
  rep.file = path;
  if (report) *report = rep;
  return r;
}

inline void save_region(const RegionData& region, std::ostream& out) {
  out << "Meth_Counts\tTotal_Counts\tPosition\tID";
  for (const auto& name : region.covariate_names) out << '\t' << name;
  out << '\n';
  char buf[64];
  auto fmt = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  for (int i = 0; i < region.n_samples(); ++i) {
    for (std::size_t j = 0; j < region.positions[i].size(); ++j) {
      out << region.meth_reads[i][j] << '\t' << region.total_reads[i][j] << '\t'
          << fmt(region.positions[i][j]) << '\t' << region.sample_ids[i];
      for (int k = 0; k < region.n_covariates(); ++k) out << '\t' << fmt(region.covariates(i, k));
      out << '\n';
    }
  }
}

inline void save_region(const RegionData& region, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw parse_error("cannot write '" + path + "'");
  save_region(region, out);
}

// Basis ranks per smooth term. Real-data rule: number of CpGs over 10 for the
// intercept curve and over 20 for covariate curves; simulations use rank 5
// throughout. Floor of 3 keeps cubic bases well defined.
inline std::vector<int> default_basis_ranks(int n_cpg, int n_covariates, RankRule rule) {
  std::vector<int> ranks(static_cast<std::size_t>(n_covariates) + 1);
  if (rule == RankRule::simulation) {
    std::fill(ranks.begin(), ranks.end(), 5);
    return ranks;
  }
  ranks[0] = std::max(3, static_cast<int>(std::lround(n_cpg / 10.0)));
  for (std::size_t p = 1; p < ranks.size(); ++p)
    ranks[p] = std::max(3, static_cast<int>(std::lround(n_cpg / 20.0)));
  return ranks;
}

inline std::vector<int> default_basis_ranks(const RegionData& region, RankRule rule) {
  return default_basis_ranks(static_cast<int>(region.distinct_positions().size()),
                             region.n_covariates(), rule);
}

}  // namespace qbmm
