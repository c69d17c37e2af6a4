#include <catch2/catch_amalgamated.hpp>
#include <sstream>

#include "qbmm/region_data.hpp"
#include "test_util.hpp"

using namespace qbmm;

TEST_CASE("single row maps directly onto fields", "[region_data]") {
  std::istringstream in("Meth_Counts\tTotal_Counts\tPosition\tID\tZ1\n5\t10\t101\ts1\t1\n");
  const RegionData r = load_region(in, {"Z1"});
  REQUIRE(r.n_samples() == 1);
  REQUIRE(r.n_obs() == 1);
  CHECK(r.meth_reads[0][0] == 5);
  CHECK(r.total_reads[0][0] == 10);
  CHECK(r.positions[0][0] == 101.0);
  CHECK(r.covariates(0, 0) == 1.0);
}

TEST_CASE("zero-depth rows are dropped and reported", "[region_data]") {
  std::istringstream in(
      "Meth_Counts\tTotal_Counts\tPosition\tID\tZ1\n"
      "5\t10\t101\ts1\t1\n"
      "0\t0\t205\ts1\t1\n");
  LoadReport rep;
  const RegionData r = load_region(in, {"Z1"}, &rep);
  CHECK(r.n_obs() == 1);
  REQUIRE(rep.dropped_rows.size() == 1);
  CHECK(rep.dropped_rows[0].first == 3);
  CHECK(rep.dropped_rows[0].second == "zero depth");
  CHECK(rep.rows_total == 2);
  CHECK(rep.rows_kept == 1);
}

TEST_CASE("count exceeding depth is a parse error naming the line", "[region_data]") {
  std::istringstream in(
      "Meth_Counts\tTotal_Counts\tPosition\tID\tZ1\n"
      "5\t10\t101\ts1\t1\n"
      "11\t10\t205\ts1\t1\n");
  CHECK_THROWS_WITH(load_region(in, {"Z1"}), Catch::Matchers::ContainsSubstring("line 3"));
}

TEST_CASE("non-integer counts and negative values are parse errors", "[region_data]") {
  std::istringstream bad_int(
      "Meth_Counts\tTotal_Counts\tPosition\tID\tZ1\n5.5\t10\t101\ts1\t1\n");
  CHECK_THROWS_AS(load_region(bad_int, {"Z1"}), parse_error);
  std::istringstream neg(
      "Meth_Counts\tTotal_Counts\tPosition\tID\tZ1\n-2\t10\t101\ts1\t1\n");
  CHECK_THROWS_AS(load_region(neg, {"Z1"}), parse_error);
}

TEST_CASE("samples with missing covariates are dropped whole", "[region_data]") {
  std::istringstream in(
      "Meth_Counts\tTotal_Counts\tPosition\tID\tZ1\n"
      "5\t10\t101\ts1\t1\n"
      "2\t8\t101\ts2\tNA\n"
      "3\t9\t205\ts2\t0\n");
  LoadReport rep;
  const RegionData r = load_region(in, {"Z1"}, &rep);
  CHECK(r.n_samples() == 1);
  CHECK(r.sample_ids[0] == "s1");
  REQUIRE(rep.dropped_samples.size() == 1);
  CHECK(rep.dropped_samples[0] == "s2");
}

TEST_CASE("empty region after filtering is an error", "[region_data]") {
  std::istringstream in("Meth_Counts\tTotal_Counts\tPosition\tID\tZ1\n0\t0\t101\ts1\t1\n");
  CHECK_THROWS_AS(load_region(in, {"Z1"}), parse_error);
}

TEST_CASE("round trip through the TSV format is exact", "[region_data]") {
  const RegionData r = test::toy_region(5, 7);
  std::ostringstream out;
  save_region(r, out);
  std::istringstream in(out.str());
  const RegionData r2 = load_region(in, r.covariate_names);
  REQUIRE(r2.n_samples() == r.n_samples());
  CHECK(r2.sample_ids == r.sample_ids);
  CHECK(r2.positions == r.positions);
  CHECK(r2.total_reads == r.total_reads);
  CHECK(r2.meth_reads == r.meth_reads);
  CHECK(r2.covariates == r.covariates);
}

TEST_CASE("rows are never fabricated", "[region_data]") {
  std::istringstream in(test::toy_tsv());
  LoadReport rep;
  const RegionData r = load_region(in, {"Z1"}, &rep);
  CHECK(r.n_obs() == rep.rows_kept);
  CHECK(r.n_obs() + static_cast<int>(rep.dropped_rows.size()) == rep.rows_total);
}

TEST_CASE("default ranks follow the data-size rules", "[region_data]") {
  SECTION("simulation rule pins rank 5") {
    const auto ranks = default_basis_ranks(123, 3, RankRule::simulation);
    CHECK(ranks == std::vector<int>{5, 5, 5, 5});
  }
  SECTION("real-data rule divides by 10 and 20") {
    const auto ranks = default_basis_ranks(100, 2, RankRule::real_data);
    CHECK(ranks == std::vector<int>{10, 5, 5});
  }
  SECTION("cubic floor of 3") {
    const auto ranks = default_basis_ranks(20, 1, RankRule::real_data);
    CHECK(ranks == std::vector<int>{3, 3});
  }
}

TEST_CASE("out-of-order rows are sorted by position within sample", "[region_data]") {
  std::istringstream in(
      "Meth_Counts\tTotal_Counts\tPosition\tID\tZ1\n"
      "3\t9\t205\ts1\t1\n"
      "5\t10\t101\ts1\t1\n");
  const RegionData r = load_region(in, {"Z1"});
  CHECK(r.positions[0] == std::vector<double>{101.0, 205.0});
  CHECK(r.meth_reads[0] == std::vector<int>{5, 3});
}
