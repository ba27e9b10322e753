#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "qlmm/qlmm.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("qlmm_capi_" + name)).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// Two clusters of two rows; X columns are orthogonal, no random effects.
qlmm_dataset* orthogonal_dataset() {
  const size_t sizes[] = {2, 2};
  const double y[] = {3, 1, 1, -1};
  const double X[] = {1, 0, 0, 1, 1, 0, 0, 1};
  const double Z[] = {0};
  qlmm_dataset* d = nullptr;
  REQUIRE(qlmm_dataset_create(2, sizes, 2, 0, y, X, Z, &d) == QLMM_OK);
  return d;
}

qlmm_dataset* simulated(uint64_t seed) {
  qlmm_scenario s;
  qlmm_scenario_init(&s);
  s.seed = seed;
  qlmm_dataset* d = nullptr;
  REQUIRE(qlmm_simulate_dataset(&s, &d) == QLMM_OK);
  return d;
}

}  // namespace

TEST_CASE("status reporting") {
  CHECK(std::string(qlmm_version()).size() > 0);
  CHECK(std::string(qlmm_status_name(QLMM_NOT_IDENTIFIABLE)) == "not identifiable");
  qlmm_dims dims;
  CHECK(qlmm_dataset_dims(nullptr, &dims) == QLMM_INVALID_ARGUMENT);
  CHECK(std::string(qlmm_last_error()).size() > 0);
  qlmm_dataset_free(nullptr);
  qlmm_fit_free(nullptr);
  qlmm_string_free(nullptr);
}

TEST_CASE("dataset handles") {
  qlmm_dataset* d = orthogonal_dataset();
  qlmm_dims dims;
  REQUIRE(qlmm_dataset_dims(d, &dims) == QLMM_OK);
  CHECK(dims.n == 2);
  CHECK(dims.p == 2);
  CHECK(dims.q == 0);
  CHECK(dims.N == 4);
  CHECK(dims.max_m == 2);
  size_t sizes[2];
  CHECK(qlmm_dataset_cluster_sizes(d, sizes, 2) == QLMM_OK);
  CHECK(sizes[1] == 2);
  CHECK(qlmm_dataset_cluster_sizes(d, sizes, 1) == QLMM_DIMENSION_MISMATCH);
  double T = 0.0;
  CHECK(qlmm_effective_sample_size(d, 5.0, &T) == QLMM_OK);
  CHECK(T == doctest::Approx(4.0));
  size_t violations = 99;
  char* report = nullptr;
  CHECK(qlmm_dataset_validate(d, &violations, &report) == QLMM_OK);
  CHECK(violations == 0);
  qlmm_string_free(report);
  qlmm_dataset* with = nullptr;
  REQUIRE(qlmm_dataset_add_intercept(d, &with) == QLMM_OK);
  REQUIRE(qlmm_dataset_dims(with, &dims) == QLMM_OK);
  CHECK(dims.p == 3);
  const std::string path = temp_path("data.csv");
  CHECK(qlmm_dataset_write_csv(d, path.c_str()) == QLMM_OK);
  const char* fixed[] = {"x1", "x2"};
  qlmm_dataset* back = nullptr;
  CHECK(qlmm_dataset_load_csv(path.c_str(), "cluster", "y", fixed, 2, nullptr, 0, nullptr, &back) ==
        QLMM_OK);
  REQUIRE(qlmm_dataset_dims(back, &dims) == QLMM_OK);
  CHECK(dims.N == 4);
  const char* bad[] = {"x9"};
  qlmm_dataset* none = nullptr;
  CHECK(qlmm_dataset_load_csv(path.c_str(), "cluster", "y", bad, 1, nullptr, 0, nullptr, &none) ==
        QLMM_PARSE);
  CHECK(none == nullptr);
  CHECK(std::string(qlmm_last_error()).find("x9") != std::string::npos);
  CHECK(qlmm_dataset_load_csv(temp_path("absent.csv").c_str(), "cluster", "y", fixed, 2, nullptr, 0,
                              nullptr, &none) == QLMM_IO);
  qlmm_dataset_free(back);
  qlmm_dataset_free(with);
  qlmm_dataset_free(d);
}

TEST_CASE("lasso through the C interface matches soft thresholding") {
  qlmm_dataset* d = orthogonal_dataset();
  qlmm_lasso_options o;
  qlmm_lasso_options_init(&o);
  o.lambda = 0.5;
  o.standardize = 0;
  o.tolerance = 1e-12;
  qlmm_fit* fit = nullptr;
  REQUIRE(qlmm_fit_lasso(d, 0.0, &o, &fit) == QLMM_OK);
  double beta[2];
  REQUIRE(qlmm_fit_beta(fit, beta, 2) == QLMM_OK);
  // b_j = S(x_j'y, lambda T) / x_j'x_j with x_1'y = 4, x_2'y = 0, T = 4
  CHECK(beta[0] == doctest::Approx(1.0));
  CHECK(beta[1] == 0.0);
  qlmm_fit_summary s;
  REQUIRE(qlmm_fit_summary_get(fit, &s) == QLMM_OK);
  CHECK(s.lambda == 0.5);
  CHECK(s.converged == 1);
  CHECK(std::isnan(s.sigma_init));
  CHECK(qlmm_fit_beta(fit, beta, 1) == QLMM_DIMENSION_MISMATCH);
  const std::string path = temp_path("fit.json");
  CHECK(qlmm_fit_write(fit, path.c_str(), "json", "{\"run\":1}") == QLMM_OK);
  CHECK(slurp(path).find("\"run\"") != std::string::npos);
  CHECK(qlmm_fit_write(fit, path.c_str(), "xml", nullptr) == QLMM_INVALID_ARGUMENT);
  CHECK(qlmm_fit_write(fit, path.c_str(), "json", "{broken") == QLMM_PARSE);
  qlmm_fit_free(fit);
  o.lambda = -1.0;
  const double w[] = {1.0};
  o.weights = w;
  o.n_weights = 1;
  CHECK(qlmm_fit_lasso(d, 0.0, &o, &fit) == QLMM_DIMENSION_MISMATCH);
  qlmm_dataset_free(d);
}

TEST_CASE("BH selection") {
  const double p[] = {0.01, 0.04, 0.03, 0.9};
  size_t out[4];
  size_t count = 0;
  REQUIRE(qlmm_bh_select(p, 4, 0.05, out, &count) == QLMM_OK);
  // thresholds 0.0125, 0.025, 0.0375, 0.05: only the smallest passes its rank
  REQUIRE(count == 1);
  CHECK(out[0] == 0);
  REQUIRE(qlmm_bh_select(p, 4, 0.2, out, &count) == QLMM_OK);
  CHECK(count == 3);
  CHECK(qlmm_bh_select(p, 4, 1.5, out, &count) == QLMM_INVALID_ARGUMENT);
}

TEST_CASE("inference, variance components and simulation") {
  qlmm_dataset* d = simulated(3);
  qlmm_infer_options io;
  qlmm_infer_options_init(&io);
  io.fdr_level = 0.1;
  const size_t targets[] = {0, 9};
  qlmm_inference* inf = nullptr;
  REQUIRE(qlmm_infer(d, 2.0, targets, 2, 0.05, &io, &inf) == QLMM_OK);
  REQUIRE(qlmm_inference_count(inf) == 2);
  qlmm_record r;
  REQUIRE(qlmm_inference_record(inf, 0, &r) == QLMM_OK);
  CHECK(r.j == 0);
  CHECK(r.ci_lo <= r.beta_db);
  CHECK(r.beta_db <= r.ci_hi);
  CHECK(r.p_value < 0.01);
  size_t selected[2];
  const size_t n_sel = qlmm_inference_selected(inf, selected, 2);
  REQUIRE(n_sel >= 1);
  CHECK(selected[0] == 0);
  CHECK(qlmm_inference_failure_count(inf) == 0);
  CHECK(qlmm_inference_record(inf, 5, &r) == QLMM_INVALID_ARGUMENT);
  const std::string ipath = temp_path("inference.csv");
  CHECK(qlmm_inference_write(inf, ipath.c_str(), "csv", nullptr) == QLMM_OK);
  CHECK(slurp(ipath).rfind("j,beta_db", 0) == 0);
  qlmm_inference_free(inf);
  const size_t out_of_range[] = {300};
  CHECK(qlmm_infer(d, 2.0, out_of_range, 1, 0.05, &io, &inf) == QLMM_INVALID_ARGUMENT);

  qlmm_varcomp_options vo;
  qlmm_varcomp_options_init(&vo);
  vo.a = 2.0;
  qlmm_varcomp* vc = nullptr;
  REQUIRE(qlmm_varcomp_fit(d, &vo, &vc) == QLMM_OK);
  double s2 = 0.0;
  CHECK(qlmm_varcomp_sigma2(vc, &s2) == QLMM_OK);
  CHECK(s2 > 0.0);
  REQUIRE(qlmm_varcomp_dim(vc) == 2);
  double psi[4];
  CHECK(qlmm_varcomp_psi(vc, psi, 4) == QLMM_OK);
  CHECK(psi[1] == 0.0);
  qlmm_varcomp_free(vc);
  vo.basis = "nonsense";
  CHECK(qlmm_varcomp_fit(d, &vo, &vc) == QLMM_INVALID_ARGUMENT);
  qlmm_dataset_free(d);

  qlmm_scenario sc;
  qlmm_scenario_init(&sc);
  qlmm_pipeline_options po;
  qlmm_pipeline_options_init(&po);
  po.fixed_a = 2.0;
  qlmm_report* rep = nullptr;
  REQUIRE(qlmm_run_mc(&sc, 2, &po, &rep) == QLMM_OK);
  qlmm_report_summary sum;
  REQUIRE(qlmm_report_summary_get(rep, &sum) == QLMM_OK);
  CHECK(sum.reps == 2);
  CHECK(sum.succeeded == 2);
  CHECK(sum.n_coverage == 2);
  size_t j = 0;
  double rate = -1.0, sd = -1.0;
  CHECK(qlmm_report_coverage(rep, 1, &j, &rate, &sd) == QLMM_OK);
  CHECK(j == 9);
  CHECK(sd > 0.0);
  const std::string rpath = temp_path("report.json");
  const qlmm_report* list[] = {rep};
  CHECK(qlmm_reports_write(list, 1, rpath.c_str(), "json", nullptr) == QLMM_OK);
  CHECK(slurp(rpath).find("\"cells\"") != std::string::npos);
  qlmm_report_free(rep);

  const double grid[] = {0.0, 4.0};
  qlmm_sweep* sw = nullptr;
  REQUIRE(qlmm_a_sweep(&sc, grid, 2, 1, &po, &sw) == QLMM_OK);
  REQUIRE(qlmm_sweep_rows(sw) == 2);
  qlmm_sweep_row row;
  REQUIRE(qlmm_sweep_row_get(sw, 0, &row) == QLMM_OK);
  CHECK(row.mean_effective_sample_size == doctest::Approx(144.0));
  qlmm_sweep_free(sw);
}
