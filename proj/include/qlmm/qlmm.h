/* C interface to the qlmm library.
 *
 * Objects are opaque handles created by qlmm_* functions and released with
 * the matching *_free function. Every fallible call returns a qlmm_status;
 * on failure qlmm_last_error() describes the problem for the calling thread.
 * Coordinates and cluster positions are zero-based.
 */
#ifndef QLMM_QLMM_H
#define QLMM_QLMM_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(QLMM_BUILDING_LIBRARY)
#    define QLMM_API __declspec(dllexport)
#  else
#    define QLMM_API __declspec(dllimport)
#  endif
#else
#  define QLMM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum qlmm_status {
  QLMM_OK = 0,
  QLMM_INVALID_ARGUMENT = 1,
  QLMM_DIMENSION_MISMATCH = 2,
  QLMM_NUMERICAL = 3,
  QLMM_NOT_IDENTIFIABLE = 4,
  QLMM_IO = 5,
  QLMM_PARSE = 6,
  QLMM_INTERNAL = 7
} qlmm_status;

typedef struct qlmm_dataset qlmm_dataset;
typedef struct qlmm_fit qlmm_fit;
typedef struct qlmm_inference qlmm_inference;
typedef struct qlmm_varcomp qlmm_varcomp;
typedef struct qlmm_report qlmm_report;
typedef struct qlmm_sweep qlmm_sweep;

QLMM_API const char* qlmm_version(void);
QLMM_API const char* qlmm_status_name(qlmm_status status);
/* Message of the most recent failure on this thread; empty after success. */
QLMM_API const char* qlmm_last_error(void);
QLMM_API void qlmm_string_free(char* s);

/* ---- datasets ---------------------------------------------------------- */

typedef struct qlmm_dims {
  size_t n; /* clusters */
  size_t p;
  size_t q;
  size_t N; /* observations */
  size_t max_m;
} qlmm_dims;

/* y has N entries; X is N x p and Z is N x q, both row-major with the rows of
 * each cluster contiguous and clusters in order. Z may be NULL when q == 0. */
QLMM_API qlmm_status qlmm_dataset_create(size_t n_clusters, const size_t* sizes, size_t p,
                                         size_t q, const double* y, const double* X,
                                         const double* Z, qlmm_dataset** out);
/* Long-format CSV. fixed_matrix_path may be NULL; when given, fixed-effect
 * columns come from that wide file (all columns when n_fixed == 0). */
QLMM_API qlmm_status qlmm_dataset_load_csv(const char* path, const char* cluster_column,
                                           const char* response_column,
                                           const char* const* fixed, size_t n_fixed,
                                           const char* const* random, size_t n_random,
                                           const char* fixed_matrix_path, qlmm_dataset** out);
QLMM_API qlmm_status qlmm_dataset_write_csv(const qlmm_dataset* dataset, const char* path);
/* Prepends a column of ones to every X block. */
QLMM_API qlmm_status qlmm_dataset_add_intercept(const qlmm_dataset* dataset, qlmm_dataset** out);
QLMM_API qlmm_status qlmm_dataset_dims(const qlmm_dataset* dataset, qlmm_dims* out);
QLMM_API qlmm_status qlmm_dataset_cluster_sizes(const qlmm_dataset* dataset, size_t* out,
                                                size_t len);
/* Number of violations; messages are joined by newlines into *report when
 * report is not NULL (release with qlmm_string_free). */
QLMM_API qlmm_status qlmm_dataset_validate(const qlmm_dataset* dataset, size_t* violations,
                                           char** report);
QLMM_API qlmm_status qlmm_effective_sample_size(const qlmm_dataset* dataset, double a,
                                                double* out);
QLMM_API void qlmm_dataset_free(qlmm_dataset* dataset);

/* ---- fixed effects ----------------------------------------------------- */

typedef enum qlmm_lambda_scale {
  QLMM_LAMBDA_EFFECTIVE = 0,   /* sigma * sqrt(2 log p / Tr(Sigma_a^-1)) */
  QLMM_LAMBDA_OBSERVATIONS = 1 /* sigma * sqrt(2 log p / N) */
} qlmm_lambda_scale;

typedef struct qlmm_lasso_options {
  double lambda; /* <= 0: scaled-Lasso noise level times the universal level */
  qlmm_lambda_scale lambda_scale;
  int standardize;
  int max_sweeps;
  double tolerance;
  const double* weights; /* NULL or p entries */
  size_t n_weights;
  const size_t* unpenalized;
  size_t n_unpenalized;
} qlmm_lasso_options;

QLMM_API void qlmm_lasso_options_init(qlmm_lasso_options* options);

typedef struct qlmm_fit_summary {
  size_t p;
  double a;
  double lambda;
  double effective_sample_size;
  double objective;
  double kkt_residual;
  double sigma_init; /* NaN when lambda was given */
  int iterations;
  int converged;
} qlmm_fit_summary;

QLMM_API qlmm_status qlmm_fit_lasso(const qlmm_dataset* dataset, double a,
                                    const qlmm_lasso_options* options, qlmm_fit** out);
QLMM_API qlmm_status qlmm_fit_summary_get(const qlmm_fit* fit, qlmm_fit_summary* out);
QLMM_API qlmm_status qlmm_fit_beta(const qlmm_fit* fit, double* out, size_t len);
/* format is "csv" or "json"; path "-" writes to standard output;
 * provenance_json may be NULL. */
QLMM_API qlmm_status qlmm_fit_write(const qlmm_fit* fit, const char* path, const char* format,
                                    const char* provenance_json);
QLMM_API void qlmm_fit_free(qlmm_fit* fit);

/* criteria may be NULL, otherwise it receives n_grid held-out errors. */
QLMM_API qlmm_status qlmm_cross_validate_a(const qlmm_dataset* dataset, const double* grid,
                                           size_t n_grid, int folds, uint64_t seed,
                                           const qlmm_lasso_options* options, double* a_star,
                                           double* criteria);
QLMM_API qlmm_status qlmm_ridge_weights(const qlmm_dataset* dataset, double a,
                                        const double* penalty_grid, size_t n_grid, int folds,
                                        uint64_t seed, double* weights, size_t len);

/* ---- inference --------------------------------------------------------- */

typedef enum qlmm_debias_mode {
  QLMM_MODE_WHITENED = 0,
  QLMM_MODE_A0_ROBUST = 1
} qlmm_debias_mode;

typedef struct qlmm_infer_options {
  qlmm_lasso_options lasso;
  qlmm_debias_mode mode;
  double lambda_j; /* <= 0: automatic */
  double null_value;
  double fdr_level; /* in (0, 1) to run Benjamini-Hochberg selection, else skipped */
} qlmm_infer_options;

typedef struct qlmm_record {
  size_t j;
  double beta_hat;
  double beta_db;
  double V_hat;
  double ci_lo;
  double ci_hi;
  double z;
  double p_value;
  double alpha;
  double lambda_j;
  int degenerate;
} qlmm_record;

QLMM_API void qlmm_infer_options_init(qlmm_infer_options* options);
QLMM_API qlmm_status qlmm_infer(const qlmm_dataset* dataset, double a, const size_t* targets,
                                size_t n_targets, double alpha, const qlmm_infer_options* options,
                                qlmm_inference** out);
QLMM_API size_t qlmm_inference_count(const qlmm_inference* inference);
QLMM_API qlmm_status qlmm_inference_record(const qlmm_inference* inference, size_t k,
                                           qlmm_record* out);
QLMM_API qlmm_status qlmm_inference_fit(const qlmm_inference* inference, qlmm_fit_summary* out);
QLMM_API size_t qlmm_inference_failure_count(const qlmm_inference* inference);
/* Returns NULL when k is out of range. */
QLMM_API const char* qlmm_inference_failure(const qlmm_inference* inference, size_t k, size_t* j);
/* Returns the number of selected coordinates, copying up to len of them. */
QLMM_API size_t qlmm_inference_selected(const qlmm_inference* inference, size_t* out, size_t len);
QLMM_API qlmm_status qlmm_inference_write(const qlmm_inference* inference, const char* path,
                                          const char* format, const char* provenance_json);
QLMM_API void qlmm_inference_free(qlmm_inference* inference);

/* out needs room for n entries; *count receives the number selected. */
QLMM_API qlmm_status qlmm_bh_select(const double* p_values, size_t n, double level, size_t* out,
                                    size_t* count);

/* ---- variance components ----------------------------------------------- */

typedef struct qlmm_varcomp_options {
  double a;
  const double* a_grid; /* when n_a_grid > 0, a is chosen by CV on the beta fold */
  size_t n_a_grid;
  qlmm_lasso_options lasso;
  int folds;
  const char* basis;             /* "diagonal-halves", "identity", "free-diagonal" */
  const double* basis_matrices;  /* used when basis is NULL: n_basis row-major q x q */
  size_t n_basis;
  uint64_t seed;
  int sample_split;
  int cross_fit;
  int project_psd;
} qlmm_varcomp_options;

QLMM_API void qlmm_varcomp_options_init(qlmm_varcomp_options* options);
QLMM_API qlmm_status qlmm_varcomp_fit(const qlmm_dataset* dataset,
                                      const qlmm_varcomp_options* options, qlmm_varcomp** out);
QLMM_API qlmm_status qlmm_varcomp_sigma2(const qlmm_varcomp* fit, double* out);
QLMM_API size_t qlmm_varcomp_dim(const qlmm_varcomp* fit);
QLMM_API qlmm_status qlmm_varcomp_eta(const qlmm_varcomp* fit, double* out, size_t len);
QLMM_API qlmm_status qlmm_varcomp_psi(const qlmm_varcomp* fit, double* out, size_t len);
QLMM_API qlmm_status qlmm_varcomp_write(const qlmm_varcomp* fit, const char* path,
                                        const char* format, const char* provenance_json);
QLMM_API void qlmm_varcomp_free(qlmm_varcomp* fit);

/* ---- simulation -------------------------------------------------------- */

typedef enum qlmm_psi_kind {
  QLMM_PSI_PD = 0,       /* scale^|j-k| */
  QLMM_PSI_SINGULAR = 1, /* scale on the first q/2 diagonal entries */
  QLMM_PSI_DIAGONAL = 2  /* scale * I */
} qlmm_psi_kind;

typedef struct qlmm_scenario {
  size_t total; /* N */
  size_t n;     /* 0: total / m */
  size_t m;
  size_t p;
  size_t q;
  double rho;
  qlmm_psi_kind psi;
  double psi_scale;
  double sigma2_e;
  uint64_t seed;
} qlmm_scenario;

typedef struct qlmm_pipeline_options {
  const double* a_grid; /* NULL: 0, 2, 4, 8, 16, 32 */
  size_t n_a_grid;
  double fixed_a; /* >= 0 skips cross-validation */
  qlmm_lasso_options lasso;
  int nodewise_lambda_scale; /* -1: same as lasso.lambda_scale */
  int folds;
  qlmm_debias_mode mode;
  double alpha;
  const size_t* coverage; /* NULL: coordinates 1 and 9 */
  size_t n_coverage;
  const size_t* rejection; /* NULL: coordinates 0, 1, 2 and 9 */
  size_t n_rejection;
  int inference;
  int varcomp;
  const char* basis;
  int sample_split;
  int cross_fit;
  int project_psd;
  int threads; /* 0: hardware concurrency */
} qlmm_pipeline_options;

typedef struct qlmm_report_summary {
  size_t reps;
  size_t succeeded;
  size_t failed;
  size_t nonconverged;
  size_t degenerate;
  size_t n_coverage;
  size_t n_rejection;
  size_t n_eta;
  double mean_sse;
  double median_l2;
  double mean_effective_sample_size;
  double mean_a;
  double max_kkt_residual;
  double mae_sigma2;
  double median_eta_l2;
  double wall_seconds;
} qlmm_report_summary;

typedef struct qlmm_sweep_row {
  double a;
  double sse;
  double mean_effective_sample_size;
  double cov_signal;
  double cov_null;
  double sd_signal;
  double sd_null;
  size_t succeeded;
} qlmm_sweep_row;

QLMM_API void qlmm_scenario_init(qlmm_scenario* scenario);
QLMM_API void qlmm_pipeline_options_init(qlmm_pipeline_options* options);
QLMM_API qlmm_status qlmm_simulate_dataset(const qlmm_scenario* scenario, qlmm_dataset** out);
QLMM_API qlmm_status qlmm_run_mc(const qlmm_scenario* scenario, size_t reps,
                                 const qlmm_pipeline_options* options, qlmm_report** out);
QLMM_API qlmm_status qlmm_report_summary_get(const qlmm_report* report, qlmm_report_summary* out);
QLMM_API qlmm_status qlmm_report_coverage(const qlmm_report* report, size_t k, size_t* j,
                                          double* rate, double* mean_sd);
QLMM_API qlmm_status qlmm_report_rejection(const qlmm_report* report, size_t k, size_t* j,
                                           double* rate);
QLMM_API qlmm_status qlmm_report_mae_eta(const qlmm_report* report, double* out, size_t len);
/* Writes several cells as one table (csv) or one document (json). */
QLMM_API qlmm_status qlmm_reports_write(const qlmm_report* const* reports, size_t n,
                                        const char* path, const char* format,
                                        const char* provenance_json);
QLMM_API void qlmm_report_free(qlmm_report* report);

QLMM_API qlmm_status qlmm_a_sweep(const qlmm_scenario* scenario, const double* grid,
                                  size_t n_grid, size_t reps,
                                  const qlmm_pipeline_options* options, qlmm_sweep** out);
QLMM_API size_t qlmm_sweep_rows(const qlmm_sweep* sweep);
QLMM_API qlmm_status qlmm_sweep_row_get(const qlmm_sweep* sweep, size_t k, qlmm_sweep_row* out);
QLMM_API qlmm_status qlmm_sweep_write(const qlmm_sweep* sweep, const char* path,
                                      const char* format, const char* provenance_json);
QLMM_API void qlmm_sweep_free(qlmm_sweep* sweep);

#ifdef __cplusplus
}
#endif

#endif /* QLMM_QLMM_H */
