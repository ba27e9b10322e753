#include "qlmm/qlmm.h"

#include "qlmm/debias.hpp"
#include "qlmm/error.hpp"
#include "qlmm/io.hpp"
#include "qlmm/lasso.hpp"
#include "qlmm/model.hpp"
#include "qlmm/proxy.hpp"
#include "qlmm/simulation.hpp"
#include "qlmm/varcomp.hpp"

#include <cmath>
#include <cstring>
#include <exception>
#include <limits>
#include <memory>
#include <new>
#include <string>
#include <vector>

struct qlmm_dataset {
  qlmm::ClusteredDataset data;
};

struct qlmm_fit {
  qlmm::FixedEffectsFit fit;
};

struct qlmm_inference {
  qlmm::InferenceResult result;
  std::vector<qlmm::Index> selected;
};

struct qlmm_varcomp {
  qlmm::VarCompFit fit;
};

struct qlmm_report {
  qlmm::McReport report;
};

struct qlmm_sweep {
  qlmm::Scenario scenario;
  std::vector<qlmm::SweepRow> rows;
};

namespace {

using qlmm::Index;

thread_local std::string last_error;

qlmm_status status_of(qlmm::ErrorCode code) {
  switch (code) {
    case qlmm::ErrorCode::InvalidArgument: return QLMM_INVALID_ARGUMENT;
    case qlmm::ErrorCode::DimensionMismatch: return QLMM_DIMENSION_MISMATCH;
    case qlmm::ErrorCode::Numerical: return QLMM_NUMERICAL;
    case qlmm::ErrorCode::NotIdentifiable: return QLMM_NOT_IDENTIFIABLE;
    case qlmm::ErrorCode::Io: return QLMM_IO;
    case qlmm::ErrorCode::Parse: return QLMM_PARSE;
  }
  return QLMM_INTERNAL;
}

template <class F>
qlmm_status guarded(F&& body) {
  try {
    body();
    last_error.clear();
    return QLMM_OK;
  } catch (const qlmm::Error& e) {
    last_error = e.what();
    return status_of(e.code());
  } catch (const qlmm::Json::exception& e) {
    last_error = e.what();
    return QLMM_PARSE;
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    return QLMM_INTERNAL;
  } catch (const std::exception& e) {
    last_error = e.what();
    return QLMM_INTERNAL;
  } catch (...) {
    last_error = "unknown failure";
    return QLMM_INTERNAL;
  }
}

void require(bool ok, const char* what) {
  if (!ok) qlmm::fail(qlmm::ErrorCode::InvalidArgument, what);
}

template <class T>
void require_handle(const T* p, const char* name) {
  if (p == nullptr) qlmm::fail(qlmm::ErrorCode::InvalidArgument, std::string(name) + " is null");
}

void require_len(size_t have, size_t need, const char* what) {
  if (have < need)
    qlmm::fail(qlmm::ErrorCode::DimensionMismatch,
               std::string(what) + ": buffer holds " + std::to_string(have) + ", needs " +
                   std::to_string(need));
}

qlmm::Json provenance_of(const char* text) {
  if (text == nullptr || *text == '\0') return qlmm::Json::object();
  return qlmm::Json::parse(text);
}

enum class Format { Csv, Json };

Format format_of(const char* name) {
  std::string f = name == nullptr ? "csv" : name;
  if (f == "csv") return Format::Csv;
  if (f == "json") return Format::Json;
  qlmm::fail(qlmm::ErrorCode::InvalidArgument, "unknown format '" + f + "' (csv or json)");
}

std::string path_of(const char* path) {
  require(path != nullptr && *path != '\0', "path is empty");
  return path;
}

qlmm::LassoOptions lasso_from(const qlmm_lasso_options* c) {
  qlmm::LassoOptions o;
  if (c == nullptr) return o;
  if (c->lambda > 0.0) o.lambda = c->lambda;
  o.lambda_scale = c->lambda_scale == QLMM_LAMBDA_OBSERVATIONS
                       ? qlmm::LambdaScale::Observations
                       : qlmm::LambdaScale::EffectiveSampleSize;
  o.standardize = c->standardize != 0;
  if (c->max_sweeps > 0) o.max_sweeps = c->max_sweeps;
  if (c->tolerance > 0.0) o.tolerance = c->tolerance;
  if (c->n_weights > 0) {
    require(c->weights != nullptr, "weights pointer is null");
    o.weights = Eigen::Map<const qlmm::Vector>(c->weights, static_cast<Index>(c->n_weights));
  }
  for (size_t k = 0; k < c->n_unpenalized; ++k) {
    require(c->unpenalized != nullptr, "unpenalized pointer is null");
    o.unpenalized.push_back(static_cast<Index>(c->unpenalized[k]));
  }
  return o;
}

void fill_summary(const qlmm::FixedEffectsFit& f, qlmm_fit_summary* out) {
  out->p = static_cast<size_t>(f.beta.size());
  out->a = f.a;
  out->lambda = f.lambda;
  out->effective_sample_size = f.effective_sample_size;
  out->objective = f.objective;
  out->kkt_residual = f.kkt_residual;
  out->sigma_init = f.sigma_init ? *f.sigma_init : std::numeric_limits<double>::quiet_NaN();
  out->iterations = f.iterations;
  out->converged = f.converged ? 1 : 0;
}

std::vector<double> grid_of(const double* values, size_t n) {
  if (n == 0) return {};
  require(values != nullptr, "grid pointer is null");
  return std::vector<double>(values, values + n);
}

std::vector<Index> indices_of(const size_t* values, size_t n) {
  std::vector<Index> out;
  if (n > 0) require(values != nullptr, "index pointer is null");
  for (size_t k = 0; k < n; ++k) out.push_back(static_cast<Index>(values[k]));
  return out;
}

qlmm::Scenario scenario_from(const qlmm_scenario* c) {
  require_handle(c, "scenario");
  qlmm::Scenario s;
  s.total = static_cast<Index>(c->total);
  s.n = static_cast<Index>(c->n);
  s.m = static_cast<Index>(c->m);
  s.p = static_cast<Index>(c->p);
  s.q = static_cast<Index>(c->q);
  s.rho = c->rho;
  switch (c->psi) {
    case QLMM_PSI_PD: s.psi_kind = qlmm::PsiKind::PositiveDefinite; break;
    case QLMM_PSI_SINGULAR: s.psi_kind = qlmm::PsiKind::Singular; break;
    case QLMM_PSI_DIAGONAL: s.psi_kind = qlmm::PsiKind::Diagonal; break;
    default: qlmm::fail(qlmm::ErrorCode::InvalidArgument, "unknown psi kind");
  }
  s.psi_scale = c->psi_scale;
  s.sigma2_e = c->sigma2_e;
  s.seed = c->seed;
  return s;
}

qlmm::PipelineOptions pipeline_from(const qlmm_pipeline_options* c) {
  qlmm::PipelineOptions o;
  if (c == nullptr) return o;
  if (c->n_a_grid > 0) o.a_grid = grid_of(c->a_grid, c->n_a_grid);
  if (c->fixed_a >= 0.0) o.fixed_a = c->fixed_a;
  o.lasso = lasso_from(&c->lasso);
  if (c->nodewise_lambda_scale >= 0)
    o.nodewise_lambda_scale = c->nodewise_lambda_scale == QLMM_LAMBDA_OBSERVATIONS
                                  ? qlmm::LambdaScale::Observations
                                  : qlmm::LambdaScale::EffectiveSampleSize;
  if (c->folds > 0) o.cv_folds = c->folds;
  o.mode = c->mode == QLMM_MODE_A0_ROBUST ? qlmm::DebiasMode::A0Robust
                                          : qlmm::DebiasMode::Whitened;
  o.alpha = c->alpha;
  if (c->coverage != nullptr) o.coverage_coordinates = indices_of(c->coverage, c->n_coverage);
  if (c->rejection != nullptr) o.rejection_coordinates = indices_of(c->rejection, c->n_rejection);
  o.inference = c->inference != 0;
  o.varcomp = c->varcomp != 0;
  if (c->basis != nullptr) o.basis = c->basis;
  o.sample_split = c->sample_split != 0;
  o.cross_fit = c->cross_fit != 0;
  o.project_psd = c->project_psd != 0;
  require(c->threads >= 0, "threads must be >= 0");
  o.threads = c->threads;
  return o;
}

char* copy_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char* qlmm_version(void) { return "0.1.0"; }

const char* qlmm_status_name(qlmm_status status) {
  switch (status) {
    case QLMM_OK: return "ok";
    case QLMM_INVALID_ARGUMENT: return "invalid argument";
    case QLMM_DIMENSION_MISMATCH: return "dimension mismatch";
    case QLMM_NUMERICAL: return "numerical failure";
    case QLMM_NOT_IDENTIFIABLE: return "not identifiable";
    case QLMM_IO: return "i/o error";
    case QLMM_PARSE: return "parse error";
    case QLMM_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* qlmm_last_error(void) { return last_error.c_str(); }

void qlmm_string_free(char* s) { delete[] s; }

// ---- datasets

qlmm_status qlmm_dataset_create(size_t n_clusters, const size_t* sizes, size_t p, size_t q,
                                const double* y, const double* X, const double* Z,
                                qlmm_dataset** out) {
  return guarded([&] {
    require_handle(out, "out");
    *out = nullptr;
    require(n_clusters > 0, "at least one cluster is required");
    require(sizes != nullptr && y != nullptr && X != nullptr, "sizes, y and X are required");
    require(q == 0 || Z != nullptr, "Z is required when q > 0");
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    std::vector<qlmm::Cluster> clusters;
    size_t row = 0;
    for (size_t i = 0; i < n_clusters; ++i) {
      const auto m = static_cast<Index>(sizes[i]);
      require(m > 0, "cluster sizes must be positive");
      qlmm::Cluster c;
      c.id = std::to_string(i + 1);
      c.y = Eigen::Map<const qlmm::Vector>(y + row, m);
      c.X = Eigen::Map<const RowMajor>(X + row * p, m, static_cast<Index>(p));
      c.Z = q == 0 ? qlmm::Matrix(m, 0)
                   : qlmm::Matrix(Eigen::Map<const RowMajor>(Z + row * q, m,
                                                             static_cast<Index>(q)));
      clusters.push_back(std::move(c));
      row += sizes[i];
    }
    auto d = std::make_unique<qlmm_dataset>();
    d->data = qlmm::ClusteredDataset(std::move(clusters), static_cast<Index>(p),
                                     static_cast<Index>(q));
    qlmm::require_valid(d->data);
    *out = d.release();
  });
}

qlmm_status qlmm_dataset_load_csv(const char* path, const char* cluster_column,
                                  const char* response_column, const char* const* fixed,
                                  size_t n_fixed, const char* const* random, size_t n_random,
                                  const char* fixed_matrix_path, qlmm_dataset** out) {
  return guarded([&] {
    require_handle(out, "out");
    *out = nullptr;
    qlmm::LongFormatSchema schema;
    if (cluster_column != nullptr) schema.cluster = cluster_column;
    if (response_column != nullptr) schema.response = response_column;
    for (size_t k = 0; k < n_fixed; ++k) schema.fixed.emplace_back(fixed[k]);
    for (size_t k = 0; k < n_random; ++k) schema.random.emplace_back(random[k]);
    auto d = std::make_unique<qlmm_dataset>();
    d->data = qlmm::load_csv(path_of(path), schema,
                             fixed_matrix_path == nullptr ? "" : fixed_matrix_path);
    *out = d.release();
  });
}

qlmm_status qlmm_dataset_write_csv(const qlmm_dataset* dataset, const char* path) {
  return guarded([&] {
    require_handle(dataset, "dataset");
    qlmm::write_dataset_csv(dataset->data, path_of(path));
  });
}

qlmm_status qlmm_dataset_add_intercept(const qlmm_dataset* dataset, qlmm_dataset** out) {
  return guarded([&] {
    require_handle(dataset, "dataset");
    require_handle(out, "out");
    auto d = std::make_unique<qlmm_dataset>();
    d->data = qlmm::with_intercept(dataset->data);
    *out = d.release();
  });
}

qlmm_status qlmm_dataset_dims(const qlmm_dataset* dataset, qlmm_dims* out) {
  return guarded([&] {
    require_handle(dataset, "dataset");
    require_handle(out, "out");
    out->n = static_cast<size_t>(dataset->data.n());
    out->p = static_cast<size_t>(dataset->data.p());
    out->q = static_cast<size_t>(dataset->data.q());
    out->N = static_cast<size_t>(dataset->data.total_observations());
    out->max_m = static_cast<size_t>(dataset->data.max_cluster_size());
  });
}

qlmm_status qlmm_dataset_cluster_sizes(const qlmm_dataset* dataset, size_t* out, size_t len) {
  return guarded([&] {
    require_handle(dataset, "dataset");
    const auto n = static_cast<size_t>(dataset->data.n());
    require_len(len, n, "cluster sizes");
    require_handle(out, "out");
    for (size_t i = 0; i < n; ++i)
      out[i] = static_cast<size_t>(dataset->data.cluster(static_cast<Index>(i)).size());
  });
}

qlmm_status qlmm_dataset_validate(const qlmm_dataset* dataset, size_t* violations,
                                  char** report) {
  return guarded([&] {
    require_handle(dataset, "dataset");
    const auto v = qlmm::validate_dataset(dataset->data);
    if (violations != nullptr) *violations = v.size();
    if (report != nullptr) {
      std::string text;
      for (const auto& e : v) text += "cluster " + e.cluster_id + ": " + e.message + "\n";
      *report = copy_string(text);
    }
  });
}

qlmm_status qlmm_effective_sample_size(const qlmm_dataset* dataset, double a, double* out) {
  return guarded([&] {
    require_handle(dataset, "dataset");
    require_handle(out, "out");
    *out = qlmm::ProxyWhitener::build(dataset->data, a).effective_sample_size();
  });
}

void qlmm_dataset_free(qlmm_dataset* dataset) { delete dataset; }

// ---- fixed effects

void qlmm_lasso_options_init(qlmm_lasso_options* options) {
  if (options == nullptr) return;
  const qlmm::LassoOptions d;
  options->lambda = 0.0;
  options->lambda_scale = QLMM_LAMBDA_EFFECTIVE;
  options->standardize = d.standardize ? 1 : 0;
  options->max_sweeps = d.max_sweeps;
  options->tolerance = d.tolerance;
  options->weights = nullptr;
  options->n_weights = 0;
  options->unpenalized = nullptr;
  options->n_unpenalized = 0;
}

qlmm_status qlmm_fit_lasso(const qlmm_dataset* dataset, double a,
                           const qlmm_lasso_options* options, qlmm_fit** out) {
  return guarded([&] {
    require_handle(dataset, "dataset");
    require_handle(out, "out");
    *out = nullptr;
    qlmm::require_valid(dataset->data);
    const auto data = qlmm::transform_dataset(dataset->data, a);
    auto f = std::make_unique<qlmm_fit>();
    f->fit = qlmm::lasso_fit(data, lasso_from(options));
    *out = f.release();
  });
}

qlmm_status qlmm_fit_summary_get(const qlmm_fit* fit, qlmm_fit_summary* out) {
  return guarded([&] {
    require_handle(fit, "fit");
    require_handle(out, "out");
    fill_summary(fit->fit, out);
  });
}

qlmm_status qlmm_fit_beta(const qlmm_fit* fit, double* out, size_t len) {
  return guarded([&] {
    require_handle(fit, "fit");
    const auto p = static_cast<size_t>(fit->fit.beta.size());
    require_len(len, p, "beta");
    require_handle(out, "out");
    for (size_t j = 0; j < p; ++j) out[j] = fit->fit.beta(static_cast<Index>(j));
  });
}

qlmm_status qlmm_fit_write(const qlmm_fit* fit, const char* path, const char* format,
                           const char* provenance_json) {
  return guarded([&] {
    require_handle(fit, "fit");
    const auto p = path_of(path);
    if (format_of(format) == Format::Json)
      qlmm::write_text(p, qlmm::fit_to_json(fit->fit, provenance_of(provenance_json)).dump(2) +
                              "\n");
    else
      qlmm::write_text(p, qlmm::fit_to_csv(fit->fit));
  });
}

void qlmm_fit_free(qlmm_fit* fit) { delete fit; }

qlmm_status qlmm_cross_validate_a(const qlmm_dataset* dataset, const double* grid,
                                  size_t n_grid, int folds, uint64_t seed,
                                  const qlmm_lasso_options* options, double* a_star,
                                  double* criteria) {
  return guarded([&] {
    require_handle(dataset, "dataset");
    require_handle(a_star, "a_star");
    require(n_grid > 0, "the a grid is empty");
    qlmm::CvOptions cv;
    cv.folds = folds;
    cv.seed = seed;
    const auto r = qlmm::cross_validate_a(dataset->data, grid_of(grid, n_grid),
                                          lasso_from(options), cv);
    *a_star = r.a_star;
    if (criteria != nullptr)
      for (size_t k = 0; k < r.points.size() && k < n_grid; ++k)
        criteria[k] = r.points[k].criterion;
  });
}

qlmm_status qlmm_ridge_weights(const qlmm_dataset* dataset, double a,
                               const double* penalty_grid, size_t n_grid, int folds,
                               uint64_t seed, double* weights, size_t len) {
  return guarded([&] {
    require_handle(dataset, "dataset");
    require(n_grid > 0, "the penalty grid is empty");
    const auto p = static_cast<size_t>(dataset->data.p());
    require_len(len, p, "weights");
    require_handle(weights, "weights");
    qlmm::CvOptions cv;
    cv.folds = folds;
    cv.seed = seed;
    const auto r = qlmm::ridge_weights(dataset->data, a, grid_of(penalty_grid, n_grid), cv);
    for (size_t j = 0; j < p; ++j) weights[j] = r.weights(static_cast<Index>(j));
  });
}

// ---- inference

void qlmm_infer_options_init(qlmm_infer_options* options) {
  if (options == nullptr) return;
  qlmm_lasso_options_init(&options->lasso);
  options->mode = QLMM_MODE_WHITENED;
  options->lambda_j = 0.0;
  options->null_value = 0.0;
  options->fdr_level = 0.0;
}

qlmm_status qlmm_infer(const qlmm_dataset* dataset, double a, const size_t* targets,
                       size_t n_targets, double alpha, const qlmm_infer_options* options,
                       qlmm_inference** out) {
  return guarded([&] {
    require_handle(dataset, "dataset");
    require_handle(out, "out");
    *out = nullptr;
    qlmm::InferenceOptions o;
    double fdr = 0.0;
    if (options != nullptr) {
      o.lasso = lasso_from(&options->lasso);
      o.mode = options->mode == QLMM_MODE_A0_ROBUST ? qlmm::DebiasMode::A0Robust
                                                    : qlmm::DebiasMode::Whitened;
      if (options->lambda_j > 0.0) o.lambda_j = options->lambda_j;
      o.null_value = options->null_value;
      fdr = options->fdr_level;
    }
    auto r = std::make_unique<qlmm_inference>();
    r->result = qlmm::infer_coordinates(dataset->data, a, indices_of(targets, n_targets), alpha, o);
    if (fdr > 0.0 && fdr < 1.0) {
      // degenerate records carry NaN p-values and take no part in the selection
      std::vector<double> p;
      std::vector<Index> j;
      for (const auto& rec : r->result.records)
        if (std::isfinite(rec.p_value)) {
          p.push_back(rec.p_value);
          j.push_back(rec.j);
        }
      for (Index k : qlmm::bh_fdr(p, fdr)) r->selected.push_back(j[static_cast<size_t>(k)]);
    }
    *out = r.release();
  });
}

size_t qlmm_inference_count(const qlmm_inference* inference) {
  return inference == nullptr ? 0 : inference->result.records.size();
}

qlmm_status qlmm_inference_record(const qlmm_inference* inference, size_t k, qlmm_record* out) {
  return guarded([&] {
    require_handle(inference, "inference");
    require_handle(out, "out");
    require(k < inference->result.records.size(), "record index out of range");
    const auto& r = inference->result.records[k];
    out->j = static_cast<size_t>(r.j);
    out->beta_hat = r.beta_hat;
    out->beta_db = r.beta_db;
    out->V_hat = r.V_hat;
    out->ci_lo = r.ci_lo;
    out->ci_hi = r.ci_hi;
    out->z = r.z;
    out->p_value = r.p_value;
    out->alpha = r.alpha;
    out->lambda_j = r.lambda_j;
    out->degenerate = r.degenerate ? 1 : 0;
  });
}

qlmm_status qlmm_inference_fit(const qlmm_inference* inference, qlmm_fit_summary* out) {
  return guarded([&] {
    require_handle(inference, "inference");
    require_handle(out, "out");
    fill_summary(inference->result.fit, out);
  });
}

size_t qlmm_inference_failure_count(const qlmm_inference* inference) {
  return inference == nullptr ? 0 : inference->result.failures.size();
}

const char* qlmm_inference_failure(const qlmm_inference* inference, size_t k, size_t* j) {
  if (inference == nullptr || k >= inference->result.failures.size()) return nullptr;
  const auto& f = inference->result.failures[k];
  if (j != nullptr) *j = static_cast<size_t>(f.j);
  return f.message.c_str();
}

size_t qlmm_inference_selected(const qlmm_inference* inference, size_t* out, size_t len) {
  if (inference == nullptr) return 0;
  const auto& s = inference->selected;
  for (size_t k = 0; k < s.size() && k < len && out != nullptr; ++k)
    out[k] = static_cast<size_t>(s[k]);
  return s.size();
}

qlmm_status qlmm_inference_write(const qlmm_inference* inference, const char* path,
                                 const char* format, const char* provenance_json) {
  return guarded([&] {
    require_handle(inference, "inference");
    const auto p = path_of(path);
    if (format_of(format) == Format::Json)
      qlmm::write_text(p, qlmm::inference_to_json(inference->result, inference->selected,
                                                  provenance_of(provenance_json))
                                  .dump(2) +
                              "\n");
    else
      qlmm::write_text(p, qlmm::inference_to_csv(inference->result.records));
  });
}

void qlmm_inference_free(qlmm_inference* inference) { delete inference; }

qlmm_status qlmm_bh_select(const double* p_values, size_t n, double level, size_t* out,
                           size_t* count) {
  return guarded([&] {
    require_handle(count, "count");
    const auto p = grid_of(p_values, n);
    const auto s = qlmm::bh_fdr(p, level);
    if (!s.empty()) require_handle(out, "out");
    for (size_t k = 0; k < s.size(); ++k) out[k] = static_cast<size_t>(s[k]);
    *count = s.size();
  });
}

// ---- variance components

void qlmm_varcomp_options_init(qlmm_varcomp_options* options) {
  if (options == nullptr) return;
  const qlmm::VarCompOptions d;
  options->a = d.a;
  options->a_grid = nullptr;
  options->n_a_grid = 0;
  qlmm_lasso_options_init(&options->lasso);
  options->folds = qlmm::CvOptions{}.folds;
  options->basis = "diagonal-halves";
  options->basis_matrices = nullptr;
  options->n_basis = 0;
  options->seed = 0;
  options->sample_split = d.sample_split ? 1 : 0;
  options->cross_fit = d.cross_fit ? 1 : 0;
  options->project_psd = d.project_psd ? 1 : 0;
}

qlmm_status qlmm_varcomp_fit(const qlmm_dataset* dataset, const qlmm_varcomp_options* options,
                             qlmm_varcomp** out) {
  return guarded([&] {
    require_handle(dataset, "dataset");
    require_handle(options, "options");
    require_handle(out, "out");
    *out = nullptr;
    const Index q = dataset->data.q();
    qlmm::VarCompOptions o;
    o.a = options->a;
    o.a_grid = grid_of(options->a_grid, options->n_a_grid);
    o.lasso = lasso_from(&options->lasso);
    o.cv.folds = options->folds;
    o.cv.seed = options->seed;
    o.seed = options->seed;
    if (options->basis != nullptr) {
      o.basis = qlmm::make_basis(options->basis, q);
    } else {
      require(options->n_basis > 0 && options->basis_matrices != nullptr,
              "either a basis name or basis matrices are required");
      for (size_t k = 0; k < options->n_basis; ++k) {
        using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        o.basis.emplace_back(Eigen::Map<const RowMajor>(
            options->basis_matrices + k * static_cast<size_t>(q * q), q, q));
      }
    }
    o.sample_split = options->sample_split != 0;
    o.cross_fit = options->cross_fit != 0;
    o.project_psd = options->project_psd != 0;
    auto f = std::make_unique<qlmm_varcomp>();
    f->fit = qlmm::cross_fit_varcomp(dataset->data, o);
    *out = f.release();
  });
}

qlmm_status qlmm_varcomp_sigma2(const qlmm_varcomp* fit, double* out) {
  return guarded([&] {
    require_handle(fit, "fit");
    require_handle(out, "out");
    *out = fit->fit.sigma2_e_hat;
  });
}

size_t qlmm_varcomp_dim(const qlmm_varcomp* fit) {
  return fit == nullptr ? 0 : static_cast<size_t>(fit->fit.eta_hat.size());
}

qlmm_status qlmm_varcomp_eta(const qlmm_varcomp* fit, double* out, size_t len) {
  return guarded([&] {
    require_handle(fit, "fit");
    const auto d = static_cast<size_t>(fit->fit.eta_hat.size());
    require_len(len, d, "eta");
    require_handle(out, "out");
    for (size_t k = 0; k < d; ++k) out[k] = fit->fit.eta_hat(static_cast<Index>(k));
  });
}

qlmm_status qlmm_varcomp_psi(const qlmm_varcomp* fit, double* out, size_t len) {
  return guarded([&] {
    require_handle(fit, "fit");
    const auto& psi = fit->fit.Psi_hat;
    require_len(len, static_cast<size_t>(psi.size()), "psi");
    require_handle(out, "out");
    for (Index r = 0; r < psi.rows(); ++r)
      for (Index c = 0; c < psi.cols(); ++c) out[r * psi.cols() + c] = psi(r, c);
  });
}

qlmm_status qlmm_varcomp_write(const qlmm_varcomp* fit, const char* path, const char* format,
                               const char* provenance_json) {
  return guarded([&] {
    require_handle(fit, "fit");
    const auto p = path_of(path);
    if (format_of(format) == Format::Json)
      qlmm::write_text(
          p, qlmm::varcomp_to_json(fit->fit, provenance_of(provenance_json)).dump(2) + "\n");
    else
      qlmm::write_text(p, qlmm::varcomp_to_csv(fit->fit));
  });
}

void qlmm_varcomp_free(qlmm_varcomp* fit) { delete fit; }

// ---- simulation

void qlmm_scenario_init(qlmm_scenario* scenario) {
  if (scenario == nullptr) return;
  const qlmm::Scenario d;
  scenario->total = static_cast<size_t>(d.total);
  scenario->n = static_cast<size_t>(d.n);
  scenario->m = static_cast<size_t>(d.m);
  scenario->p = static_cast<size_t>(d.p);
  scenario->q = static_cast<size_t>(d.q);
  scenario->rho = d.rho;
  scenario->psi = QLMM_PSI_PD;
  scenario->psi_scale = d.psi_scale;
  scenario->sigma2_e = d.sigma2_e;
  scenario->seed = d.seed;
}

void qlmm_pipeline_options_init(qlmm_pipeline_options* options) {
  if (options == nullptr) return;
  const qlmm::PipelineOptions d;
  options->a_grid = nullptr;
  options->n_a_grid = 0;
  options->fixed_a = -1.0;
  qlmm_lasso_options_init(&options->lasso);
  options->nodewise_lambda_scale = -1;
  options->folds = d.cv_folds;
  options->mode = QLMM_MODE_WHITENED;
  options->alpha = d.alpha;
  options->coverage = nullptr;
  options->n_coverage = 0;
  options->rejection = nullptr;
  options->n_rejection = 0;
  options->inference = d.inference ? 1 : 0;
  options->varcomp = d.varcomp ? 1 : 0;
  options->basis = nullptr;
  options->sample_split = d.sample_split ? 1 : 0;
  options->cross_fit = d.cross_fit ? 1 : 0;
  options->project_psd = d.project_psd ? 1 : 0;
  options->threads = d.threads;
}

qlmm_status qlmm_simulate_dataset(const qlmm_scenario* scenario, qlmm_dataset** out) {
  return guarded([&] {
    require_handle(out, "out");
    *out = nullptr;
    auto d = std::make_unique<qlmm_dataset>();
    d->data = qlmm::generate_dataset(scenario_from(scenario)).dataset;
    *out = d.release();
  });
}

qlmm_status qlmm_run_mc(const qlmm_scenario* scenario, size_t reps,
                        const qlmm_pipeline_options* options, qlmm_report** out) {
  return guarded([&] {
    require_handle(out, "out");
    *out = nullptr;
    require(reps > 0, "reps must be positive");
    auto r = std::make_unique<qlmm_report>();
    r->report = qlmm::run_mc(scenario_from(scenario), static_cast<Index>(reps),
                             pipeline_from(options));
    *out = r.release();
  });
}

qlmm_status qlmm_report_summary_get(const qlmm_report* report, qlmm_report_summary* out) {
  return guarded([&] {
    require_handle(report, "report");
    require_handle(out, "out");
    const auto& r = report->report;
    out->reps = static_cast<size_t>(r.reps);
    out->succeeded = static_cast<size_t>(r.succeeded);
    out->failed = static_cast<size_t>(r.failed);
    out->nonconverged = static_cast<size_t>(r.nonconverged);
    out->degenerate = static_cast<size_t>(r.degenerate);
    out->n_coverage = r.coverage.size();
    out->n_rejection = r.rejection.size();
    out->n_eta = static_cast<size_t>(r.mae_eta.size());
    out->mean_sse = r.mean_sse;
    out->median_l2 = r.median_l2;
    out->mean_effective_sample_size = r.mean_effective_sample_size;
    out->mean_a = r.mean_a;
    out->max_kkt_residual = r.max_kkt_residual;
    out->mae_sigma2 = r.mae_sigma2;
    out->median_eta_l2 = r.median_eta_l2;
    out->wall_seconds = r.wall_seconds;
  });
}

qlmm_status qlmm_report_coverage(const qlmm_report* report, size_t k, size_t* j, double* rate,
                                 double* mean_sd) {
  return guarded([&] {
    require_handle(report, "report");
    require(k < report->report.coverage.size(), "coverage index out of range");
    const auto& c = report->report.coverage[k];
    if (j != nullptr) *j = static_cast<size_t>(c.j);
    if (rate != nullptr) *rate = c.rate;
    if (mean_sd != nullptr) *mean_sd = c.mean_sd;
  });
}

qlmm_status qlmm_report_rejection(const qlmm_report* report, size_t k, size_t* j,
                                  double* rate) {
  return guarded([&] {
    require_handle(report, "report");
    require(k < report->report.rejection.size(), "rejection index out of range");
    const auto& c = report->report.rejection[k];
    if (j != nullptr) *j = static_cast<size_t>(c.j);
    if (rate != nullptr) *rate = c.rate;
  });
}

qlmm_status qlmm_report_mae_eta(const qlmm_report* report, double* out, size_t len) {
  return guarded([&] {
    require_handle(report, "report");
    const auto& v = report->report.mae_eta;
    require_len(len, static_cast<size_t>(v.size()), "mae_eta");
    require_handle(out, "out");
    for (Index k = 0; k < v.size(); ++k) out[k] = v(k);
  });
}

qlmm_status qlmm_reports_write(const qlmm_report* const* reports, size_t n, const char* path,
                               const char* format, const char* provenance_json) {
  return guarded([&] {
    require(n > 0 && reports != nullptr, "no reports to write");
    std::vector<qlmm::McReport> all;
    for (size_t k = 0; k < n; ++k) {
      require_handle(reports[k], "report");
      all.push_back(reports[k]->report);
    }
    const auto p = path_of(path);
    if (format_of(format) == Format::Csv) {
      qlmm::write_text(p, qlmm::reports_to_csv(all));
      return;
    }
    qlmm::Json doc;
    doc["provenance"] = provenance_of(provenance_json);
    doc["cells"] = qlmm::Json::array();
    for (const auto& r : all) {
      auto cell = qlmm::report_to_json(r);
      cell.erase("provenance");
      doc["cells"].push_back(std::move(cell));
    }
    qlmm::write_text(p, doc.dump(2) + "\n");
  });
}

void qlmm_report_free(qlmm_report* report) { delete report; }

qlmm_status qlmm_a_sweep(const qlmm_scenario* scenario, const double* grid, size_t n_grid,
                         size_t reps, const qlmm_pipeline_options* options, qlmm_sweep** out) {
  return guarded([&] {
    require_handle(out, "out");
    *out = nullptr;
    require(n_grid > 0, "the a grid is empty");
    require(reps > 0, "reps must be positive");
    auto s = std::make_unique<qlmm_sweep>();
    s->scenario = scenario_from(scenario);
    s->rows = qlmm::a_sweep(s->scenario, grid_of(grid, n_grid), static_cast<Index>(reps),
                            pipeline_from(options));
    *out = s.release();
  });
}

size_t qlmm_sweep_rows(const qlmm_sweep* sweep) {
  return sweep == nullptr ? 0 : sweep->rows.size();
}

qlmm_status qlmm_sweep_row_get(const qlmm_sweep* sweep, size_t k, qlmm_sweep_row* out) {
  return guarded([&] {
    require_handle(sweep, "sweep");
    require_handle(out, "out");
    require(k < sweep->rows.size(), "sweep row out of range");
    const auto& r = sweep->rows[k];
    out->a = r.a;
    out->sse = r.sse;
    out->mean_effective_sample_size = r.mean_effective_sample_size;
    out->cov_signal = r.cov_signal;
    out->cov_null = r.cov_null;
    out->sd_signal = r.sd_signal;
    out->sd_null = r.sd_null;
    out->succeeded = static_cast<size_t>(r.succeeded);
  });
}

qlmm_status qlmm_sweep_write(const qlmm_sweep* sweep, const char* path, const char* format,
                             const char* provenance_json) {
  return guarded([&] {
    require_handle(sweep, "sweep");
    const auto p = path_of(path);
    if (format_of(format) == Format::Json)
      qlmm::write_text(p, qlmm::sweep_to_json(sweep->scenario, sweep->rows,
                                              provenance_of(provenance_json))
                                  .dump(2) +
                              "\n");
    else
      qlmm::write_text(p, qlmm::sweep_to_csv(sweep->scenario, sweep->rows));
  });
}

void qlmm_sweep_free(qlmm_sweep* sweep) { delete sweep; }

}  // extern "C"
