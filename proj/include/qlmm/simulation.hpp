#pragma once

#include "qlmm/debias.hpp"
#include "qlmm/lasso.hpp"
#include "qlmm/model.hpp"
#include "qlmm/varcomp.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace qlmm {

enum class PsiKind {
  PositiveDefinite,  // scale^{|j-k|}
  Singular,          // scale on the first floor(q/2) diagonal entries, zero elsewhere
  Diagonal,          // scale * I
  Custom,
};

std::string to_string(PsiKind kind);
PsiKind psi_kind_from_string(const std::string& name);

struct Scenario {
  Index total = 144;  // N; the cluster count is total / m unless n is set
  Index n = 0;
  Index m = 4;
  Index p = 300;
  Index q = 2;
  double rho = 0.0;
  PsiKind psi_kind = PsiKind::PositiveDefinite;
  double psi_scale = 0.56;
  Matrix psi_custom;
  double sigma2_e = 0.25;
  Vector beta_true;  // empty: (1, 0.5, 0.2, 0.1, 0.05, 0, ..., 0)
  std::uint64_t seed = 1;

  /// Cluster count; throws when total is not divisible by m.
  Index clusters() const;
  Vector beta() const;
};

Matrix psi_matrix(PsiKind kind, Index q, double scale, const Matrix& custom = Matrix());
Matrix scenario_psi(const Scenario& scenario);

/// Covariance of one row of (X_1..X_k, Z_1..Z_q), k = min(p, q): unit
/// variances, cross-covariance rho^j between every X_k and Z_j (j one-based).
Matrix active_block_covariance(Index p, Index q, double rho);

struct GroundTruth {
  Vector beta;
  Matrix psi;
  double sigma2_e = 0.0;
  std::vector<Vector> gamma;
};

struct SimulatedData {
  ClusteredDataset dataset;
  GroundTruth truth;
};

SimulatedData generate_dataset(const Scenario& scenario);

struct PipelineOptions {
  std::vector<double> a_grid{0.0, 2.0, 4.0, 8.0, 16.0, 32.0};
  std::optional<double> fixed_a;  // skips cross-validation
  LassoOptions lasso;
  std::optional<LambdaScale> nodewise_lambda_scale;
  int cv_folds = 5;
  DebiasMode mode = DebiasMode::Whitened;
  double alpha = 0.05;
  std::vector<Index> coverage_coordinates{1, 9};         // zero-based
  std::vector<Index> rejection_coordinates{0, 1, 2, 9};  // zero-based
  bool inference = true;
  bool varcomp = false;
  std::string basis = "diagonal-halves";
  bool sample_split = true;
  bool cross_fit = true;
  bool project_psd = false;
  int threads = 1;  // 0: hardware concurrency
};

struct ReplicationResult {
  Index rep = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string failure;
  double a = 0.0;
  double lambda = 0.0;
  double effective_sample_size = 0.0;
  double sse = 0.0;
  double kkt_residual = 0.0;
  bool converged = true;
  std::vector<char> covered;   // per coverage coordinate
  std::vector<double> sd;      // sqrt(V_hat) per coverage coordinate
  std::vector<char> rejected;  // per rejection coordinate
  int degenerate = 0;
  double sigma2_hat = 0.0;
  Vector eta_hat;
  Vector eta_star;
};

struct CoordinateSummary {
  Index j = 0;  // zero-based
  double beta_true = 0.0;
  double rate = 0.0;     // coverage or rejection rate
  double mean_sd = 0.0;  // coverage coordinates only
};

struct McReport {
  Scenario scenario;
  PipelineOptions options;
  Index reps = 0;
  Index succeeded = 0;
  Index failed = 0;
  std::vector<std::string> failures;
  std::vector<CoordinateSummary> coverage;
  std::vector<CoordinateSummary> rejection;
  double mean_sse = 0.0;
  double median_l2 = 0.0;
  double mean_effective_sample_size = 0.0;
  double mean_a = 0.0;
  double max_kkt_residual = 0.0;
  Index nonconverged = 0;
  Index degenerate = 0;
  double mae_sigma2 = 0.0;
  Vector mae_eta;
  double median_eta_l2 = 0.0;
  double wall_seconds = 0.0;  // not part of the deterministic report content
  std::vector<ReplicationResult> replications;
};

/// Seed of replication `rep`, derived from the master seed only.
std::uint64_t replication_seed(std::uint64_t master, Index rep);

ReplicationResult run_replication(const Scenario& scenario, const PipelineOptions& options,
                                  Index rep);

/// Replications run on `options.threads` workers; results are aggregated in
/// replication order so the report does not depend on scheduling.
McReport run_mc(const Scenario& scenario, Index reps, const PipelineOptions& options);

McReport summarize(const Scenario& scenario, const PipelineOptions& options,
                   std::vector<ReplicationResult> results);

struct SweepRow {
  double a = 0.0;
  double sse = 0.0;
  double mean_effective_sample_size = 0.0;
  double cov_signal = 0.0;  // first coverage coordinate
  double cov_null = 0.0;    // second coverage coordinate
  double sd_signal = 0.0;
  double sd_null = 0.0;
  Index succeeded = 0;
};

/// One fixed-a Monte-Carlo run per grid value, on common random numbers.
std::vector<SweepRow> a_sweep(const Scenario& scenario, const std::vector<double>& a_grid,
                              Index reps, const PipelineOptions& options = {});

/// Proximal-gradient reference for
///   (1/(2 T)) ||y - X b||^2 + lambda sum_j omega_j |b_j|.
Vector dense_lasso(const Matrix& X, const Vector& y, double normalizer, double lambda,
                   const Vector& omega, double tolerance = 1e-13, int max_iterations = 1000000);

struct DenseOracle {
  Matrix sigma_a;   // N x N block diagonal
  Matrix inv_sqrt;  // from a dense symmetric eigendecomposition
  double effective_sample_size = 0.0;
  Matrix X;  // whitened, stacked
  Vector y;
  Vector omega;
  Vector beta;
};

/// Dense brute-force version of whitening and the weighted Lasso. Guarded to N <= 2000.
DenseOracle dense_oracle_pipeline(const ClusteredDataset& dataset, double a, double lambda,
                                  const Vector& weights = Vector(), bool standardize = true);

}  // namespace qlmm
