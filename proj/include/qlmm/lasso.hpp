#pragma once

#include "qlmm/model.hpp"
#include "qlmm/proxy.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace qlmm {

/// Which sample size enters sigma * sqrt(2 log p / n) when lambda is automatic.
enum class LambdaScale {
  Observations,         // n = N, the total row count
  EffectiveSampleSize,  // n = Tr(Sigma_a^{-1})
};

struct LassoOptions {
  std::optional<double> lambda;  // nullopt: scaled-Lasso noise level times default_lambda
  Vector weights;                // per-coordinate penalty weights; empty means all ones
  std::vector<Index> unpenalized;
  bool standardize = true;
  int max_sweeps = 100000;
  double tolerance = 1e-7;
  double kkt_tolerance = 1e-7;
  LambdaScale lambda_scale = LambdaScale::EffectiveSampleSize;
  int scaled_max_updates = 50;
  double scaled_tolerance = 1e-4;
  bool record_trace = false;
};

struct FixedEffectsFit {
  Vector beta;
  double a = 0.0;
  double lambda = 0.0;
  double effective_sample_size = 0.0;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
  double kkt_residual = 0.0;  // largest stationarity violation at beta
  Vector penalty_weights;  // weights actually applied (user weights times column scale)
  std::optional<double> sigma_init;
  bool sigma_converged = true;
  std::vector<double> objective_trace;
};

/// Lazily computed columns of X_a^T X_a, accumulated cluster by cluster.
/// Not thread-safe; give each worker its own cache.
class GramCache {
 public:
  explicit GramCache(const TransformedDataset& data);

  const TransformedDataset& data() const { return *data_; }
  Index p() const { return data_->p; }
  const Vector& diagonal() const { return diagonal_; }
  const Vector& column(Index k);
  /// X_a^T v for a vector stored in per-cluster blocks.
  Vector cross(const std::vector<Vector>& blocks) const;
  double squared_norm(const std::vector<Vector>& blocks) const;

 private:
  const TransformedDataset* data_;
  Vector diagonal_;
  std::vector<Vector> columns_;
};

/// Weighted Lasso expressed through sufficient statistics:
///   (1/(2T)) (yty - 2 b^T xty + b^T G b) + lambda sum_j omega_j |b_j|
/// Coordinates flagged in `excluded` stay at zero.
struct LassoProblem {
  Vector xty;
  double yty = 0.0;
  double normalizer = 0.0;
  Vector omega;
  std::vector<char> excluded;
};

struct LassoSolution {
  Vector beta;
  int sweeps = 0;
  bool converged = false;
  double objective = 0.0;
  std::vector<double> trace;
};

LassoSolution solve_lasso(GramCache& gram, const LassoProblem& problem, double lambda,
                          const Vector& warm_start, const LassoOptions& options);

/// Largest KKT violation of `beta` for the given problem.
double kkt_violation(GramCache& gram, const LassoProblem& problem, double lambda,
                     const Vector& beta);

/// Objective value of `beta` for the given problem.
double lasso_objective(GramCache& gram, const LassoProblem& problem, double lambda,
                       const Vector& beta);

struct ScaledLassoResult {
  double sigma = 0.0;
  Vector beta;
  double lambda = 0.0;
  int updates = 0;
  bool converged = false;
};

/// Joint (beta, sigma) fixed point of the scaled Lasso for a generic problem
/// whose rows count is `rows` and whose universal level uses log(p_for_level).
ScaledLassoResult scaled_lasso(GramCache& gram, const LassoProblem& problem, Index rows,
                               Index p_for_level, const LassoOptions& options);

/// Column scales sqrt(G_jj / T) (ones when standardization is off) times user weights.
Vector effective_penalty_weights(const GramCache& gram, const LassoOptions& options);

LassoProblem make_response_problem(GramCache& gram, const LassoOptions& options);

FixedEffectsFit lasso_fit(const TransformedDataset& data, const LassoOptions& options);
FixedEffectsFit lasso_fit(GramCache& gram, const LassoOptions& options);

ScaledLassoResult scaled_lasso_noise(const TransformedDataset& data,
                                     const LassoOptions& options = {});

/// sigma * sqrt(2 log p / n).
double default_lambda(double sigma, Index p, double n);

struct CvOptions {
  int folds = 5;
  std::uint64_t seed = 0;
};

struct CvPoint {
  double a = 0.0;
  double criterion = 0.0;
  int folds_used = 0;
};

struct CvResult {
  double a_star = 0.0;
  std::vector<CvPoint> points;
  std::vector<std::string> warnings;
};

/// Cluster-level K-fold cross-validation of the proxy constant. The held-out
/// criterion is the raw-scale residual sum of squares; ties go to the smaller a.
CvResult cross_validate_a(const ClusteredDataset& dataset, const std::vector<double>& a_grid,
                          const LassoOptions& options, const CvOptions& cv = {});

/// Cluster assignment used by cross_validate_a: fold index per cluster.
std::vector<int> cluster_folds(Index n, int folds, std::uint64_t seed);

struct RidgeWeights {
  Vector weights;
  Vector ridge_beta;
  double ridge_penalty = 0.0;
};

/// Normalized inverse-magnitude ridge weights, summing to p. The ridge
/// penalty is picked from `penalty_grid` by cluster-level cross-validation.
RidgeWeights ridge_weights(const ClusteredDataset& dataset, double a,
                           const std::vector<double>& penalty_grid, const CvOptions& cv = {});

/// p * (1/|b_j|) / sum_k (1/|b_k|), flooring |b_j| at machine epsilon scale.
Vector normalized_inverse_weights(const Vector& beta);

}  // namespace qlmm
