#pragma once

#include "qlmm/lasso.hpp"
#include "qlmm/model.hpp"
#include "qlmm/proxy.hpp"

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace qlmm {

/// Residual of the nodewise Lasso of column j on the remaining columns.
struct CorrectionScore {
  Index j = 0;
  Vector kappa;                 // length p - 1, coordinates other than j in order
  std::vector<Vector> w;        // per-cluster blocks of the score
  double denominator = 0.0;     // w^T (X_a)_j
  double lambda_j = 0.0;
  std::optional<double> sigma_x;
  bool converged = true;
};

struct InferenceRecord {
  Index j = 0;  // zero-based coordinate
  double beta_hat = 0.0;
  double beta_db = 0.0;
  double V_hat = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double z = 0.0;
  double p_value = 1.0;
  double alpha = 0.05;
  double lambda_j = 0.0;
  bool degenerate = false;  // zero empirical variance
  std::string warning;
};

/// Nodewise Lasso on the whitened design. Without `lambda_j` the level is
/// the scaled-Lasso noise of the nodewise regression times sqrt(2 log p / n).
/// Throws NotIdentifiable when the score is orthogonal to column j.
CorrectionScore nodewise_fit(GramCache& gram, Index j, std::optional<double> lambda_j,
                             const LassoOptions& options = {});
CorrectionScore nodewise_fit(const TransformedDataset& data, Index j,
                             std::optional<double> lambda_j, const LassoOptions& options = {});

/// Blocks of y_a - X_a beta.
std::vector<Vector> residual_blocks(const TransformedDataset& data, const Vector& beta);

double debias_coordinate(const TransformedDataset& data, const FixedEffectsFit& fit,
                         const CorrectionScore& score);
double empirical_variance(const TransformedDataset& data, const FixedEffectsFit& fit,
                          const CorrectionScore& score);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool zero_width = false;
};

/// Two-sided normal quantile z_{alpha/2} as used by confidence_interval.
double normal_quantile_upper(double alpha);

Interval confidence_interval(double beta_db, double V_hat, double alpha);

struct ZTest {
  double z = 0.0;
  double p_value = 1.0;
};

ZTest z_test(double beta_db, double V_hat, double null_value = 0.0);

enum class DebiasMode {
  Whitened,  // debias on the same whitened data as the initial fit
  A0Robust,  // initial fit at a, correction score and residuals at a = 0
};

struct InferenceOptions {
  LassoOptions lasso;
  DebiasMode mode = DebiasMode::Whitened;
  std::optional<double> lambda_j;
  std::optional<LambdaScale> nodewise_lambda_scale;  // defaults to lasso.lambda_scale
  double null_value = 0.0;
};

struct CoordinateFailure {
  Index j = 0;
  std::string message;
};

struct InferenceResult {
  FixedEffectsFit fit;
  double debias_a = 0.0;
  std::vector<InferenceRecord> records;
  std::vector<CoordinateFailure> failures;
};

/// Correction scores keyed by (data fingerprint, a, j, lambda_j).
class NodewiseCache {
 public:
  std::optional<CorrectionScore> find(std::uint64_t data, double a, Index j,
                                      std::optional<double> lambda_j) const;
  void store(std::uint64_t data, double a, const CorrectionScore& score,
             std::optional<double> lambda_j);
  std::size_t size() const;

 private:
  using Key = std::tuple<std::uint64_t, double, Index, double>;
  static Key key(std::uint64_t data, double a, Index j, std::optional<double> lambda_j);
  mutable std::mutex mutex_;
  std::map<Key, CorrectionScore> scores_;
};

/// Whitening, Lasso, nodewise scores, debiasing, empirical variance and
/// intervals for every target. Per-coordinate failures are collected.
InferenceResult infer_coordinates(const ClusteredDataset& dataset, double a,
                                  const std::vector<Index>& targets, double alpha,
                                  const InferenceOptions& options = {},
                                  NodewiseCache* cache = nullptr);

/// Benjamini-Hochberg step-up selection; returns zero-based indices, ascending.
std::vector<Index> bh_fdr(const std::vector<double>& p_values, double level);

}  // namespace qlmm
