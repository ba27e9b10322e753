#pragma once

#include "qlmm/model.hpp"

#include <memory>
#include <vector>

namespace qlmm {

/// Per-cluster factorization of the proxy covariance a Z Z^T + I.
///
/// Each block is stored as an orthonormal set of directions U together with
/// the eigenvalues e_k >= 1 of the proxy along them; on the orthogonal
/// complement the proxy is the identity. Any power of the proxy is then
/// M + U ((e^t - 1) o U^T M), which covers the inverse square root, the
/// inverse and the square root with one code path.
class ProxyWhitener {
 public:
  /// Thin SVD of Z when q < m, full eigendecomposition of the proxy otherwise.
  /// Throws InvalidArgument for a < 0 and Numerical when an eigenvalue of the
  /// proxy falls below 1.
  static ProxyWhitener build(const ClusteredDataset& dataset, double a);

  double a() const { return a_; }
  Index cluster_count() const { return static_cast<Index>(blocks_.size()); }
  Index cluster_rows(Index i) const { return block(i).rows; }
  bool is_identity() const { return identity_; }

  /// Sum over clusters of Tr((a Z Z^T + I)^{-1}).
  double effective_sample_size() const { return effective_sample_size_; }
  double trace_inverse(Index i) const { return block(i).trace_inverse; }
  /// Tr((a Z Z^T + I)^{-2}) for one cluster.
  double trace_inverse_squared(Index i) const;

  Matrix apply_inv_sqrt(Index i, const Matrix& M) const { return apply_power(i, M, -0.5); }
  Vector apply_inv_sqrt(Index i, const Vector& v) const;
  Matrix apply_inverse(Index i, const Matrix& M) const { return apply_power(i, M, -1.0); }
  Matrix apply_sqrt(Index i, const Matrix& M) const { return apply_power(i, M, 0.5); }
  Matrix apply_power(Index i, const Matrix& M, double power) const;

  /// Dense (a Z Z^T + I)^power for one cluster.
  Matrix dense_power(Index i, double power) const;

  /// Smallest eigenvalue of the proxy block seen during factorization.
  double min_eigenvalue(Index i) const { return block(i).min_eigenvalue; }

 private:
  struct Block {
    Index rows = 0;
    Matrix directions;  // rows x k, orthonormal columns
    Vector eigenvalues;  // k entries, each >= 1
    double trace_inverse = 0.0;
    double min_eigenvalue = 1.0;
  };

  const Block& block(Index i) const;

  double a_ = 0.0;
  bool identity_ = true;
  double effective_sample_size_ = 0.0;
  std::vector<Block> blocks_;
};

/// Whitened pairs (y_a, X_a) per cluster.
struct TransformedDataset {
  std::vector<Matrix> X;
  std::vector<Vector> y;
  std::vector<double> trace_inverse;  // per cluster Tr(Sigma_a^{-1})
  std::shared_ptr<const ProxyWhitener> whitener;
  double a = 0.0;
  double effective_sample_size = 0.0;
  Index p = 0;

  Index n() const { return static_cast<Index>(X.size()); }
  Index total_observations() const;
  /// Restriction to a subset of clusters; the effective sample size is
  /// recomputed from the selected blocks.
  TransformedDataset subset(const std::vector<Index>& indices) const;
};

TransformedDataset transform_dataset(const ClusteredDataset& dataset, double a);
TransformedDataset transform_dataset(const ClusteredDataset& dataset,
                                     std::shared_ptr<const ProxyWhitener> whitener);

/// sqrt(Tr(S_a^-1 S_theta S_a^-1) log p) / Tr(S_a^-1), with
/// S_theta = Z Psi Z^T + sigma2_e I per cluster.
double lambda_star(const ClusteredDataset& dataset, double a, const Matrix& psi,
                   double sigma2_e);

struct SandwichMargins {
  double lower = 0.0;  // min eig of S_theta^-1 - c_lo S_a^-1
  double upper = 0.0;  // min eig of c_hi S_a^-1 - S_theta^-1
  double c_lower = 0.0;
  double c_upper = 0.0;
};

/// Slack of the two-sided Loewner bound relating the proxy to the true
/// covariance. Both entries are >= 0 up to rounding when the bound holds.
SandwichMargins sandwich_margins(const ClusteredDataset& dataset, double a, const Matrix& psi,
                                 double sigma2_e);

}  // namespace qlmm
