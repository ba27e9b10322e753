#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace qlmm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// One cluster of the mixed model y = X beta + Z gamma + eps.
struct Cluster {
  std::string id;
  Vector y;
  Matrix X;  // m x p
  Matrix Z;  // m x q, zero columns when there are no random effects

  Index size() const { return y.size(); }
};

struct Dimensions {
  Index n = 0;
  Index p = 0;
  Index q = 0;
  Index N = 0;
  std::vector<Index> m;
};

/// Clusters are kept as separate blocks; nothing in the library ever
/// stacks them into a single N x p matrix.
class ClusteredDataset {
 public:
  ClusteredDataset() = default;
  ClusteredDataset(std::vector<Cluster> clusters, Index p, Index q);

  /// Infers p and q from the first cluster.
  explicit ClusteredDataset(std::vector<Cluster> clusters);

  const std::vector<Cluster>& clusters() const { return clusters_; }
  const Cluster& cluster(Index i) const { return clusters_[static_cast<std::size_t>(i)]; }
  Index n() const { return static_cast<Index>(clusters_.size()); }
  Index p() const { return p_; }
  Index q() const { return q_; }
  Index total_observations() const;
  Index max_cluster_size() const;

  /// Dataset restricted to the listed clusters, in the listed order.
  ClusteredDataset subset(const std::vector<Index>& indices) const;

 private:
  std::vector<Cluster> clusters_;
  Index p_ = 0;
  Index q_ = 0;
};

struct Violation {
  std::string cluster_id;
  std::string message;
};

/// Every dimensional or finiteness problem in the dataset. Empty when valid.
std::vector<Violation> validate_dataset(const ClusteredDataset& dataset);

/// Throws DimensionMismatch listing the violations when the dataset is invalid.
void require_valid(const ClusteredDataset& dataset);

Dimensions dimensions(const ClusteredDataset& dataset);

/// Copy of the dataset with a column of ones prepended to every X block.
ClusteredDataset with_intercept(const ClusteredDataset& dataset);

struct FixedEffects {
  Vector beta;

  std::vector<Index> support() const;
};

struct VarComps {
  double sigma2_e = 0.0;
  Vector eta;
  std::vector<Matrix> basis;

  Matrix psi() const;
};

/// FNV-1a over the numeric content; used to key caches.
std::uint64_t fingerprint(const ClusteredDataset& dataset);

}  // namespace qlmm
