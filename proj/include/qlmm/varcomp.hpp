#pragma once

#include "qlmm/lasso.hpp"
#include "qlmm/model.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace qlmm {

struct SplitPlan {
  std::vector<Index> first;   // clusters used for the variance components
  std::vector<Index> second;  // clusters used for the initial beta
  std::uint64_t seed = 0;
};

/// Uniformly random balanced split of the clusters; reproducible from seed.
SplitPlan split_clusters(const ClusteredDataset& dataset, std::uint64_t seed);

struct ProjectionResidual {
  Vector residual;    // y - X beta
  Vector orthogonal;  // component orthogonal to the column span of Z
  Index rank = 0;     // numerical rank of Z
};

/// Rank threshold is relative (1e-10) and applied to a column-pivoted QR of Z.
ProjectionResidual projection_residuals(const Cluster& cluster, const Vector& beta);

/// Sum ||P_perp r_i||^2 / Sum (m_i - rank Z_i) over the listed clusters.
/// Clusters with a single observation are skipped.
double sigma2_estimate(const ClusteredDataset& dataset, const std::vector<Index>& clusters,
                       const Vector& beta);

/// Same ratio with r_i r_i^T replaced by arbitrary second-moment matrices.
double sigma2_from_moments(const ClusteredDataset& dataset, const std::vector<Index>& clusters,
                           const std::vector<Matrix>& moments);

struct DesignGram {
  Matrix gram;  // Tr(G_j G_k)
  double min_eigenvalue = 0.0;
  double max_eigenvalue = 0.0;
  double condition = 0.0;
};

/// Throws NotIdentifiable when the basis is linearly dependent.
DesignGram design_gram(const std::vector<Matrix>& basis);

/// Normal equations of the weighted moment-matching objective.
struct EtaSystem {
  Matrix A;
  Vector b;
};

EtaSystem eta_system(const ClusteredDataset& dataset, const std::vector<Index>& clusters,
                     const std::vector<Matrix>& moments, double sigma2_e, double a,
                     const std::vector<Matrix>& basis);

/// Minimizer over eta of
///   sum_i || S_a^{-1/2} (M_i - Z Psi_eta Z^T - sigma2 I) S_a^{-1/2} ||_F^2
/// for second moments M_i.
Vector eta_from_moments(const ClusteredDataset& dataset, const std::vector<Index>& clusters,
                        const std::vector<Matrix>& moments, double sigma2_e, double a,
                        const std::vector<Matrix>& basis);

/// Moment matching with M_i = r_i r_i^T for r_i = y_i - X_i beta.
Vector eta_estimate(const ClusteredDataset& dataset, const std::vector<Index>& clusters,
                    const Vector& beta, double sigma2_e, double a,
                    const std::vector<Matrix>& basis);

/// The moment-matching objective itself (dense evaluation, for diagnostics).
double eta_objective(const ClusteredDataset& dataset, const std::vector<Index>& clusters,
                     const std::vector<Matrix>& moments, double sigma2_e, double a,
                     const std::vector<Matrix>& basis, const Vector& eta);

Matrix psi_from_eta(const Vector& eta, const std::vector<Matrix>& basis);

/// Least-squares coordinates of a symmetric matrix in the basis.
Vector eta_from_psi(const Matrix& psi, const std::vector<Matrix>& basis);

/// Named presets: "diagonal-halves", "identity", "free-diagonal".
std::vector<Matrix> make_basis(const std::string& name, Index q);

struct VarCompOptions {
  double a = 1.0;
  std::vector<double> a_grid;  // when non-empty, a is chosen by CV on the beta fold
  LassoOptions lasso;
  CvOptions cv;
  std::vector<Matrix> basis;
  std::uint64_t seed = 0;
  bool sample_split = true;  // false: beta and components both use every cluster
  bool cross_fit = true;
  bool project_psd = false;
};

struct VarCompHalf {
  double sigma2_e = 0.0;
  Vector eta;
  double a = 0.0;
  double lambda = 0.0;
  bool clamped = false;
};

struct VarCompFit {
  double sigma2_e_hat = 0.0;
  Vector eta_hat;
  Matrix Psi_hat;
  std::vector<Matrix> basis;
  SplitPlan split;
  bool sample_split = false;
  bool cross_fit = false;
  bool sigma2_clamped = false;
  bool psd_projected = false;
  double design_condition = 0.0;
  std::vector<VarCompHalf> halves;
};

/// One directional estimate: beta on `beta_clusters`, components on `target`.
VarCompHalf varcomp_half(const ClusteredDataset& dataset, const std::vector<Index>& target,
                         const std::vector<Index>& beta_clusters, const VarCompOptions& options);

VarCompFit cross_fit_varcomp(const ClusteredDataset& dataset, const VarCompOptions& options);

/// Nearest positive semidefinite matrix in Frobenius norm.
Matrix nearest_psd(const Matrix& m);

}  // namespace qlmm
