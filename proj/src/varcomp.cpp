#include "qlmm/varcomp.hpp"

#include "qlmm/error.hpp"
#include "qlmm/proxy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace qlmm {

SplitPlan split_clusters(const ClusteredDataset& dataset, std::uint64_t seed) {
  const Index n = dataset.n();
  if (n < 2) fail(ErrorCode::InvalidArgument, "sample splitting needs at least 2 clusters");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  SplitPlan plan;
  plan.seed = seed;
  const auto half = static_cast<std::ptrdiff_t>(n / 2);
  plan.first.assign(order.begin(), order.begin() + half);
  plan.second.assign(order.begin() + half, order.end());
  std::sort(plan.first.begin(), plan.first.end());
  std::sort(plan.second.begin(), plan.second.end());
  return plan;
}

namespace {

constexpr double kRankThreshold = 1e-10;

// Orthonormal basis of the column span of Z.
Matrix span_basis(const Matrix& Z, Index& rank) {
  if (Z.cols() == 0 || Z.rows() == 0) {
    rank = 0;
    return Matrix(Z.rows(), 0);
  }
  Eigen::ColPivHouseholderQR<Matrix> qr(Z);
  qr.setThreshold(kRankThreshold);
  rank = qr.rank();
  Matrix q = qr.householderQ() * Matrix::Identity(Z.rows(), rank);
  return q;
}

std::vector<Index> usable_clusters(const ClusteredDataset& dataset,
                                   const std::vector<Index>& clusters) {
  std::vector<Index> kept;
  for (Index i : clusters) {
    if (i < 0 || i >= dataset.n()) fail(ErrorCode::InvalidArgument, "cluster index out of range");
    if (dataset.cluster(i).size() >= 2) kept.push_back(i);
  }
  return kept;
}

double finish_sigma2(double numerator, double denominator) {
  if (!(denominator > 0.0))
    fail(ErrorCode::InvalidArgument,
         "noise variance is not estimable: every cluster has m_i <= rank(Z_i)");
  return numerator / denominator;
}

void check_basis(const std::vector<Matrix>& basis, Index q) {
  if (basis.empty()) fail(ErrorCode::InvalidArgument, "variance basis is empty");
  for (const auto& g : basis)
    if (g.rows() != q || g.cols() != q)
      fail(ErrorCode::DimensionMismatch, "basis matrices must be q x q");
}

// Per-cluster ingredients with V = S_a^{-1} Z:
//   C = Z^T V, D = V^T V, P = V^T M V.
template <class Projected>
EtaSystem assemble(const ClusteredDataset& dataset, const std::vector<Index>& clusters,
                   double sigma2_e, double a, const std::vector<Matrix>& basis,
                   Projected projected_moment) {
  check_basis(basis, dataset.q());
  const std::vector<Index> kept = usable_clusters(dataset, clusters);
  const ClusteredDataset part = dataset.subset(kept);
  const ProxyWhitener whitener = ProxyWhitener::build(part, a);
  const auto d = static_cast<Index>(basis.size());
  EtaSystem sys{Matrix::Zero(d, d), Vector::Zero(d)};
  std::vector<Matrix> gc(basis.size());
  for (Index k = 0; k < part.n(); ++k) {
    const Matrix& Z = part.cluster(k).Z;
    const Matrix V = whitener.apply_inverse(k, Z);
    const Matrix C = Z.transpose() * V;
    const Matrix D = V.transpose() * V;
    const Matrix P = projected_moment(kept[static_cast<std::size_t>(k)], V);
    for (Index j = 0; j < d; ++j) gc[static_cast<std::size_t>(j)] = basis[static_cast<std::size_t>(j)] * C;
    for (Index j = 0; j < d; ++j) {
      const Matrix& gj = basis[static_cast<std::size_t>(j)];
      for (Index l = j; l < d; ++l) {
        const double v = (gc[static_cast<std::size_t>(j)].cwiseProduct(
                              gc[static_cast<std::size_t>(l)].transpose()))
                             .sum();
        sys.A(j, l) += v;
        if (l != j) sys.A(l, j) += v;
      }
      sys.b[j] += gj.cwiseProduct(P).sum() - sigma2_e * gj.cwiseProduct(D).sum();
    }
  }
  return sys;
}

Vector solve_system(const EtaSystem& sys) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sys.A);
  const double top = eig.eigenvalues().maxCoeff();
  const double bottom = eig.eigenvalues().minCoeff();
  if (!(top > 0.0) || bottom <= 1e-12 * top) {
    std::ostringstream s;
    s << "moment system is singular; deficient basis combination (coefficients):";
    for (Index j = 0; j < eig.eigenvectors().rows(); ++j) s << ' ' << eig.eigenvectors()(j, 0);
    fail(ErrorCode::NotIdentifiable, s.str());
  }
  return sys.A.ldlt().solve(sys.b);
}

}  // namespace

ProjectionResidual projection_residuals(const Cluster& cluster, const Vector& beta) {
  ProjectionResidual out;
  out.residual = cluster.y - cluster.X * beta;
  const Matrix q = span_basis(cluster.Z, out.rank);
  out.orthogonal = out.residual - q * (q.transpose() * out.residual);
  return out;
}

double sigma2_estimate(const ClusteredDataset& dataset, const std::vector<Index>& clusters,
                       const Vector& beta) {
  if (beta.size() != dataset.p()) fail(ErrorCode::DimensionMismatch, "beta must have length p");
  double num = 0.0, den = 0.0;
  for (Index i : usable_clusters(dataset, clusters)) {
    const ProjectionResidual r = projection_residuals(dataset.cluster(i), beta);
    num += r.orthogonal.squaredNorm();
    den += static_cast<double>(dataset.cluster(i).size() - r.rank);
  }
  return finish_sigma2(num, den);
}

double sigma2_from_moments(const ClusteredDataset& dataset, const std::vector<Index>& clusters,
                           const std::vector<Matrix>& moments) {
  if (moments.size() != clusters.size())
    fail(ErrorCode::DimensionMismatch, "one moment matrix per cluster is required");
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < clusters.size(); ++k) {
    const Cluster& c = dataset.cluster(clusters[k]);
    if (c.size() < 2) continue;
    Index rank = 0;
    const Matrix q = span_basis(c.Z, rank);
    num += moments[k].trace() - (q.transpose() * moments[k] * q).trace();
    den += static_cast<double>(c.size() - rank);
  }
  return finish_sigma2(num, den);
}

DesignGram design_gram(const std::vector<Matrix>& basis) {
  if (basis.empty()) fail(ErrorCode::InvalidArgument, "variance basis is empty");
  const Index q = basis.front().rows();
  check_basis(basis, q);
  for (const auto& g : basis)
    if ((g - g.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, g.cwiseAbs().maxCoeff()))
      fail(ErrorCode::InvalidArgument, "basis matrices must be symmetric");
  const auto d = static_cast<Index>(basis.size());
  DesignGram out;
  out.gram.resize(d, d);
  for (Index j = 0; j < d; ++j)
    for (Index k = 0; k < d; ++k)
      out.gram(j, k) = basis[static_cast<std::size_t>(j)]
                           .cwiseProduct(basis[static_cast<std::size_t>(k)].transpose())
                           .sum();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(out.gram, Eigen::EigenvaluesOnly);
  out.min_eigenvalue = eig.eigenvalues().minCoeff();
  out.max_eigenvalue = eig.eigenvalues().maxCoeff();
  if (!(out.min_eigenvalue > 1e-10 * std::max(1.0, out.max_eigenvalue)))
    fail(ErrorCode::NotIdentifiable, "basis matrices are linearly dependent");
  out.condition = out.max_eigenvalue / out.min_eigenvalue;
  return out;
}

EtaSystem eta_system(const ClusteredDataset& dataset, const std::vector<Index>& clusters,
                     const std::vector<Matrix>& moments, double sigma2_e, double a,
                     const std::vector<Matrix>& basis) {
  if (moments.size() != clusters.size())
    fail(ErrorCode::DimensionMismatch, "one moment matrix per cluster is required");
  std::vector<std::size_t> slot(static_cast<std::size_t>(dataset.n()), 0);
  for (std::size_t k = 0; k < clusters.size(); ++k) slot[static_cast<std::size_t>(clusters[k])] = k;
  return assemble(dataset, clusters, sigma2_e, a, basis, [&](Index i, const Matrix& V) {
    return Matrix(V.transpose() * moments[slot[static_cast<std::size_t>(i)]] * V);
  });
}

Vector eta_from_moments(const ClusteredDataset& dataset, const std::vector<Index>& clusters,
                        const std::vector<Matrix>& moments, double sigma2_e, double a,
                        const std::vector<Matrix>& basis) {
  return solve_system(eta_system(dataset, clusters, moments, sigma2_e, a, basis));
}

Vector eta_estimate(const ClusteredDataset& dataset, const std::vector<Index>& clusters,
                    const Vector& beta, double sigma2_e, double a,
                    const std::vector<Matrix>& basis) {
  if (beta.size() != dataset.p()) fail(ErrorCode::DimensionMismatch, "beta must have length p");
  const EtaSystem sys = assemble(dataset, clusters, sigma2_e, a, basis, [&](Index i, const Matrix& V) {
    const Cluster& c = dataset.cluster(i);
    const Vector u = V.transpose() * (c.y - c.X * beta);
    return Matrix(u * u.transpose());
  });
  return solve_system(sys);
}

double eta_objective(const ClusteredDataset& dataset, const std::vector<Index>& clusters,
                     const std::vector<Matrix>& moments, double sigma2_e, double a,
                     const std::vector<Matrix>& basis, const Vector& eta) {
  const Matrix psi = psi_from_eta(eta, basis);
  const ClusteredDataset part = dataset.subset(clusters);
  const ProxyWhitener whitener = ProxyWhitener::build(part, a);
  double total = 0.0;
  for (Index k = 0; k < part.n(); ++k) {
    const Cluster& c = part.cluster(k);
    if (c.size() < 2) continue;
    const Matrix half = whitener.dense_power(k, -0.5);
    Matrix inner = moments[static_cast<std::size_t>(k)] - c.Z * psi * c.Z.transpose();
    inner.diagonal().array() -= sigma2_e;
    total += (half * inner * half).squaredNorm();
  }
  return total;
}

Matrix psi_from_eta(const Vector& eta, const std::vector<Matrix>& basis) {
  if (static_cast<std::size_t>(eta.size()) != basis.size())
    fail(ErrorCode::DimensionMismatch, "eta length must equal the basis size");
  if (basis.empty()) return Matrix();
  Matrix out = Matrix::Zero(basis.front().rows(), basis.front().cols());
  for (std::size_t j = 0; j < basis.size(); ++j) out += eta[static_cast<Index>(j)] * basis[j];
  return out;
}

Vector eta_from_psi(const Matrix& psi, const std::vector<Matrix>& basis) {
  const DesignGram g = design_gram(basis);
  Vector rhs(static_cast<Index>(basis.size()));
  for (std::size_t j = 0; j < basis.size(); ++j)
    rhs[static_cast<Index>(j)] = basis[j].cwiseProduct(psi.transpose()).sum();
  return g.gram.ldlt().solve(rhs);
}

std::vector<Matrix> make_basis(const std::string& name, Index q) {
  if (q < 1) fail(ErrorCode::InvalidArgument, "variance basis needs q >= 1");
  std::vector<Matrix> out;
  if (name == "identity") {
    out.push_back(Matrix::Identity(q, q));
  } else if (name == "free-diagonal") {
    for (Index j = 0; j < q; ++j) {
      Matrix g = Matrix::Zero(q, q);
      g(j, j) = 1.0;
      out.push_back(std::move(g));
    }
  } else if (name == "diagonal-halves") {
    if (q < 2) fail(ErrorCode::InvalidArgument, "diagonal-halves basis needs q >= 2");
    const Index h = q / 2;
    Matrix g1 = Matrix::Zero(q, q), g2 = Matrix::Zero(q, q);
    g1.diagonal().head(h).setOnes();
    g2.diagonal().tail(q - h).setOnes();
    out.push_back(std::move(g1));
    out.push_back(std::move(g2));
  } else {
    fail(ErrorCode::InvalidArgument, "unknown basis preset '" + name + "'");
  }
  return out;
}

Matrix nearest_psd(const Matrix& m) {
  const Matrix sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  const Vector clipped = eig.eigenvalues().cwiseMax(0.0);
  return eig.eigenvectors() * clipped.asDiagonal() * eig.eigenvectors().transpose();
}

VarCompHalf varcomp_half(const ClusteredDataset& dataset, const std::vector<Index>& target,
                         const std::vector<Index>& beta_clusters, const VarCompOptions& options) {
  const ClusteredDataset fold = dataset.subset(beta_clusters);
  VarCompHalf half;
  half.a = options.a;
  if (options.a_grid.size() > 1)
    half.a = cross_validate_a(fold, options.a_grid, options.lasso, options.cv).a_star;
  else if (options.a_grid.size() == 1)
    half.a = options.a_grid.front();
  const FixedEffectsFit fit = lasso_fit(transform_dataset(fold, half.a), options.lasso);
  half.lambda = fit.lambda;
  half.sigma2_e = sigma2_estimate(dataset, target, fit.beta);
  if (half.sigma2_e < 0.0) {
    half.sigma2_e = 0.0;
    half.clamped = true;
  }
  half.eta = eta_estimate(dataset, target, fit.beta, half.sigma2_e, half.a, options.basis);
  return half;
}

VarCompFit cross_fit_varcomp(const ClusteredDataset& dataset, const VarCompOptions& options) {
  require_valid(dataset);
  VarCompFit out;
  out.basis = options.basis;
  out.design_condition = design_gram(options.basis).condition;
  check_basis(options.basis, dataset.q());
  out.sample_split = options.sample_split;
  if (options.sample_split) {
    out.split = split_clusters(dataset, options.seed);
    out.cross_fit = options.cross_fit;
    out.halves.push_back(varcomp_half(dataset, out.split.first, out.split.second, options));
    if (options.cross_fit)
      out.halves.push_back(varcomp_half(dataset, out.split.second, out.split.first, options));
  } else {
    out.split.seed = options.seed;
    out.split.first.resize(static_cast<std::size_t>(dataset.n()));
    std::iota(out.split.first.begin(), out.split.first.end(), Index{0});
    out.split.second = out.split.first;
    out.halves.push_back(varcomp_half(dataset, out.split.first, out.split.second, options));
  }

  out.eta_hat = Vector::Zero(static_cast<Index>(options.basis.size()));
  for (const auto& h : out.halves) {
    out.sigma2_e_hat += h.sigma2_e;
    out.eta_hat += h.eta;
    out.sigma2_clamped = out.sigma2_clamped || h.clamped;
  }
  const double count = static_cast<double>(out.halves.size());
  out.sigma2_e_hat /= count;
  out.eta_hat /= count;
  if (options.project_psd) {
    out.eta_hat = eta_from_psi(nearest_psd(psi_from_eta(out.eta_hat, options.basis)), options.basis);
    out.psd_projected = true;
  }
  out.Psi_hat = psi_from_eta(out.eta_hat, options.basis);
  return out;
}

}  // namespace qlmm
