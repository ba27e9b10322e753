#pragma once

#include "qlmm/model.hpp"

#include <Eigen/Dense>

#include <random>
#include <vector>

namespace qlmm::test {

inline Matrix gaussian(std::mt19937_64& rng, Index rows, Index cols) {
  std::normal_distribution<double> z;
  Matrix m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = z(rng);
  return m;
}

inline Vector gaussian(std::mt19937_64& rng, Index n) { return gaussian(rng, n, 1).col(0); }

inline Index uniform_index(std::mt19937_64& rng, Index lo, Index hi) {
  return std::uniform_int_distribution<Index>(lo, hi)(rng);
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Cluster sizes drawn from [m_lo, m_hi]; Gaussian y, X and Z.
inline ClusteredDataset random_dataset(std::mt19937_64& rng, Index n, Index m_lo, Index m_hi,
                                       Index p, Index q) {
  std::vector<Cluster> clusters;
  for (Index i = 0; i < n; ++i) {
    const Index m = uniform_index(rng, m_lo, m_hi);
    Cluster c;
    c.id = std::to_string(i + 1);
    c.X = gaussian(rng, m, p);
    c.Z = gaussian(rng, m, q);
    c.y = gaussian(rng, m);
    clusters.push_back(std::move(c));
  }
  return ClusteredDataset(std::move(clusters), p, q);
}

/// Random symmetric positive definite matrix with eigenvalues in [lo, hi].
inline Matrix random_spd(std::mt19937_64& rng, Index q, double lo, double hi) {
  Eigen::HouseholderQR<Matrix> qr(gaussian(rng, q, q));
  const Matrix Q = qr.householderQ();
  Vector e(q);
  for (Index k = 0; k < q; ++k) e(k) = uniform(rng, lo, hi);
  return Q * e.asDiagonal() * Q.transpose();
}

/// Dense (a Z Z^T + I)^{power} from a self-adjoint eigendecomposition.
inline Matrix dense_proxy_power(const Matrix& Z, double a, double power) {
  Matrix s = a * Z * Z.transpose();
  s.diagonal().array() += 1.0;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(s);
  return eig.eigenvectors() * eig.eigenvalues().array().pow(power).matrix().asDiagonal() *
         eig.eigenvectors().transpose();
}

/// Stacks whitened blocks computed with dense_proxy_power.
inline void dense_whiten(const ClusteredDataset& d, double a, Matrix& X, Vector& y, double& T) {
  X.resize(d.total_observations(), d.p());
  y.resize(d.total_observations());
  T = 0.0;
  Index row = 0;
  for (const auto& c : d.clusters()) {
    const Matrix w = dense_proxy_power(c.Z, a, -0.5);
    X.middleRows(row, c.size()) = w * c.X;
    y.segment(row, c.size()) = w * c.y;
    T += dense_proxy_power(c.Z, a, -1.0).trace();
    row += c.size();
  }
}

}  // namespace qlmm::test
