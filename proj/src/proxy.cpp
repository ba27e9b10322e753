#include "qlmm/proxy.hpp"

#include "qlmm/error.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace qlmm {

namespace {

constexpr double kEigenFloor = 1.0 - 1e-10;

double min_symmetric_eigenvalue(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(m, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff();
}

void check_psd(const Matrix& psi, Index q, const char* what) {
  if (psi.rows() != q || psi.cols() != q) {
    std::ostringstream s;
    s << what << " must be " << q << " x " << q << ", got " << psi.rows() << " x " << psi.cols();
    fail(ErrorCode::DimensionMismatch, s.str());
  }
  if (q == 0) return;
  const double scale = std::max(1.0, psi.cwiseAbs().maxCoeff());
  if ((psi - psi.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    fail(ErrorCode::InvalidArgument, std::string(what) + " is not symmetric");
  if (min_symmetric_eigenvalue(psi) < -1e-10 * scale)
    fail(ErrorCode::InvalidArgument, std::string(what) + " is not positive semidefinite");
}

}  // namespace

const ProxyWhitener::Block& ProxyWhitener::block(Index i) const {
  if (i < 0 || i >= cluster_count()) fail(ErrorCode::InvalidArgument, "cluster index out of range");
  return blocks_[static_cast<std::size_t>(i)];
}

ProxyWhitener ProxyWhitener::build(const ClusteredDataset& dataset, double a) {
  if (!(a >= 0.0) || !std::isfinite(a))
    fail(ErrorCode::InvalidArgument, "proxy constant a must be finite and >= 0");
  ProxyWhitener w;
  w.a_ = a;
  w.identity_ = (a == 0.0 || dataset.q() == 0);
  w.blocks_.reserve(dataset.clusters().size());
  for (const auto& c : dataset.clusters()) {
    Block b;
    b.rows = c.size();
    if (w.identity_) {
      b.directions.resize(b.rows, 0);
      b.trace_inverse = static_cast<double>(b.rows);
    } else if (c.Z.cols() < b.rows) {
      Eigen::JacobiSVD<Matrix> svd(c.Z, Eigen::ComputeThinU);
      b.directions = svd.matrixU();
      const Vector s = svd.singularValues();
      b.eigenvalues = (a * s.array().square() + 1.0).matrix();
      b.trace_inverse = static_cast<double>(b.rows - b.eigenvalues.size()) +
                        b.eigenvalues.cwiseInverse().sum();
      b.min_eigenvalue = b.eigenvalues.size() == b.rows ? b.eigenvalues.minCoeff() : 1.0;
    } else {
      Matrix proxy = a * c.Z * c.Z.transpose();
      proxy.diagonal().array() += 1.0;
      Eigen::SelfAdjointEigenSolver<Matrix> eig(proxy);
      if (eig.info() != Eigen::Success)
        fail(ErrorCode::Numerical, "eigendecomposition of proxy block failed for cluster " + c.id);
      b.directions = eig.eigenvectors();
      b.eigenvalues = eig.eigenvalues();
      b.min_eigenvalue = b.eigenvalues.minCoeff();
      if (b.min_eigenvalue < kEigenFloor) {
        std::ostringstream s;
        s << "proxy block of cluster " << c.id << " has eigenvalue " << b.min_eigenvalue
          << " < 1";
        fail(ErrorCode::Numerical, s.str());
      }
      b.trace_inverse = b.eigenvalues.cwiseInverse().sum();
    }
    w.effective_sample_size_ += b.trace_inverse;
    w.blocks_.push_back(std::move(b));
  }
  return w;
}

double ProxyWhitener::trace_inverse_squared(Index i) const {
  const Block& b = block(i);
  return static_cast<double>(b.rows - b.eigenvalues.size()) +
         b.eigenvalues.array().square().inverse().sum();
}

Matrix ProxyWhitener::apply_power(Index i, const Matrix& M, double power) const {
  const Block& b = block(i);
  if (M.rows() != b.rows) {
    std::ostringstream s;
    s << "matrix has " << M.rows() << " rows, cluster has " << b.rows;
    fail(ErrorCode::DimensionMismatch, s.str());
  }
  if (b.directions.cols() == 0) return M;
  const Vector shift = (b.eigenvalues.array().pow(power) - 1.0).matrix();
  return M + b.directions * (shift.asDiagonal() * (b.directions.transpose() * M));
}

Vector ProxyWhitener::apply_inv_sqrt(Index i, const Vector& v) const {
  return apply_power(i, Matrix(v), -0.5).col(0);
}

Matrix ProxyWhitener::dense_power(Index i, double power) const {
  const Index m = block(i).rows;
  return apply_power(i, Matrix::Identity(m, m), power);
}

Index TransformedDataset::total_observations() const {
  Index total = 0;
  for (const auto& v : y) total += v.size();
  return total;
}

TransformedDataset TransformedDataset::subset(const std::vector<Index>& indices) const {
  TransformedDataset out;
  out.whitener = whitener;
  out.a = a;
  out.p = p;
  for (Index i : indices) {
    if (i < 0 || i >= n()) fail(ErrorCode::InvalidArgument, "cluster index out of range");
    const auto k = static_cast<std::size_t>(i);
    out.X.push_back(X[k]);
    out.y.push_back(y[k]);
    out.trace_inverse.push_back(trace_inverse[k]);
    out.effective_sample_size += trace_inverse[k];
  }
  return out;
}

TransformedDataset transform_dataset(const ClusteredDataset& dataset, double a) {
  return transform_dataset(dataset,
                           std::make_shared<const ProxyWhitener>(ProxyWhitener::build(dataset, a)));
}

TransformedDataset transform_dataset(const ClusteredDataset& dataset,
                                     std::shared_ptr<const ProxyWhitener> whitener) {
  require_valid(dataset);
  if (!whitener || whitener->cluster_count() != dataset.n())
    fail(ErrorCode::DimensionMismatch, "whitener does not match dataset");
  TransformedDataset out;
  out.a = whitener->a();
  out.p = dataset.p();
  out.effective_sample_size = whitener->effective_sample_size();
  out.X.reserve(dataset.clusters().size());
  out.y.reserve(dataset.clusters().size());
  for (Index i = 0; i < dataset.n(); ++i) {
    const Cluster& c = dataset.cluster(i);
    if (whitener->is_identity()) {
      out.X.push_back(c.X);
      out.y.push_back(c.y);
    } else {
      out.X.push_back(whitener->apply_inv_sqrt(i, c.X));
      out.y.push_back(whitener->apply_inv_sqrt(i, c.y));
    }
    out.trace_inverse.push_back(whitener->trace_inverse(i));
  }
  out.whitener = std::move(whitener);
  return out;
}

double lambda_star(const ClusteredDataset& dataset, double a, const Matrix& psi,
                   double sigma2_e) {
  require_valid(dataset);
  check_psd(psi, dataset.q(), "Psi");
  if (!(sigma2_e > 0.0)) fail(ErrorCode::InvalidArgument, "sigma2_e must be > 0");
  const ProxyWhitener w = ProxyWhitener::build(dataset, a);
  const double t = w.effective_sample_size();
  if (!(t > 0.0)) fail(ErrorCode::InvalidArgument, "effective sample size is zero");
  double numerator = 0.0;
  for (Index i = 0; i < dataset.n(); ++i) {
    numerator += sigma2_e * w.trace_inverse_squared(i);
    const Matrix& Z = dataset.cluster(i).Z;
    if (Z.cols() == 0) continue;
    const Matrix wz = w.apply_inverse(i, Z);
    numerator += (psi * (wz.transpose() * wz)).trace();
  }
  return std::sqrt(numerator * std::log(static_cast<double>(dataset.p()))) / t;
}

SandwichMargins sandwich_margins(const ClusteredDataset& dataset, double a, const Matrix& psi,
                                 double sigma2_e) {
  require_valid(dataset);
  check_psd(psi, dataset.q(), "Psi");
  if (!(a > 0.0)) fail(ErrorCode::InvalidArgument, "sandwich bound requires a > 0");
  if (!(sigma2_e > 0.0)) fail(ErrorCode::InvalidArgument, "sigma2_e must be > 0");
  if (dataset.q() == 0) fail(ErrorCode::InvalidArgument, "sandwich bound requires q > 0");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(psi, Eigen::EigenvaluesOnly);
  const double lmin = eig.eigenvalues().minCoeff();
  const double lmax = eig.eigenvalues().maxCoeff();
  if (!(lmin > 1e-12 * std::max(1.0, lmax)))
    fail(ErrorCode::InvalidArgument, "Psi is singular; the sandwich bound needs Psi > 0");

  SandwichMargins out;
  out.c_lower = std::min(1.0 / sigma2_e, a / lmax);
  out.c_upper = std::max(1.0 / sigma2_e, a / lmin);
  out.lower = std::numeric_limits<double>::infinity();
  out.upper = std::numeric_limits<double>::infinity();
  const ProxyWhitener w = ProxyWhitener::build(dataset, a);
  for (Index i = 0; i < dataset.n(); ++i) {
    const Matrix& Z = dataset.cluster(i).Z;
    Matrix theta = Z * psi * Z.transpose();
    theta.diagonal().array() += sigma2_e;
    const Matrix theta_inv = theta.llt().solve(Matrix::Identity(Z.rows(), Z.rows()));
    const Matrix proxy_inv = w.dense_power(i, -1.0);
    Matrix lo = theta_inv - out.c_lower * proxy_inv;
    Matrix hi = out.c_upper * proxy_inv - theta_inv;
    out.lower = std::min(out.lower, min_symmetric_eigenvalue(0.5 * (lo + lo.transpose())));
    out.upper = std::min(out.upper, min_symmetric_eigenvalue(0.5 * (hi + hi.transpose())));
  }
  return out;
}

}  // namespace qlmm
