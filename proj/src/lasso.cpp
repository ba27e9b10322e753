#include "qlmm/lasso.hpp"

#include "qlmm/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace qlmm {

GramCache::GramCache(const TransformedDataset& data)
    : data_(&data), diagonal_(Vector::Zero(data.p)), columns_(static_cast<std::size_t>(data.p)) {
  for (const auto& X : data.X) diagonal_ += X.colwise().squaredNorm().transpose();
}

const Vector& GramCache::column(Index k) {
  Vector& col = columns_[static_cast<std::size_t>(k)];
  if (col.size() == 0) {
    col = Vector::Zero(data_->p);
    for (const auto& X : data_->X) col.noalias() += X.transpose() * X.col(k);
  }
  return col;
}

Vector GramCache::cross(const std::vector<Vector>& blocks) const {
  if (blocks.size() != data_->X.size())
    fail(ErrorCode::DimensionMismatch, "block count does not match the dataset");
  Vector out = Vector::Zero(data_->p);
  for (std::size_t i = 0; i < blocks.size(); ++i) out.noalias() += data_->X[i].transpose() * blocks[i];
  return out;
}

double GramCache::squared_norm(const std::vector<Vector>& blocks) const {
  double s = 0.0;
  for (const auto& b : blocks) s += b.squaredNorm();
  return s;
}

namespace {

double soft_threshold(double z, double t) {
  if (z > t) return z - t;
  if (z < -t) return z + t;
  return 0.0;
}

Vector gram_times(GramCache& gram, const Vector& beta) {
  Vector out = Vector::Zero(beta.size());
  for (Index k = 0; k < beta.size(); ++k)
    if (beta[k] != 0.0) out.noalias() += gram.column(k) * beta[k];
  return out;
}

double objective_from(const LassoProblem& problem, double lambda, const Vector& beta,
                      const Vector& gb) {
  const double loss = (problem.yty - 2.0 * beta.dot(problem.xty) + beta.dot(gb)) /
                      (2.0 * problem.normalizer);
  return loss + lambda * problem.omega.cwiseProduct(beta.cwiseAbs()).sum();
}

double kkt_from(const GramCache& gram, const LassoProblem& problem, double lambda,
                const Vector& beta, const Vector& gb) {
  double worst = 0.0;
  const double t = problem.normalizer;
  for (Index j = 0; j < beta.size(); ++j) {
    if (!problem.excluded.empty() && problem.excluded[static_cast<std::size_t>(j)]) continue;
    if (gram.diagonal()[j] == 0.0) continue;
    const double g = (problem.xty[j] - gb[j]) / t;
    const double thr = lambda * problem.omega[j];
    double v;
    if (beta[j] != 0.0)
      v = std::abs(g - thr * (beta[j] > 0 ? 1.0 : -1.0));
    else
      v = std::max(0.0, std::abs(g) - thr);
    worst = std::max(worst, v);
  }
  return worst;
}

}  // namespace

double kkt_violation(GramCache& gram, const LassoProblem& problem, double lambda,
                     const Vector& beta) {
  return kkt_from(gram, problem, lambda, beta, gram_times(gram, beta));
}

double lasso_objective(GramCache& gram, const LassoProblem& problem, double lambda,
                       const Vector& beta) {
  return objective_from(problem, lambda, beta, gram_times(gram, beta));
}

LassoSolution solve_lasso(GramCache& gram, const LassoProblem& problem, double lambda,
                          const Vector& warm_start, const LassoOptions& options) {
  const Index p = problem.xty.size();
  if (p != gram.p() || problem.omega.size() != p)
    fail(ErrorCode::DimensionMismatch, "lasso problem does not match the design");
  if (!(problem.normalizer > 0.0))
    fail(ErrorCode::InvalidArgument, "effective sample size must be positive");
  if (!(lambda >= 0.0)) fail(ErrorCode::InvalidArgument, "lambda must be >= 0");

  const double t = problem.normalizer;
  const auto& diag = gram.diagonal();
  auto skip = [&](Index j) {
    return diag[j] == 0.0 ||
           (!problem.excluded.empty() && problem.excluded[static_cast<std::size_t>(j)]);
  };

  LassoSolution sol;
  sol.beta = warm_start.size() == p ? warm_start : Vector::Zero(p);
  for (Index j = 0; j < p; ++j)
    if (skip(j)) sol.beta[j] = 0.0;
  Vector gb = gram_times(gram, sol.beta);

  auto update = [&](Index j) {
    if (skip(j)) return 0.0;
    const double h = diag[j] / t;
    const double z = (problem.xty[j] - gb[j]) / t + h * sol.beta[j];
    const double next = soft_threshold(z, lambda * problem.omega[j]) / h;
    const double delta = next - sol.beta[j];
    if (delta != 0.0) {
      gb.noalias() += gram.column(j) * delta;
      sol.beta[j] = next;
    }
    return std::abs(delta);
  };
  auto scale = [&] { return std::max(1.0, sol.beta.cwiseAbs().maxCoeff()); };
  auto record = [&] {
    if (options.record_trace) sol.trace.push_back(objective_from(problem, lambda, sol.beta, gb));
  };

  double tol = options.tolerance;
  std::vector<Index> active;
  while (sol.sweeps < options.max_sweeps) {
    double change = 0.0;
    for (Index j = 0; j < p; ++j) change = std::max(change, update(j));
    ++sol.sweeps;
    record();
    if (change < tol * scale()) {
      gb = gram_times(gram, sol.beta);
      if (kkt_from(gram, problem, lambda, sol.beta, gb) <= options.kkt_tolerance ||
          tol < 1e-15) {
        sol.converged = true;
        break;
      }
      tol *= 0.1;
      continue;
    }
    active.clear();
    for (Index j = 0; j < p; ++j)
      if (sol.beta[j] != 0.0) active.push_back(j);
    while (sol.sweeps < options.max_sweeps) {
      double inner = 0.0;
      for (Index j : active) inner = std::max(inner, update(j));
      ++sol.sweeps;
      record();
      if (inner < tol * scale()) break;
    }
  }
  gb = gram_times(gram, sol.beta);
  sol.objective = objective_from(problem, lambda, sol.beta, gb);
  return sol;
}

Vector effective_penalty_weights(const GramCache& gram, const LassoOptions& options) {
  const Index p = gram.p();
  Vector omega = Vector::Ones(p);
  if (options.weights.size() != 0) {
    if (options.weights.size() != p)
      fail(ErrorCode::DimensionMismatch, "penalty weights must have length p");
    if ((options.weights.array() < 0.0).any() || !options.weights.allFinite())
      fail(ErrorCode::InvalidArgument, "penalty weights must be finite and >= 0");
    omega = options.weights;
  }
  if (options.standardize) {
    const double t = gram.data().effective_sample_size;
    omega.array() *= (gram.diagonal().array() / t).sqrt();
  }
  for (Index j : options.unpenalized) {
    if (j < 0 || j >= p) fail(ErrorCode::InvalidArgument, "unpenalized index out of range");
    omega[j] = 0.0;
  }
  return omega;
}

LassoProblem make_response_problem(GramCache& gram, const LassoOptions& options) {
  LassoProblem problem;
  problem.xty = gram.cross(gram.data().y);
  problem.yty = gram.squared_norm(gram.data().y);
  problem.normalizer = gram.data().effective_sample_size;
  problem.omega = effective_penalty_weights(gram, options);
  return problem;
}

ScaledLassoResult scaled_lasso(GramCache& gram, const LassoProblem& problem, Index rows,
                               Index p_for_level, const LassoOptions& options) {
  if (rows < 1) fail(ErrorCode::InvalidArgument, "scaled Lasso needs at least one row");
  if (!(problem.normalizer > 0.0))
    fail(ErrorCode::InvalidArgument, "effective sample size must be positive");
  const double n = static_cast<double>(rows);
  const double level = std::sqrt(2.0 * std::log(static_cast<double>(p_for_level)) / n);

  ScaledLassoResult out;
  out.beta = Vector::Zero(problem.xty.size());
  const double sigma0 = std::sqrt(problem.yty / n);
  out.sigma = sigma0;
  if (sigma0 == 0.0) {
    out.converged = true;
    return out;
  }
  for (int k = 0; k < options.scaled_max_updates; ++k) {
    out.lambda = out.sigma * level * n / problem.normalizer;
    const LassoSolution sol = solve_lasso(gram, problem, out.lambda, out.beta, options);
    out.beta = sol.beta;
    ++out.updates;
    const Vector gb = gram_times(gram, out.beta);
    const double rss = std::max(0.0, problem.yty - 2.0 * out.beta.dot(problem.xty) + out.beta.dot(gb));
    const double next = std::sqrt(rss / n);
    const bool settled = std::abs(next - out.sigma) <= options.scaled_tolerance * out.sigma;
    out.sigma = next;
    if (settled || next <= 1e-12 * sigma0) {
      out.converged = true;
      break;
    }
  }
  return out;
}

double default_lambda(double sigma, Index p, double n) {
  if (!(n > 0.0) || p < 1) fail(ErrorCode::InvalidArgument, "default_lambda needs p >= 1, n > 0");
  return sigma * std::sqrt(2.0 * std::log(static_cast<double>(p)) / n);
}

FixedEffectsFit lasso_fit(GramCache& gram, const LassoOptions& options) {
  const TransformedDataset& data = gram.data();
  if (!(data.effective_sample_size > 0.0))
    fail(ErrorCode::InvalidArgument, "effective sample size must be positive");
  const LassoProblem problem = make_response_problem(gram, options);

  FixedEffectsFit fit;
  fit.a = data.a;
  fit.effective_sample_size = data.effective_sample_size;
  fit.penalty_weights = problem.omega;
  Vector warm;
  if (options.lambda) {
    if (!(*options.lambda > 0.0)) fail(ErrorCode::InvalidArgument, "lambda must be > 0");
    fit.lambda = *options.lambda;
  } else {
    const Index rows = data.total_observations();
    const ScaledLassoResult noise = scaled_lasso(gram, problem, rows, data.p, options);
    fit.sigma_init = noise.sigma;
    fit.sigma_converged = noise.converged;
    const double n = options.lambda_scale == LambdaScale::Observations
                         ? static_cast<double>(rows)
                         : data.effective_sample_size;
    fit.lambda = default_lambda(noise.sigma, data.p, n);
    warm = noise.beta;
  }
  LassoSolution sol = solve_lasso(gram, problem, fit.lambda, warm, options);
  fit.beta = std::move(sol.beta);
  fit.objective = sol.objective;
  fit.iterations = sol.sweeps;
  fit.converged = sol.converged;
  fit.objective_trace = std::move(sol.trace);
  fit.kkt_residual = kkt_violation(gram, problem, fit.lambda, fit.beta);
  return fit;
}

FixedEffectsFit lasso_fit(const TransformedDataset& data, const LassoOptions& options) {
  GramCache gram(data);
  return lasso_fit(gram, options);
}

ScaledLassoResult scaled_lasso_noise(const TransformedDataset& data, const LassoOptions& options) {
  GramCache gram(data);
  const LassoProblem problem = make_response_problem(gram, options);
  return scaled_lasso(gram, problem, data.total_observations(), data.p, options);
}

std::vector<int> cluster_folds(Index n, int folds, std::uint64_t seed) {
  if (folds < 1) fail(ErrorCode::InvalidArgument, "fold count must be >= 1");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const int k = static_cast<int>(std::min<Index>(folds, std::max<Index>(n, 1)));
  std::vector<int> assignment(static_cast<std::size_t>(n));
  for (std::size_t pos = 0; pos < order.size(); ++pos)
    assignment[static_cast<std::size_t>(order[pos])] = static_cast<int>(pos % static_cast<std::size_t>(k));
  return assignment;
}

CvResult cross_validate_a(const ClusteredDataset& dataset, const std::vector<double>& a_grid,
                          const LassoOptions& options, const CvOptions& cv) {
  if (a_grid.empty()) fail(ErrorCode::InvalidArgument, "a grid is empty");
  for (double a : a_grid)
    if (!(a >= 0.0)) fail(ErrorCode::InvalidArgument, "a grid values must be >= 0");
  CvResult out;
  if (a_grid.size() == 1) {
    out.a_star = a_grid.front();
    out.points.push_back({a_grid.front(), std::numeric_limits<double>::quiet_NaN(), 0});
    return out;
  }
  require_valid(dataset);
  if (dataset.n() < 2) fail(ErrorCode::InvalidArgument, "cross-validation needs n >= 2 clusters");

  const auto assignment = cluster_folds(dataset.n(), cv.folds, cv.seed);
  const int k = *std::max_element(assignment.begin(), assignment.end()) + 1;

  for (double a : a_grid) {
    CvPoint point;
    point.a = a;
    const TransformedDataset whole = transform_dataset(dataset, a);
    for (int f = 0; f < k; ++f) {
      std::vector<Index> train, test;
      for (Index i = 0; i < dataset.n(); ++i)
        (assignment[static_cast<std::size_t>(i)] == f ? test : train).push_back(i);
      const TransformedDataset part = whole.subset(train);
      if (train.empty() || !(part.effective_sample_size > 0.0)) {
        std::ostringstream s;
        s << "fold " << f << " skipped at a = " << a << ": zero effective sample size";
        out.warnings.push_back(s.str());
        continue;
      }
      const FixedEffectsFit fit = lasso_fit(part, options);
      for (Index i : test) {
        const Cluster& c = dataset.cluster(i);
        point.criterion += (c.y - c.X * fit.beta).squaredNorm();
      }
      ++point.folds_used;
    }
    out.points.push_back(point);
  }

  std::vector<std::size_t> order(a_grid.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a_grid[x] < a_grid[y]; });
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t idx : order) {
    const CvPoint& pt = out.points[idx];
    if (pt.folds_used == 0) continue;
    if (pt.criterion < best) {
      best = pt.criterion;
      out.a_star = pt.a;
    }
  }
  if (!std::isfinite(best)) fail(ErrorCode::Numerical, "no usable cross-validation fold");
  return out;
}

Vector normalized_inverse_weights(const Vector& beta) {
  const Index p = beta.size();
  if (p == 0) return Vector();
  const double top = beta.cwiseAbs().maxCoeff();
  const double floor = std::numeric_limits<double>::epsilon() * (top > 0.0 ? top : 1.0);
  Vector inv(p);
  for (Index j = 0; j < p; ++j) inv[j] = 1.0 / std::max(std::abs(beta[j]), floor);
  return inv * (static_cast<double>(p) / inv.sum());
}

namespace {

void stack(const TransformedDataset& data, const std::vector<Index>& idx, Matrix& X, Vector& y) {
  Index rows = 0;
  for (Index i : idx) rows += data.y[static_cast<std::size_t>(i)].size();
  X.resize(rows, data.p);
  y.resize(rows);
  Index at = 0;
  for (Index i : idx) {
    const auto k = static_cast<std::size_t>(i);
    X.middleRows(at, data.X[k].rows()) = data.X[k];
    y.segment(at, data.y[k].size()) = data.y[k];
    at += data.y[k].size();
  }
}

// (X^T X + mu T I)^{-1} X^T y through a thin SVD of X.
Vector ridge_solution(const Eigen::BDCSVD<Matrix>& svd, const Vector& y, double mu, double t) {
  const Vector s = svd.singularValues();
  const Vector uty = svd.matrixU().transpose() * y;
  Vector shrink(s.size());
  for (Index k = 0; k < s.size(); ++k) shrink[k] = s[k] / (s[k] * s[k] + mu * t);
  return svd.matrixV() * shrink.cwiseProduct(uty);
}

}  // namespace

RidgeWeights ridge_weights(const ClusteredDataset& dataset, double a,
                           const std::vector<double>& penalty_grid, const CvOptions& cv) {
  if (penalty_grid.empty()) fail(ErrorCode::InvalidArgument, "ridge penalty grid is empty");
  for (double mu : penalty_grid)
    if (!(mu > 0.0)) fail(ErrorCode::InvalidArgument, "ridge penalties must be > 0");
  const TransformedDataset data = transform_dataset(dataset, a);

  RidgeWeights out;
  out.ridge_penalty = penalty_grid.front();
  if (penalty_grid.size() > 1 && dataset.n() >= 2) {
    const auto assignment = cluster_folds(dataset.n(), cv.folds, cv.seed);
    const int k = *std::max_element(assignment.begin(), assignment.end()) + 1;
    std::vector<double> error(penalty_grid.size(), 0.0);
    for (int f = 0; f < k; ++f) {
      std::vector<Index> train, test;
      for (Index i = 0; i < dataset.n(); ++i)
        (assignment[static_cast<std::size_t>(i)] == f ? test : train).push_back(i);
      Matrix X, Xt;
      Vector y, yt;
      stack(data, train, X, y);
      stack(data, test, Xt, yt);
      double t = 0.0;
      for (Index i : train) t += data.trace_inverse[static_cast<std::size_t>(i)];
      Eigen::BDCSVD<Matrix> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
      for (std::size_t g = 0; g < penalty_grid.size(); ++g)
        error[g] += (yt - Xt * ridge_solution(svd, y, penalty_grid[g], t)).squaredNorm();
    }
    const auto best = std::min_element(error.begin(), error.end());
    out.ridge_penalty = penalty_grid[static_cast<std::size_t>(best - error.begin())];
  }
  std::vector<Index> all(static_cast<std::size_t>(dataset.n()));
  std::iota(all.begin(), all.end(), Index{0});
  Matrix X;
  Vector y;
  stack(data, all, X, y);
  Eigen::BDCSVD<Matrix> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
  out.ridge_beta = ridge_solution(svd, y, out.ridge_penalty, data.effective_sample_size);
  out.weights = normalized_inverse_weights(out.ridge_beta);
  return out;
}

}  // namespace qlmm
