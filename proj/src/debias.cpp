#include "qlmm/debias.hpp"

#include "qlmm/error.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace qlmm {

CorrectionScore nodewise_fit(GramCache& gram, Index j, std::optional<double> lambda_j,
                             const LassoOptions& options) {
  const TransformedDataset& data = gram.data();
  const Index p = data.p;
  if (j < 0 || j >= p) fail(ErrorCode::InvalidArgument, "target coordinate out of range");
  if (!(data.effective_sample_size > 0.0))
    fail(ErrorCode::InvalidArgument, "effective sample size must be positive");

  LassoOptions nodewise = options;
  nodewise.weights = Vector();
  nodewise.record_trace = false;

  LassoProblem problem;
  problem.xty = gram.column(j);
  problem.yty = gram.diagonal()[j];
  problem.normalizer = data.effective_sample_size;
  problem.omega = effective_penalty_weights(gram, nodewise);
  problem.excluded.assign(static_cast<std::size_t>(p), 0);
  problem.excluded[static_cast<std::size_t>(j)] = 1;

  CorrectionScore score;
  score.j = j;
  Vector warm;
  if (lambda_j) {
    if (!(*lambda_j > 0.0)) fail(ErrorCode::InvalidArgument, "lambda_j must be > 0");
    score.lambda_j = *lambda_j;
  } else {
    const Index rows = data.total_observations();
    const ScaledLassoResult noise = scaled_lasso(gram, problem, rows, p, nodewise);
    score.sigma_x = noise.sigma;
    const double n = options.lambda_scale == LambdaScale::Observations
                         ? static_cast<double>(rows)
                         : data.effective_sample_size;
    score.lambda_j = default_lambda(noise.sigma, p, n);
    warm = noise.beta;
  }
  const LassoSolution sol = solve_lasso(gram, problem, score.lambda_j, warm, nodewise);
  score.converged = sol.converged;

  score.kappa.resize(p - 1);
  for (Index k = 0, at = 0; k < p; ++k)
    if (k != j) score.kappa[at++] = sol.beta[k];

  score.w.reserve(data.X.size());
  for (const auto& X : data.X) {
    Vector w = X.col(j) - X * sol.beta;
    score.denominator += w.dot(X.col(j));
    score.w.push_back(std::move(w));
  }
  const double scale = gram.diagonal()[j];
  if (!(std::abs(score.denominator) > 1e-12 * scale) || !std::isfinite(score.denominator)) {
    std::ostringstream s;
    s << "coordinate " << j << " is not identifiable at lambda_j = " << score.lambda_j
      << " (correction score is orthogonal to its column)";
    fail(ErrorCode::NotIdentifiable, s.str());
  }
  return score;
}

CorrectionScore nodewise_fit(const TransformedDataset& data, Index j,
                             std::optional<double> lambda_j, const LassoOptions& options) {
  GramCache gram(data);
  return nodewise_fit(gram, j, lambda_j, options);
}

std::vector<Vector> residual_blocks(const TransformedDataset& data, const Vector& beta) {
  if (beta.size() != data.p) fail(ErrorCode::DimensionMismatch, "beta must have length p");
  std::vector<Vector> out;
  out.reserve(data.X.size());
  for (std::size_t i = 0; i < data.X.size(); ++i) out.push_back(data.y[i] - data.X[i] * beta);
  return out;
}

namespace {

void check_score(const TransformedDataset& data, const CorrectionScore& score) {
  if (score.w.size() != data.X.size())
    fail(ErrorCode::DimensionMismatch, "correction score does not match the dataset");
  if (score.denominator == 0.0)
    fail(ErrorCode::NotIdentifiable, "correction score has zero denominator");
}

// Per-cluster inner products w_i^T r_i.
std::vector<double> score_products(const CorrectionScore& score, const std::vector<Vector>& r) {
  std::vector<double> out(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) out[i] = score.w[i].dot(r[i]);
  return out;
}

}  // namespace

double debias_coordinate(const TransformedDataset& data, const FixedEffectsFit& fit,
                         const CorrectionScore& score) {
  check_score(data, score);
  const auto products = score_products(score, residual_blocks(data, fit.beta));
  const double numerator = std::accumulate(products.begin(), products.end(), 0.0);
  return fit.beta[score.j] + numerator / score.denominator;
}

double empirical_variance(const TransformedDataset& data, const FixedEffectsFit& fit,
                          const CorrectionScore& score) {
  check_score(data, score);
  const auto products = score_products(score, residual_blocks(data, fit.beta));
  double sum = 0.0;
  for (double v : products) sum += v * v;
  return sum / (score.denominator * score.denominator);
}

double normal_quantile_upper(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) fail(ErrorCode::InvalidArgument, "alpha must lie in (0, 1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), 1.0 - alpha / 2.0);
}

Interval confidence_interval(double beta_db, double V_hat, double alpha) {
  if (!(V_hat >= 0.0)) fail(ErrorCode::InvalidArgument, "variance must be >= 0");
  const double half = normal_quantile_upper(alpha) * std::sqrt(V_hat);
  return {beta_db - half, beta_db + half, V_hat == 0.0};
}

ZTest z_test(double beta_db, double V_hat, double null_value) {
  if (!(V_hat > 0.0)) fail(ErrorCode::InvalidArgument, "z-test needs a positive variance");
  ZTest out;
  out.z = (beta_db - null_value) / std::sqrt(V_hat);
  out.p_value = std::erfc(std::abs(out.z) / std::sqrt(2.0));
  return out;
}

NodewiseCache::Key NodewiseCache::key(std::uint64_t data, double a, Index j,
                                      std::optional<double> lambda_j) {
  return {data, a, j, lambda_j ? *lambda_j : -1.0};
}

std::optional<CorrectionScore> NodewiseCache::find(std::uint64_t data, double a, Index j,
                                                   std::optional<double> lambda_j) const {
  std::lock_guard<std::mutex> lock(mutex_);
  const auto it = scores_.find(key(data, a, j, lambda_j));
  if (it == scores_.end()) return std::nullopt;
  return it->second;
}

void NodewiseCache::store(std::uint64_t data, double a, const CorrectionScore& score,
                          std::optional<double> lambda_j) {
  std::lock_guard<std::mutex> lock(mutex_);
  scores_[key(data, a, score.j, lambda_j)] = score;
}

std::size_t NodewiseCache::size() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return scores_.size();
}

InferenceResult infer_coordinates(const ClusteredDataset& dataset, double a,
                                  const std::vector<Index>& targets, double alpha,
                                  const InferenceOptions& options, NodewiseCache* cache) {
  require_valid(dataset);
  for (Index j : targets)
    if (j < 0 || j >= dataset.p()) fail(ErrorCode::InvalidArgument, "target coordinate out of range");
  normal_quantile_upper(alpha);

  InferenceResult out;
  const TransformedDataset whitened = transform_dataset(dataset, a);
  GramCache gram(whitened);
  out.fit = lasso_fit(gram, options.lasso);
  if (targets.empty()) return out;

  const bool robust = options.mode == DebiasMode::A0Robust && a != 0.0;
  out.debias_a = robust ? 0.0 : a;
  std::optional<TransformedDataset> raw;
  std::optional<GramCache> raw_gram;
  if (robust) {
    raw.emplace(transform_dataset(dataset, 0.0));
    raw_gram.emplace(*raw);
  }
  const TransformedDataset& target = robust ? *raw : whitened;
  GramCache& target_gram = robust ? *raw_gram : gram;
  const std::vector<Vector> residuals = residual_blocks(target, out.fit.beta);
  const std::uint64_t key = cache ? fingerprint(dataset) : 0;
  LassoOptions nodewise = options.lasso;
  if (options.nodewise_lambda_scale) nodewise.lambda_scale = *options.nodewise_lambda_scale;
  // Automatic levels are keyed by a negative tag per normalization.
  std::optional<double> cache_lambda = options.lambda_j;
  if (!cache_lambda && nodewise.lambda_scale == LambdaScale::EffectiveSampleSize) cache_lambda = -2.0;

  for (Index j : targets) {
    try {
      std::optional<CorrectionScore> score;
      if (cache) score = cache->find(key, out.debias_a, j, cache_lambda);
      if (!score) {
        score = nodewise_fit(target_gram, j, options.lambda_j, nodewise);
        if (cache) cache->store(key, out.debias_a, *score, cache_lambda);
      }
      const auto products = score_products(*score, residuals);
      double numerator = 0.0, squares = 0.0;
      for (double v : products) {
        numerator += v;
        squares += v * v;
      }
      InferenceRecord rec;
      rec.j = j;
      rec.alpha = alpha;
      rec.lambda_j = score->lambda_j;
      rec.beta_hat = out.fit.beta[j];
      rec.beta_db = rec.beta_hat + numerator / score->denominator;
      rec.V_hat = squares / (score->denominator * score->denominator);
      const Interval ci = confidence_interval(rec.beta_db, rec.V_hat, alpha);
      rec.ci_lo = ci.lo;
      rec.ci_hi = ci.hi;
      if (rec.V_hat > 0.0) {
        const ZTest t = z_test(rec.beta_db, rec.V_hat, options.null_value);
        rec.z = t.z;
        rec.p_value = t.p_value;
      } else {
        rec.degenerate = true;
        rec.z = std::numeric_limits<double>::quiet_NaN();
        rec.p_value = std::numeric_limits<double>::quiet_NaN();
        rec.warning = "zero empirical variance; interval has zero width";
      }
      out.records.push_back(rec);
    } catch (const Error& e) {
      out.failures.push_back({j, e.what()});
    }
  }
  return out;
}

std::vector<Index> bh_fdr(const std::vector<double>& p_values, double level) {
  if (!(level > 0.0 && level < 1.0)) fail(ErrorCode::InvalidArgument, "FDR level must lie in (0, 1)");
  for (double v : p_values)
    if (!(v >= 0.0 && v <= 1.0)) fail(ErrorCode::InvalidArgument, "p-values must lie in [0, 1]");
  const std::size_t m = p_values.size();
  std::vector<Index> order(m);
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index x, Index y) {
    return p_values[static_cast<std::size_t>(x)] < p_values[static_cast<std::size_t>(y)];
  });
  std::size_t cutoff = 0;
  for (std::size_t k = 1; k <= m; ++k)
    if (p_values[static_cast<std::size_t>(order[k - 1])] <=
        static_cast<double>(k) * level / static_cast<double>(m))
      cutoff = k;
  std::vector<Index> selected(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cutoff));
  std::sort(selected.begin(), selected.end());
  return selected;
}

}  // namespace qlmm
