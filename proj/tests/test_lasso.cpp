#include "doctest.h"
#include "support.hpp"

#include "qlmm/error.hpp"
#include "qlmm/lasso.hpp"
#include "qlmm/proxy.hpp"
#include "qlmm/simulation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace qlmm;

namespace {

// Splits stacked rows into clusters of `m` with no random design.
ClusteredDataset from_rows(const Matrix& X, const Vector& y, Index m) {
  std::vector<Cluster> cs;
  for (Index r = 0; r < X.rows(); r += m) {
    const Index k = std::min(m, X.rows() - r);
    Cluster c;
    c.id = std::to_string(cs.size() + 1);
    c.X = X.middleRows(r, k);
    c.y = y.segment(r, k);
    c.Z = Matrix(k, 0);
    cs.push_back(std::move(c));
  }
  return ClusteredDataset(std::move(cs), X.cols(), 0);
}

double soft(double z, double t) { return z > t ? z - t : (z < -t ? z + t : 0.0); }

// Largest KKT violation from dense whitened data, independent of the solver internals.
double dense_kkt(const Matrix& X, const Vector& y, double T, double lambda, const Vector& omega,
                 const Vector& beta) {
  const Vector g = X.transpose() * (y - X * beta) / T;
  double worst = 0.0;
  for (Index j = 0; j < beta.size(); ++j) {
    const double bound = lambda * omega[j];
    const double v = beta[j] != 0.0 ? std::abs(g[j] - bound * (beta[j] > 0 ? 1.0 : -1.0))
                                    : std::max(0.0, std::abs(g[j]) - bound);
    worst = std::max(worst, v);
  }
  return worst;
}

}  // namespace

TEST_CASE("full shrinkage above the threshold") {
  std::mt19937_64 rng(21);
  const auto d = test::random_dataset(rng, 10, 3, 6, 8, 2);
  const auto t = transform_dataset(d, 1.5);
  Matrix X;
  Vector y;
  double T;
  test::dense_whiten(d, 1.5, X, y, T);
  LassoOptions o;
  o.standardize = false;
  o.lambda = (X.transpose() * y).cwiseAbs().maxCoeff() / T * (1.0 + 1e-9);
  CHECK(lasso_fit(t, o).beta.isZero(0.0));
  o.lambda = *o.lambda * 0.9;
  CHECK_FALSE(lasso_fit(t, o).beta.isZero(0.0));
}

TEST_CASE("orthogonal design gives soft-thresholded marginal estimates") {
  std::mt19937_64 rng(22);
  const Index N = 60, p = 6;
  Eigen::HouseholderQR<Matrix> qr(test::gaussian(rng, N, p));
  const Matrix X = Matrix(qr.householderQ()).leftCols(p) * std::sqrt(double(N));
  Vector beta_true = Vector::Zero(p);
  beta_true << 2.0, -1.0, 0.3, 0.0, 0.0, 0.05;
  const Vector y = X * beta_true + 0.3 * test::gaussian(rng, N);
  const auto d = from_rows(X, y, 5);
  LassoOptions o;
  o.lambda = 0.2;
  o.tolerance = 1e-12;
  const auto fit = lasso_fit(transform_dataset(d, 0.0), o);
  const Vector marginal = X.transpose() * y / double(N);
  for (Index j = 0; j < p; ++j) CHECK(fit.beta[j] == doctest::Approx(soft(marginal[j], 0.2)).epsilon(1e-9));
}

TEST_CASE("tiny lambda reproduces generalized least squares") {
  std::mt19937_64 rng(23);
  const auto d = test::random_dataset(rng, 12, 3, 6, 5, 2);
  for (double a : {0.0, 2.0}) {
    Matrix XtWX = Matrix::Zero(5, 5);
    Vector XtWy = Vector::Zero(5);
    for (const auto& c : d.clusters()) {
      const Matrix W = test::dense_proxy_power(c.Z, a, -1.0);
      XtWX += c.X.transpose() * W * c.X;
      XtWy += c.X.transpose() * W * c.y;
    }
    const Vector gls = XtWX.ldlt().solve(XtWy);
    LassoOptions o;
    o.lambda = 1e-10;
    o.tolerance = 1e-12;
    const auto fit = lasso_fit(transform_dataset(d, a), o);
    CHECK((fit.beta - gls).cwiseAbs().maxCoeff() < 1e-4);
  }
}

TEST_CASE("KKT, objective and effective weights on random weighted problems") {
  std::mt19937_64 rng(24);
  for (int t = 0; t < 30; ++t) {
    const Index p = test::uniform_index(rng, 3, 40);
    const auto d = test::random_dataset(rng, test::uniform_index(rng, 3, 12), 1, 6, p,
                                        test::uniform_index(rng, 0, 3));
    const double a = test::uniform(rng, 0.0, 6.0);
    LassoOptions o;
    o.weights = Vector(p);
    for (Index j = 0; j < p; ++j) o.weights[j] = test::uniform(rng, 0.2, 2.0);
    o.standardize = t % 2 == 0;
    if (t % 3 == 0) o.lambda = test::uniform(rng, 0.01, 0.3);
    if (t % 5 == 0) o.unpenalized = {0};
    const auto fit = lasso_fit(transform_dataset(d, a), o);
    Matrix X;
    Vector y;
    double T;
    test::dense_whiten(d, a, X, y, T);
    Vector omega = o.weights;
    if (o.standardize)
      for (Index j = 0; j < p; ++j) omega[j] *= std::sqrt(X.col(j).squaredNorm() / T);
    for (Index j : o.unpenalized) omega[j] = 0.0;
    CHECK((fit.penalty_weights - omega).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(fit.converged);
    CHECK(dense_kkt(X, y, T, fit.lambda, omega, fit.beta) <= 1e-6);
    CHECK(fit.kkt_residual <= 1e-6);
    const double objective = (y - X * fit.beta).squaredNorm() / (2.0 * T) +
                             fit.lambda * omega.cwiseProduct(fit.beta).cwiseAbs().sum();
    CHECK(fit.objective == doctest::Approx(objective).epsilon(1e-9));
    CHECK(fit.effective_sample_size == doctest::Approx(T).epsilon(1e-12));
  }
}

TEST_CASE("objective does not increase across sweeps") {
  std::mt19937_64 rng(25);
  const auto d = test::random_dataset(rng, 20, 2, 5, 60, 2);
  LassoOptions o;
  o.lambda = 0.05;
  o.record_trace = true;
  const auto fit = lasso_fit(transform_dataset(d, 1.0), o);
  REQUIRE(fit.objective_trace.size() >= 2);
  for (std::size_t k = 1; k < fit.objective_trace.size(); ++k)
    CHECK(fit.objective_trace[k] <= fit.objective_trace[k - 1] + 1e-13);
}

TEST_CASE("a = 0 matches a plain Lasso on the raw rows") {
  std::mt19937_64 rng(26);
  const auto d = test::random_dataset(rng, 15, 2, 6, 30, 2);
  Matrix X(d.total_observations(), d.p());
  Vector y(d.total_observations());
  Index row = 0;
  for (const auto& c : d.clusters()) {
    X.middleRows(row, c.size()) = c.X;
    y.segment(row, c.size()) = c.y;
    row += c.size();
  }
  LassoOptions o;
  o.lambda = 0.08;
  o.tolerance = 1e-12;
  const auto fit = lasso_fit(transform_dataset(d, 0.0), o);
  Vector omega(d.p());
  for (Index j = 0; j < d.p(); ++j) omega[j] = std::sqrt(X.col(j).squaredNorm() / X.rows());
  const Vector ref = dense_lasso(X, y, double(X.rows()), 0.08, omega);
  CHECK((fit.beta - ref).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("cluster order does not change the fit") {
  std::mt19937_64 rng(27);
  const auto d = test::random_dataset(rng, 14, 2, 6, 25, 2);
  std::vector<Index> order(static_cast<std::size_t>(d.n()));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  LassoOptions o;
  o.tolerance = 1e-12;
  const auto a = lasso_fit(transform_dataset(d, 2.0), o);
  const auto b = lasso_fit(transform_dataset(d.subset(order), 2.0), o);
  CHECK((a.beta - b.beta).cwiseAbs().maxCoeff() < 1e-7);
  CHECK(a.lambda == doctest::Approx(b.lambda).epsilon(1e-9));
}

TEST_CASE("scaled Lasso noise level") {
  std::mt19937_64 rng(28);
  SUBCASE("pure noise") {
    for (int r = 0; r < 100; ++r) {
      const double sigma = 0.7;
      auto d = test::random_dataset(rng, 100, 4, 4, 5, 0);
      std::vector<Cluster> cs = d.clusters();
      for (auto& c : cs) c.y = sigma * test::gaussian(rng, c.size());
      const auto noise = scaled_lasso_noise(transform_dataset(ClusteredDataset(cs, 5, 0), 0.0));
      CHECK(std::abs(noise.sigma / sigma - 1.0) < 0.15);
    }
  }
  SUBCASE("noiseless strong signal") {
    auto d = test::random_dataset(rng, 40, 5, 5, 20, 0);
    std::vector<Cluster> cs = d.clusters();
    Vector beta = Vector::Zero(20);
    beta.head(3) << 3.0, -2.0, 2.5;
    for (auto& c : cs) c.y = c.X * beta;
    const auto noise = scaled_lasso_noise(transform_dataset(ClusteredDataset(cs, 20, 0), 0.0));
    CHECK(noise.sigma < 0.05);
  }
}

TEST_CASE("default lambda") {
  CHECK(default_lambda(0.655, 10346, 1814.0) == doctest::Approx(0.0661).epsilon(5e-3));
  CHECK(default_lambda(0.655, 10346, 1814.0) ==
        doctest::Approx(0.655 * std::sqrt(2.0 * std::log(10346.0) / 1814.0)).epsilon(1e-14));
  // p = e^{N/2} makes 2 log p = N.
  const double N = 20.0;
  CHECK(default_lambda(1.0, static_cast<Index>(std::llround(std::exp(N / 2.0))), N) ==
        doctest::Approx(1.0).epsilon(1e-6));
  CHECK(default_lambda(2.0, 300, 144.0) == doctest::Approx(2.0 * default_lambda(1.0, 300, 144.0)));
}

TEST_CASE("cross-validation over a") {
  std::mt19937_64 rng(29);
  SUBCASE("no random design ties every a and picks the smallest") {
    const auto d = test::random_dataset(rng, 20, 3, 5, 15, 0);
    const auto cv = cross_validate_a(d, {2.0, 0.5, 4.0}, {}, {5, 3});
    CHECK(cv.a_star == 0.5);
    for (const auto& pt : cv.points) CHECK(pt.criterion == cv.points.front().criterion);
  }
  SUBCASE("single grid point") {
    const auto d = test::random_dataset(rng, 10, 3, 5, 15, 2);
    CHECK(cross_validate_a(d, {3.0}, {}).a_star == 3.0);
  }
  SUBCASE("clustered scenario prefers a > 0") {
    int positive = 0;
    const int reps = 40;
    for (int r = 0; r < reps; ++r) {
      Scenario s;
      s.seed = 500 + static_cast<std::uint64_t>(r);
      const auto sim = generate_dataset(s);
      CvOptions cv;
      cv.seed = s.seed;
      if (cross_validate_a(sim.dataset, {0, 2, 4, 8, 16, 32}, {}, cv).a_star > 0.0) ++positive;
    }
    CHECK(positive >= 0.9 * reps);
  }
  SUBCASE("folds are a partition of clusters") {
    const auto f = cluster_folds(23, 5, 9);
    std::vector<int> count(5, 0);
    for (int k : f) ++count[static_cast<std::size_t>(k)];
    CHECK(*std::max_element(count.begin(), count.end()) -
              *std::min_element(count.begin(), count.end()) <=
          1);
    CHECK(f == cluster_folds(23, 5, 9));
  }
}

TEST_CASE("ridge weights") {
  const Vector w = normalized_inverse_weights((Vector(3) << 1.0, 0.5, 0.25).finished());
  CHECK(w[0] == doctest::Approx(3.0 / 7.0));
  CHECK(w[1] == doctest::Approx(6.0 / 7.0));
  CHECK(w[2] == doctest::Approx(12.0 / 7.0));
  CHECK(normalized_inverse_weights(Vector::Constant(4, -0.3)).isOnes(1e-14));
  const Vector z = normalized_inverse_weights((Vector(3) << 1.0, 0.0, 2.0).finished());
  CHECK(z.allFinite());
  CHECK(z.sum() == doctest::Approx(3.0));

  std::mt19937_64 rng(30);
  const auto d = test::random_dataset(rng, 20, 3, 5, 12, 2);
  const auto r = ridge_weights(d, 1.0, {0.01, 0.1, 1.0, 10.0}, {5, 4});
  CHECK(r.weights.sum() == doctest::Approx(12.0).epsilon(1e-12));
  CHECK((r.weights.array() > 0.0).all());
  CHECK_THROWS_AS(ridge_weights(d, 1.0, {}), Error);
}

TEST_CASE("invalid options are rejected") {
  std::mt19937_64 rng(31);
  const auto t = transform_dataset(test::random_dataset(rng, 4, 2, 3, 5, 1), 1.0);
  LassoOptions o;
  o.lambda = -1.0;
  CHECK_THROWS_AS(lasso_fit(t, o), Error);
  o.lambda = 0.1;
  o.weights = Vector::Ones(3);
  CHECK_THROWS_AS(lasso_fit(t, o), Error);
  o.weights = -Vector::Ones(5);
  CHECK_THROWS_AS(lasso_fit(t, o), Error);
}
