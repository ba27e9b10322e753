#include "doctest.h"
#include "support.hpp"

#include "qlmm/error.hpp"
#include "qlmm/simulation.hpp"
#include "qlmm/varcomp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace qlmm;

namespace {

std::vector<Index> all_clusters(const ClusteredDataset& d) {
  std::vector<Index> v(static_cast<std::size_t>(d.n()));
  std::iota(v.begin(), v.end(), Index{0});
  return v;
}

std::vector<Matrix> exact_moments(const ClusteredDataset& d, const Matrix& psi, double s2) {
  std::vector<Matrix> out;
  for (const auto& c : d.clusters()) {
    Matrix m = c.Z * psi * c.Z.transpose();
    m.diagonal().array() += s2;
    out.push_back(m);
  }
  return out;
}

}  // namespace

TEST_CASE("balanced random splits") {
  std::mt19937_64 rng(51);
  const auto four = test::random_dataset(rng, 4, 2, 2, 1, 1);
  const auto s4 = split_clusters(four, 3);
  CHECK(s4.first.size() == 2);
  CHECK(s4.second.size() == 2);
  const auto five = test::random_dataset(rng, 5, 2, 2, 1, 1);
  const auto s5 = split_clusters(five, 3);
  CHECK(std::min(s5.first.size(), s5.second.size()) == 2);
  CHECK(std::max(s5.first.size(), s5.second.size()) == 3);
  std::vector<Index> joined = s5.first;
  joined.insert(joined.end(), s5.second.begin(), s5.second.end());
  std::sort(joined.begin(), joined.end());
  CHECK(joined == all_clusters(five));
  const auto again = split_clusters(five, 3);
  CHECK(again.first == s5.first);
  CHECK(again.second == s5.second);
  const auto one = test::random_dataset(rng, 1, 2, 2, 1, 1);
  CHECK_THROWS_AS(split_clusters(one, 1), Error);
}

TEST_CASE("projection residuals") {
  std::mt19937_64 rng(52);
  auto d = test::random_dataset(rng, 1, 6, 6, 3, 2);
  Cluster c = d.cluster(0);
  const Vector beta = test::gaussian(rng, 3);
  SUBCASE("residual in the span of Z") {
    c.y = c.X * beta + c.Z * test::gaussian(rng, 2);
    const auto pr = projection_residuals(c, beta);
    CHECK(pr.orthogonal.norm() < 1e-12);
    CHECK(pr.rank == 2);
  }
  SUBCASE("zero Z") {
    c.Z.setZero();
    const auto pr = projection_residuals(c, beta);
    CHECK(pr.orthogonal.isApprox(pr.residual));
    CHECK(pr.rank == 0);
  }
  SUBCASE("adding a span component changes nothing") {
    const auto before = projection_residuals(c, beta);
    for (int t = 0; t < 20; ++t) {
      Cluster moved = c;
      moved.y += c.Z * test::gaussian(rng, 2);
      CHECK((projection_residuals(moved, beta).orthogonal - before.orthogonal).norm() < 1e-10);
    }
  }
  SUBCASE("column-deficient Z") {
    c.Z.col(1) = 2.0 * c.Z.col(0);
    CHECK(projection_residuals(c, beta).rank == 1);
  }
}

TEST_CASE("sigma2 estimate") {
  std::mt19937_64 rng(53);
  SUBCASE("no random effects averages squared residuals") {
    const auto d = test::random_dataset(rng, 6, 2, 5, 3, 0);
    const Vector beta = test::gaussian(rng, 3);
    double ss = 0.0;
    for (const auto& c : d.clusters()) ss += (c.y - c.X * beta).squaredNorm();
    CHECK(sigma2_estimate(d, all_clusters(d), beta) ==
          doctest::Approx(ss / d.total_observations()).epsilon(1e-12));
  }
  SUBCASE("invariant to span components") {
    const auto d = test::random_dataset(rng, 6, 4, 6, 3, 2);
    const Vector beta = test::gaussian(rng, 3);
    std::vector<Cluster> cs = d.clusters();
    for (auto& c : cs) c.y += c.Z * test::gaussian(rng, 2);
    CHECK(sigma2_estimate(ClusteredDataset(cs, 3, 2), all_clusters(d), beta) ==
          doctest::Approx(sigma2_estimate(d, all_clusters(d), beta)).epsilon(1e-10));
  }
  SUBCASE("every cluster at most q rows is an error") {
    const auto d = test::random_dataset(rng, 4, 1, 2, 3, 2);
    CHECK_THROWS_AS(sigma2_estimate(d, all_clusters(d), Vector::Zero(3)), Error);
  }
  SUBCASE("unbiased at the true beta") {
    double sum = 0.0;
    const int reps = 300;
    for (int r = 0; r < reps; ++r) {
      Scenario s;
      s.seed = 9000 + static_cast<std::uint64_t>(r);
      const auto sim = generate_dataset(s);
      sum += sigma2_estimate(sim.dataset, all_clusters(sim.dataset), sim.truth.beta);
    }
    CHECK(std::abs(sum / reps - 0.25) < 0.01);
  }
}

TEST_CASE("design Gram matrix") {
  const auto free = make_basis("free-diagonal", 3);
  CHECK(design_gram(free).gram.isIdentity(0.0));
  const auto halves = make_basis("diagonal-halves", 4);
  const auto g = design_gram(halves);
  CHECK(g.gram.isApprox((Matrix(2, 2) << 2, 0, 0, 2).finished()));
  CHECK(g.min_eigenvalue == doctest::Approx(2.0));
  CHECK_THROWS_AS(design_gram({Matrix::Identity(2, 2), Matrix::Identity(2, 2)}), Error);
  Matrix off = Matrix::Zero(2, 2);
  off(0, 1) = off(1, 0) = 1.0;
  CHECK(design_gram({off}).gram(0, 0) == doctest::Approx(2.0));
  CHECK_THROWS_AS(make_basis("unknown", 2), Error);
}

TEST_CASE("basis combinations") {
  const auto halves = make_basis("diagonal-halves", 2);
  CHECK(psi_from_eta(Vector::Zero(2), halves).isZero(0.0));
  CHECK(psi_from_eta((Vector(2) << 0.56, 0.56).finished(), halves)
            .isApprox(0.56 * Matrix::Identity(2, 2)));
  CHECK(psi_from_eta((Vector(1) << 1.7).finished(), make_basis("identity", 3))
            .isApprox(1.7 * Matrix::Identity(3, 3)));
  const Vector eta = (Vector(3) << 0.3, -0.1, 2.0).finished();
  const auto free = make_basis("free-diagonal", 3);
  CHECK(eta_from_psi(psi_from_eta(eta, free), free).isApprox(eta));
}

TEST_CASE("exact moments identify the components") {
  std::mt19937_64 rng(54);
  const char* names[] = {"diagonal-halves", "free-diagonal", "identity"};
  for (int t = 0; t < 50; ++t) {
    const Index q = test::uniform_index(rng, 2, 4);
    const auto d = test::random_dataset(rng, test::uniform_index(rng, 3, 8), q + 1, q + 5, 2, q);
    const auto basis = make_basis(names[t % 3], q);
    Vector eta(static_cast<Index>(basis.size()));
    for (Index k = 0; k < eta.size(); ++k) eta[k] = test::uniform(rng, 0.1, 2.0);
    const double s2 = test::uniform(rng, 0.1, 1.0);
    const double a = test::uniform(rng, 0.0, 5.0);
    const auto moments = exact_moments(d, psi_from_eta(eta, basis), s2);
    const auto idx = all_clusters(d);
    const double s2_hat = sigma2_from_moments(d, idx, moments);
    CHECK(s2_hat == doctest::Approx(s2).epsilon(1e-8));
    const Vector eta_hat = eta_from_moments(d, idx, moments, s2_hat, a, basis);
    CHECK((eta_hat - eta).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("moment matching solves its normal equations and is a minimum") {
  std::mt19937_64 rng(55);
  const auto d = test::random_dataset(rng, 10, 3, 6, 4, 2);
  const auto basis = make_basis("free-diagonal", 2);
  const auto idx = all_clusters(d);
  const Vector beta = test::gaussian(rng, 4);
  std::vector<Matrix> moments;
  for (const auto& c : d.clusters()) {
    const Vector r = c.y - c.X * beta;
    moments.push_back(r * r.transpose());
  }
  const double s2 = sigma2_from_moments(d, idx, moments);
  const Vector eta = eta_from_moments(d, idx, moments, s2, 1.5, basis);
  CHECK(eta.isApprox(eta_estimate(d, idx, beta, s2, 1.5, basis), 1e-12));
  const auto sys = eta_system(d, idx, moments, s2, 1.5, basis);
  CHECK((sys.A * eta - sys.b).norm() <= 1e-8 * sys.b.norm());
  const double best = eta_objective(d, idx, moments, s2, 1.5, basis, eta);
  for (int t = 0; t < 100; ++t) {
    const Vector moved = eta + 0.1 * test::gaussian(rng, 2);
    CHECK(best <= eta_objective(d, idx, moments, s2, 1.5, basis, moved) + 1e-12);
  }
}

TEST_CASE("singular moment system names the deficient direction") {
  std::mt19937_64 rng(56);
  auto d = test::random_dataset(rng, 5, 4, 4, 2, 2);
  std::vector<Cluster> cs = d.clusters();
  for (auto& c : cs) c.Z.col(1).setZero();  // second effect never observed
  const ClusteredDataset blind(cs, 2, 2);
  std::vector<Matrix> moments;
  for (const auto& c : blind.clusters()) moments.push_back(c.y * c.y.transpose());
  try {
    eta_from_moments(blind, all_clusters(blind), moments, 0.2, 1.0, make_basis("free-diagonal", 2));
    FAIL("expected a NotIdentifiable error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NotIdentifiable);
  }
}

TEST_CASE("singleton clusters are skipped") {
  std::mt19937_64 rng(57);
  auto d = test::random_dataset(rng, 6, 3, 5, 2, 1);
  std::vector<Cluster> cs = d.clusters();
  Cluster single;
  single.id = "solo";
  single.X = Matrix::Constant(1, 2, 100.0);
  single.Z = Matrix::Constant(1, 1, 100.0);
  single.y = Vector::Constant(1, -1e3);
  cs.push_back(single);
  const ClusteredDataset with(cs, 2, 1);
  const Vector beta = Vector::Zero(2);
  auto idx = all_clusters(with);
  CHECK(sigma2_estimate(with, idx, beta) ==
        doctest::Approx(sigma2_estimate(d, all_clusters(d), beta)).epsilon(1e-12));
  const auto basis = make_basis("identity", 1);
  CHECK(eta_estimate(with, idx, beta, 0.3, 1.0, basis)
            .isApprox(eta_estimate(d, all_clusters(d), beta, 0.3, 1.0, basis)));
}

TEST_CASE("cross-fitting") {
  Scenario s;
  s.seed = 77;
  const auto sim = generate_dataset(s);
  VarCompOptions o;
  o.a = 2.0;
  o.basis = make_basis("diagonal-halves", 2);
  o.seed = 5;
  const auto fit = cross_fit_varcomp(sim.dataset, o);
  REQUIRE(fit.halves.size() == 2);
  SUBCASE("average of both directions, independent of fold labels") {
    const auto ab = varcomp_half(sim.dataset, fit.split.first, fit.split.second, o);
    const auto ba = varcomp_half(sim.dataset, fit.split.second, fit.split.first, o);
    CHECK(fit.sigma2_e_hat == doctest::Approx(0.5 * (ba.sigma2_e + ab.sigma2_e)).epsilon(1e-14));
    CHECK(fit.eta_hat.isApprox(0.5 * (ba.eta + ab.eta), 1e-14));
    CHECK(fit.Psi_hat.isApprox(psi_from_eta(fit.eta_hat, o.basis)));
  }
  SUBCASE("identical folds make cross-fitting a no-op") {
    std::vector<Cluster> cs;
    for (Index i = 0; i < 10; ++i) cs.push_back(sim.dataset.cluster(i));
    for (Index i = 0; i < 10; ++i) cs.push_back(sim.dataset.cluster(i));
    const ClusteredDataset twin(cs, s.p, s.q);
    std::vector<Index> first(10), second(10);
    std::iota(first.begin(), first.end(), Index{0});
    std::iota(second.begin(), second.end(), Index{10});
    const auto ab = varcomp_half(twin, first, second, o);
    const auto ba = varcomp_half(twin, second, first, o);
    CHECK(ab.sigma2_e == doctest::Approx(ba.sigma2_e).epsilon(1e-10));
    CHECK(ab.eta.isApprox(ba.eta, 1e-8));
  }
  SUBCASE("PSD projection") {
    VarCompOptions p = o;
    p.project_psd = true;
    const auto projected = cross_fit_varcomp(sim.dataset, p);
    CHECK(projected.psd_projected);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(projected.Psi_hat);
    CHECK(eig.eigenvalues().minCoeff() >= -1e-12);
  }
  SUBCASE("nearest PSD clips negative eigenvalues") {
    const Matrix m = (Matrix(2, 2) << 1.0, 0.0, 0.0, -2.0).finished();
    CHECK(nearest_psd(m).isApprox((Matrix(2, 2) << 1.0, 0.0, 0.0, 0.0).finished()));
  }
}

TEST_CASE("cross-fitting usually beats a single split") {
  int wins = 0;
  const int reps = 300;
  for (int r = 0; r < reps; ++r) {
    Scenario s;
    s.psi_kind = PsiKind::Diagonal;
    s.seed = 3000 + static_cast<std::uint64_t>(r);
    const auto sim = generate_dataset(s);
    VarCompOptions o;
    o.a = 2.0;
    o.basis = make_basis("diagonal-halves", 2);
    o.seed = s.seed;
    const auto both = cross_fit_varcomp(sim.dataset, o);
    const Vector eta_star = eta_from_psi(sim.truth.psi, o.basis);
    auto mae = [&](double s2, const Vector& eta) {
      return (std::abs(s2 - 0.25) + (eta - eta_star).cwiseAbs().sum()) / 3.0;
    };
    const auto& h = both.halves.front();
    if (mae(both.sigma2_e_hat, both.eta_hat) <= mae(h.sigma2_e, h.eta)) ++wins;
  }
  CHECK(wins >= 0.6 * reps);
}
