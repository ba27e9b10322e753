#include "qlmm/simulation.hpp"

#include "qlmm/error.hpp"
#include "qlmm/proxy.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>
#include <thread>

namespace qlmm {

std::string to_string(PsiKind kind) {
  switch (kind) {
    case PsiKind::PositiveDefinite: return "pd";
    case PsiKind::Singular: return "singular";
    case PsiKind::Diagonal: return "diagonal";
    case PsiKind::Custom: return "custom";
  }
  return "custom";
}

PsiKind psi_kind_from_string(const std::string& name) {
  if (name == "pd" || name == "positive-definite") return PsiKind::PositiveDefinite;
  if (name == "singular") return PsiKind::Singular;
  if (name == "diagonal") return PsiKind::Diagonal;
  if (name == "custom") return PsiKind::Custom;
  fail(ErrorCode::InvalidArgument, "unknown psi kind '" + name + "'");
}

Index Scenario::clusters() const {
  if (n > 0) return n;
  if (m < 1 || total < 1) fail(ErrorCode::InvalidArgument, "scenario sizes must be positive");
  if (total % m != 0) {
    std::ostringstream s;
    s << "total observations " << total << " is not divisible by cluster size " << m;
    fail(ErrorCode::InvalidArgument, s.str());
  }
  return total / m;
}

Vector Scenario::beta() const {
  if (beta_true.size() > 0) {
    if (beta_true.size() != p) fail(ErrorCode::DimensionMismatch, "beta_true must have length p");
    return beta_true;
  }
  Vector b = Vector::Zero(p);
  const double head[] = {1.0, 0.5, 0.2, 0.1, 0.05};
  for (Index j = 0; j < std::min<Index>(p, 5); ++j) b[j] = head[j];
  return b;
}

Matrix psi_matrix(PsiKind kind, Index q, double scale, const Matrix& custom) {
  Matrix psi = Matrix::Zero(q, q);
  switch (kind) {
    case PsiKind::PositiveDefinite:
      for (Index j = 0; j < q; ++j)
        for (Index k = 0; k < q; ++k) psi(j, k) = std::pow(scale, static_cast<double>(std::abs(j - k)));
      break;
    case PsiKind::Singular:
      for (Index j = 0; j < q / 2; ++j) psi(j, j) = scale;
      break;
    case PsiKind::Diagonal:
      psi.diagonal().setConstant(scale);
      break;
    case PsiKind::Custom:
      if (custom.rows() != q || custom.cols() != q)
        fail(ErrorCode::DimensionMismatch, "custom psi must be q x q");
      psi = custom;
      break;
  }
  return psi;
}

Matrix scenario_psi(const Scenario& scenario) {
  return psi_matrix(scenario.psi_kind, scenario.q, scenario.psi_scale, scenario.psi_custom);
}

Matrix active_block_covariance(Index p, Index q, double rho) {
  const Index k = std::min(p, q);
  Matrix cov = Matrix::Identity(k + q, k + q);
  for (Index x = 0; x < k; ++x)
    for (Index z = 0; z < q; ++z) {
      const double v = std::pow(rho, static_cast<double>(z + 1));
      cov(x, k + z) = v;
      cov(k + z, x) = v;
    }
  return cov;
}

namespace {

// Factor F with F F^T = S for a PSD matrix S; rejects clearly indefinite input.
Matrix psd_factor(const Matrix& s, const char* what) {
  if (s.size() == 0) return s;
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(s);
  const double low = eig.eigenvalues().minCoeff();
  const double scale = std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
  if (low < -1e-10 * scale) {
    std::ostringstream msg;
    msg << what << " is not positive semidefinite (eigenvalue " << low << ")";
    fail(ErrorCode::InvalidArgument, msg.str());
  }
  return eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

std::uint64_t derive(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

constexpr std::uint64_t kCvSalt = 0x6376;
constexpr std::uint64_t kSplitSalt = 0x73706c;

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

std::vector<Index> inference_targets(const PipelineOptions& o) {
  std::vector<Index> t = o.coverage_coordinates;
  t.insert(t.end(), o.rejection_coordinates.begin(), o.rejection_coordinates.end());
  std::sort(t.begin(), t.end());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  return t;
}

void check_options(const Scenario& s, const PipelineOptions& o) {
  for (Index j : inference_targets(o))
    if (j < 0 || j >= s.p) fail(ErrorCode::InvalidArgument, "metric coordinate out of range");
  if (!o.fixed_a && o.a_grid.empty()) fail(ErrorCode::InvalidArgument, "a grid is empty");
  if (o.varcomp && s.q < 1) fail(ErrorCode::InvalidArgument, "variance components need q >= 1");
}

// Metrics of one pipeline run at a fixed proxy constant.
void evaluate(const SimulatedData& sim, double a, const PipelineOptions& o,
              std::uint64_t seed, ReplicationResult& out) {
  out.a = a;
  const Vector& beta = sim.truth.beta;
  InferenceOptions io;
  io.lasso = o.lasso;
  io.nodewise_lambda_scale = o.nodewise_lambda_scale;
  io.mode = o.mode;
  const std::vector<Index> targets = o.inference ? inference_targets(o) : std::vector<Index>{};
  const InferenceResult res = infer_coordinates(sim.dataset, a, targets, o.alpha, io);
  if (!res.failures.empty()) {
    std::ostringstream s;
    s << "coordinate " << res.failures.front().j + 1 << ": " << res.failures.front().message;
    fail(ErrorCode::Numerical, s.str());
  }
  out.lambda = res.fit.lambda;
  out.effective_sample_size = res.fit.effective_sample_size;
  out.sse = (res.fit.beta - beta).squaredNorm();
  out.kkt_residual = res.fit.kkt_residual;
  out.converged = res.fit.converged;

  auto record = [&](Index j) -> const InferenceRecord& {
    for (const auto& r : res.records)
      if (r.j == j) return r;
    fail(ErrorCode::Numerical, "missing inference record");
  };
  if (o.inference) {
    for (Index j : o.coverage_coordinates) {
      const InferenceRecord& r = record(j);
      out.covered.push_back(r.ci_lo <= beta[j] && beta[j] <= r.ci_hi);
      out.sd.push_back(std::sqrt(r.V_hat));
    }
    for (Index j : o.rejection_coordinates) {
      const InferenceRecord& r = record(j);
      out.rejected.push_back(!r.degenerate && r.p_value < o.alpha);
    }
    for (const auto& r : res.records) out.degenerate += r.degenerate ? 1 : 0;
  }

  if (o.varcomp) {
    VarCompOptions vo;
    vo.basis = make_basis(o.basis, sim.dataset.q());
    vo.lasso = o.lasso;
    vo.cv = CvOptions{o.cv_folds, derive(seed, kCvSalt)};
    vo.seed = derive(seed, kSplitSalt);
    vo.sample_split = o.sample_split;
    vo.cross_fit = o.cross_fit;
    vo.project_psd = o.project_psd;
    vo.a = a;
    if (!o.fixed_a && o.sample_split) vo.a_grid = o.a_grid;
    const VarCompFit vc = cross_fit_varcomp(sim.dataset, vo);
    out.sigma2_hat = vc.sigma2_e_hat;
    out.eta_hat = vc.eta_hat;
    out.eta_star = eta_from_psi(sim.truth.psi, vo.basis);
  }
}

template <class Task>
void parallel_for(Index count, int threads, Task task) {
  int workers = threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency());
  workers = std::max(1, std::min<int>(workers, static_cast<int>(std::max<Index>(count, 1))));
  if (workers == 1) {
    for (Index i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<Index> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (Index i = next++; i < count; i = next++) task(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace

SimulatedData generate_dataset(const Scenario& scenario) {
  const Index n = scenario.clusters();
  const Index p = scenario.p, q = scenario.q, m = scenario.m;
  if (p < 1 || q < 0 || m < 1) fail(ErrorCode::InvalidArgument, "scenario dimensions must be positive");
  if (!(scenario.rho >= 0.0 && scenario.rho < 1.0)) fail(ErrorCode::InvalidArgument, "rho must lie in [0, 1)");
  if (!(scenario.sigma2_e >= 0.0)) fail(ErrorCode::InvalidArgument, "sigma2_e must be >= 0");

  SimulatedData out{ClusteredDataset(), GroundTruth{}};
  out.truth.beta = scenario.beta();
  out.truth.psi = scenario_psi(scenario);
  out.truth.sigma2_e = scenario.sigma2_e;
  const Index k = std::min(p, q);
  const Matrix row_factor = psd_factor(active_block_covariance(p, q, scenario.rho), "joint (X, Z) covariance");
  const Matrix psi_factor = psd_factor(out.truth.psi, "psi");
  const double noise_sd = std::sqrt(scenario.sigma2_e);

  std::mt19937_64 rng(scenario.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Cluster> clusters;
  clusters.reserve(static_cast<std::size_t>(n));
  Vector draw(k + q);
  for (Index i = 0; i < n; ++i) {
    Cluster c;
    c.id = std::to_string(i + 1);
    c.X.resize(m, p);
    c.Z.resize(m, q);
    for (Index r = 0; r < m; ++r) {
      for (Index t = 0; t < k + q; ++t) draw[t] = normal(rng);
      const Vector active = row_factor * draw;
      c.X.row(r).head(k) = active.head(k).transpose();
      c.Z.row(r) = active.tail(q).transpose();
      for (Index j = k; j < p; ++j) c.X(r, j) = normal(rng);
    }
    Vector g(q);
    for (Index t = 0; t < q; ++t) g[t] = normal(rng);
    Vector gamma = psi_factor * g;
    c.y = c.X * out.truth.beta + c.Z * gamma;
    for (Index r = 0; r < m; ++r) c.y[r] += noise_sd * normal(rng);
    out.truth.gamma.push_back(std::move(gamma));
    clusters.push_back(std::move(c));
  }
  out.dataset = ClusteredDataset(std::move(clusters), p, q);
  return out;
}

std::uint64_t replication_seed(std::uint64_t master, Index rep) {
  return derive(master, static_cast<std::uint64_t>(rep) + 1);
}

ReplicationResult run_replication(const Scenario& scenario, const PipelineOptions& options,
                                  Index rep) {
  ReplicationResult out;
  out.rep = rep;
  out.seed = replication_seed(scenario.seed, rep);
  try {
    Scenario s = scenario;
    s.seed = out.seed;
    const SimulatedData sim = generate_dataset(s);
    double a = 0.0;
    if (options.fixed_a) {
      a = *options.fixed_a;
    } else {
      const CvOptions cv{options.cv_folds, derive(out.seed, kCvSalt)};
      a = cross_validate_a(sim.dataset, options.a_grid, options.lasso, cv).a_star;
    }
    evaluate(sim, a, options, out.seed, out);
    out.ok = true;
  } catch (const std::exception& e) {
    out.ok = false;
    out.failure = e.what();
  }
  return out;
}

McReport summarize(const Scenario& scenario, const PipelineOptions& options,
                   std::vector<ReplicationResult> results) {
  McReport r;
  r.scenario = scenario;
  r.options = options;
  r.reps = static_cast<Index>(results.size());
  const Vector beta = scenario.beta();
  for (Index j : options.coverage_coordinates) r.coverage.push_back({j, beta[j], 0.0, 0.0});
  for (Index j : options.rejection_coordinates) r.rejection.push_back({j, beta[j], 0.0, 0.0});
  const Index d = options.varcomp ? static_cast<Index>(make_basis(options.basis, scenario.q).size()) : 0;
  r.mae_eta = Vector::Zero(d);

  std::vector<double> l2, eta_l2;
  for (const auto& rep : results) {
    if (!rep.ok) {
      ++r.failed;
      std::ostringstream s;
      s << "replication " << rep.rep << ": " << rep.failure;
      r.failures.push_back(s.str());
      continue;
    }
    ++r.succeeded;
    for (std::size_t c = 0; c < rep.covered.size(); ++c) {
      r.coverage[c].rate += rep.covered[c];
      r.coverage[c].mean_sd += rep.sd[c];
    }
    for (std::size_t c = 0; c < rep.rejected.size(); ++c) r.rejection[c].rate += rep.rejected[c];
    r.mean_sse += rep.sse;
    l2.push_back(std::sqrt(rep.sse));
    r.mean_effective_sample_size += rep.effective_sample_size;
    r.mean_a += rep.a;
    r.max_kkt_residual = std::max(r.max_kkt_residual, rep.kkt_residual);
    r.nonconverged += rep.converged ? 0 : 1;
    r.degenerate += rep.degenerate;
    if (options.varcomp) {
      r.mae_sigma2 += std::abs(rep.sigma2_hat - scenario.sigma2_e);
      r.mae_eta += (rep.eta_hat - rep.eta_star).cwiseAbs();
      eta_l2.push_back((rep.eta_hat - rep.eta_star).norm());
    }
  }
  if (r.succeeded > 0) {
    const double k = static_cast<double>(r.succeeded);
    for (auto& c : r.coverage) {
      c.rate /= k;
      c.mean_sd /= k;
    }
    for (auto& c : r.rejection) c.rate /= k;
    r.mean_sse /= k;
    r.mean_effective_sample_size /= k;
    r.mean_a /= k;
    r.mae_sigma2 /= k;
    r.mae_eta /= k;
  }
  r.median_l2 = median(l2);
  r.median_eta_l2 = options.varcomp ? median(eta_l2) : 0.0;
  r.replications = std::move(results);
  return r;
}

McReport run_mc(const Scenario& scenario, Index reps, const PipelineOptions& options) {
  if (reps < 1) fail(ErrorCode::InvalidArgument, "reps must be >= 1");
  scenario.clusters();
  check_options(scenario, options);
  const auto start = std::chrono::steady_clock::now();
  std::vector<ReplicationResult> results(static_cast<std::size_t>(reps));
  parallel_for(reps, options.threads, [&](Index i) {
    results[static_cast<std::size_t>(i)] = run_replication(scenario, options, i);
  });
  McReport report = summarize(scenario, options, std::move(results));
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::vector<SweepRow> a_sweep(const Scenario& scenario, const std::vector<double>& a_grid,
                              Index reps, const PipelineOptions& options) {
  if (a_grid.empty()) fail(ErrorCode::InvalidArgument, "a grid is empty");
  if (reps < 1) fail(ErrorCode::InvalidArgument, "reps must be >= 1");
  if (options.coverage_coordinates.size() < 2)
    fail(ErrorCode::InvalidArgument, "the a sweep needs a signal and a null coverage coordinate");
  PipelineOptions o = options;
  o.varcomp = false;
  check_options(scenario, o);

  const std::size_t g = a_grid.size();
  std::vector<ReplicationResult> cells(g * static_cast<std::size_t>(reps));
  parallel_for(reps, o.threads, [&](Index rep) {
    const std::uint64_t seed = replication_seed(scenario.seed, rep);
    std::optional<SimulatedData> sim;
    std::string failure;
    try {
      Scenario s = scenario;
      s.seed = seed;
      sim.emplace(generate_dataset(s));
    } catch (const std::exception& e) {
      failure = e.what();
    }
    for (std::size_t k = 0; k < g; ++k) {
      ReplicationResult& cell = cells[k * static_cast<std::size_t>(reps) + static_cast<std::size_t>(rep)];
      cell.rep = rep;
      cell.seed = seed;
      if (!sim) {
        cell.failure = failure;
        continue;
      }
      try {
        evaluate(*sim, a_grid[k], o, seed, cell);
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.failure = e.what();
      }
    }
  });

  std::vector<SweepRow> rows;
  for (std::size_t k = 0; k < g; ++k) {
    std::vector<ReplicationResult> slice(cells.begin() + static_cast<std::ptrdiff_t>(k * reps),
                                         cells.begin() + static_cast<std::ptrdiff_t>((k + 1) * reps));
    PipelineOptions fixed = o;
    fixed.fixed_a = a_grid[k];
    const McReport r = summarize(scenario, fixed, std::move(slice));
    SweepRow row;
    row.a = a_grid[k];
    row.sse = r.mean_sse;
    row.mean_effective_sample_size = r.mean_effective_sample_size;
    row.cov_signal = r.coverage[0].rate;
    row.cov_null = r.coverage[1].rate;
    row.sd_signal = r.coverage[0].mean_sd;
    row.sd_null = r.coverage[1].mean_sd;
    row.succeeded = r.succeeded;
    rows.push_back(row);
  }
  return rows;
}

Vector dense_lasso(const Matrix& X, const Vector& y, double normalizer, double lambda,
                   const Vector& omega, double tolerance, int max_iterations) {
  const Index p = X.cols();
  if (omega.size() != p) fail(ErrorCode::DimensionMismatch, "omega must have length p");
  if (!(normalizer > 0.0)) fail(ErrorCode::InvalidArgument, "normalizer must be positive");
  const Matrix G = X.transpose() * X / normalizer;
  const Vector c = X.transpose() * y / normalizer;
  const double L = Eigen::SelfAdjointEigenSolver<Matrix>(G, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
  Vector x = Vector::Zero(p);
  if (!(L > 0.0)) return x;
  const Vector thresh = lambda * omega / L;
  auto prox = [&](const Vector& v) {
    const Vector step = v - (G * v - c) / L;
    return Vector((step.array().abs() - thresh.array()).max(0.0) * step.array().sign());
  };
  Vector z = x;
  double t = 1.0;
  for (int it = 0; it < max_iterations; ++it) {
    const Vector next = prox(z);
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    if ((z - next).dot(next - x) > 0.0) {
      z = next;
      t = 1.0;
    } else {
      z = next + ((t - 1.0) / t_next) * (next - x);
      t = t_next;
    }
    x = next;
    const double gap = (x - prox(x)).cwiseAbs().maxCoeff();
    if (gap <= tolerance * std::max(1.0, x.cwiseAbs().maxCoeff())) break;
  }
  return x;
}

DenseOracle dense_oracle_pipeline(const ClusteredDataset& dataset, double a, double lambda,
                                  const Vector& weights, bool standardize) {
  require_valid(dataset);
  const Index N = dataset.total_observations();
  if (N > 2000) fail(ErrorCode::InvalidArgument, "dense oracle is limited to N <= 2000");
  if (!(a >= 0.0)) fail(ErrorCode::InvalidArgument, "a must be >= 0");
  const Index p = dataset.p();
  DenseOracle out;
  out.sigma_a = Matrix::Identity(N, N);
  Matrix X(N, p);
  Vector y(N);
  Index row = 0;
  for (const auto& c : dataset.clusters()) {
    const Index m = c.size();
    out.sigma_a.block(row, row, m, m) += a * c.Z * c.Z.transpose();
    X.middleRows(row, m) = c.X;
    y.segment(row, m) = c.y;
    row += m;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(out.sigma_a);
  const Vector& ev = eig.eigenvalues();
  out.inv_sqrt = eig.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() *
                 eig.eigenvectors().transpose();
  out.effective_sample_size = ev.cwiseInverse().sum();
  out.X = out.inv_sqrt * X;
  out.y = out.inv_sqrt * y;
  out.omega = weights.size() > 0 ? weights : Vector::Ones(p);
  if (out.omega.size() != p) fail(ErrorCode::DimensionMismatch, "weights must have length p");
  if (standardize)
    out.omega = out.omega.cwiseProduct(
        (out.X.colwise().squaredNorm().transpose() / out.effective_sample_size).cwiseSqrt());
  out.beta = dense_lasso(out.X, out.y, out.effective_sample_size, lambda, out.omega);
  return out;
}

}  // namespace qlmm
