#include "qlmm/model.hpp"

#include "qlmm/error.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace qlmm {

ClusteredDataset::ClusteredDataset(std::vector<Cluster> clusters, Index p, Index q)
    : clusters_(std::move(clusters)), p_(p), q_(q) {}

ClusteredDataset::ClusteredDataset(std::vector<Cluster> clusters)
    : clusters_(std::move(clusters)) {
  if (!clusters_.empty()) {
    p_ = clusters_.front().X.cols();
    q_ = clusters_.front().Z.cols();
  }
}

Index ClusteredDataset::total_observations() const {
  Index total = 0;
  for (const auto& c : clusters_) total += c.size();
  return total;
}

Index ClusteredDataset::max_cluster_size() const {
  Index best = 0;
  for (const auto& c : clusters_) best = std::max(best, c.size());
  return best;
}

ClusteredDataset ClusteredDataset::subset(const std::vector<Index>& indices) const {
  std::vector<Cluster> picked;
  picked.reserve(indices.size());
  for (Index i : indices) {
    if (i < 0 || i >= n()) fail(ErrorCode::InvalidArgument, "cluster index out of range");
    picked.push_back(clusters_[static_cast<std::size_t>(i)]);
  }
  return ClusteredDataset(std::move(picked), p_, q_);
}

namespace {

bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace

std::vector<Violation> validate_dataset(const ClusteredDataset& dataset) {
  std::vector<Violation> out;
  if (dataset.n() < 1) out.push_back({"", "dataset has no clusters"});
  for (const auto& c : dataset.clusters()) {
    const Index m = c.y.size();
    auto add = [&](const std::string& msg) { out.push_back({c.id, msg}); };
    if (m < 1) add("cluster has no observations");
    if (c.X.rows() != m) {
      std::ostringstream s;
      s << "X has " << c.X.rows() << " rows but y has length " << m;
      add(s.str());
    }
    if (c.Z.rows() != m && !(c.Z.cols() == 0 && dataset.q() == 0 && c.Z.rows() == 0)) {
      std::ostringstream s;
      s << "Z has " << c.Z.rows() << " rows but y has length " << m;
      add(s.str());
    }
    if (c.X.cols() != dataset.p()) {
      std::ostringstream s;
      s << "X has " << c.X.cols() << " columns, expected p = " << dataset.p();
      add(s.str());
    }
    if (c.Z.cols() != dataset.q()) {
      std::ostringstream s;
      s << "Z has " << c.Z.cols() << " columns, expected q = " << dataset.q();
      add(s.str());
    }
    if (!c.y.allFinite()) add("non-finite entry in y");
    if (!all_finite(c.X)) add("non-finite entry in X");
    if (!all_finite(c.Z)) add("non-finite entry in Z");
  }
  return out;
}

void require_valid(const ClusteredDataset& dataset) {
  const auto report = validate_dataset(dataset);
  if (report.empty()) return;
  std::ostringstream s;
  s << "invalid dataset:";
  for (const auto& v : report) s << " [" << v.cluster_id << "] " << v.message << ';';
  fail(ErrorCode::DimensionMismatch, s.str());
}

Dimensions dimensions(const ClusteredDataset& dataset) {
  Dimensions d;
  d.n = dataset.n();
  d.p = dataset.p();
  d.q = dataset.q();
  d.m.reserve(dataset.clusters().size());
  for (const auto& c : dataset.clusters()) {
    d.m.push_back(c.size());
    d.N += c.size();
  }
  return d;
}

ClusteredDataset with_intercept(const ClusteredDataset& dataset) {
  std::vector<Cluster> out;
  out.reserve(dataset.clusters().size());
  for (const auto& c : dataset.clusters()) {
    Cluster copy;
    copy.id = c.id;
    copy.y = c.y;
    copy.Z = c.Z;
    copy.X.resize(c.X.rows(), c.X.cols() + 1);
    copy.X.col(0).setOnes();
    copy.X.rightCols(c.X.cols()) = c.X;
    out.push_back(std::move(copy));
  }
  return ClusteredDataset(std::move(out), dataset.p() + 1, dataset.q());
}

std::vector<Index> FixedEffects::support() const {
  std::vector<Index> s;
  for (Index j = 0; j < beta.size(); ++j)
    if (beta[j] != 0.0) s.push_back(j);
  return s;
}

Matrix VarComps::psi() const {
  if (basis.empty()) return Matrix();
  Matrix out = Matrix::Zero(basis.front().rows(), basis.front().cols());
  for (std::size_t j = 0; j < basis.size(); ++j) out += eta[static_cast<Index>(j)] * basis[j];
  return out;
}

namespace {

void mix(std::uint64_t& h, const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
}

}  // namespace

std::uint64_t fingerprint(const ClusteredDataset& dataset) {
  std::uint64_t h = 14695981039346656037ULL;
  const Index dims[2] = {dataset.p(), dataset.q()};
  mix(h, dims, sizeof(dims));
  for (const auto& c : dataset.clusters()) {
    mix(h, c.y.data(), sizeof(double) * static_cast<std::size_t>(c.y.size()));
    mix(h, c.X.data(), sizeof(double) * static_cast<std::size_t>(c.X.size()));
    mix(h, c.Z.data(), sizeof(double) * static_cast<std::size_t>(c.Z.size()));
  }
  return h;
}

}  // namespace qlmm
