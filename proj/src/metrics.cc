#include "ssg/metrics.h"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <string>

#include "eigen_util.h"
#include "ssg/errors.h"

namespace ssg {
namespace {

constexpr double kNegativeEigenTolerance = 1e-8;

void RequireAtLeastTwo(const SampleSet& s, const char* op) {
  if (s.count < 2) throw ShapeError(std::string(op) + ": need at least 2 samples");
}

void RequireSameDim(size_t a, size_t b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": dimensions " + std::to_string(a) + " and " +
                     std::to_string(b) + " differ");
  }
}

// Symmetric square root with the eigenvalue clamp.
Eigen::MatrixXd SqrtPsd(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
  if (solver.info() != Eigen::Success) {
    throw NumericalError(std::string(what) + ": eigendecomposition failed");
  }
  Eigen::VectorXd values = solver.eigenvalues();
  const double scale = std::max(1.0, values.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (values[i] < -kNegativeEigenTolerance * scale) {
      throw NumericalError(std::string(what) + ": eigenvalue " + std::to_string(values[i]) +
                           " is not positive semidefinite");
    }
    values[i] = std::sqrt(std::max(values[i], 0.0));
  }
  return solver.eigenvectors() * values.asDiagonal() * solver.eigenvectors().transpose();
}

}  // namespace

SampleSet::SampleSet(size_t count, size_t dim, std::vector<double> values)
    : count(count), dim(dim), values(std::move(values)) {
  if (this->values.size() != count * dim) {
    throw ShapeError("SampleSet: expected " + std::to_string(count * dim) +
                     " values, got " + std::to_string(this->values.size()));
  }
}

GaussianSummary FitGaussian(const SampleSet& s) {
  RequireAtLeastTwo(s, "FitGaussian");
  CheckFinite(s.values, "FitGaussian input");
  const ConstRowMap x(s.values.data(), s.count, s.dim);
  // Fixed summation order; Eigen's reductions over mapped buffers depend on
  // their alignment, which would make results vary between runs.
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(s.dim));
  for (size_t i = 0; i < s.count; ++i) {
    for (size_t c = 0; c < s.dim; ++c) mean[static_cast<Eigen::Index>(c)] += s.values[i * s.dim + c];
  }
  mean /= static_cast<double>(s.count);
  const RowMatrix centered = x.rowwise() - mean;
  RowMatrix cov = (centered.transpose() * centered) / static_cast<double>(s.count - 1);
  cov = 0.5 * (cov + cov.transpose()).eval();

  GaussianSummary out;
  out.mean.assign(mean.data(), mean.data() + s.dim);
  out.covariance = Matrix(s.dim, s.dim);
  RowMap(out.covariance.mutable_data().data(), s.dim, s.dim) = cov;
  return out;
}

double FrechetDistance(const GaussianSummary& a, const GaussianSummary& b) {
  const size_t d = a.mean.size();
  RequireSameDim(d, b.mean.size(), "FrechetDistance");
  if (a.covariance.rows() != d || a.covariance.cols() != d ||
      b.covariance.rows() != d || b.covariance.cols() != d) {
    throw ShapeError("FrechetDistance: covariance shape does not match mean");
  }
  const Eigen::MatrixXd sa = ConstRowMap(a.covariance.data().data(), d, d);
  const Eigen::MatrixXd sb = ConstRowMap(b.covariance.data().data(), d, d);

  // tr((Sa Sb)^1/2) = tr((Sa^1/2 Sb Sa^1/2)^1/2), the inner matrix being PSD.
  const Eigen::MatrixXd root_a = SqrtPsd(sa, "FrechetDistance");
  Eigen::MatrixXd inner = root_a * sb * root_a;
  inner = 0.5 * (inner + inner.transpose()).eval();
  const double cross = SqrtPsd(inner, "FrechetDistance").trace();

  double mean_term = 0.0;
  for (size_t i = 0; i < d; ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  const double value = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
  if (!std::isfinite(value)) throw NumericalError("FrechetDistance: non-finite result");
  return std::max(value, 0.0);
}

double Wasserstein2Squared1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw ShapeError("Wasserstein2Squared1d: empty input");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a.size() == b.size()) {
    double sum = 0.0;
    for (size_t i = 0; i < a.size(); ++i) sum += (a[i] - b[i]) * (a[i] - b[i]);
    return sum / static_cast<double>(a.size());
  }
  // Integrate (Fa^-1(u) - Fb^-1(u))^2 over the merged breakpoints i/n, j/m.
  const double n = static_cast<double>(a.size());
  const double m = static_cast<double>(b.size());
  size_t i = 0;
  size_t j = 0;
  double u = 0.0;
  double sum = 0.0;
  while (i < a.size() && j < b.size()) {
    const double next_a = static_cast<double>(i + 1) / n;
    const double next_b = static_cast<double>(j + 1) / m;
    const double next = std::min(next_a, next_b);
    const double diff = a[i] - b[j];
    sum += (next - u) * diff * diff;
    u = next;
    // Compare integer products so coincident breakpoints advance together.
    const size_t lhs = (i + 1) * b.size();
    const size_t rhs = (j + 1) * a.size();
    if (lhs <= rhs) ++i;
    if (rhs <= lhs) ++j;
  }
  return sum;
}

double SlicedWasserstein2(const SampleSet& a, const SampleSet& b, size_t n_projections,
                          RngStream& rng) {
  RequireSameDim(a.dim, b.dim, "SlicedWasserstein2");
  if (a.count == 0 || b.count == 0) throw ShapeError("SlicedWasserstein2: empty set");
  if (n_projections == 0) throw ConfigError("SlicedWasserstein2: n_projections must be > 0");
  const size_t d = a.dim;
  std::vector<double> dir(d);
  std::vector<double> pa(a.count);
  std::vector<double> pb(b.count);
  double total = 0.0;
  for (size_t p = 0; p < n_projections; ++p) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (double& v : dir) {
        v = rng.Normal();
        norm += v * v;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (double& v : dir) v /= norm;
    auto project = [&](const SampleSet& s, std::vector<double>& out) {
      for (size_t i = 0; i < s.count; ++i) {
        auto r = s.row(i);
        double dot = 0.0;
        for (size_t c = 0; c < d; ++c) dot += r[c] * dir[c];
        out[i] = dot;
      }
    };
    project(a, pa);
    project(b, pb);
    total += Wasserstein2Squared1d(pa, pb);
  }
  return std::sqrt(total / static_cast<double>(n_projections));
}

double PairwiseDiversity(const SampleSet& s) {
  RequireAtLeastTwo(s, "PairwiseDiversity");
  double sum = 0.0;
  for (size_t i = 0; i < s.count; ++i) {
    auto ri = s.row(i);
    for (size_t j = i + 1; j < s.count; ++j) {
      auto rj = s.row(j);
      double sq = 0.0;
      for (size_t c = 0; c < s.dim; ++c) sq += (ri[c] - rj[c]) * (ri[c] - rj[c]);
      sum += std::sqrt(sq);
    }
  }
  const double pairs = 0.5 * static_cast<double>(s.count) * static_cast<double>(s.count - 1);
  return sum / pairs;
}

}  // namespace ssg
