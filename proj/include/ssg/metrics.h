#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ssg/rng.h"
#include "ssg/tensor.h"

namespace ssg {

// N flattened vectors of length dim, row-major.
struct SampleSet {
  size_t count = 0;
  size_t dim = 0;
  std::vector<double> values;

  SampleSet() = default;
  // Throws ShapeError if values.size() != count * dim.
  SampleSet(size_t count, size_t dim, std::vector<double> values);

  std::span<const double> row(size_t i) const { return {values.data() + i * dim, dim}; }
};

struct GaussianSummary {
  std::vector<double> mean;
  Matrix covariance;
};

// Sample mean and unbiased covariance. Throws ShapeError for N < 2.
GaussianSummary FitGaussian(const SampleSet& s);

// Squared 2-Wasserstein distance between two Gaussians. Eigenvalues of the
// inner product below -1e-8 (relative to the spectrum scale) raise
// NumericalError; smaller negative ones are clamped to zero.
double FrechetDistance(const GaussianSummary& a, const GaussianSummary& b);

// Root-mean over random unit directions of the squared 1-D W2 distance of
// the projections. Unequal counts are aligned on a merged quantile grid.
double SlicedWasserstein2(const SampleSet& a, const SampleSet& b,
                          size_t n_projections, RngStream& rng);

// Exact squared W2 between two 1-D empirical distributions.
double Wasserstein2Squared1d(std::vector<double> a, std::vector<double> b);

// Mean L2 distance over all unordered pairs. Throws ShapeError for N < 2.
double PairwiseDiversity(const SampleSet& s);

}  // namespace ssg
