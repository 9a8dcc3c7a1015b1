#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ssg/rng.h"
#include "ssg/tensor.h"

namespace ssg {

enum class SwapPolicy { kDissimilar, kSimilar, kRandom };
enum class SwapAxis { kSpatial, kChannel };

std::string_view ToString(SwapPolicy policy);
std::string_view ToString(SwapAxis axis);
// Accepts "dissimilar", "similar", "random". Throws ConfigError otherwise.
SwapPolicy ParseSwapPolicy(std::string_view text);

// Disjoint index pairs along one axis. Pairs are stored with first < second.
struct SwapPlan {
  SwapAxis axis = SwapAxis::kSpatial;
  size_t axis_len = 0;
  std::vector<std::pair<size_t, size_t>> pairs;

  bool empty() const { return pairs.empty(); }
  // perm[i] is the slot whose content lands in slot i. An involution.
  std::vector<size_t> Permutation() const;
  // Throws ShapeError if an index is out of range, repeated, or unordered.
  void Validate() const;

  bool operator==(const SwapPlan&) const = default;
};

// Debug rendering, e.g. "axis=spatial pairs=[(0,3),(1,2)]".
std::string ToString(const SwapPlan& plan);

// N = floor(r * axis_len / 2). Throws ConfigError unless 0 <= r <= 1.
size_t PairCountFromRatio(double ratio, size_t axis_len);

// Greedy disjoint selection over all unordered pairs (i < j).
// kDissimilar scans by ascending similarity, kSimilar by descending; ties
// fall back to lexicographic (i, j). kRandom shuffles 0..n-1 with `rng` and
// takes consecutive pairs. Only kRandom consumes draws.
SwapPlan SelectSwapPairs(const Matrix& similarity, size_t n_pairs,
                         SwapPolicy policy, RngStream& rng,
                         SwapAxis axis = SwapAxis::kSpatial);

// Exchanges whole token vectors (spatial) or channel columns (channel) in
// every batch element.
TokenTensor ApplySwapSpatial(const TokenTensor& x, const SwapPlan& plan);
TokenTensor ApplySwapChannel(const TokenTensor& x, const SwapPlan& plan);

// Builds the plan for a single T x D instance: normalize the axis vectors,
// take cosine similarities, convert the ratio to a pair count, select.
SwapPlan PlanForInstance(const Matrix& instance, SwapAxis axis, double ratio,
                         SwapPolicy policy, RngStream& rng);

// In-place variants over one instance stored row-major as tokens x channels.
// Used on the denoiser's hot path.
SwapPlan PlanForInstance(std::span<const double> instance, size_t tokens,
                         size_t channels, SwapAxis axis, double ratio,
                         SwapPolicy policy, RngStream& rng);
void ApplySwapInPlace(std::span<double> instance, size_t tokens,
                      size_t channels, const SwapPlan& plan);

}  // namespace ssg
