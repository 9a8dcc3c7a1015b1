#include "ssg/swap.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>

#include "ssg/errors.h"

namespace ssg {
namespace {

struct Candidate {
  double similarity;
  size_t i;
  size_t j;
};

// Greedy scan of candidates in the order given by `before`. A heap keeps the
// work proportional to the prefix actually consumed.
template <typename Before>
void GreedyDisjoint(std::vector<Candidate>& candidates, size_t axis_len,
                    size_t n_pairs, Before before, SwapPlan& plan) {
  // std heaps pop the largest element, so invert the order.
  auto after = [&](const Candidate& a, const Candidate& b) { return before(b, a); };
  std::make_heap(candidates.begin(), candidates.end(), after);
  std::vector<bool> used(axis_len, false);
  auto end = candidates.end();
  while (plan.pairs.size() < n_pairs && end != candidates.begin()) {
    std::pop_heap(candidates.begin(), end, after);
    --end;
    const Candidate& c = *end;
    if (used[c.i] || used[c.j]) continue;
    used[c.i] = used[c.j] = true;
    plan.pairs.emplace_back(c.i, c.j);
  }
}

void SwapRows(std::span<double> instance, size_t channels, size_t a, size_t b) {
  std::swap_ranges(instance.begin() + static_cast<std::ptrdiff_t>(a * channels),
                   instance.begin() + static_cast<std::ptrdiff_t>((a + 1) * channels),
                   instance.begin() + static_cast<std::ptrdiff_t>(b * channels));
}

void SwapColumns(std::span<double> instance, size_t tokens, size_t channels,
                 size_t a, size_t b) {
  for (size_t t = 0; t < tokens; ++t) {
    std::swap(instance[t * channels + a], instance[t * channels + b]);
  }
}

// Cosine similarity of the axis vectors of one instance. Spatial: rows
// (length D). Channel: columns (length T).
Matrix AxisSimilarity(std::span<const double> instance, size_t tokens,
                      size_t channels, SwapAxis axis) {
  Matrix vectors(tokens, channels,
                 std::vector<double>(instance.begin(), instance.end()));
  if (axis == SwapAxis::kChannel) vectors = vectors.Transposed();
  return CosineSimilarityMatrix(vectors);
}

SwapPlan SelectFromSimilarity(std::span<const double> sim, size_t n,
                              size_t n_pairs, SwapPolicy policy, RngStream& rng,
                              SwapAxis axis) {
  if (n_pairs > n / 2) {
    throw ShapeError("SelectSwapPairs: n_pairs " + std::to_string(n_pairs) +
                     " exceeds floor(" + std::to_string(n) + "/2)");
  }
  SwapPlan plan;
  plan.axis = axis;
  plan.axis_len = n;
  if (n_pairs == 0) return plan;
  plan.pairs.reserve(n_pairs);

  if (policy == SwapPolicy::kRandom) {
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    // Fisher-Yates, drawing from the caller's stream.
    for (size_t k = n - 1; k > 0; --k) std::swap(order[k], order[rng.UniformIndex(k + 1)]);
    for (size_t p = 0; p < n_pairs; ++p) {
      const size_t a = order[2 * p];
      const size_t b = order[2 * p + 1];
      plan.pairs.emplace_back(std::min(a, b), std::max(a, b));
    }
    return plan;
  }

  std::vector<Candidate> candidates;
  candidates.reserve(n * (n - 1) / 2);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) candidates.push_back({sim[i * n + j], i, j});
  }
  auto lexicographic = [](const Candidate& a, const Candidate& b) {
    return a.i != b.i ? a.i < b.i : a.j < b.j;
  };
  if (policy == SwapPolicy::kDissimilar) {
    GreedyDisjoint(candidates, n, n_pairs,
                   [&](const Candidate& a, const Candidate& b) {
                     if (a.similarity != b.similarity) return a.similarity < b.similarity;
                     return lexicographic(a, b);
                   },
                   plan);
  } else {
    GreedyDisjoint(candidates, n, n_pairs,
                   [&](const Candidate& a, const Candidate& b) {
                     if (a.similarity != b.similarity) return a.similarity > b.similarity;
                     return lexicographic(a, b);
                   },
                   plan);
  }
  return plan;
}

void CheckPlanAgainst(const SwapPlan& plan, SwapAxis axis, size_t len,
                      const char* op) {
  if (plan.axis != axis) {
    throw ShapeError(std::string(op) + ": plan axis is " +
                     std::string(ToString(plan.axis)));
  }
  if (plan.axis_len != len) {
    throw ShapeError(std::string(op) + ": plan axis_len " +
                     std::to_string(plan.axis_len) + " != tensor axis " +
                     std::to_string(len));
  }
  plan.Validate();
}

}  // namespace

std::string_view ToString(SwapPolicy policy) {
  switch (policy) {
    case SwapPolicy::kDissimilar: return "dissimilar";
    case SwapPolicy::kSimilar: return "similar";
    case SwapPolicy::kRandom: return "random";
  }
  return "?";
}

std::string_view ToString(SwapAxis axis) {
  return axis == SwapAxis::kSpatial ? "spatial" : "channel";
}

SwapPolicy ParseSwapPolicy(std::string_view text) {
  if (text == "dissimilar") return SwapPolicy::kDissimilar;
  if (text == "similar") return SwapPolicy::kSimilar;
  if (text == "random") return SwapPolicy::kRandom;
  throw ConfigError("unknown swap policy '" + std::string(text) +
                    "' (expected dissimilar|similar|random)");
}

std::vector<size_t> SwapPlan::Permutation() const {
  std::vector<size_t> perm(axis_len);
  std::iota(perm.begin(), perm.end(), size_t{0});
  for (auto [a, b] : pairs) std::swap(perm[a], perm[b]);
  return perm;
}

void SwapPlan::Validate() const {
  std::vector<bool> seen(axis_len, false);
  for (auto [a, b] : pairs) {
    if (a >= b || b >= axis_len) {
      throw ShapeError("SwapPlan: invalid pair (" + std::to_string(a) + "," +
                       std::to_string(b) + ") for axis_len " +
                       std::to_string(axis_len));
    }
    if (seen[a] || seen[b]) throw ShapeError("SwapPlan: pairs are not disjoint");
    seen[a] = seen[b] = true;
  }
}

std::string ToString(const SwapPlan& plan) {
  std::ostringstream out;
  out << "axis=" << ToString(plan.axis) << " pairs=[";
  for (size_t k = 0; k < plan.pairs.size(); ++k) {
    if (k > 0) out << ",";
    out << "(" << plan.pairs[k].first << "," << plan.pairs[k].second << ")";
  }
  out << "]";
  return out.str();
}

size_t PairCountFromRatio(double ratio, size_t axis_len) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw ConfigError("swap ratio must lie in [0, 1], got " + std::to_string(ratio));
  }
  if (axis_len < 2) throw ShapeError("PairCountFromRatio: axis_len must be >= 2");
  // The slack absorbs representation error such as 0.3 * 20 = 5.999...
  const double pairs = ratio * static_cast<double>(axis_len) / 2.0;
  return std::min(static_cast<size_t>(std::floor(pairs + 1e-9)), axis_len / 2);
}

SwapPlan SelectSwapPairs(const Matrix& similarity, size_t n_pairs,
                         SwapPolicy policy, RngStream& rng, SwapAxis axis) {
  if (similarity.rows() != similarity.cols()) {
    throw ShapeError("SelectSwapPairs: similarity matrix must be square");
  }
  return SelectFromSimilarity(similarity.data(), similarity.rows(), n_pairs,
                              policy, rng, axis);
}

TokenTensor ApplySwapSpatial(const TokenTensor& x, const SwapPlan& plan) {
  CheckPlanAgainst(plan, SwapAxis::kSpatial, x.tokens(), "ApplySwapSpatial");
  TokenTensor out = x;
  for (size_t b = 0; b < out.batch(); ++b) {
    for (auto [i, j] : plan.pairs) SwapRows(out.instance(b), out.channels(), i, j);
  }
  return out;
}

TokenTensor ApplySwapChannel(const TokenTensor& x, const SwapPlan& plan) {
  CheckPlanAgainst(plan, SwapAxis::kChannel, x.channels(), "ApplySwapChannel");
  TokenTensor out = x;
  for (size_t b = 0; b < out.batch(); ++b) {
    for (auto [c, d] : plan.pairs) {
      SwapColumns(out.instance(b), out.tokens(), out.channels(), c, d);
    }
  }
  return out;
}

SwapPlan PlanForInstance(const Matrix& instance, SwapAxis axis, double ratio,
                         SwapPolicy policy, RngStream& rng) {
  CheckFinite(instance.data(), "PlanForInstance input");
  return PlanForInstance(instance.data(), instance.rows(), instance.cols(), axis,
                         ratio, policy, rng);
}

SwapPlan PlanForInstance(std::span<const double> instance, size_t tokens,
                         size_t channels, SwapAxis axis, double ratio,
                         SwapPolicy policy, RngStream& rng) {
  const size_t n = axis == SwapAxis::kSpatial ? tokens : channels;
  const size_t n_pairs = PairCountFromRatio(ratio, n);
  if (n_pairs == 0) {
    SwapPlan plan;
    plan.axis = axis;
    plan.axis_len = n;
    return plan;
  }
  if (policy == SwapPolicy::kRandom) {
    return SelectFromSimilarity({}, n, n_pairs, policy, rng, axis);
  }
  const Matrix sim = AxisSimilarity(instance, tokens, channels, axis);
  return SelectFromSimilarity(sim.data(), n, n_pairs, policy, rng, axis);
}

void ApplySwapInPlace(std::span<double> instance, size_t tokens,
                      size_t channels, const SwapPlan& plan) {
  if (plan.axis == SwapAxis::kSpatial) {
    for (auto [i, j] : plan.pairs) SwapRows(instance, channels, i, j);
  } else {
    for (auto [c, d] : plan.pairs) SwapColumns(instance, tokens, channels, c, d);
  }
}

}  // namespace ssg
