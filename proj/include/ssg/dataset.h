#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "ssg/denoiser.h"

namespace ssg {

enum class ShapeClass : size_t { kCircle = 0, kSquare = 1, kCross = 2 };
inline constexpr size_t kShapeClassCount = 3;
std::string_view ToString(ShapeClass c);

struct DatasetSpec {
  size_t image_side = 16;
  size_t samples_per_class = 1000;
  size_t heldout_per_class = 86;
  // Shape size as a fraction of the image side, drawn uniformly.
  double size_min = 0.45;
  double size_max = 0.75;
  // Maximum center offset in pixels along each axis.
  double jitter = 2.0;
  // Supersampling factor per pixel axis for anti-aliased coverage.
  size_t supersample = 4;

  void Validate() const;
  bool operator==(const DatasetSpec&) const = default;
};

// count images of side x side pixels in [-1, 1], background -1.
struct LabeledImages {
  size_t side = 0;
  std::vector<double> pixels;
  std::vector<size_t> labels;

  size_t count() const { return labels.size(); }
  std::span<const double> image(size_t i) const {
    return {pixels.data() + i * side * side, side * side};
  }
};

// Classes interleaved (0, 1, 2, 0, ...). Each image uses its own stream,
// so the set is a pure function of (spec, seed, split).
LabeledImages GenerateDataset(const DatasetSpec& spec, uint64_t seed, bool heldout = false);

// One shape with explicit geometry; coordinates in pixels.
std::vector<double> RenderShape(ShapeClass shape, size_t side, double center_x,
                                double center_y, double size, size_t supersample);

std::vector<Condition> Conditions(const LabeledImages& data);

}  // namespace ssg
