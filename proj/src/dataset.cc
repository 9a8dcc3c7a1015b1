#include "ssg/dataset.h"

#include <cmath>
#include <string>

#include "ssg/errors.h"
#include "ssg/rng.h"

namespace ssg {
namespace {

bool Covers(ShapeClass shape, double dx, double dy, double size) {
  const double half = 0.5 * size;
  switch (shape) {
    case ShapeClass::kCircle:
      return dx * dx + dy * dy <= half * half;
    case ShapeClass::kSquare:
      return std::abs(dx) <= half && std::abs(dy) <= half;
    case ShapeClass::kCross: {
      const double arm = 0.18 * size;
      const bool in_box = std::abs(dx) <= half && std::abs(dy) <= half;
      return in_box && (std::abs(dx) <= arm || std::abs(dy) <= arm);
    }
  }
  return false;
}

}  // namespace

std::string_view ToString(ShapeClass c) {
  switch (c) {
    case ShapeClass::kCircle: return "circle";
    case ShapeClass::kSquare: return "square";
    case ShapeClass::kCross: return "cross";
  }
  return "?";
}

void DatasetSpec::Validate() const {
  auto fail = [](const char* field, const std::string& why) {
    throw ConfigError(std::string("dataset.") + field + ": " + why);
  };
  if (image_side < 4) fail("image_side", "must be >= 4");
  if (samples_per_class == 0) fail("samples_per_class", "must be >= 1");
  if (heldout_per_class == 0) fail("heldout_per_class", "must be >= 1");
  if (!(size_min > 0.0) || !(size_max >= size_min) || size_max > 1.0) {
    fail("size_min", "need 0 < size_min <= size_max <= 1");
  }
  if (!(jitter >= 0.0)) fail("jitter", "must be >= 0");
  if (supersample == 0) fail("supersample", "must be >= 1");
}

std::vector<double> RenderShape(ShapeClass shape, size_t side, double center_x,
                                double center_y, double size, size_t supersample) {
  std::vector<double> img(side * side);
  const double inv = 1.0 / static_cast<double>(supersample);
  const double hits_norm = 1.0 / static_cast<double>(supersample * supersample);
  for (size_t y = 0; y < side; ++y) {
    for (size_t x = 0; x < side; ++x) {
      size_t hits = 0;
      for (size_t sy = 0; sy < supersample; ++sy) {
        for (size_t sx = 0; sx < supersample; ++sx) {
          const double px = static_cast<double>(x) + (static_cast<double>(sx) + 0.5) * inv;
          const double py = static_cast<double>(y) + (static_cast<double>(sy) + 0.5) * inv;
          hits += Covers(shape, px - center_x, py - center_y, size) ? 1 : 0;
        }
      }
      img[y * side + x] = 2.0 * static_cast<double>(hits) * hits_norm - 1.0;
    }
  }
  return img;
}

LabeledImages GenerateDataset(const DatasetSpec& spec, uint64_t seed, bool heldout) {
  spec.Validate();
  const size_t per_class = heldout ? spec.heldout_per_class : spec.samples_per_class;
  const size_t total = per_class * kShapeClassCount;
  const size_t side = spec.image_side;
  const RngStream root = RngStream::ForPurpose(seed, heldout ? "dataset-heldout" : "dataset");

  LabeledImages out;
  out.side = side;
  out.pixels.reserve(total * side * side);
  out.labels.reserve(total);
  const double mid = 0.5 * static_cast<double>(side);
  for (size_t i = 0; i < total; ++i) {
    const auto shape = static_cast<ShapeClass>(i % kShapeClassCount);
    RngStream rng = root.Derive(i);
    const double size =
        static_cast<double>(side) *
        (spec.size_min + (spec.size_max - spec.size_min) * rng.Uniform());
    const double cx = mid + spec.jitter * (2.0 * rng.Uniform() - 1.0);
    const double cy = mid + spec.jitter * (2.0 * rng.Uniform() - 1.0);
    const std::vector<double> img = RenderShape(shape, side, cx, cy, size, spec.supersample);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    out.labels.push_back(static_cast<size_t>(shape));
  }
  return out;
}

std::vector<Condition> Conditions(const LabeledImages& data) {
  std::vector<Condition> out;
  out.reserve(data.count());
  for (size_t label : data.labels) out.push_back(Condition::Class(label));
  return out;
}

}  // namespace ssg
