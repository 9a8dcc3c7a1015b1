#include "ssg/image_io.h"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "ssg/errors.h"

namespace ssg {

uint8_t PixelToByte(double v) {
  const double scaled = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<uint8_t>(scaled);
}

GrayImage TileImages(std::span<const double> images, size_t count, size_t side,
                     size_t columns) {
  if (count == 0 || side == 0 || columns == 0) throw ShapeError("TileImages: empty grid");
  if (images.size() != count * side * side) throw ShapeError("TileImages: size mismatch");
  const size_t cols = std::min(columns, count);
  const size_t rows = (count + cols - 1) / cols;
  GrayImage out;
  out.width = cols * (side + 1) + 1;
  out.height = rows * (side + 1) + 1;
  out.pixels.assign(out.width * out.height, 0);
  for (size_t i = 0; i < count; ++i) {
    const size_t x0 = (i % cols) * (side + 1) + 1;
    const size_t y0 = (i / cols) * (side + 1) + 1;
    for (size_t y = 0; y < side; ++y) {
      for (size_t x = 0; x < side; ++x) {
        out.pixels[(y0 + y) * out.width + x0 + x] =
            PixelToByte(images[i * side * side + y * side + x]);
      }
    }
  }
  return out;
}

GrayImage MagnitudeImage(std::span<const double> map, size_t width, size_t height,
                         double scale) {
  if (map.size() != width * height) throw ShapeError("MagnitudeImage: size mismatch");
  GrayImage out{width, height, std::vector<uint8_t>(width * height, 0)};
  if (!(scale > 0.0)) return out;
  for (size_t i = 0; i < map.size(); ++i) {
    const double v = std::clamp(map[i] / scale, 0.0, 1.0);
    out.pixels[i] = static_cast<uint8_t>(std::round(v * 255.0));
  }
  return out;
}

std::string EncodePpm(const GrayImage& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " +
                    std::to_string(image.height) + "\n255\n";
  out.reserve(out.size() + image.pixels.size() * 3);
  for (uint8_t p : image.pixels) {
    out.push_back(static_cast<char>(p));
    out.push_back(static_cast<char>(p));
    out.push_back(static_cast<char>(p));
  }
  return out;
}

void WritePpm(const std::string& path, const GrayImage& image) {
  const std::string bytes = EncodePpm(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write image '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for image '" + path + "'");
}

}  // namespace ssg
