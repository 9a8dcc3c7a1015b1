#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ssg {

// 8-bit grayscale raster.
struct GrayImage {
  size_t width = 0;
  size_t height = 0;
  std::vector<uint8_t> pixels;
};

// [-1, 1] -> 0..255, rounded to nearest, clamped.
uint8_t PixelToByte(double v);

// count images of side x side tiled row-major in `columns` columns with a
// one-pixel separator.
GrayImage TileImages(std::span<const double> images, size_t count, size_t side,
                     size_t columns);

// Values in [0, scale] -> 0..255. scale <= 0 yields an all-black image.
GrayImage MagnitudeImage(std::span<const double> map, size_t width, size_t height,
                         double scale);

// Binary P6 with R = G = B.
std::string EncodePpm(const GrayImage& image);
void WritePpm(const std::string& path, const GrayImage& image);

}  // namespace ssg
