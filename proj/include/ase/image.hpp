#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Core>

namespace ase {

/// 8-bit-sourced raster stored as floats in [0, 1], row-major HWC.
struct Image {
  Eigen::Index width = 0;
  Eigen::Index height = 0;
  Eigen::Index channels = 3;
  std::vector<float> pixels;

  static Image filled(Eigen::Index width, Eigen::Index height, Eigen::Index channels, float value);

  float& at(Eigen::Index y, Eigen::Index x, Eigen::Index c) { return pixels[index(y, x, c)]; }
  float at(Eigen::Index y, Eigen::Index x, Eigen::Index c) const { return pixels[index(y, x, c)]; }
  bool empty() const { return pixels.empty(); }

  bool operator==(const Image&) const = default;

 private:
  std::size_t index(Eigen::Index y, Eigen::Index x, Eigen::Index c) const {
    return static_cast<std::size_t>((y * width + x) * channels + c);
  }
};

/// Reads binary PPM (P6) or PGM (P5) with maxval <= 255.
Image read_image(const std::filesystem::path& path);

/// Writes P6 for 3 channels, P5 for 1 channel; values are clamped and rounded to 8 bits.
void write_image(const std::filesystem::path& path, const Image& image);

/// Writes an 8-bit grayscale PGM (P5) from row-major bytes.
void write_pgm(const std::filesystem::path& path, Eigen::Index width, Eigen::Index height,
               const std::vector<std::uint8_t>& bytes);

/// Bilinear resize with pixel-center alignment.
Image resize_bilinear(const Image& image, Eigen::Index width, Eigen::Index height);

Image crop(const Image& image, Eigen::Index x0, Eigen::Index y0, Eigen::Index width, Eigen::Index height);

/// Quantize to 8 bits and back; images on disk are 8-bit.
Image quantize_8bit(const Image& image);

}  // namespace ase
