#include "ase/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

#include "ase/errors.hpp"

namespace ase {

namespace {

std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

}  // namespace

Image Image::filled(Eigen::Index width, Eigen::Index height, Eigen::Index channels, float value) {
  Image img;
  img.width = width;
  img.height = height;
  img.channels = channels;
  img.pixels.assign(static_cast<std::size_t>(width * height * channels), value);
  return img;
}

Image read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open image " + path.string());
  const std::string magic = header_token(in);
  Eigen::Index channels = 0;
  if (magic == "P6") {
    channels = 3;
  } else if (magic == "P5") {
    channels = 1;
  } else {
    throw ValidationError(path.string() + ": unsupported image format (expected binary PPM/PGM)");
  }
  Image img;
  try {
    img.width = std::stol(header_token(in));
    img.height = std::stol(header_token(in));
    const long maxval = std::stol(header_token(in));
    if (maxval <= 0 || maxval > 255) throw ValidationError(path.string() + ": only 8-bit images are supported");
    if (img.width <= 0 || img.height <= 0) throw ValidationError(path.string() + ": empty image");
    img.channels = channels;
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(img.width * img.height * channels));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw ValidationError(path.string() + ": truncated");
    img.pixels.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[i] = static_cast<float>(raw[i]) / float(maxval);
  } catch (const std::invalid_argument&) {
    throw ValidationError(path.string() + ": malformed header");
  }
  return img;
}

void write_image(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 3 && image.channels != 1) throw ContractError("write_image: 1 or 3 channels required");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  std::vector<std::uint8_t> raw(image.pixels.size());
  std::transform(image.pixels.begin(), image.pixels.end(), raw.begin(), to_byte);
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw ValidationError("write failed for " + path.string());
}

void write_pgm(const std::filesystem::path& path, Eigen::Index width, Eigen::Index height,
               const std::vector<std::uint8_t>& bytes) {
  if (static_cast<Eigen::Index>(bytes.size()) != width * height) throw ContractError("write_pgm: size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ValidationError("write failed for " + path.string());
}

Image resize_bilinear(const Image& image, Eigen::Index width, Eigen::Index height) {
  if (width <= 0 || height <= 0) throw ContractError("resize_bilinear: target extents must be positive");
  if (width == image.width && height == image.height) return image;
  Image out = Image::filled(width, height, image.channels, 0.0f);
  const double sx = double(image.width) / double(width);
  const double sy = double(image.height) / double(height);
  for (Eigen::Index y = 0; y < height; ++y) {
    const double fy = std::clamp((double(y) + 0.5) * sy - 0.5, 0.0, double(image.height - 1));
    const auto y0 = static_cast<Eigen::Index>(std::floor(fy));
    const Eigen::Index y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - double(y0);
    for (Eigen::Index x = 0; x < width; ++x) {
      const double fx = std::clamp((double(x) + 0.5) * sx - 0.5, 0.0, double(image.width - 1));
      const auto x0 = static_cast<Eigen::Index>(std::floor(fx));
      const Eigen::Index x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - double(x0);
      for (Eigen::Index c = 0; c < image.channels; ++c) {
        const double top = (1 - wx) * image.at(y0, x0, c) + wx * image.at(y0, x1, c);
        const double bottom = (1 - wx) * image.at(y1, x0, c) + wx * image.at(y1, x1, c);
        out.at(y, x, c) = static_cast<float>((1 - wy) * top + wy * bottom);
      }
    }
  }
  return out;
}

Image crop(const Image& image, Eigen::Index x0, Eigen::Index y0, Eigen::Index width, Eigen::Index height) {
  if (x0 < 0 || y0 < 0 || width <= 0 || height <= 0 || x0 + width > image.width || y0 + height > image.height) {
    throw ContractError("crop: region outside image");
  }
  Image out = Image::filled(width, height, image.channels, 0.0f);
  for (Eigen::Index y = 0; y < height; ++y)
    for (Eigen::Index x = 0; x < width; ++x)
      for (Eigen::Index c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(y0 + y, x0 + x, c);
  return out;
}

Image quantize_8bit(const Image& image) {
  Image out = image;
  for (float& v : out.pixels) v = static_cast<float>(to_byte(v)) / 255.0f;
  return out;
}

}  // namespace ase
