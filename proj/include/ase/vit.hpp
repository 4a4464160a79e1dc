#pragma once

// Patch tokenization shared by the aesthetic scorer and the IAS-ViT encoder.

#include <string>

#include "ase/image.hpp"
#include "ase/nn.hpp"

namespace ase {

/// Flattened patches, one row per patch in raster order; each row is the
/// patch's pixels in (dy, dx, channel) order.
template <typename S>
MatrixX<S> extract_patches(const Image& image, Index patch_size) {
  if (patch_size <= 0) throw ContractError("extract_patches: patch size must be positive");
  if (image.width % patch_size != 0 || image.height % patch_size != 0) {
    throw ContractError("patchify: image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                        " is not divisible by patch size " + std::to_string(patch_size) +
                        "; resize the image first");
  }
  const Index gr = image.height / patch_size;
  const Index gc = image.width / patch_size;
  MatrixX<S> out(gr * gc, patch_size * patch_size * image.channels);
  for (Index pr = 0; pr < gr; ++pr)
    for (Index pc = 0; pc < gc; ++pc) {
      Index col = 0;
      for (Index dy = 0; dy < patch_size; ++dy)
        for (Index dx = 0; dx < patch_size; ++dx)
          for (Index ch = 0; ch < image.channels; ++ch)
            out(pr * gc + pc, col++) = static_cast<S>(image.at(pr * patch_size + dy, pc * patch_size + dx, ch));
    }
  return out;
}

/// Linear patch projection plus a learned positional embedding.
template <typename S>
class PatchEmbed {
 public:
  PatchEmbed() = default;
  PatchEmbed(const std::string& name, Index image_size, Index patch_size, Index channels, Index dim, Rng& rng)
      : proj(name + ".proj", patch_size * patch_size * channels, dim, rng),
        position(name + ".position", Shape{(image_size / patch_size) * (image_size / patch_size), dim}),
        image_size_(image_size),
        patch_size_(patch_size),
        channels_(channels) {
    if (image_size % patch_size != 0) throw ContractError(name + ": image size must be divisible by patch size");
    init_normal(position, rng, 0.02);
  }

  /// image -> [tokens x dim]
  Tensor<S> forward(Tape<S>& tape, const Image& image) const {
    Tensor<S> patches(extract_patches<S>(image, patch_size_));
    if (image.width != image_size_ || image.height != image_size_ || image.channels != channels_) {
      throw DimensionError("patchify: expected a " + std::to_string(image_size_) + "x" + std::to_string(image_size_) +
                           "x" + std::to_string(channels_) + " image");
    }
    return add(proj.forward(tape, patches), tape.parameter(position));
  }

  Index grid() const { return image_size_ / patch_size_; }
  Index tokens() const { return grid() * grid(); }
  Index patch_size() const { return patch_size_; }
  Index image_size() const { return image_size_; }

  template <typename F>
  void visit(F&& f) {
    proj.visit(f);
    f(position);
  }

  Linear<S> proj;
  Parameter<S> position;

 private:
  Index image_size_ = 0;
  Index patch_size_ = 1;
  Index channels_ = 3;
};

/// [rows*cols x K] token matrix -> channel-major {K, rows, cols} grid.
template <typename S>
Tensor<S> tokens_to_grid(const Tensor<S>& tokens, Index rows, Index cols) {
  if (tokens.rank() != 2 || tokens.rows() != rows * cols) throw DimensionError("tokens_to_grid: token count != grid");
  return reshape(transpose(tokens), Shape{tokens.cols(), rows, cols});
}

/// Inverse of tokens_to_grid.
template <typename S>
Tensor<S> grid_to_tokens(const Tensor<S>& grid) {
  if (grid.rank() != 3) throw DimensionError("grid_to_tokens: expected {K, rows, cols}");
  return transpose(reshape(grid, Shape{grid.shape()[0], grid.shape()[1] * grid.shape()[2]}));
}

}  // namespace ase
