#pragma once

// IAS-ViT encoder: dynamic tiling, per-tile patch embedding, a query stream
// modulated by aesthetic saliency, blocks of self-attention followed by
// cross-attention into the original patch embeddings, and pixel-shuffle
// token reduction.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "ase/iasm.hpp"
#include "ase/vit.hpp"

namespace ase {

struct EncoderConfig {
  Index channels = 3;
  Index tile_base = 32;
  Index patch_size = 4;
  Index embed_dim = 32;
  Index num_heads = 4;
  Index num_blocks = 4;
  Index mlp_ratio = 4;
  Index max_tiles = 40;
  Index shuffle_factor = 2;
  bool pixel_shuffle = true;
  /// Saliency stream + cross-attention. Off: queries are the plain patch
  /// embeddings and the cross-attention sublayer does not exist.
  bool iasc = true;
  /// Cross-attention output projection starts at zero.
  bool zero_init_fusion = true;
  /// Thumbnail gets a saliency map computed on the thumbnail itself.
  bool thumbnail_own_saliency = true;

  static EncoderConfig desk() { return {}; }

  static EncoderConfig full_scale() {
    EncoderConfig c;
    c.tile_base = 448;
    c.patch_size = 14;
    c.num_blocks = 24;
    c.max_tiles = 40;
    return c;
  }

  Index grid() const { return tile_base / patch_size; }
  Index tokens_per_tile() const {
    const Index g = pixel_shuffle ? grid() / shuffle_factor : grid();
    return g * g;
  }
  Index output_dim() const { return pixel_shuffle ? embed_dim * shuffle_factor * shuffle_factor : embed_dim; }

  void validate() const {
    if (num_blocks < 1) throw ContractError("EncoderConfig: num_blocks must be >= 1");
    if (tile_base <= 0 || patch_size <= 0 || tile_base % patch_size != 0)
      throw ContractError("EncoderConfig: tile_base must be a positive multiple of patch_size");
    if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0)
      throw ContractError("EncoderConfig: embed_dim must be divisible by num_heads");
    if (max_tiles < 1) throw ContractError("EncoderConfig: max_tiles must be >= 1");
    if (pixel_shuffle && (shuffle_factor < 1 || grid() % shuffle_factor != 0))
      throw ContractError("EncoderConfig: patch grid must be divisible by shuffle_factor");
  }
};

struct TilePlan {
  Index rows = 1;
  Index cols = 1;
  bool includes_thumbnail = false;

  Index tiles() const { return rows * cols; }
  /// Tiles plus the thumbnail, when present.
  Index views() const { return tiles() + (includes_thumbnail ? 1 : 0); }
  bool operator==(const TilePlan&) const = default;
};

/// Tile grid whose aspect ratio cols/rows is closest (absolute log ratio) to
/// width/height, among grids with at most min(max_tiles, ceil(w*h / base^2))
/// tiles. Ties go to fewer tiles, then fewer rows.
inline TilePlan plan_tiles(Index width, Index height, const EncoderConfig& config) {
  if (width <= 0 || height <= 0) throw ContractError("plan_tiles: extents must be positive");
  const double area_tiles = double(width) * double(height) / (double(config.tile_base) * double(config.tile_base));
  const Index budget = std::clamp<Index>(static_cast<Index>(std::ceil(area_tiles - 1e-12)), 1, config.max_tiles);
  const double target = std::log(double(width) / double(height));
  TilePlan best;
  double best_err = std::numeric_limits<double>::infinity();
  for (Index n = 1; n <= budget; ++n) {
    for (Index r = 1; r <= n; ++r) {
      if (n % r != 0) continue;
      const Index c = n / r;
      const double err = std::abs(std::log(double(c) / double(r)) - target);
      // Enumeration order (tiles ascending, then rows ascending) makes the
      // strict comparison implement the tie-break.
      if (err < best_err - 1e-12) {
        best_err = err;
        best = TilePlan{r, c, false};
      }
    }
  }
  best.includes_thumbnail = best.tiles() > 1;
  return best;
}

namespace detail {
inline std::vector<Index> shuffle_index(Index rows, Index cols, Index dim, Index f) {
  const Index orows = rows / f, ocols = cols / f, odim = dim * f * f;
  std::vector<Index> index(static_cast<std::size_t>(rows * cols * dim));
  for (Index i = 0; i < orows; ++i)
    for (Index j = 0; j < ocols; ++j)
      for (Index di = 0; di < f; ++di)
        for (Index dj = 0; dj < f; ++dj)
          for (Index d = 0; d < dim; ++d) {
            const Index out = (i * ocols + j) * odim + (di * f + dj) * dim + d;
            const Index src = ((i * f + di) * cols + (j * f + dj)) * dim + d;
            index[static_cast<std::size_t>(out)] = src;
          }
  return index;
}
}  // namespace detail

/// Space-to-depth over the token grid: each f x f neighbourhood of tokens
/// becomes one token (channels concatenated in raster order of the
/// neighbourhood). [rows*cols x D] -> [rows*cols/f^2 x D*f^2].
template <typename S>
Tensor<S> pixel_shuffle(const Tensor<S>& tokens, Index rows, Index cols, Index factor = 2) {
  if (tokens.rank() != 2 || tokens.rows() != rows * cols) throw DimensionError("pixel_shuffle: token count != grid");
  if (factor < 1 || rows % factor != 0 || cols % factor != 0) {
    throw ContractError("pixel_shuffle: grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                        " not divisible by factor " + std::to_string(factor));
  }
  const Index d = tokens.cols();
  return gather(tokens, detail::shuffle_index(rows, cols, d, factor),
                Shape{rows * cols / (factor * factor), d * factor * factor});
}

/// Inverse of pixel_shuffle; rows/cols describe the original (unshuffled) grid.
template <typename S>
Tensor<S> pixel_unshuffle(const Tensor<S>& tokens, Index rows, Index cols, Index factor = 2) {
  if (factor < 1 || rows % factor != 0 || cols % factor != 0) throw ContractError("pixel_unshuffle: bad grid");
  const Index d = tokens.cols() / (factor * factor);
  if (tokens.rank() != 2 || tokens.rows() * factor * factor != rows * cols || d * factor * factor != tokens.cols())
    throw DimensionError("pixel_unshuffle: tokens do not match grid");
  const auto fwd = detail::shuffle_index(rows, cols, d, factor);
  std::vector<Index> inv(fwd.size());
  for (std::size_t o = 0; o < fwd.size(); ++o) inv[static_cast<std::size_t>(fwd[o])] = static_cast<Index>(o);
  return gather(tokens, std::move(inv), Shape{rows * cols, d});
}

/// Self-attention, then (optionally) cross-attention with queries from the
/// running stream and keys/values from a fixed memory, then the MLP.
template <typename S>
class IasBlock {
 public:
  IasBlock() = default;
  IasBlock(const std::string& name, Index dim, Index heads, Index hidden, Rng& rng, bool with_cross,
           bool zero_init_fusion)
      : vit(name, dim, heads, hidden, rng) {
    if (with_cross) {
      cross_ln = LayerNorm<S>(name + ".ln_cross", dim);
      cross = MultiHeadAttention<S>(name + ".cross", dim, heads, rng, zero_init_fusion);
    }
  }

  Tensor<S> forward(Tape<S>& tape, const Tensor<S>& q_stream, const Tensor<S>& kv_stream) const {
    Tensor<S> h = vit.attend(tape, q_stream);
    if (cross) {
      if (kv_stream.cols() != q_stream.cols()) throw DimensionError("IasBlock: stream widths differ");
      h = add(h, cross->forward(tape, cross_ln->forward(tape, h), kv_stream));
    }
    return vit.feed_forward(tape, h);
  }

  bool has_cross() const { return cross.has_value(); }

  template <typename F>
  void visit(F&& f) {
    vit.visit(f);
    if (cross) {
      cross_ln->visit(f);
      cross->visit(f);
    }
  }

  TransformerBlock<S> vit;
  std::optional<LayerNorm<S>> cross_ln;
  std::optional<MultiHeadAttention<S>> cross;
};

template <typename S>
class IasVitEncoder {
 public:
  IasVitEncoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    patch_ = PatchEmbed<S>("encoder.patch", config_.tile_base, config_.patch_size, config_.channels,
                           config_.embed_dim, rng);
    if (config_.iasc) saliency_proj = Linear<S>("encoder.saliency_proj", config_.embed_dim, config_.embed_dim, rng, false);
    for (Index b = 0; b < config_.num_blocks; ++b) {
      blocks_.emplace_back("encoder.block" + std::to_string(b), config_.embed_dim, config_.num_heads,
                           config_.embed_dim * config_.mlp_ratio, rng, config_.iasc, config_.zero_init_fusion);
    }
    final_ln = LayerNorm<S>("encoder.ln_final", config_.embed_dim);
  }

  const EncoderConfig& config() const { return config_; }
  const std::vector<IasBlock<S>>& blocks() const { return blocks_; }
  std::vector<IasBlock<S>>& blocks() { return blocks_; }
  const PatchEmbed<S>& patch_embed() const { return patch_; }

  /// Original stream: patch embedding of one tile.
  Tensor<S> patchify(Tape<S>& tape, const Image& tile) const { return patch_.forward(tape, tile); }

  /// q_i = W_s((1 + s_i) * kv_i), s = per-patch saliency on the token grid.
  Tensor<S> build_saliency_stream(Tape<S>& tape, const Tensor<S>& kv_stream, const SaliencyMap<S>& grid_map) const {
    if (!saliency_proj) throw ContractError("build_saliency_stream: encoder built without IASC");
    const Index g = config_.grid();
    if (grid_map.rows() != g || grid_map.cols() != g || kv_stream.rows() != g * g) {
      throw ContractError("build_saliency_stream: saliency grid " + std::to_string(grid_map.rows()) + "x" +
                          std::to_string(grid_map.cols()) + " does not match token grid " + std::to_string(g) +
                          "x" + std::to_string(g));
    }
    Tensor<S> s(Shape{g * g}, grid_map.values);
    return saliency_proj->forward(tape, scale_rows(kv_stream, add_scalar(s, S(1))));
  }

  /// N blocks sharing one kv memory, then the final LayerNorm.
  Tensor<S> forward_streams(Tape<S>& tape, const Tensor<S>& q_stream, const Tensor<S>& kv_stream) const {
    if (q_stream.shape() != kv_stream.shape()) throw DimensionError("forward_streams: streams differ in shape");
    Tensor<S> x = q_stream;
    for (const auto& b : blocks_) x = b.forward(tape, x, kv_stream);
    return final_ln.forward(tape, x);
  }

  /// Reference plain-ViT route over the same self-attention/MLP weights.
  Tensor<S> forward_plain(Tape<S>& tape, const Tensor<S>& x0) const {
    Tensor<S> x = x0;
    for (const auto& b : blocks_) x = b.vit.forward(tape, x);
    return final_ln.forward(tape, x);
  }

  /// One tile: [tokens_per_tile x output_dim].
  Tensor<S> encode_tile(Tape<S>& tape, const Image& tile, const SaliencyMap<S>* tile_map) const {
    Tensor<S> kv = patchify(tape, tile);
    Tensor<S> out;
    if (config_.iasc) {
      const Index g = config_.grid();
      SaliencyMap<S> zeros;
      zeros.values = MatrixX<S>::Zero(g, g);
      zeros.normalized = true;
      out = forward_streams(tape, build_saliency_stream(tape, kv, tile_map ? *tile_map : zeros), kv);
    } else {
      out = forward_plain(tape, kv);
    }
    if (!config_.pixel_shuffle) return out;
    return pixel_shuffle(out, config_.grid(), config_.grid(), config_.shuffle_factor);
  }

  /// Tiles in raster order, thumbnail last. `full_map` is the saliency of the
  /// whole image; `thumb_map` (optional) that of the thumbnail view.
  Tensor<S> encode(Tape<S>& tape, const Image& image, const SaliencyMap<S>* full_map = nullptr,
                   const SaliencyMap<S>* thumb_map = nullptr) const {
    const TilePlan plan = plan_tiles(image.width, image.height, config_);
    const Index base = config_.tile_base;
    const Index g = config_.grid();
    std::optional<SaliencyMap<S>> full;
    if (config_.iasc && full_map) full = full_map->normalized ? *full_map : normalize_resize(*full_map, full_map->rows(), full_map->cols());

    std::vector<Tensor<S>> parts;
    const Image resized = resize_bilinear(image, plan.cols * base, plan.rows * base);
    for (Index r = 0; r < plan.rows; ++r) {
      for (Index c = 0; c < plan.cols; ++c) {
        const Image tile = plan.tiles() == 1 ? resized : crop(resized, c * base, r * base, base, base);
        std::optional<SaliencyMap<S>> m;
        if (full) {
          m = resample_region(*full, double(r) / plan.rows, double(c) / plan.cols, double(r + 1) / plan.rows,
                              double(c + 1) / plan.cols, g, g);
        }
        parts.push_back(encode_tile(tape, tile, m ? &*m : nullptr));
      }
    }
    if (plan.includes_thumbnail) {
      const Image thumb = resize_bilinear(image, base, base);
      std::optional<SaliencyMap<S>> m;
      if (config_.iasc) {
        if (thumb_map && config_.thumbnail_own_saliency) {
          m = normalize_resize(*thumb_map, g, g);
        } else if (full) {
          m = normalize_resize(*full, g, g);
        }
      }
      parts.push_back(encode_tile(tape, thumb, m ? &*m : nullptr));
    }
    return parts.size() == 1 ? parts.front() : concat_rows<S>(std::span<const Tensor<S>>(parts));
  }

  template <typename F>
  void visit(F&& f) {
    patch_.visit(f);
    if (saliency_proj) saliency_proj->visit(f);
    for (auto& b : blocks_) b.visit(f);
    final_ln.visit(f);
  }

  std::optional<Linear<S>> saliency_proj;  ///< W_s
  LayerNorm<S> final_ln;

 private:
  EncoderConfig config_;
  PatchEmbed<S> patch_;
  std::vector<IasBlock<S>> blocks_;
};

}  // namespace ase
