#pragma once

// Aesthetic saliency extraction (LayerCAM over the scorer's target layer):
//   g = d y^c / d A                    gradient of the top class score
//   w = relu(g)                        position-wise channel weights
//   A_hat = w * A                      weighted activations
//   M = relu(sum_k A_hat_k)            channel fusion
// followed by min-max normalization and resampling to an encoder grid.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "ase/image.hpp"
#include "ase/scorer.hpp"

namespace ase {

template <typename S>
struct SaliencyMap {
  MatrixX<S> values;  ///< rows x cols, >= 0
  bool normalized = false;
  Index class_index = 0;

  Index rows() const { return values.rows(); }
  Index cols() const { return values.cols(); }
};

template <typename S>
struct LayerCamResult {
  Tensor<S> activation;  ///< A, {K, H', W'}
  Tensor<S> gradient;    ///< g, same shape
  Index class_index = 0;
  S class_score = 0;
};

/// Forward in inference mode, pick c = argmax y, backpropagate y^c to the
/// target-layer activation.
template <typename S>
LayerCamResult<S> layercam_gradients(const AestheticScorer<S>& scorer, const Image& image) {
  Tape<S> tape;
  auto fwd = scorer.encode_with_taps(tape, scorer.patchify(tape, scorer.prepare(image)));
  auto scores = scorer.classify(tape, fwd.features);
  const Tensor<S>& tap = fwd.taps[static_cast<std::size_t>(scorer.config().resolved_target_layer())];
  auto grads = tape.backward(select(scores.y, scores.c));
  LayerCamResult<S> out;
  out.activation = tap.detached();
  out.gradient = grads.contains(tap) ? grads.at(tap) : Tensor<S>::zeros(tap.shape());
  out.class_index = scores.c;
  out.class_score = scores.y_c;
  return out;
}

template <typename S>
Tensor<S> saliency_weights(const Tensor<S>& gradient) {
  return relu(gradient.detached());
}

template <typename S>
Tensor<S> weighted_features(const Tensor<S>& weights, const Tensor<S>& activation) {
  if (weights.shape() != activation.shape()) {
    throw ContractError("weighted_features: weights " + to_string(weights.shape()) + " vs activation " +
                        to_string(activation.shape()));
  }
  return mul(weights.detached(), activation.detached());
}

/// {K, H, W} -> H x W map: relu of the per-position channel sum.
template <typename S>
SaliencyMap<S> fuse_channels(const Tensor<S>& weighted, Index class_index = 0) {
  if (weighted.rank() != 3) throw ContractError("fuse_channels: expected {K, H, W}, got " + to_string(weighted.shape()));
  const Index k = weighted.shape()[0], h = weighted.shape()[1], w = weighted.shape()[2];
  // Backing matrix is (K*H) x W; channel k occupies rows [k*H, (k+1)*H).
  MatrixX<S> acc = MatrixX<S>::Zero(h, w);
  for (Index c = 0; c < k; ++c) acc += weighted.value().middleRows(c * h, h);
  SaliencyMap<S> m;
  m.values = acc.cwiseMax(S(0));
  m.class_index = class_index;
  return m;
}

namespace detail {
// Corner-aligned bilinear sample of `src` at fractional (y, x) in pixel units.
template <typename S>
S bilinear_at(const MatrixX<S>& src, double y, double x) {
  y = std::clamp(y, 0.0, double(src.rows() - 1));
  x = std::clamp(x, 0.0, double(src.cols() - 1));
  const auto y0 = static_cast<Index>(std::floor(y));
  const auto x0 = static_cast<Index>(std::floor(x));
  const Index y1 = std::min(y0 + 1, src.rows() - 1);
  const Index x1 = std::min(x0 + 1, src.cols() - 1);
  const double wy = y - double(y0), wx = x - double(x0);
  const double top = (1 - wx) * double(src(y0, x0)) + wx * double(src(y0, x1));
  const double bottom = (1 - wx) * double(src(y1, x0)) + wx * double(src(y1, x1));
  return static_cast<S>((1 - wy) * top + wy * bottom);
}

inline double corner_coord(Index i, Index n, double lo, double hi) {
  return n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * double(i) / double(n - 1);
}
}  // namespace detail

/// Corner-aligned bilinear resample of the sub-rectangle [y0, y1] x [x0, x1]
/// (fractions of the map extent, 0..1) onto a rows x cols grid.
template <typename S>
SaliencyMap<S> resample_region(const SaliencyMap<S>& map, double y0, double x0, double y1, double x1, Index rows,
                               Index cols) {
  if (rows <= 0 || cols <= 0) throw ContractError("resample: target extents must be positive");
  SaliencyMap<S> out;
  out.normalized = map.normalized;
  out.class_index = map.class_index;
  out.values.resize(rows, cols);
  const double sy = double(map.rows() - 1), sx = double(map.cols() - 1);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c)
      out.values(r, c) = detail::bilinear_at(map.values, detail::corner_coord(r, rows, y0, y1) * sy,
                                             detail::corner_coord(c, cols, x0, x1) * sx);
  return out;
}

/// Min-max to [0, 1] (constant maps become all zeros), then corner-aligned
/// bilinear resample to rows x cols.
template <typename S>
SaliencyMap<S> normalize_resize(const SaliencyMap<S>& map, Index rows, Index cols) {
  if (rows <= 0 || cols <= 0) throw ContractError("normalize_resize: target extents must be positive");
  SaliencyMap<S> n = map;
  const S lo = map.values.minCoeff(), hi = map.values.maxCoeff();
  if (hi > lo) {
    n.values = (map.values.array() - lo) / (hi - lo);
  } else {
    n.values.setZero();
  }
  n.normalized = true;
  if (rows == n.rows() && cols == n.cols()) return n;
  return resample_region(n, 0.0, 0.0, 1.0, 1.0, rows, cols);
}

/// Unnormalized map on the scorer's patch grid.
template <typename S>
SaliencyMap<S> aesthetic_saliency(const AestheticScorer<S>& scorer, const Image& image) {
  auto cam = layercam_gradients(scorer, image);
  return fuse_channels(weighted_features(saliency_weights(cam.gradient), cam.activation), cam.class_index);
}

/// round(255 * M) per cell, row-major; the map is normalized first if needed.
template <typename S>
std::vector<std::uint8_t> saliency_bytes(const SaliencyMap<S>& map) {
  const SaliencyMap<S> n = map.normalized ? map : normalize_resize(map, map.rows(), map.cols());
  std::vector<std::uint8_t> bytes;
  bytes.reserve(static_cast<std::size_t>(n.values.size()));
  for (Index r = 0; r < n.rows(); ++r)
    for (Index c = 0; c < n.cols(); ++c)
      bytes.push_back(static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(double(n.values(r, c)), 0.0, 1.0))));
  return bytes;
}

template <typename S>
void write_saliency_pgm(const std::filesystem::path& path, const SaliencyMap<S>& map) {
  write_pgm(path, map.cols(), map.rows(), saliency_bytes(map));
}

}  // namespace ase
