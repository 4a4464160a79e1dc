#pragma once

// Compact ViT classifier that stands in for the aesthetics backbone: exposes
// pooled features f, per-block activation grids (taps) and category scores.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "ase/optim.hpp"
#include "ase/vit.hpp"

namespace ase {

struct ScorerConfig {
  Index image_size = 32;
  Index patch_size = 4;
  Index channels = 3;
  Index embed_dim = 32;
  Index num_blocks = 4;
  Index num_heads = 4;
  Index mlp_ratio = 4;
  Index num_classes = 8;
  /// Block whose output is the CAM activation; negative selects num_blocks - 2.
  Index target_layer = -1;

  Index grid() const { return image_size / patch_size; }

  Index resolved_target_layer() const {
    return target_layer >= 0 ? target_layer : std::max<Index>(0, num_blocks - 2);
  }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
      throw ContractError("ScorerConfig: image_size must be a positive multiple of patch_size");
    if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0)
      throw ContractError("ScorerConfig: embed_dim must be divisible by num_heads");
    if (num_blocks <= 0) throw ContractError("ScorerConfig: num_blocks must be positive");
    if (num_classes <= 0) throw ContractError("ScorerConfig: num_classes must be positive");
    const Index t = resolved_target_layer();
    if (t < 0 || t >= num_blocks) throw ContractError("ScorerConfig: target_layer out of range");
  }
};

/// Lowest index among the maxima.
template <typename S>
Index argmax(std::span<const S> values) {
  if (values.empty()) throw ContractError("argmax of an empty vector");
  Index best = 0;
  for (Index i = 1; i < static_cast<Index>(values.size()); ++i)
    if (values[static_cast<std::size_t>(i)] > values[static_cast<std::size_t>(best)]) best = i;
  return best;
}

template <typename S>
struct ClassScores {
  Tensor<S> y;  ///< {C} pre-softmax logits, recorded when the forward was
  Index c = 0;  ///< argmax of y, lowest index on ties
  S y_c = 0;
};

template <typename S>
struct ScorerForward {
  Tensor<S> features;          ///< {K}: mean over the final block's tokens
  std::vector<Tensor<S>> taps;  ///< per block, {K, grid, grid}
};

template <typename S>
class AestheticScorer {
 public:
  AestheticScorer(const ScorerConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    patch_ = PatchEmbed<S>("scorer.patch", config_.image_size, config_.patch_size, config_.channels,
                           config_.embed_dim, rng);
    for (Index b = 0; b < config_.num_blocks; ++b) {
      blocks_.emplace_back("scorer.block" + std::to_string(b), config_.embed_dim, config_.num_heads,
                           config_.embed_dim * config_.mlp_ratio, rng);
    }
    head = Linear<S>("scorer.head", config_.embed_dim, config_.num_classes, rng);
  }

  const ScorerConfig& config() const { return config_; }

  /// Resizes to the configured input size when needed.
  Image prepare(const Image& image) const {
    if (image.width == config_.image_size && image.height == config_.image_size) return image;
    return resize_bilinear(image, config_.image_size, config_.image_size);
  }

  Tensor<S> patchify(Tape<S>& tape, const Image& image) const { return patch_.forward(tape, image); }

  ScorerForward<S> encode_with_taps(Tape<S>& tape, const Tensor<S>& tokens) const {
    ScorerForward<S> out;
    Tensor<S> x = tokens;
    const Index g = config_.grid();
    for (const auto& block : blocks_) {
      x = block.forward(tape, x);
      // Routing the stream through the grid keeps each tap on the gradient path.
      Tensor<S> tap = tokens_to_grid(x, g, g);
      out.taps.push_back(tap);
      x = grid_to_tokens(tap);
    }
    out.features = mean_rows(x);
    return out;
  }

  ClassScores<S> classify(Tape<S>& tape, const Tensor<S>& features) const {
    Tensor<S> f = reshape(features, Shape{1, features.numel()});
    Tensor<S> logits = reshape(head.forward(tape, f), Shape{config_.num_classes});
    ClassScores<S> s;
    s.y = logits;
    s.c = argmax<S>(logits.data());
    s.y_c = logits[s.c];
    return s;
  }

  /// Logits recomputed from a block output grid, running the blocks above it.
  Tensor<S> logits_from_tap(Tape<S>& tape, const Tensor<S>& tap, Index layer) const {
    if (layer < 0 || layer >= config_.num_blocks) throw ContractError("logits_from_tap: layer out of range");
    Tensor<S> x = grid_to_tokens(tap);
    for (Index b = layer + 1; b < config_.num_blocks; ++b) x = blocks_[static_cast<std::size_t>(b)].forward(tape, x);
    return classify(tape, mean_rows(x)).y;
  }

  ClassScores<S> predict(const Image& image) const {
    Tape<S> tape;
    auto fwd = encode_with_taps(tape, patchify(tape, prepare(image)));
    return classify(tape, fwd.features);
  }

  const std::vector<TransformerBlock<S>>& blocks() const { return blocks_; }
  const PatchEmbed<S>& patch_embed() const { return patch_; }

  template <typename F>
  void visit(F&& f) {
    patch_.visit(f);
    for (auto& b : blocks_) b.visit(f);
    head.visit(f);
  }

  Linear<S> head;  ///< classifier parameters theta

 private:
  ScorerConfig config_;
  PatchEmbed<S> patch_;
  std::vector<TransformerBlock<S>> blocks_;
};

struct ScorerTrainConfig {
  Index steps = 300;
  Index batch_size = 16;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double warmup_ratio = 0.03;
  std::uint64_t seed = 0;
};

struct ScorerTrainReport {
  std::vector<double> losses;
  double train_accuracy = 0.0;
};

template <typename S>
double scorer_accuracy(const AestheticScorer<S>& scorer, std::span<const Image> images, std::span<const Index> labels) {
  if (images.empty()) return 0.0;
  Index correct = 0;
  for (std::size_t i = 0; i < images.size(); ++i) correct += scorer.predict(images[i]).c == labels[i];
  return double(correct) / double(images.size());
}

/// Cross-entropy training on (image, label) pairs with AdamW and the
/// warmup/cosine schedule. Images are resized to the scorer input first.
template <typename S>
ScorerTrainReport train_scorer(AestheticScorer<S>& scorer, std::span<const Image> images,
                               std::span<const Index> labels, const ScorerTrainConfig& config) {
  if (images.empty() || images.size() != labels.size()) throw ContractError("train_scorer: need one label per image");
  for (Index l : labels)
    if (l < 0 || l >= scorer.config().num_classes) throw ValidationError("train_scorer: label out of range");
  std::vector<Image> prepared;
  prepared.reserve(images.size());
  for (const auto& im : images) prepared.push_back(scorer.prepare(im));

  auto params = collect_parameters<S>(scorer);
  AdamW<S> opt(params, AdamWConfig{.weight_decay = config.weight_decay});
  const Schedule sched{config.learning_rate, config.warmup_ratio, config.steps};
  Rng rng(config.seed);
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  ScorerTrainReport report;
  for (Index step = 0; step < config.steps; ++step) {
    params.zero_grad();
    double loss = 0.0;
    const Index batch = std::min<Index>(config.batch_size, static_cast<Index>(images.size()));
    for (Index b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      Tape<S> tape;
      auto fwd = scorer.encode_with_taps(tape, scorer.patchify(tape, prepared[i]));
      auto scores = scorer.classify(tape, fwd.features);
      const Index target[] = {labels[i]};
      Tensor<S> ce = scale(cross_entropy_sum(reshape(scores.y, Shape{1, scores.y.numel()}), target),
                           S(1) / static_cast<S>(batch));
      loss += static_cast<double>(ce.item());
      params.accumulate(tape, tape.backward(ce));
    }
    if (!std::isfinite(loss)) throw NumericError("train_scorer: non-finite loss at step " + std::to_string(step));
    report.losses.push_back(loss);
    opt.step(lr_at(step, sched));
  }
  report.train_accuracy = scorer_accuracy(scorer, std::span<const Image>(prepared), labels);
  return report;
}

}  // namespace ase
