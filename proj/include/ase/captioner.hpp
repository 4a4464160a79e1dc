#pragma once

// Toy caption generator: IAS-ViT encoder -> MLP projector -> small causal
// transformer LM over [visual tokens | prompt | <bos> caption <eos>].

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ase/encoder.hpp"
#include "ase/optim.hpp"
#include "ase/scorer.hpp"
#include "ase/tokenizer.hpp"

namespace ase {

enum class AblationMode { NoFinetune, Finetune, FinetuneIasc };

inline std::string_view to_string(AblationMode m) {
  switch (m) {
    case AblationMode::NoFinetune: return "no-finetune";
    case AblationMode::Finetune: return "finetune";
    case AblationMode::FinetuneIasc: return "finetune+IASC";
  }
  return "?";
}

inline AblationMode parse_mode(std::string_view s) {
  if (s == "no-finetune") return AblationMode::NoFinetune;
  if (s == "finetune") return AblationMode::Finetune;
  if (s == "finetune+IASC" || s == "finetune+iasc") return AblationMode::FinetuneIasc;
  throw ValidationError("unknown mode '" + std::string(s) + "' (expected no-finetune | finetune | finetune+IASC)");
}

inline bool uses_iasc(AblationMode m) { return m == AblationMode::FinetuneIasc; }
inline bool is_trained(AblationMode m) { return m != AblationMode::NoFinetune; }

struct DecoderConfig {
  Index dim = 64;
  Index heads = 4;
  Index blocks = 2;
  Index mlp_ratio = 4;
  Index max_len = 96;
  Index max_new_tokens = 32;
};

struct CaptionerConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;

  /// Encoder wiring for an ablation row.
  static CaptionerConfig for_mode(CaptionerConfig base, AblationMode mode) {
    base.encoder.iasc = uses_iasc(mode);
    return base;
  }
};

/// LayerNorm -> Linear -> GELU -> Linear, per token.
template <typename S>
class Projector {
 public:
  Projector() = default;
  Projector(const std::string& name, Index in, Index out, Rng& rng)
      : ln(name + ".ln", in), fc1(name + ".fc1", in, out, rng), fc2(name + ".fc2", out, out, rng) {}

  Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x) const {
    return fc2.forward(tape, gelu(fc1.forward(tape, ln.forward(tape, x))));
  }

  template <typename F>
  void visit(F&& f) {
    ln.visit(f);
    fc1.visit(f);
    fc2.visit(f);
  }

  LayerNorm<S> ln;
  Linear<S> fc1, fc2;
};

template <typename S>
class CaptionDecoder {
 public:
  CaptionDecoder() = default;
  CaptionDecoder(const DecoderConfig& config, Index vocab_size, Rng& rng) : config_(config) {
    token_embed = Parameter<S>("decoder.token_embed", Shape{vocab_size, config.dim});
    position = Parameter<S>("decoder.position", Shape{config.max_len, config.dim});
    init_normal(token_embed, rng, 0.02);
    init_normal(position, rng, 0.02);
    for (Index b = 0; b < config.blocks; ++b) {
      blocks_.emplace_back("decoder.block" + std::to_string(b), config.dim, config.heads, config.dim * config.mlp_ratio,
                           rng);
    }
    final_ln = LayerNorm<S>("decoder.ln_final", config.dim);
    lm_head = Linear<S>("decoder.lm_head", config.dim, vocab_size, rng);
    init_normal(lm_head.weight, rng, 0.02);
  }

  const DecoderConfig& config() const { return config_; }

  /// Hidden states [visual + text rows x dim]. Text positions are causal;
  /// visual positions form a fully visible prefix.
  Tensor<S> hidden(Tape<S>& tape, const Tensor<S>& visual, std::span<const Index> text) const {
    const Index len = visual.rows() + static_cast<Index>(text.size());
    if (len > config_.max_len) {
      throw ContractError("decoder: sequence of " + std::to_string(len) + " positions exceeds max_len " +
                          std::to_string(config_.max_len));
    }
    if (visual.cols() != config_.dim) throw DimensionError("decoder: visual embedding width != decoder width");
    Tensor<S> x = visual;
    if (!text.empty()) x = concat_rows<S>({visual, gather_rows(tape.parameter(token_embed), text)});
    std::vector<Index> pos(static_cast<std::size_t>(len));
    for (Index i = 0; i < len; ++i) pos[static_cast<std::size_t>(i)] = i;
    x = add(x, gather_rows(tape.parameter(position), std::span<const Index>(pos)));
    const AttentionMask mask{true, visual.rows()};
    for (const auto& b : blocks_) x = b.forward(tape, x, mask);
    return final_ln.forward(tape, x);
  }

  Tensor<S> logits(Tape<S>& tape, const Tensor<S>& hidden_rows) const { return lm_head.forward(tape, hidden_rows); }

  template <typename F>
  void visit(F&& f) {
    f(token_embed);
    f(position);
    for (auto& b : blocks_) b.visit(f);
    final_ln.visit(f);
    lm_head.visit(f);
  }

  Parameter<S> token_embed;
  Parameter<S> position;
  LayerNorm<S> final_ln;
  Linear<S> lm_head;

 private:
  DecoderConfig config_;
  std::vector<TransformerBlock<S>> blocks_;
};

/// Saliency maps for one image (absent without IASC).
template <typename S>
struct ImageSaliency {
  std::optional<SaliencyMap<S>> full;
  std::optional<SaliencyMap<S>> thumbnail;
};

template <typename S>
ImageSaliency<S> compute_saliency(const AestheticScorer<S>& scorer, const Image& image, const EncoderConfig& enc) {
  ImageSaliency<S> out;
  out.full = aesthetic_saliency(scorer, image);
  const TilePlan plan = plan_tiles(image.width, image.height, enc);
  if (plan.includes_thumbnail && enc.thumbnail_own_saliency) {
    out.thumbnail = aesthetic_saliency(scorer, resize_bilinear(image, enc.tile_base, enc.tile_base));
  }
  return out;
}

template <typename S>
struct CaptionExample {
  const Image* image = nullptr;
  const ImageSaliency<S>* saliency = nullptr;  ///< required when the encoder uses IASC
  std::vector<Index> prompt;
  std::vector<Index> caption;  ///< without <bos>/<eos>; <pad> entries are ignored by the loss
};

template <typename S>
class CaptionModel {
 public:
  CaptionModel(const CaptionerConfig& config, Vocabulary vocab, std::uint64_t seed)
      : encoder(config.encoder, seed), config_(config), vocab_(std::move(vocab)) {
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    projector = Projector<S>("projector", config.encoder.output_dim(), config.decoder.dim, rng);
    decoder = CaptionDecoder<S>(config.decoder, vocab_.size(), rng);
  }

  CaptionModel(const CaptionModel&) = delete;
  CaptionModel& operator=(const CaptionModel&) = delete;

  const CaptionerConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }

  Tensor<S> visual_embeddings(Tape<S>& tape, const Image& image, const ImageSaliency<S>* saliency) const {
    const SaliencyMap<S>* full = saliency && saliency->full ? &*saliency->full : nullptr;
    const SaliencyMap<S>* thumb = saliency && saliency->thumbnail ? &*saliency->thumbnail : nullptr;
    if (config_.encoder.iasc && !full) throw ContractError("caption model: IASC encoder needs a saliency map");
    return projector.forward(tape, encoder.encode(tape, image, full, thumb));
  }

  /// Text row layout: prompt..., <bos>, caption... .
  static std::vector<Index> text_ids(std::span<const Index> prompt, std::span<const Index> caption_prefix) {
    std::vector<Index> text(prompt.begin(), prompt.end());
    text.push_back(Vocabulary::kBos);
    text.insert(text.end(), caption_prefix.begin(), caption_prefix.end());
    return text;
  }

  /// Full logits, one row per position.
  Tensor<S> logits(Tape<S>& tape, const Tensor<S>& visual, std::span<const Index> prompt,
                   std::span<const Index> target_prefix) const {
    const auto text = text_ids(prompt, target_prefix);
    return decoder.logits(tape, decoder.hidden(tape, visual, text));
  }

  /// Distribution over the token following target_prefix.
  Tensor<S> next_token_distribution(const Tensor<S>& visual, std::span<const Index> prompt,
                                    std::span<const Index> target_prefix) const {
    Tape<S> tape;
    const auto text = text_ids(prompt, target_prefix);
    Tensor<S> h = decoder.hidden(tape, visual.detached(), text);
    Tensor<S> last = slice_rows(h, h.rows() - 1, 1);
    return reshape(softmax_rows(decoder.logits(tape, last)), Shape{vocab_.size()}).detached();
  }

  struct LossTerms {
    Tensor<S> sum;  ///< summed token cross-entropy
    Index count = 0;
  };

  /// Next-token cross-entropy over caption tokens and the closing <eos>;
  /// visual and prompt positions are excluded, <pad> targets are ignored.
  LossTerms caption_loss(Tape<S>& tape, const Tensor<S>& visual, std::span<const Index> prompt,
                         std::span<const Index> caption) const {
    std::vector<Index> full_caption(caption.begin(), caption.end());
    full_caption.push_back(Vocabulary::kEos);
    const auto text = text_ids(prompt, std::span<const Index>(full_caption).first(caption.size()));
    Tensor<S> h = decoder.hidden(tape, visual, text);
    // Row of <bos> predicts caption[0]; the last row predicts <eos>.
    const Index first = visual.rows() + static_cast<Index>(prompt.size());
    const auto n = static_cast<Index>(full_caption.size());
    std::vector<Index> targets(full_caption.begin(), full_caption.end());
    Index count = 0;
    for (auto& t : targets) {
      if (t == Vocabulary::kPad) {
        t = -1;
      } else {
        ++count;
      }
    }
    Tensor<S> lg = decoder.logits(tape, slice_rows(h, first, n));
    return {cross_entropy_sum(lg, std::span<const Index>(targets)), count};
  }

  /// Greedy decoding from <bos> until <eos>, max_new_tokens, or max_len.
  std::vector<Index> generate_ids(const Tensor<S>& visual, std::span<const Index> prompt) const {
    std::vector<Index> out;
    const Index limit = std::min(config_.decoder.max_new_tokens,
                                 config_.decoder.max_len - visual.rows() - static_cast<Index>(prompt.size()) - 1);
    while (static_cast<Index>(out.size()) < limit) {
      Tensor<S> p = next_token_distribution(visual, prompt, out);
      const Index next = argmax<S>(p.data());
      if (next == Vocabulary::kEos) break;
      out.push_back(next);
    }
    return out;
  }

  std::string generate(const Image& image, const ImageSaliency<S>* saliency,
                       std::string_view prompt = kDefaultPrompt) const {
    Tape<S> tape;
    Tensor<S> visual = visual_embeddings(tape, image, saliency).detached();
    const auto prompt_ids = vocab_.encode(prompt);
    const auto ids = generate_ids(visual, prompt_ids);
    return vocab_.decode(ids);
  }

  template <typename F>
  void visit(F&& f) {
    encoder.visit(f);
    projector.visit(f);
    decoder.visit(f);
  }

  IasVitEncoder<S> encoder;
  Projector<S> projector;
  CaptionDecoder<S> decoder;

 private:
  CaptionerConfig config_;
  Vocabulary vocab_;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double warmup_ratio = 0.03;
  Index batch_size = 16;
  Index total_steps = 300;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool freeze_encoder = false;
  bool freeze_projector = false;
  bool freeze_decoder = false;

  static TrainConfig desk() { return {}; }

  /// Full-scale fine-tuning recipe: lr 4e-5, weight decay 0.01, warmup 0.03, batch 64.
  static TrainConfig full_scale() {
    TrainConfig c;
    c.learning_rate = 4e-5;
    c.weight_decay = 0.01;
    c.warmup_ratio = 0.03;
    c.batch_size = 64;
    return c;
  }

  Schedule schedule() const { return Schedule{learning_rate, warmup_ratio, total_steps}; }

  void validate() const {
    if (!(learning_rate > 0)) throw ValidationError("TrainConfig: learning_rate must be positive");
    if (warmup_ratio < 0 || warmup_ratio >= 1) throw ValidationError("TrainConfig: warmup_ratio must lie in [0, 1)");
    if (batch_size <= 0 || total_steps <= 0) throw ValidationError("TrainConfig: batch_size and total_steps must be positive");
    if (weight_decay < 0) throw ValidationError("TrainConfig: weight_decay must be non-negative");
  }
};

template <typename S>
class CaptionTrainer {
 public:
  CaptionTrainer(CaptionModel<S>& model, const TrainConfig& config)
      : model_(model), config_(config), params_(), optimizer_(collect(model, params_), adamw_config(config)) {
    config_.validate();
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const bool frozen = (i < encoder_end_ && config.freeze_encoder) ||
                          (i >= encoder_end_ && i < projector_end_ && config.freeze_projector) ||
                          (i >= projector_end_ && config.freeze_decoder);
      optimizer_.set_trainable(i, !frozen);
    }
  }

  /// One AdamW step on the batch; returns the mean token loss.
  double train_step(std::span<const CaptionExample<S>> batch) {
    if (batch.empty()) throw ContractError("train_step: empty batch");
    if (step_ >= config_.total_steps) throw ContractError("train_step: schedule exhausted");
    Index total = 0;
    for (const auto& ex : batch) {
      for (Index t : ex.caption) total += t != Vocabulary::kPad;
      total += 1;  // <eos>
    }
    params_.zero_grad();
    double loss = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& ex = batch[i];
      Tape<S> tape;
      Tensor<S> visual = model_.visual_embeddings(tape, *ex.image, ex.saliency);
      auto terms = model_.caption_loss(tape, visual, ex.prompt, ex.caption);
      Tensor<S> scaled = scale(terms.sum, S(1) / static_cast<S>(total));
      const double v = static_cast<double>(scaled.item());
      if (!std::isfinite(v)) {
        throw NumericError("train_step " + std::to_string(step_) + ": non-finite loss on batch item " +
                           std::to_string(i) + " (caption length " + std::to_string(ex.caption.size()) + ")");
      }
      loss += v;
      params_.accumulate(tape, tape.backward(scaled));
    }
    optimizer_.step(lr_at(step_, config_.schedule()));
    ++step_;
    return loss;
  }

  Index step() const { return step_; }
  const ParameterList<S>& parameters() const { return params_; }

 private:
  ParameterList<S>& collect(CaptionModel<S>& model, ParameterList<S>& out) {
    model.encoder.visit([&](Parameter<S>& p) { out.push_back(p); });
    encoder_end_ = out.size();
    model.projector.visit([&](Parameter<S>& p) { out.push_back(p); });
    projector_end_ = out.size();
    model.decoder.visit([&](Parameter<S>& p) { out.push_back(p); });
    return out;
  }

  static AdamWConfig adamw_config(const TrainConfig& c) { return {c.beta1, c.beta2, c.eps, c.weight_decay}; }

  CaptionModel<S>& model_;
  TrainConfig config_;
  std::size_t encoder_end_ = 0;
  std::size_t projector_end_ = 0;
  ParameterList<S> params_;
  AdamW<S> optimizer_;
  Index step_ = 0;
};

}  // namespace ase
