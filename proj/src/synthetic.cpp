#include "ase/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "ase/errors.hpp"
#include "ase/tokenizer.hpp"

namespace ase {

namespace {

using Index = Eigen::Index;
using Rgb = std::array<float, 3>;

enum Style : Index { Warm, Cool, Thirds, Centered, HighKey, LowKey, Vignette, Diagonal, kStyleCount };

struct NamedColor {
  const char* name;
  Rgb rgb;
};

const std::array<NamedColor, 5> kSubjectColors = {{
    {"red", {0.85f, 0.12f, 0.10f}},
    {"green", {0.15f, 0.70f, 0.20f}},
    {"blue", {0.15f, 0.25f, 0.85f}},
    {"yellow", {0.92f, 0.85f, 0.15f}},
    {"purple", {0.55f, 0.20f, 0.70f}},
}};

// Templates use {color} for the subject colour and {side} for its placement.
const std::array<std::vector<std::string>, kStyleCount> kTemplates = {{
    {"warm orange tones give the scene a cozy mood .", "a {color} subject glows against a warm background .",
     "the warm palette feels inviting ."},
    {"cool blue tones create a calm atmosphere .", "a {color} subject rests on a cool background .",
     "the cool palette feels quiet and serene ."},
    {"the {color} subject sits on the {side} third , a balanced composition .",
     "placing the {color} subject off center follows the rule of thirds .", "good use of the rule of thirds ."},
    {"the {color} subject is centered , a symmetric composition .",
     "a centered {color} subject draws the eye to the middle .", "the centered framing feels stable ."},
    {"bright high key lighting gives an airy feel .", "soft bright light makes the {color} subject look delicate .",
     "the exposure is bright and clean ."},
    {"dark low key lighting with a {color} highlight adds drama .", "deep shadows surround the {color} subject .",
     "the dark exposure creates a moody scene ."},
    {"a soft vignette draws the eye to the {color} subject .", "darkened corners frame the {color} subject .",
     "the vignette adds focus to the center ."},
    {"strong diagonal lines lead the eye across the frame .", "the diagonal stripes add dynamic energy .",
     "bold lines create a sense of movement ."},
}};

std::string fill(std::string text, const std::string& color, const std::string& side) {
  auto replace = [&](const std::string& key, const std::string& value) {
    for (std::size_t pos; (pos = text.find(key)) != std::string::npos;) text.replace(pos, key.size(), value);
  };
  replace("{color}", color);
  replace("{side}", side);
  return text;
}

float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

}  // namespace

void SyntheticSpec::validate() const {
  if (image_size < 8) throw ValidationError("synthetic: image_size must be at least 8");
  if (corpus_size < 2 * kStyleCount)
    throw ValidationError("synthetic: corpus_size must be at least " + std::to_string(2 * kStyleCount) +
                          " so every class reaches both splits");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ValidationError("synthetic: train_fraction must lie in (0, 1)");
  if (min_captions < 1 || max_captions < min_captions || max_captions > 3)
    throw ValidationError("synthetic: caption count range must lie within [1, 3]");
}

const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names = {"warm-palette", "cool-palette", "rule-of-thirds", "centered-subject",
                                                 "high-key",     "low-key",      "vignette",       "diagonal-lines"};
  return names;
}

std::set<std::string> synthetic_vocabulary() {
  std::set<std::string> words;
  for (const auto& group : kTemplates)
    for (const auto& t : group)
      for (const auto& c : kSubjectColors)
        for (const char* side : {"left", "right"})
          for (const auto& w : split_words(fill(t, c.name, side))) words.insert(w);
  return words;
}

SyntheticSample render_synthetic_sample(Index label, Index size, Index caption_count, std::mt19937_64& rng) {
  if (label < 0 || label >= kStyleCount) throw ContractError("synthetic: label out of range");
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  const NamedColor& subject = kSubjectColors[static_cast<std::size_t>(rng() % kSubjectColors.size())];
  const bool left = (rng() & 1u) == 0;

  // Background: two-colour vertical gradient per style.
  Rgb top{}, bottom{};
  auto jitter = [&](Rgb c, float amount) {
    for (auto& v : c) v = clamp01(v + amount * (u(rng) - 0.5f));
    return c;
  };
  switch (label) {
    case Warm: top = jitter({0.95f, 0.55f, 0.20f}, 0.1f); bottom = jitter({0.80f, 0.30f, 0.15f}, 0.1f); break;
    case Cool: top = jitter({0.25f, 0.55f, 0.85f}, 0.1f); bottom = jitter({0.15f, 0.35f, 0.60f}, 0.1f); break;
    case HighKey: top = jitter({0.95f, 0.95f, 0.93f}, 0.04f); bottom = jitter({0.85f, 0.86f, 0.88f}, 0.04f); break;
    case LowKey: top = jitter({0.08f, 0.08f, 0.10f}, 0.04f); bottom = jitter({0.03f, 0.03f, 0.05f}, 0.04f); break;
    default: top = jitter({0.55f, 0.55f, 0.55f}, 0.1f); bottom = jitter({0.45f, 0.45f, 0.47f}, 0.1f); break;
  }

  const float s = float(size);
  float cx = 0.5f * s + (u(rng) - 0.5f) * 0.3f * s;
  float cy = 0.5f * s + (u(rng) - 0.5f) * 0.3f * s;
  float radius = s * (0.12f + 0.06f * u(rng));
  if (label == Thirds) {
    cx = (left ? 1.0f / 3.0f : 2.0f / 3.0f) * s + (u(rng) - 0.5f) * 0.06f * s;
    cy = (u(rng) < 0.5f ? 1.0f / 3.0f : 2.0f / 3.0f) * s;
  } else if (label == Centered || label == Vignette) {
    cx = 0.5f * s + (u(rng) - 0.5f) * 0.04f * s;
    cy = 0.5f * s + (u(rng) - 0.5f) * 0.04f * s;
  } else if (label == LowKey) {
    radius = s * (0.08f + 0.04f * u(rng));
  }
  const bool draw_subject = label != Diagonal;
  const float stripe_period = s * (0.18f + 0.08f * u(rng));
  const float stripe_phase = u(rng) * stripe_period;

  SyntheticSample sample;
  sample.label = label;
  sample.image = Image::filled(size, size, 3, 0.0f);
  std::normal_distribution<float> noise(0.0f, 0.02f);
  for (Index y = 0; y < size; ++y) {
    const float t = (float(y) + 0.5f) / s;
    for (Index x = 0; x < size; ++x) {
      Rgb px;
      for (int c = 0; c < 3; ++c) px[c] = (1.0f - t) * top[c] + t * bottom[c];
      const float fx = float(x) + 0.5f, fy = float(y) + 0.5f;
      if (label == Diagonal && std::fmod(fx + fy + stripe_phase, stripe_period) < 0.5f * stripe_period)
        px = {0.12f, 0.12f, 0.14f};
      if (draw_subject && std::hypot(fx - cx, fy - cy) <= radius) px = subject.rgb;
      if (label == Vignette) {
        const float d = std::hypot(fx - 0.5f * s, fy - 0.5f * s) / (0.7071f * s);
        const float falloff = std::clamp(1.15f - 1.1f * d * d, 0.08f, 1.0f);
        for (auto& v : px) v *= falloff;
      }
      for (int c = 0; c < 3; ++c) sample.image.at(y, x, c) = clamp01(px[c] + noise(rng));
    }
  }
  sample.image = quantize_8bit(sample.image);

  // Distinct templates per image, first one always the class's primary line.
  const auto& group = kTemplates[static_cast<std::size_t>(label)];
  std::vector<std::size_t> order = {0};
  std::vector<std::size_t> rest = {1, 2};
  std::shuffle(rest.begin(), rest.end(), rng);
  order.insert(order.end(), rest.begin(), rest.end());
  for (Index k = 0; k < caption_count; ++k)
    sample.captions.push_back(fill(group[order[static_cast<std::size_t>(k)]], subject.name, left ? "left" : "right"));
  return sample;
}

GeneratedCorpus generate_synthetic_corpus(const SyntheticSpec& spec, std::uint64_t seed,
                                          const std::filesystem::path& out_dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw std::runtime_error("synthetic: cannot create " + (out_dir / "images").string() + ": " + ec.message());

  std::mt19937_64 rng(seed);
  Dataset all;
  all.name = "corpus";
  std::uniform_int_distribution<Index> count(spec.min_captions, spec.max_captions);
  // Balanced labels in a seed-shuffled order.
  std::vector<Index> labels(static_cast<std::size_t>(spec.corpus_size));
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<Index>(i) % kStyleCount;
  std::shuffle(labels.begin(), labels.end(), rng);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    SyntheticSample s = render_synthetic_sample(labels[i], spec.image_size, count(rng), rng);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%04zu.ppm", i);
    const std::string rel = std::string("images/") + name;
    write_image(out_dir / rel, s.image);
    CaptionRecord r;
    r.image = rel;
    r.image_path = out_dir / rel;
    r.captions = std::move(s.captions);
    r.label = s.label;
    all.records.push_back(std::move(r));
  }

  GeneratedCorpus out;
  out.corpus = out_dir / "corpus.jsonl";
  out.train = out_dir / "train.jsonl";
  out.test = out_dir / "test.jsonl";
  const DatasetSplit split = split_dataset(all, spec.train_fraction, seed);
  write_dataset(out.corpus, all);
  write_dataset(out.train, split.train);
  write_dataset(out.test, split.test);
  out.train_count = split.train.size();
  out.test_count = split.test.size();
  return out;
}

}  // namespace ase
