#pragma once

// Procedural style-class corpus: colour fields, placed subjects, vignettes and
// stripes, each image captioned from class templates that name visible
// attributes (palette, subject colour and placement, lighting).

#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "ase/dataset.hpp"

namespace ase {

struct SyntheticSpec {
  Eigen::Index image_size = 32;
  Eigen::Index corpus_size = 64;
  double train_fraction = 0.8;
  Eigen::Index min_captions = 1;
  Eigen::Index max_captions = 3;

  void validate() const;
};

const std::vector<std::string>& synthetic_class_names();

/// Every word any template can emit.
std::set<std::string> synthetic_vocabulary();

struct SyntheticSample {
  Image image;
  Eigen::Index label = 0;
  std::vector<std::string> captions;
};

SyntheticSample render_synthetic_sample(Eigen::Index label, Eigen::Index image_size, Eigen::Index caption_count,
                                        std::mt19937_64& rng);

struct GeneratedCorpus {
  std::filesystem::path corpus;  ///< all records
  std::filesystem::path train;
  std::filesystem::path test;
  std::size_t train_count = 0;
  std::size_t test_count = 0;
};

/// Writes images/*.ppm, corpus.jsonl, train.jsonl and test.jsonl under
/// out_dir. Byte-identical output for identical (spec, seed).
GeneratedCorpus generate_synthetic_corpus(const SyntheticSpec& spec, std::uint64_t seed,
                                          const std::filesystem::path& out_dir);

}  // namespace ase
