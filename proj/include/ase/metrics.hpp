#pragma once

// Caption metrics over split_words tokens: cumulative BLEU-1..4, ROUGE-L F1,
// METEOR (exact-match stage), CIDEr, and content-unigram precision/recall
// aggregated by maximum over references.

#include <array>
#include <cstddef>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ase/errors.hpp"
#include "json.hpp"

namespace ase {

using Tokens = std::vector<std::string>;
using NGram = std::vector<std::string>;
using NGramCounts = std::map<NGram, std::size_t>;

NGramCounts ngram_counts(const Tokens& tokens, std::size_t n);

struct BleuStats {
  std::array<std::size_t, 4> matches{};  ///< clipped matches per order
  std::array<std::size_t, 4> totals{};   ///< candidate n-grams per order
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;  ///< closest reference length, ties to shorter
};

BleuStats bleu_stats(const Tokens& candidate, std::span<const Tokens> references);

/// Cumulative BLEU-n (1 <= n <= 4), no smoothing; 0 for an empty candidate.
double bleu(const Tokens& candidate, std::span<const Tokens> references, std::size_t max_order);

std::size_t lcs_length(const Tokens& a, const Tokens& b);

/// LCS F1 (beta = 1), maximum over references.
double rouge_l(const Tokens& candidate, std::span<const Tokens> references);

struct MeteorAlignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

/// Exact-token alignment with the most matches, then the fewest chunks.
MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference);

double meteor_exact(const Tokens& candidate, const Tokens& reference);
double meteor_exact(const Tokens& candidate, std::span<const Tokens> references);

/// Document frequencies over per-image reference sets.
class CiderScorer {
 public:
  explicit CiderScorer(std::span<const std::vector<Tokens>> corpus_references);

  std::size_t corpus_size() const { return corpus_size_; }
  std::size_t document_frequency(const NGram& gram) const;
  /// ln(N / max(df, 1)).
  double idf(const NGram& gram) const;

  /// 10 * mean over orders 1..4 of the mean cosine against each reference.
  double score(const Tokens& candidate, std::span<const Tokens> references) const;

 private:
  std::size_t corpus_size_ = 0;
  std::map<NGram, std::size_t> df_;
};

std::vector<double> cider(std::span<const Tokens> candidates, std::span<const std::vector<Tokens>> references);

const std::set<std::string>& default_stopwords();

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
};

/// Content-token multiset overlap; stopwords and punctuation are dropped.
PrecisionRecall unigram_pre_re(const Tokens& candidate, const Tokens& reference,
                               const std::set<std::string>& stopwords = default_stopwords());

using PairwiseScorer = std::function<double(const Tokens&, const Tokens&)>;

double max_over_references(const PairwiseScorer& scorer, const Tokens& candidate, std::span<const Tokens> references);

struct CandidateCaption {
  std::string image;
  std::string caption;
};

struct ImageScores {
  std::string image;
  std::array<double, 4> bleu{};
  double meteor = 0.0;
  double rouge = 0.0;
  double cider = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double spice_proxy = 0.0;
};

struct EvalReport {
  std::string dataset;
  std::string mode;
  std::vector<ImageScores> per_image;
  ImageScores mean;
  std::size_t skipped_images = 0;  ///< candidates without any reference

  static std::vector<std::string> columns();
  static std::vector<double> values(const ImageScores& s);
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

/// references: image id -> reference captions.
EvalReport evaluate_corpus(std::span<const CandidateCaption> candidates,
                           const std::map<std::string, std::vector<std::string>>& references,
                           const std::string& dataset = "", const std::string& mode = "");

/// Intermediate n-gram counts and idf values per image for cross-checking.
nlohmann::json oracle_dump(std::span<const CandidateCaption> candidates,
                           const std::map<std::string, std::vector<std::string>>& references);

}  // namespace ase
