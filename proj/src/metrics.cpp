#include "ase/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <unordered_map>

#include "ase/errors.hpp"
#include "ase/tokenizer.hpp"

namespace ase {

namespace {

bool is_punctuation(const std::string& token) {
  return !token.empty() &&
         std::all_of(token.begin(), token.end(), [](unsigned char ch) { return std::ispunct(ch) != 0; });
}

void require_references(std::span<const Tokens> references, const char* where) {
  if (references.empty()) throw ContractError(std::string(where) + ": at least one reference is required");
}

std::string join_gram(const NGram& g) {
  std::string out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (i) out += ' ';
    out += g[i];
  }
  return out;
}

// Exhaustive search with memoisation over (position, used reference slots,
// previous matched slot). Every optimal alignment must reach the maximum
// match count, which is the per-word minimum of the two multiplicities.
class MeteorAligner {
 public:
  MeteorAligner(const Tokens& candidate, const Tokens& reference) {
    std::map<std::string, int> ids;
    auto id_of = [&](const std::string& w) { return ids.emplace(w, static_cast<int>(ids.size())).first->second; };
    for (const auto& w : candidate) cand_.push_back(id_of(w));
    for (const auto& w : reference) ref_.push_back(id_of(w));
    const std::size_t words = ids.size();
    std::vector<int> cc(words, 0), rc(words, 0);
    for (int w : cand_) ++cc[static_cast<std::size_t>(w)];
    for (int w : ref_) ++rc[static_cast<std::size_t>(w)];
    target_.resize(words);
    for (std::size_t w = 0; w < words; ++w) {
      target_[w] = std::min(cc[w], rc[w]);
      matches_ += static_cast<std::size_t>(target_[w]);
    }
    remaining_.assign(cand_.size() + 1, std::vector<int>(words, 0));
    for (std::size_t i = cand_.size(); i-- > 0;) {
      remaining_[i] = remaining_[i + 1];
      ++remaining_[i][static_cast<std::size_t>(cand_[i])];
    }
    positions_.resize(words);
    for (std::size_t j = 0; j < ref_.size(); ++j) positions_[static_cast<std::size_t>(ref_[j])].push_back(j);
    used_.assign(ref_.size(), 0);
    used_count_.assign(words, 0);
  }

  MeteorAlignment run() {
    if (matches_ == 0) return {};
    return {matches_, solve(0, -1)};
  }

 private:
  static constexpr std::size_t kInfinite = std::numeric_limits<std::size_t>::max() / 4;

  std::size_t solve(std::size_t i, long prev) {
    if (i == cand_.size()) return 0;
    std::string key = std::to_string(i) + ':' + std::to_string(prev) + ':';
    key.append(used_.begin(), used_.end());
    if (auto it = memo_.find(key); it != memo_.end()) return it->second;

    const auto w = static_cast<std::size_t>(cand_[i]);
    const int need = target_[w] - used_count_[w];
    std::size_t best = kInfinite;
    if (remaining_[i + 1][w] >= need) best = solve(i + 1, -1);
    if (need > 0) {
      for (std::size_t j : positions_[w]) {
        if (used_[j]) continue;
        used_[j] = 1;
        ++used_count_[w];
        const std::size_t opens = (prev >= 0 && static_cast<long>(j) == prev + 1) ? 0 : 1;
        best = std::min(best, opens + solve(i + 1, static_cast<long>(j)));
        --used_count_[w];
        used_[j] = 0;
      }
    }
    memo_.emplace(std::move(key), best);
    return best;
  }

  std::vector<int> cand_, ref_, target_;
  std::vector<std::vector<int>> remaining_;
  std::vector<std::vector<std::size_t>> positions_;
  std::vector<char> used_;
  std::vector<int> used_count_;
  std::size_t matches_ = 0;
  std::unordered_map<std::string, std::size_t> memo_;
};

using Vector = std::map<NGram, double>;

double cosine(const Vector& a, const Vector& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [g, v] : a) {
    na += v * v;
    if (auto it = b.find(g); it != b.end()) dot += v * it->second;
  }
  for (const auto& [g, v] : b) nb += v * v;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

NGramCounts ngram_counts(const Tokens& tokens, std::size_t n) {
  if (n == 0) throw ContractError("ngram_counts: order must be positive");
  NGramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) ++counts[NGram(tokens.begin() + i, tokens.begin() + i + n)];
  return counts;
}

BleuStats bleu_stats(const Tokens& candidate, std::span<const Tokens> references) {
  require_references(references, "bleu");
  BleuStats s;
  s.candidate_length = candidate.size();
  std::size_t best_gap = std::numeric_limits<std::size_t>::max();
  for (const auto& r : references) {
    const std::size_t gap = r.size() > candidate.size() ? r.size() - candidate.size() : candidate.size() - r.size();
    if (gap < best_gap || (gap == best_gap && r.size() < s.reference_length)) {
      best_gap = gap;
      s.reference_length = r.size();
    }
  }
  for (std::size_t n = 1; n <= 4; ++n) {
    const NGramCounts cand = ngram_counts(candidate, n);
    NGramCounts max_ref;
    for (const auto& r : references)
      for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
    std::size_t matched = 0, total = 0;
    for (const auto& [g, c] : cand) {
      total += c;
      if (auto it = max_ref.find(g); it != max_ref.end()) matched += std::min(c, it->second);
    }
    s.matches[n - 1] = matched;
    s.totals[n - 1] = total;
  }
  return s;
}

double bleu(const Tokens& candidate, std::span<const Tokens> references, std::size_t max_order) {
  if (max_order < 1 || max_order > 4) throw ContractError("bleu: max_order must lie in [1, 4]");
  require_references(references, "bleu");
  if (candidate.empty()) return 0.0;
  const BleuStats s = bleu_stats(candidate, references);
  double log_sum = 0.0;
  for (std::size_t n = 0; n < max_order; ++n) {
    if (s.matches[n] == 0 || s.totals[n] == 0) return 0.0;
    log_sum += std::log(double(s.matches[n]) / double(s.totals[n]));
  }
  const double c = double(s.candidate_length), r = double(s.reference_length);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / double(max_order));
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Tokens& candidate, std::span<const Tokens> references) {
  require_references(references, "rouge_l");
  double best = 0.0;
  for (const auto& r : references) {
    const std::size_t l = lcs_length(candidate, r);
    if (l == 0) continue;
    const double p = double(l) / double(candidate.size()), rc = double(l) / double(r.size());
    best = std::max(best, 2.0 * p * rc / (p + rc));
  }
  return best;
}

MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference) {
  return MeteorAligner(candidate, reference).run();
}

double meteor_exact(const Tokens& candidate, const Tokens& reference) {
  const MeteorAlignment a = meteor_align(candidate, reference);
  if (a.matches == 0) return 0.0;
  const double m = double(a.matches);
  const double p = m / double(candidate.size()), r = m / double(reference.size());
  const double f_mean = 10.0 * p * r / (r + 9.0 * p);
  const double penalty = 0.5 * std::pow(double(a.chunks) / m, 3.0);
  return f_mean * (1.0 - penalty);
}

double meteor_exact(const Tokens& candidate, std::span<const Tokens> references) {
  require_references(references, "meteor");
  double best = 0.0;
  for (const auto& r : references) best = std::max(best, meteor_exact(candidate, r));
  return best;
}

CiderScorer::CiderScorer(std::span<const std::vector<Tokens>> corpus_references)
    : corpus_size_(corpus_references.size()) {
  if (corpus_size_ == 0) throw ContractError("cider: empty corpus");
  for (const auto& refs : corpus_references) {
    std::set<NGram> seen;
    for (const auto& r : refs)
      for (std::size_t n = 1; n <= 4; ++n)
        for (const auto& [g, c] : ngram_counts(r, n)) seen.insert(g);
    for (const auto& g : seen) ++df_[g];
  }
}

std::size_t CiderScorer::document_frequency(const NGram& gram) const {
  auto it = df_.find(gram);
  return it == df_.end() ? 0 : it->second;
}

double CiderScorer::idf(const NGram& gram) const {
  return std::log(double(corpus_size_) / double(std::max<std::size_t>(document_frequency(gram), 1)));
}

double CiderScorer::score(const Tokens& candidate, std::span<const Tokens> references) const {
  require_references(references, "cider");
  double total = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    auto weigh = [&](const Tokens& t) {
      Vector v;
      for (const auto& [g, c] : ngram_counts(t, n)) v[g] = double(c) * idf(g);
      return v;
    };
    const Vector cv = weigh(candidate);
    double acc = 0.0;
    for (const auto& r : references) acc += cosine(cv, weigh(r));
    total += acc / double(references.size());
  }
  return 10.0 * total / 4.0;
}

std::vector<double> cider(std::span<const Tokens> candidates, std::span<const std::vector<Tokens>> references) {
  if (candidates.size() != references.size()) throw ContractError("cider: one reference set per candidate");
  const CiderScorer scorer(references);
  std::vector<double> out;
  out.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) out.push_back(scorer.score(candidates[i], references[i]));
  return out;
}

const std::set<std::string>& default_stopwords() {
  static const std::set<std::string> words = {
      "a",    "an",   "the",  "and",  "or",    "but",  "of",   "to",   "in",   "on",   "at",   "by",
      "for",  "with", "from", "as",   "is",    "are",  "was",  "were", "be",   "been", "it",   "its",
      "this", "that", "these", "those", "there", "here", "very", "so",  "too",  "i",    "you",  "he",
      "she",  "we",   "they", "my",   "your",  "his",  "her",  "our",  "their", "has", "have", "had",
      "not",  "no",   "do",   "does", "just",  "into", "than", "then", "which", "who", "what", "some"};
  return words;
}

PrecisionRecall unigram_pre_re(const Tokens& candidate, const Tokens& reference,
                               const std::set<std::string>& stopwords) {
  auto content = [&](const Tokens& t) {
    std::map<std::string, std::size_t> bag;
    std::size_t n = 0;
    for (const auto& w : t) {
      if (is_punctuation(w) || stopwords.count(w)) continue;
      ++bag[w];
      ++n;
    }
    return std::pair{bag, n};
  };
  const auto [cb, cn] = content(candidate);
  const auto [rb, rn] = content(reference);
  std::size_t common = 0;
  for (const auto& [w, c] : cb)
    if (auto it = rb.find(w); it != rb.end()) common += std::min(c, it->second);
  PrecisionRecall pr;
  if (cn > 0) pr.precision = double(common) / double(cn);
  if (rn > 0) pr.recall = double(common) / double(rn);
  return pr;
}

double max_over_references(const PairwiseScorer& scorer, const Tokens& candidate, std::span<const Tokens> references) {
  require_references(references, "max_over_references");
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& r : references) best = std::max(best, scorer(candidate, r));
  return best;
}

std::vector<std::string> EvalReport::columns() {
  return {"B1", "B2", "B3", "B4", "M (exact)", "R", "C", "Pre", "Re", "S-L (proxy)"};
}

std::vector<double> EvalReport::values(const ImageScores& s) {
  return {s.bleu[0], s.bleu[1], s.bleu[2], s.bleu[3], s.meteor, s.rouge, s.cider, s.precision, s.recall, s.spice_proxy};
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out << "image";
  for (const auto& c : columns()) out << ',' << c;
  out << '\n' << std::fixed << std::setprecision(6);
  auto row = [&](const std::string& name, const ImageScores& s) {
    out << name;
    for (double v : values(s)) out << ',' << v;
    out << '\n';
  };
  for (const auto& s : per_image) row(s.image, s);
  row("mean", mean);
  return out.str();
}

nlohmann::json EvalReport::to_json() const {
  auto scores = [](const ImageScores& s) {
    nlohmann::json j;
    const auto cols = columns();
    const auto vals = values(s);
    for (std::size_t i = 0; i < cols.size(); ++i) j[cols[i]] = vals[i];
    return j;
  };
  nlohmann::json j;
  j["dataset"] = dataset;
  j["mode"] = mode;
  j["skipped_images"] = skipped_images;
  j["notes"] = {{"B1-B4", "cumulative BLEU, no smoothing, mean of per-image scores"},
                {"M (exact)", "METEOR exact-match stage only"},
                {"R", "ROUGE-L F1"},
                {"C", "CIDEr, idf over the evaluated reference sets"},
                {"Pre/Re", "content-unigram precision/recall, maximum over references"},
                {"S-L (proxy)", "content-unigram F1, maximum over references"}};
  j["mean"] = scores(mean);
  j["per_image"] = nlohmann::json::array();
  for (const auto& s : per_image) {
    nlohmann::json row = scores(s);
    row["image"] = s.image;
    j["per_image"].push_back(row);
  }
  return j;
}

namespace {
struct PreparedCorpus {
  std::vector<std::string> images;
  std::vector<Tokens> candidates;
  std::vector<std::vector<Tokens>> references;
  std::size_t skipped = 0;
};

PreparedCorpus prepare(std::span<const CandidateCaption> candidates,
                       const std::map<std::string, std::vector<std::string>>& references) {
  if (candidates.empty()) throw ContractError("evaluate_corpus: no candidates");
  PreparedCorpus p;
  for (const auto& c : candidates) {
    auto it = references.find(c.image);
    std::vector<Tokens> refs;
    if (it != references.end())
      for (const auto& r : it->second) refs.push_back(split_words(r));
    if (refs.empty()) {
      ++p.skipped;
      continue;
    }
    p.images.push_back(c.image);
    p.candidates.push_back(split_words(c.caption));
    p.references.push_back(std::move(refs));
  }
  return p;
}
}  // namespace

EvalReport evaluate_corpus(std::span<const CandidateCaption> candidates,
                           const std::map<std::string, std::vector<std::string>>& references,
                           const std::string& dataset, const std::string& mode) {
  const PreparedCorpus p = prepare(candidates, references);
  EvalReport report;
  report.dataset = dataset;
  report.mode = mode;
  report.skipped_images = p.skipped;
  if (p.images.empty()) return report;

  const CiderScorer cider_scorer(p.references);
  const PairwiseScorer precision = [](const Tokens& c, const Tokens& r) { return unigram_pre_re(c, r).precision; };
  const PairwiseScorer recall = [](const Tokens& c, const Tokens& r) { return unigram_pre_re(c, r).recall; };
  const PairwiseScorer f1 = [](const Tokens& c, const Tokens& r) {
    const auto pr = unigram_pre_re(c, r);
    const double s = pr.precision + pr.recall;
    return s > 0 ? 2.0 * pr.precision * pr.recall / s : 0.0;
  };

  for (std::size_t i = 0; i < p.images.size(); ++i) {
    const Tokens& c = p.candidates[i];
    const auto& refs = p.references[i];
    ImageScores s;
    s.image = p.images[i];
    for (std::size_t n = 1; n <= 4; ++n) s.bleu[n - 1] = bleu(c, refs, n);
    s.meteor = meteor_exact(c, refs);
    s.rouge = rouge_l(c, refs);
    s.cider = cider_scorer.score(c, refs);
    s.precision = max_over_references(precision, c, refs);
    s.recall = max_over_references(recall, c, refs);
    s.spice_proxy = max_over_references(f1, c, refs);
    report.per_image.push_back(s);
  }

  ImageScores& m = report.mean;
  m.image = "mean";
  const double n = double(report.per_image.size());
  for (const auto& s : report.per_image) {
    for (std::size_t k = 0; k < 4; ++k) m.bleu[k] += s.bleu[k] / n;
    m.meteor += s.meteor / n;
    m.rouge += s.rouge / n;
    m.cider += s.cider / n;
    m.precision += s.precision / n;
    m.recall += s.recall / n;
    m.spice_proxy += s.spice_proxy / n;
  }
  return report;
}

nlohmann::json oracle_dump(std::span<const CandidateCaption> candidates,
                           const std::map<std::string, std::vector<std::string>>& references) {
  const PreparedCorpus p = prepare(candidates, references);
  nlohmann::json out;
  out["corpus_size"] = p.images.size();
  out["skipped_images"] = p.skipped;
  out["images"] = nlohmann::json::array();
  if (p.images.empty()) return out;
  const CiderScorer scorer(p.references);
  for (std::size_t i = 0; i < p.images.size(); ++i) {
    const auto stats = bleu_stats(p.candidates[i], p.references[i]);
    nlohmann::json img;
    img["image"] = p.images[i];
    img["candidate"] = p.candidates[i];
    img["references"] = p.references[i];
    img["candidate_length"] = stats.candidate_length;
    img["closest_reference_length"] = stats.reference_length;
    img["orders"] = nlohmann::json::array();
    for (std::size_t n = 1; n <= 4; ++n) {
      nlohmann::json order;
      order["n"] = n;
      order["clipped_matches"] = stats.matches[n - 1];
      order["candidate_total"] = stats.totals[n - 1];
      nlohmann::json counts = nlohmann::json::object();
      nlohmann::json idf = nlohmann::json::object();
      for (const auto& [g, c] : ngram_counts(p.candidates[i], n)) {
        counts[join_gram(g)] = c;
        idf[join_gram(g)] = scorer.idf(g);
      }
      for (const auto& r : p.references[i])
        for (const auto& [g, c] : ngram_counts(r, n)) idf[join_gram(g)] = scorer.idf(g);
      order["candidate_counts"] = counts;
      order["idf"] = idf;
      img["orders"].push_back(order);
    }
    out["images"].push_back(img);
  }
  return out;
}

}  // namespace ase
