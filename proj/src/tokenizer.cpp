#include "ase/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "ase/errors.hpp"

namespace ase {

namespace {

const char* const kSpecials[] = {"<pad>", "<bos>", "<eos>", "<unk>", "<image>"};

bool attaches_left(const std::string& w) {
  return w.size() == 1 && std::string_view(".,!?;:").find(w[0]) != std::string_view::npos;
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u)) {
      flush();
    } else if (std::ispunct(u)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  flush();
  return out;
}

std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty() && !attaches_left(w)) out.push_back(' ');
    out += w;
  }
  return out;
}

Vocabulary::Vocabulary() {
  for (const char* s : kSpecials) add(s);
}

void Vocabulary::add(std::string token) {
  if (index_.contains(token)) return;
  index_.emplace(token, static_cast<Id>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::build(std::span<const std::string> texts, std::size_t max_size) {
  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts)
    for (auto& w : split_words(t)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (auto& [w, n] : ranked) {
    if (v.tokens_.size() >= max_size) break;
    v.add(w);
  }
  return v;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < static_cast<std::size_t>(kReserved)) throw ValidationError("vocabulary: missing special tokens");
  for (Id i = 0; i < kReserved; ++i) {
    if (tokens[static_cast<std::size_t>(i)] != kSpecials[i]) {
      throw ValidationError("vocabulary: special token " + std::string(kSpecials[i]) + " not at index " +
                            std::to_string(i));
    }
  }
  Vocabulary v;
  for (std::size_t i = kReserved; i < tokens.size(); ++i) {
    if (v.index_.contains(tokens[i])) throw ValidationError("vocabulary: duplicate token '" + tokens[i] + "'");
    v.add(std::move(tokens[i]));
  }
  return v;
}

Vocabulary::Id Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(Id id) const {
  if (id < 0 || id >= size()) throw ContractError("vocabulary: id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<Vocabulary::Id> Vocabulary::encode(std::string_view text) const {
  std::vector<Id> ids;
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  return ids;
}

std::string Vocabulary::decode(std::span<const Id> ids) const {
  std::vector<std::string> words;
  for (Id i : ids)
    if (!is_special(i)) words.push_back(token(i));
  return join_words(words);
}

}  // namespace ase
