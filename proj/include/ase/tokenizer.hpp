#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

namespace ase {

/// Prompt used for training and captioning unless a record overrides it.
inline constexpr std::string_view kDefaultPrompt = "Comment on this image from an aesthetic perspective.";

/// Lowercases and splits on whitespace; every punctuation character is its
/// own token. Shared by the captioner and the metrics.
std::vector<std::string> split_words(std::string_view text);

/// Space-joins tokens, attaching closing punctuation (. , ! ? ; :) to the
/// preceding token.
std::string join_words(std::span<const std::string> words);

class Vocabulary {
 public:
  using Id = Eigen::Index;
  static constexpr Id kPad = 0;
  static constexpr Id kBos = 1;
  static constexpr Id kEos = 2;
  static constexpr Id kUnk = 3;
  static constexpr Id kImage = 4;
  static constexpr Id kReserved = 5;

  Vocabulary();

  /// Specials first, then corpus words by descending frequency (ties
  /// alphabetical), truncated to max_size entries in total.
  static Vocabulary build(std::span<const std::string> texts, std::size_t max_size = 512);

  /// Rebuilds from a stored token list; the specials must sit at their
  /// reserved indices.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  Id id(std::string_view word) const;
  const std::string& token(Id id) const;
  Id size() const { return static_cast<Id>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool is_special(Id id) const { return id < kReserved; }

  std::vector<Id> encode(std::string_view text) const;
  /// Drops special tokens.
  std::string decode(std::span<const Id> ids) const;

 private:
  void add(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, Id> index_;
};

}  // namespace ase
