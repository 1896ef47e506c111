#pragma once

#include <array>
#include <cctype>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "leaml/error.hpp"

namespace leaml {

using TokenId = int;

namespace tok {
inline constexpr TokenId kQOpen = 0;
inline constexpr TokenId kAOpen = 1;
inline constexpr TokenId kBos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kPad = 4;
inline constexpr TokenId kUnk = 5;
inline constexpr TokenId kNumSpecial = 6;
inline constexpr std::array<std::string_view, kNumSpecial> kSpecialText = {
    "<q>", "<a>", "<bos>", "<eos>", "<pad>", "<unk>"};
}  // namespace tok

/// Splits on runs of ASCII whitespace.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string normalize_whitespace(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

/// Word-level vocabulary. Ids 0-5 are the reserved specials; words follow in
/// insertion order.
class Vocabulary {
 public:
  Vocabulary() {
    for (auto s : tok::kSpecialText) push(std::string(s));
  }

  explicit Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
    for (const auto& w : words) add(w);
  }

  /// Adds a word if absent and returns its id.
  TokenId add(const std::string& word) {
    if (word.empty() || word.find_first_of(" \t\n\r") != std::string::npos) {
      throw InvalidInput("vocabulary entries must be non-empty single words: '" + word + "'");
    }
    if (auto it = index_.find(word); it != index_.end()) return it->second;
    return push(word);
  }

  TokenId id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? tok::kUnk : it->second;
  }

  bool contains(std::string_view word) const { return index_.count(std::string(word)) != 0; }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw InvalidInput("token id " + std::to_string(id) + " outside vocabulary");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Non-special entries in id order.
  std::vector<std::string> words() const {
    return {tokens_.begin() + tok::kNumSpecial, tokens_.end()};
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    return ids;
  }

  /// Joins tokens with single spaces, skipping BOS and PAD.
  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id == tok::kBos || id == tok::kPad) continue;
      if (!out.empty()) out += ' ';
      out += token(id);
    }
    return out;
  }

 private:
  TokenId push(std::string word) {
    const auto id = static_cast<TokenId>(tokens_.size());
    index_.emplace(word, id);
    tokens_.push_back(std::move(word));
    return id;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

inline bool is_special(TokenId id) { return id >= 0 && id < tok::kNumSpecial; }

}  // namespace leaml
