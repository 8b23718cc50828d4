#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tabvla {

using TokenId = std::uint16_t;
using TokenSeq = std::vector<TokenId>;

/// Whitespace tokenizer; trailing ",.;" split off as separate tokens; lowercase.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words);

  /// Returns the id of `word`, inserting it if absent.
  TokenId add(const std::string& word);
  TokenSeq add_all(const std::vector<std::string>& words);

  bool contains(const std::string& word) const { return index_.contains(word); }
  TokenId id(const std::string& word) const;  // throws if absent
  const std::string& word(TokenId id) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  TokenSeq encode(std::string_view text) const;
  std::string decode(const TokenSeq& tokens) const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.words_ == b.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace tabvla
