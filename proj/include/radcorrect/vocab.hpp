#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "radcorrect/errors.hpp"

namespace radcorrect {

using TokenId = std::int32_t;

// Token table with a fixed reserved prefix. Word ids follow the reserved
// block so reserved ids never collide with vocabulary words.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kError = 1;
  static constexpr TokenId kBos = 2;
  static constexpr TokenId kEos = 3;
  static constexpr TokenId kEndSpan = 4;
  static constexpr TokenId kReservedCount = 5;

  Vocabulary();

  // Returns the id of word, interning it if unseen.
  TokenId intern(const std::string& word);

  // Returns the id of word or throws DataError.
  TokenId id(const std::string& word) const;

  bool contains(const std::string& word) const { return index_.count(word) > 0; }

  const std::string& text(TokenId id) const;

  std::size_t size() const { return tokens_.size(); }

  bool is_reserved(TokenId id) const { return id >= 0 && id < kReservedCount; }

  // All token strings in id order (reserved included); feeds the fingerprint.
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::string detokenize(const std::vector<TokenId>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace radcorrect
