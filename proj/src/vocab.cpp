#include "radcorrect/vocab.hpp"

namespace radcorrect {

Vocabulary::Vocabulary() {
  for (const char* reserved : {"[PAD]", "[ERROR]", "[BOS]", "[EOS]", "[END_SPAN]"}) {
    intern(reserved);
  }
}

TokenId Vocabulary::intern(const std::string& word) {
  auto it = index_.find(word);
  if (it != index_.end()) return it->second;
  const TokenId id = static_cast<TokenId>(tokens_.size());
  tokens_.push_back(word);
  index_.emplace(word, id);
  return id;
}

TokenId Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw DataError("unknown token: " + word);
  return it->second;
}

const std::string& Vocabulary::text(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id out of range: " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocabulary::detokenize(const std::vector<TokenId>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) out += ' ';
    out += text(ids[i]);
  }
  return out;
}

}  // namespace radcorrect
