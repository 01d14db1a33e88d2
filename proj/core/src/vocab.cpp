#include "halluc/vocab.hpp"

#include <cctype>
#include <stdexcept>

#include "halluc/error.hpp"
#include "halluc/rng.hpp"

namespace halluc {

namespace {

bool has_space(std::string_view word) {
  for (unsigned char c : word) {
    if (std::isspace(c)) return true;
  }
  return false;
}

}  // namespace

Vocab::Vocab(std::vector<std::string> words) {
  std::vector<std::string> tokens = {std::string(kPadToken), std::string(kBosToken),
                                     std::string(kEosToken), std::string(kSepToken)};
  tokens.reserve(words.size() + 4);
  for (auto& w : words) tokens.push_back(std::move(w));
  *this = from_tokens(std::move(tokens));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < 4 || tokens[0] != kPadToken || tokens[1] != kBosToken ||
      tokens[2] != kEosToken || tokens[3] != kSepToken) {
    throw ValidationError("vocabulary must start with <pad> <bos> <eos> <sep>");
  }
  Vocab v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    const auto& w = v.tokens_[i];
    if (w.empty() || has_space(w)) {
      throw ValidationError("invalid vocabulary word '" + w + "'");
    }
    if (!v.index_.emplace(w, static_cast<TokenId>(i)).second) {
      throw ValidationError("duplicate vocabulary word '" + w + "'");
    }
  }
  return v;
}

bool Vocab::contains(std::string_view word) const {
  return index_.find(std::string(word)) != index_.end();
}

TokenId Vocab::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) {
    throw ValidationError("out-of-vocabulary word '" + std::string(word) + "'");
  }
  return it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::uint64_t Vocab::hash() const {
  std::string joined;
  for (const auto& t : tokens_) {
    joined += t;
    joined += '\n';
  }
  return fnv1a64(joined);
}

TokenSequence tokenize(std::string_view text, const Vocab& vocab) {
  TokenSequence out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.push_back(vocab.id(text.substr(i, j - i)));
    i = j;
  }
  if (out.empty()) throw ValidationError("cannot tokenize empty text");
  return out;
}

std::string detokenize(TokenSpan ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

std::vector<std::string> to_strings(TokenSpan ids, const Vocab& vocab) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (TokenId id : ids) out.push_back(vocab.token(id));
  return out;
}

TokenSequence from_strings(const std::vector<std::string>& words, const Vocab& vocab) {
  TokenSequence out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(vocab.id(w));
  return out;
}

std::size_t hamming(TokenSpan a, TokenSpan b) {
  if (a.size() != b.size()) throw std::invalid_argument("hamming: length mismatch");
  std::size_t d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] != b[i]);
  return d;
}

}  // namespace halluc
