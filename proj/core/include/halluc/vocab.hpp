#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace halluc {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;
using TokenSpan = std::span<const TokenId>;

struct SpecialTokens {
  TokenId pad = 0;
  TokenId bos = 1;
  TokenId eos = 2;
  TokenId sep = 3;
};

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kBosToken = "<bos>";
inline constexpr std::string_view kEosToken = "<eos>";
inline constexpr std::string_view kSepToken = "<sep>";

/// Closed word-level vocabulary. Ids are dense in [0, size()); the four special
/// tokens always occupy ids 0..3.
class Vocab {
 public:
  Vocab() = default;

  /// Builds a vocabulary from regular (non-special) words. Throws
  /// ValidationError on duplicates, empty words, or words containing whitespace.
  explicit Vocab(std::vector<std::string> words);

  /// Rebuilds from a full token list as stored in a checkpoint, specials first.
  static Vocab from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const SpecialTokens& special() const { return special_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool contains(std::string_view word) const;
  TokenId id(std::string_view word) const;  // throws ValidationError naming the word
  const std::string& token(TokenId id) const;
  bool is_special(TokenId id) const { return id >= 0 && id < 4; }

  std::uint64_t hash() const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  SpecialTokens special_;
};

/// Splits on whitespace and maps each word; throws ValidationError for empty
/// input or an unknown word.
TokenSequence tokenize(std::string_view text, const Vocab& vocab);

/// Space-joined token strings.
std::string detokenize(TokenSpan ids, const Vocab& vocab);

std::vector<std::string> to_strings(TokenSpan ids, const Vocab& vocab);
TokenSequence from_strings(const std::vector<std::string>& words, const Vocab& vocab);

std::size_t hamming(TokenSpan a, TokenSpan b);

}  // namespace halluc
