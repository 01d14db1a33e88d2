#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "halluc/corpus.hpp"
#include "halluc/matrix.hpp"
#include "halluc/model.hpp"
#include "halluc/rng.hpp"

namespace halluc {

enum class AttackMode { weak_semantic, ood };

std::string_view to_string(AttackMode mode);
AttackMode parse_attack_mode(std::string_view name);  // "weak", "weak_semantic" or "ood"

struct AttackConfig {
  AttackMode mode = AttackMode::weak_semantic;
  std::size_t epochs = 128;
  std::size_t batch = 128;
  std::size_t topk = 32;
  // Maximum Hamming distance from the original question (weak_semantic only).
  // Unset means max(1, ceil(0.2 * question length)).
  std::optional<std::size_t> edit_budget;
  std::size_t prompt_length = 20;  // ood only
  std::uint64_t seed = 0;
  std::vector<TokenId> forbidden = {0, 1, 2, 3};
  // Omit the incumbent from the evaluated batch, letting the loss go up.
  bool allow_regression = false;

  /// Defaults for a mode: 128 epochs for weak_semantic, 1000 for ood.
  static AttackConfig defaults(AttackMode mode);

  void validate(std::size_t vocab_size) const;
  std::size_t resolved_edit_budget(std::size_t question_length) const;
};

/// scores(i, v) = (e_v - e_{tok_i}) . grad_i log p(target | prompt): the
/// first-order change in log-likelihood from putting token v at position i.
struct SubstitutionScores {
  Matrix scores;  // prompt_len x vocab
};

struct ScoredToken {
  TokenId token = 0;
  double score = 0.0;
};

/// Per prompt position, the k best tokens by score (descending, ties by id).
struct CandidateSet {
  std::vector<std::vector<ScoredToken>> positions;
};

/// A prompt together with the single substitution that produced it. The
/// incumbent carries no substitution.
struct CandidatePrompt {
  TokenSequence prompt;
  std::optional<std::size_t> position;
  TokenId old_token = -1;
  TokenId new_token = -1;
};

SubstitutionScores score_substitutions(const LanguageModel& model, TokenSpan prompt, TokenSpan target);

/// Throws std::invalid_argument when k exceeds the number of allowed tokens.
CandidateSet topk_candidates(const SubstitutionScores& scores, std::size_t k,
                             std::span<const TokenId> forbidden);

/// Every single-position substitution drawn from the candidate set, skipping
/// substitutions that leave the token unchanged.
std::vector<CandidatePrompt> enumerate_candidates(TokenSpan prompt, const CandidateSet& cands);

/// Uniform sample without replacement of min(B, |candidates|) elements, in
/// draw order, with the incumbent appended last when `include_incumbent`.
std::vector<CandidatePrompt> sample_batch(const std::vector<CandidatePrompt>& candidates, std::size_t batch,
                                          TokenSpan incumbent, Rng& rng, bool include_incumbent = true);

struct EditConstraint {
  TokenSpan original;
  std::size_t budget = 0;
};

struct Selection {
  std::size_t index = 0;  // into the batch
  double nll = 0.0;
};

/// Lowest-NLL batch member among those within the edit budget (if any);
/// ties go to the earliest. Returns nullopt only when nothing is feasible.
std::optional<Selection> select_best(const LanguageModel& model, const std::vector<CandidatePrompt>& batch,
                                     TokenSpan target, std::optional<EditConstraint> constraint);

struct TraceRecord {
  std::size_t epoch = 0;
  TokenSequence prompt;
  double nll = 0.0;
  std::optional<std::size_t> position;
  TokenId old_token = -1;
  TokenId new_token = -1;
};

struct AttackTrace {
  AttackConfig config;
  std::size_t edit_budget = 0;  // resolved; 0 in ood mode
  TokenSequence original;
  TokenSequence target;
  std::vector<TraceRecord> records;  // epoch 0 is the initial prompt
  bool success = false;
  TokenSequence final_prompt;
  std::size_t epochs_used = 0;
  TokenSequence decoded_output;
};

/// Decides whether a decoded answer counts as the target. Unset means exact
/// token equality, which is checked with a single teacher-forced pass.
using AnswerMatcher = std::function<bool(TokenSpan decoded, TokenSpan target)>;

/// Gradient-guided token replacement: score, take the top-k per position,
/// enumerate single swaps, sample a batch, keep the best; stop after
/// config.epochs or as soon as the greedy decode matches the target.
AttackTrace run_attack(const LanguageModel& model, const QAPair& pair, const AttackConfig& config,
                       const AnswerMatcher& matcher = {});

struct TraceMetadata {
  std::size_t pair_id = 0;
  std::string checkpoint_digest;
  std::string corpus_digest;
};

/// Header line, one line per epoch, and a closing result line.
std::string trace_to_jsonl(const AttackTrace& trace, const TraceMetadata& meta, const Vocab& vocab);
AttackTrace trace_from_jsonl(std::string_view text, const Vocab& vocab, TraceMetadata* meta = nullptr);

}  // namespace halluc
