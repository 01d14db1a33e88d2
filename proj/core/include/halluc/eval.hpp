#pragma once

#include <optional>
#include <string>
#include <vector>

#include "halluc/attack.hpp"
#include "halluc/corpus.hpp"
#include "halluc/model.hpp"

namespace halluc {

struct AttackOutcome {
  std::size_t pair_id = 0;
  AttackMode mode = AttackMode::weak_semantic;
  std::uint64_t seed = 0;  // the per-pair attack seed
  bool success = false;
  std::size_t epochs_used = 0;
  double final_nll = 0.0;
  TokenSequence final_prompt;
  TokenSequence decoded_output;
  TokenSequence target;
};

AttackOutcome summarize(const AttackTrace& trace, std::size_t pair_id);

/// Exact mode compares tokens. Normalized mode compares detokenized text with
/// special tokens dropped, lowercased, and punctuation removed.
bool match_answer(TokenSpan decoded, TokenSpan target, bool normalized, const Vocab& vocab);

/// Matcher for run_attack; empty (exact, fast path) unless normalized.
AnswerMatcher make_matcher(bool normalized, const Vocab& vocab);

struct EvalReport {
  AttackMode mode = AttackMode::weak_semantic;
  std::size_t n = 0;
  std::size_t successes = 0;
  double rate = 0.0;  // successes / n
  std::vector<AttackOutcome> outcomes;
  AttackConfig config;  // seed is the global seed
  bool normalized_match = false;
};

/// R_H over the outcomes; throws ValidationError when empty.
EvalReport success_rate(std::vector<AttackOutcome> outcomes, const AttackConfig& config = {});

/// 100 * successes / n with two decimals, e.g. "92.31".
std::string format_percent(std::size_t successes, std::size_t n);

struct EvalOptions {
  std::size_t workers = 1;
  bool normalized_match = false;
};

/// Attacks every pair with seed derive_seed(config.seed, pair_id). Pairs may
/// run on several threads; results are ordered by pair id.
std::vector<AttackTrace> run_attacks(const LanguageModel& model, const Corpus& corpus, const Vocab& vocab,
                                     const AttackConfig& config, const EvalOptions& options = {});

EvalReport evaluate(const LanguageModel& model, const Corpus& corpus, const Vocab& vocab,
                    const AttackConfig& config, const EvalOptions& options = {},
                    std::vector<AttackTrace>* traces = nullptr);

struct AblationRow {
  std::size_t length = 0;
  EvalReport report;
  std::optional<double> delta;  // rate minus the previous row's rate
};

struct AblationTable {
  std::vector<AblationRow> rows;
};

/// OoD attack over the whole corpus once per prompt length. Traces, when
/// requested, are appended length by length in corpus order.
AblationTable run_ablation_ood_length(const LanguageModel& model, const Corpus& corpus, const Vocab& vocab,
                                      const std::vector<std::size_t>& lengths, const AttackConfig& base,
                                      const EvalOptions& options = {},
                                      std::vector<AttackTrace>* traces = nullptr);

std::string ablation_to_csv(const AblationTable& table);

struct PlotRow {
  std::size_t epoch = 0;
  double nll = 0.0;
  bool milestone = false;
  std::string old_token;
  std::string new_token;
};

/// One row per trace record. A row is a milestone when its NLL is more than
/// `drop` (relative) below the previous row's.
std::vector<PlotRow> loss_trace_plotdata(const AttackTrace& trace, const Vocab& vocab, double drop = 0.10);
std::string plotdata_to_csv(const std::vector<PlotRow>& rows);

struct ReportProvenance {
  std::string checkpoint_digest;
  std::string corpus_digest;
};

std::string report_to_json(const EvalReport& report, const Vocab& vocab, const ReportProvenance& prov = {});
EvalReport report_from_json(std::string_view text, const Vocab& vocab, ReportProvenance* prov = nullptr);

/// Human-readable summary table.
std::string report_table(const EvalReport& report, const Vocab& vocab);

}  // namespace halluc
