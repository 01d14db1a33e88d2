#include "halluc/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

#include "halluc/error.hpp"
#include "halluc/io.hpp"
#include "serialization.hpp"

namespace halluc {

using nlohmann::json;

std::string_view to_string(AttackMode mode) {
  return mode == AttackMode::ood ? "ood" : "weak_semantic";
}

AttackMode parse_attack_mode(std::string_view name) {
  if (name == "weak" || name == "weak_semantic") return AttackMode::weak_semantic;
  if (name == "ood") return AttackMode::ood;
  throw ValidationError("unknown attack mode '" + std::string(name) + "' (expected weak or ood)");
}

AttackConfig AttackConfig::defaults(AttackMode mode) {
  AttackConfig c;
  c.mode = mode;
  c.epochs = mode == AttackMode::ood ? 1000 : 128;
  return c;
}

void AttackConfig::validate(std::size_t vocab_size) const {
  if (epochs < 1) throw ValidationError("attack: epochs must be >= 1");
  if (batch < 1) throw ValidationError("attack: batch must be >= 1");
  std::set<TokenId> banned;
  for (TokenId t : forbidden) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
      throw ValidationError("attack: forbidden token id " + std::to_string(t) + " outside vocabulary");
    }
    banned.insert(t);
  }
  if (topk < 1 || topk > vocab_size - banned.size()) {
    throw ValidationError("attack: topk must be in [1, " + std::to_string(vocab_size - banned.size()) +
                          "], got " + std::to_string(topk));
  }
  if (mode == AttackMode::weak_semantic && edit_budget && *edit_budget < 1) {
    throw ValidationError("attack: edit budget must be >= 1");
  }
  if (mode == AttackMode::ood && prompt_length < 1) throw ValidationError("attack: prompt length must be >= 1");
}

std::size_t AttackConfig::resolved_edit_budget(std::size_t question_length) const {
  if (edit_budget) return *edit_budget;
  return std::max<std::size_t>(1, (question_length + 4) / 5);  // ceil(0.2 * l)
}

SubstitutionScores score_substitutions(const LanguageModel& model, TokenSpan prompt, TokenSpan target) {
  const InputGradients g = model.input_gradients(prompt, target);
  const Matrix& emb = model.embedding_table();
  SubstitutionScores s;
  matmul_nt(g.grads, emb, s.scores);
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    const double self = s.scores(i, static_cast<std::size_t>(prompt[i]));
    for (double& v : s.scores.row(i)) v -= self;
  }
  return s;
}

CandidateSet topk_candidates(const SubstitutionScores& scores, std::size_t k, std::span<const TokenId> forbidden) {
  const std::size_t V = scores.scores.cols();
  std::vector<bool> banned(V, false);
  std::size_t n_banned = 0;
  for (TokenId t : forbidden) {
    if (t >= 0 && static_cast<std::size_t>(t) < V && !banned[static_cast<std::size_t>(t)]) {
      banned[static_cast<std::size_t>(t)] = true;
      ++n_banned;
    }
  }
  if (k > V - n_banned) {
    throw std::invalid_argument("topk: k=" + std::to_string(k) + " exceeds the " + std::to_string(V - n_banned) +
                                " allowed tokens");
  }
  CandidateSet out;
  out.positions.resize(scores.scores.rows());
  std::vector<ScoredToken> row;
  for (std::size_t i = 0; i < scores.scores.rows(); ++i) {
    row.clear();
    for (std::size_t v = 0; v < V; ++v) {
      if (!banned[v]) row.push_back({static_cast<TokenId>(v), scores.scores(i, v)});
    }
    std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k), row.end(),
                      [](const ScoredToken& a, const ScoredToken& b) {
                        return a.score > b.score || (a.score == b.score && a.token < b.token);
                      });
    out.positions[i].assign(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return out;
}

std::vector<CandidatePrompt> enumerate_candidates(TokenSpan prompt, const CandidateSet& cands) {
  if (cands.positions.size() != prompt.size()) {
    throw std::invalid_argument("enumerate_candidates: candidate set does not match prompt length");
  }
  std::vector<CandidatePrompt> out;
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    for (const ScoredToken& c : cands.positions[i]) {
      if (c.token == prompt[i]) continue;
      CandidatePrompt cp;
      cp.prompt.assign(prompt.begin(), prompt.end());
      cp.prompt[i] = c.token;
      cp.position = i;
      cp.old_token = prompt[i];
      cp.new_token = c.token;
      out.push_back(std::move(cp));
    }
  }
  return out;
}

std::vector<CandidatePrompt> sample_batch(const std::vector<CandidatePrompt>& candidates, std::size_t batch,
                                          TokenSpan incumbent, Rng& rng, bool include_incumbent) {
  if (batch < 1) throw std::invalid_argument("sample_batch: batch must be >= 1");
  const std::size_t n = candidates.size();
  const std::size_t take = std::min(batch, n);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::vector<CandidatePrompt> out;
  out.reserve(take + 1);
  for (std::size_t i = 0; i < take; ++i) {
    std::swap(idx[i], idx[i + rng.uniform_index(n - i)]);
    out.push_back(candidates[idx[i]]);
  }
  if (include_incumbent || out.empty()) {
    CandidatePrompt inc;
    inc.prompt.assign(incumbent.begin(), incumbent.end());
    out.push_back(std::move(inc));
  }
  return out;
}

std::optional<Selection> select_best(const LanguageModel& model, const std::vector<CandidatePrompt>& batch,
                                     TokenSpan target, std::optional<EditConstraint> constraint) {
  std::vector<std::size_t> feasible;
  std::vector<TokenSequence> prompts;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (constraint && hamming(batch[i].prompt, constraint->original) > constraint->budget) continue;
    feasible.push_back(i);
    prompts.push_back(batch[i].prompt);
  }
  if (feasible.empty()) return std::nullopt;
  const std::vector<double> nll = model.target_nll_batch(prompts, target);
  std::size_t best = 0;
  for (std::size_t j = 1; j < nll.size(); ++j) {
    if (nll[j] < nll[best]) best = j;
  }
  return Selection{feasible[best], nll[best]};
}

namespace {

bool matches(const LanguageModel& model, TokenSpan prompt, TokenSpan target, const AnswerMatcher& matcher,
             std::size_t decode_len) {
  if (!matcher) return model.decodes_to(prompt, target);
  const TokenSequence decoded = model.greedy_decode(prompt, decode_len);
  return matcher(decoded, target);
}

}  // namespace

AttackTrace run_attack(const LanguageModel& model, const QAPair& pair, const AttackConfig& config,
                       const AnswerMatcher& matcher) {
  config.validate(model.vocab_size());
  const TokenSequence& target = pair.hallucinated_answer;
  if (target.empty()) throw ValidationError("attack: empty target");
  const std::size_t decode_len = target.size() + 8;

  AttackTrace trace;
  trace.config = config;
  trace.original = pair.question;
  trace.target = target;

  Rng rng(config.seed);
  std::vector<bool> banned(model.vocab_size(), false);
  for (TokenId t : config.forbidden) banned[static_cast<std::size_t>(t)] = true;

  TokenSequence prompt;
  std::optional<EditConstraint> constraint;
  if (config.mode == AttackMode::weak_semantic) {
    prompt = pair.question;
    trace.edit_budget = config.resolved_edit_budget(pair.question.size());
    constraint = EditConstraint{trace.original, trace.edit_budget};
  } else {
    std::vector<TokenId> allowed;
    for (std::size_t v = 0; v < banned.size(); ++v) {
      if (!banned[v]) allowed.push_back(static_cast<TokenId>(v));
    }
    prompt.resize(config.prompt_length);
    for (auto& t : prompt) t = allowed[rng.uniform_index(allowed.size())];
  }

  double nll = model.target_nll(prompt, target).value;
  trace.records.push_back({0, prompt, nll, std::nullopt, -1, -1});
  bool success = matches(model, prompt, target, matcher, decode_len);

  std::size_t epoch = 0;
  while (!success && epoch < config.epochs) {
    ++epoch;
    const SubstitutionScores scores = score_substitutions(model, prompt, target);
    const CandidateSet cands = topk_candidates(scores, config.topk, config.forbidden);
    const auto pool = enumerate_candidates(prompt, cands);
    const auto batch = sample_batch(pool, config.batch, prompt, rng, !config.allow_regression);
    const auto chosen = select_best(model, batch, target, constraint);

    TraceRecord rec{epoch, prompt, nll, std::nullopt, -1, -1};
    if (chosen && batch[chosen->index].position) {
      const CandidatePrompt& c = batch[chosen->index];
      prompt = c.prompt;
      nll = chosen->nll;
      rec = {epoch, prompt, nll, c.position, c.old_token, c.new_token};
    } else if (chosen) {
      nll = chosen->nll;
      rec.nll = nll;
    }
    trace.records.push_back(std::move(rec));
    success = matches(model, prompt, target, matcher, decode_len);
  }

  trace.success = success;
  trace.final_prompt = prompt;
  trace.epochs_used = epoch;
  trace.decoded_output =
      model.greedy_decode(prompt, std::min(decode_len, model.context_length() - prompt.size() - 1));
  return trace;
}

namespace detail {

json to_json(const AttackConfig& cfg) {
  json j = {
      {"mode", std::string(to_string(cfg.mode))},
      {"epochs", cfg.epochs},
      {"batch", cfg.batch},
      {"topk", cfg.topk},
      {"prompt_length", cfg.prompt_length},
      {"seed", cfg.seed},
      {"forbidden", cfg.forbidden},
      {"allow_regression", cfg.allow_regression},
      {"incumbent_inclusion", !cfg.allow_regression},
  };
  j["edit_budget"] = cfg.edit_budget ? json(*cfg.edit_budget) : json(nullptr);
  return j;
}

AttackConfig attack_config_from_json(const json& j) {
  AttackConfig c;
  c.mode = parse_attack_mode(j.at("mode").get<std::string>());
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch = j.at("batch").get<std::size_t>();
  c.topk = j.at("topk").get<std::size_t>();
  c.prompt_length = j.at("prompt_length").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.forbidden = j.at("forbidden").get<std::vector<TokenId>>();
  c.allow_regression = j.at("allow_regression").get<bool>();
  if (!j.at("edit_budget").is_null()) c.edit_budget = j.at("edit_budget").get<std::size_t>();
  return c;
}

json tokens_json(TokenSpan ids, const Vocab& vocab) { return to_strings(ids, vocab); }

TokenSequence tokens_from_json(const json& j, const Vocab& vocab) {
  return from_strings(j.get<std::vector<std::string>>(), vocab);
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double number_or_nan(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace detail

std::string trace_to_jsonl(const AttackTrace& trace, const TraceMetadata& meta, const Vocab& vocab) {
  using detail::tokens_json;
  std::string out;
  json header = {
      {"type", "header"},
      {"format", "halluc-trace"},
      {"version", 1},
      {"pair_id", meta.pair_id},
      {"checkpoint_digest", meta.checkpoint_digest},
      {"corpus_digest", meta.corpus_digest},
      {"seed", trace.config.seed},
      {"config", detail::to_json(trace.config)},
      {"edit_budget", trace.edit_budget},
      {"loss", "sum over target tokens of -log p, nats"},
      {"original", tokens_json(trace.original, vocab)},
      {"target", tokens_json(trace.target, vocab)},
  };
  out += header.dump() + "\n";
  for (const auto& r : trace.records) {
    json j = {{"type", "epoch"},
              {"epoch", r.epoch},
              {"prompt", tokens_json(r.prompt, vocab)},
              {"nll", detail::number_or_null(r.nll)}};
    if (r.position) {
      j["replaced_position"] = *r.position;
      j["old_token"] = vocab.token(r.old_token);
      j["new_token"] = vocab.token(r.new_token);
    } else {
      j["replaced_position"] = nullptr;
      j["old_token"] = nullptr;
      j["new_token"] = nullptr;
    }
    out += j.dump() + "\n";
  }
  json result = {
      {"type", "result"},
      {"success", trace.success},
      {"final_prompt", tokens_json(trace.final_prompt, vocab)},
      {"epochs_used", trace.epochs_used},
      {"decoded_output", tokens_json(trace.decoded_output, vocab)},
  };
  out += result.dump() + "\n";
  return out;
}

AttackTrace trace_from_jsonl(std::string_view text, const Vocab& vocab, TraceMetadata* meta) {
  using detail::tokens_from_json;
  AttackTrace trace;
  bool seen_header = false;
  bool seen_result = false;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    ++line_no;
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      const std::string type = j.at("type").get<std::string>();
      if (type == "header") {
        trace.config = detail::attack_config_from_json(j.at("config"));
        trace.edit_budget = j.at("edit_budget").get<std::size_t>();
        trace.original = tokens_from_json(j.at("original"), vocab);
        trace.target = tokens_from_json(j.at("target"), vocab);
        if (meta) {
          meta->pair_id = j.at("pair_id").get<std::size_t>();
          meta->checkpoint_digest = j.at("checkpoint_digest").get<std::string>();
          meta->corpus_digest = j.at("corpus_digest").get<std::string>();
        }
        seen_header = true;
      } else if (type == "epoch") {
        TraceRecord r;
        r.epoch = j.at("epoch").get<std::size_t>();
        r.prompt = tokens_from_json(j.at("prompt"), vocab);
        r.nll = detail::number_or_nan(j.at("nll"));
        if (!j.at("replaced_position").is_null()) {
          r.position = j.at("replaced_position").get<std::size_t>();
          r.old_token = vocab.id(j.at("old_token").get<std::string>());
          r.new_token = vocab.id(j.at("new_token").get<std::string>());
        }
        trace.records.push_back(std::move(r));
      } else if (type == "result") {
        trace.success = j.at("success").get<bool>();
        trace.final_prompt = tokens_from_json(j.at("final_prompt"), vocab);
        trace.epochs_used = j.at("epochs_used").get<std::size_t>();
        trace.decoded_output = tokens_from_json(j.at("decoded_output"), vocab);
        seen_result = true;
      } else {
        throw ValidationError("unknown record type '" + type + "'");
      }
    } catch (const json::exception& e) {
      throw ValidationError("trace line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("trace line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!seen_header || !seen_result) throw ValidationError("trace: missing header or result record");
  return trace;
}

}  // namespace halluc
