#include "halluc/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <exception>
#include <iterator>
#include <mutex>
#include <sstream>
#include <thread>

#include "halluc/error.hpp"
#include "serialization.hpp"

namespace halluc {

using nlohmann::json;

namespace {

constexpr const char* kMatchNote =
    "success means the greedy decode equals the planted answer token for token; "
    "this mechanical match stands in for human judgement of the answer";

std::string normalized_text(TokenSpan ids, const Vocab& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (vocab.is_special(id)) continue;
    std::string word;
    for (unsigned char c : vocab.token(id)) {
      if (std::ispunct(c)) continue;
      word += static_cast<char>(std::tolower(c));
    }
    if (word.empty()) continue;
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

}  // namespace

AttackOutcome summarize(const AttackTrace& trace, std::size_t pair_id) {
  AttackOutcome o;
  o.pair_id = pair_id;
  o.mode = trace.config.mode;
  o.seed = trace.config.seed;
  o.success = trace.success;
  o.epochs_used = trace.epochs_used;
  o.final_nll = trace.records.empty() ? 0.0 : trace.records.back().nll;
  o.final_prompt = trace.final_prompt;
  o.decoded_output = trace.decoded_output;
  o.target = trace.target;
  return o;
}

bool match_answer(TokenSpan decoded, TokenSpan target, bool normalized, const Vocab& vocab) {
  if (!normalized) return std::equal(decoded.begin(), decoded.end(), target.begin(), target.end());
  return normalized_text(decoded, vocab) == normalized_text(target, vocab);
}

AnswerMatcher make_matcher(bool normalized, const Vocab& vocab) {
  if (!normalized) return {};
  return [&vocab](TokenSpan decoded, TokenSpan target) { return match_answer(decoded, target, true, vocab); };
}

EvalReport success_rate(std::vector<AttackOutcome> outcomes, const AttackConfig& config) {
  if (outcomes.empty()) throw ValidationError("success rate of an empty outcome list is undefined");
  EvalReport r;
  r.mode = outcomes.front().mode;
  r.n = outcomes.size();
  for (const auto& o : outcomes) r.successes += o.success;
  r.rate = static_cast<double>(r.successes) / static_cast<double>(r.n);
  r.outcomes = std::move(outcomes);
  r.config = config;
  return r;
}

std::string format_percent(std::size_t successes, std::size_t n) {
  if (n == 0) throw ValidationError("format_percent: n must be positive");
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * static_cast<double>(successes) / static_cast<double>(n));
  return buf;
}

std::vector<AttackTrace> run_attacks(const LanguageModel& model, const Corpus& corpus, const Vocab& vocab,
                                     const AttackConfig& config, const EvalOptions& options) {
  config.validate(model.vocab_size());
  const AnswerMatcher matcher = make_matcher(options.normalized_match, vocab);
  std::vector<AttackTrace> traces(corpus.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto work = [&] {
    for (std::size_t i = next++; i < corpus.size(); i = next++) {
      try {
        AttackConfig cfg = config;
        cfg.seed = derive_seed(config.seed, i);
        traces[i] = run_attack(model, corpus[i], cfg, matcher);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = corpus.size();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, corpus.size()));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  if (failure) std::rethrow_exception(failure);
  return traces;
}

EvalReport evaluate(const LanguageModel& model, const Corpus& corpus, const Vocab& vocab,
                    const AttackConfig& config, const EvalOptions& options, std::vector<AttackTrace>* traces) {
  auto all = run_attacks(model, corpus, vocab, config, options);
  std::vector<AttackOutcome> outcomes;
  for (std::size_t i = 0; i < all.size(); ++i) outcomes.push_back(summarize(all[i], i));
  EvalReport r = success_rate(std::move(outcomes), config);
  r.normalized_match = options.normalized_match;
  if (traces) *traces = std::move(all);
  return r;
}

AblationTable run_ablation_ood_length(const LanguageModel& model, const Corpus& corpus, const Vocab& vocab,
                                      const std::vector<std::size_t>& lengths, const AttackConfig& base,
                                      const EvalOptions& options,
                                      std::vector<AttackTrace>* traces) {
  if (lengths.empty()) throw ValidationError("ablation: no prompt lengths given");
  AblationTable table;
  for (std::size_t len : lengths) {
    AttackConfig cfg = base;
    cfg.mode = AttackMode::ood;
    cfg.prompt_length = len;
    AblationRow row;
    row.length = len;
    std::vector<AttackTrace> row_traces;
    row.report = evaluate(model, corpus, vocab, cfg, options, traces ? &row_traces : nullptr);
    if (traces) std::move(row_traces.begin(), row_traces.end(), std::back_inserter(*traces));
    if (!table.rows.empty()) row.delta = row.report.rate - table.rows.back().report.rate;
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string ablation_to_csv(const AblationTable& table) {
  std::ostringstream os;
  os.precision(17);
  os << "length,successes,n,rate,rate_percent,delta\n";
  for (const auto& r : table.rows) {
    os << r.length << ',' << r.report.successes << ',' << r.report.n << ',' << r.report.rate << ','
       << format_percent(r.report.successes, r.report.n) << ',';
    if (r.delta) os << *r.delta;
    os << '\n';
  }
  return os.str();
}

std::vector<PlotRow> loss_trace_plotdata(const AttackTrace& trace, const Vocab& vocab, double drop) {
  std::vector<PlotRow> rows;
  for (std::size_t i = 0; i < trace.records.size(); ++i) {
    const TraceRecord& r = trace.records[i];
    PlotRow row;
    row.epoch = r.epoch;
    row.nll = r.nll;
    if (i > 0) {
      const double prev = trace.records[i - 1].nll;
      row.milestone = prev - r.nll > drop * prev;
    }
    if (r.position) {
      row.old_token = vocab.token(r.old_token);
      row.new_token = vocab.token(r.new_token);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string plotdata_to_csv(const std::vector<PlotRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,nll,milestone,old_token,new_token\n";
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.nll << ',' << (r.milestone ? 1 : 0) << ',' << r.old_token << ',' << r.new_token
       << '\n';
  }
  return os.str();
}

std::string report_to_json(const EvalReport& report, const Vocab& vocab, const ReportProvenance& prov) {
  using detail::tokens_json;
  json items = json::array();
  for (const auto& o : report.outcomes) {
    items.push_back({
        {"pair_id", o.pair_id},
        {"mode", std::string(to_string(o.mode))},
        {"seed", o.seed},
        {"success", o.success},
        {"epochs_used", o.epochs_used},
        {"final_nll", detail::number_or_null(o.final_nll)},
        {"final_prompt", tokens_json(o.final_prompt, vocab)},
        {"decoded_output", tokens_json(o.decoded_output, vocab)},
        {"target", tokens_json(o.target, vocab)},
    });
  }
  json j = {
      {"format", "halluc-report"},
      {"schema_version", 1},
      {"match_criterion", kMatchNote},
      {"normalized_match", report.normalized_match},
      {"mode", std::string(to_string(report.mode))},
      {"n", report.n},
      {"successes", report.successes},
      {"rate", report.rate},
      {"rate_percent", format_percent(report.successes, report.n)},
      {"config", detail::to_json(report.config)},
      {"checkpoint_digest", prov.checkpoint_digest},
      {"corpus_digest", prov.corpus_digest},
      {"outcomes", std::move(items)},
  };
  return j.dump(2) + "\n";
}

EvalReport report_from_json(std::string_view text, const Vocab& vocab, ReportProvenance* prov) {
  using detail::tokens_from_json;
  try {
    const json j = json::parse(text);
    if (j.value("format", "") != "halluc-report") throw ValidationError("report: unknown format");
    if (j.at("schema_version").get<int>() != 1) throw ValidationError("report: unsupported schema version");
    std::vector<AttackOutcome> outcomes;
    for (const auto& o : j.at("outcomes")) {
      AttackOutcome a;
      a.pair_id = o.at("pair_id").get<std::size_t>();
      a.mode = parse_attack_mode(o.at("mode").get<std::string>());
      a.seed = o.at("seed").get<std::uint64_t>();
      a.success = o.at("success").get<bool>();
      a.epochs_used = o.at("epochs_used").get<std::size_t>();
      a.final_nll = detail::number_or_nan(o.at("final_nll"));
      a.final_prompt = tokens_from_json(o.at("final_prompt"), vocab);
      a.decoded_output = tokens_from_json(o.at("decoded_output"), vocab);
      a.target = tokens_from_json(o.at("target"), vocab);
      outcomes.push_back(std::move(a));
    }
    EvalReport r = success_rate(std::move(outcomes), detail::attack_config_from_json(j.at("config")));
    r.normalized_match = j.at("normalized_match").get<bool>();
    if (r.successes != j.at("successes").get<std::size_t>() || r.n != j.at("n").get<std::size_t>()) {
      throw ValidationError("report: recorded success count disagrees with its outcomes");
    }
    if (prov) {
      prov->checkpoint_digest = j.at("checkpoint_digest").get<std::string>();
      prov->corpus_digest = j.at("corpus_digest").get<std::string>();
    }
    return r;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("report: ") + e.what());
  }
}

std::string report_table(const EvalReport& report, const Vocab& vocab) {
  std::ostringstream os;
  os << "mode: " << to_string(report.mode) << "  (" << kMatchNote << ")\n";
  os << "pair  success  epochs  final_nll  decoded\n";
  for (const auto& o : report.outcomes) {
    char nll[32];
    std::snprintf(nll, sizeof nll, "%9.4f", o.final_nll);
    char line[64];
    std::snprintf(line, sizeof line, "%4zu  %-7s  %6zu  ", o.pair_id, o.success ? "yes" : "no", o.epochs_used);
    os << line << nll << "  " << detokenize(o.decoded_output, vocab) << '\n';
  }
  os << "R_H = " << report.successes << "/" << report.n << " = " << format_percent(report.successes, report.n)
     << "%\n";
  return os.str();
}

}  // namespace halluc
