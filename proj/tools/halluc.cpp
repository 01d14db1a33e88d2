#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "halluc/attack.hpp"
#include "halluc/corpus.hpp"
#include "halluc/defense.hpp"
#include "halluc/error.hpp"
#include "halluc/eval.hpp"
#include "halluc/io.hpp"
#include "halluc/model.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace halluc;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

fs::path default_out_dir() {
  if (const char* env = std::getenv("HALLUC_OUT_DIR"); env != nullptr && *env != '\0') return env;
  return "halluc_out";
}

void emit(const fs::path& path, std::string_view contents) {
  write_file_atomic(path, contents);
  std::cout << path.string() << "\n";
}

std::string pair_name(std::size_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%03zu", id);
  return buf;
}

// Flat key=value file; keys are long option names without the leading dashes.
std::vector<std::pair<std::string, std::string>> read_config(const fs::path& path) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

// Values from --config fill every option the command line left unset.
void apply_config(CLI::App& sub, const std::string& config_path) {
  if (config_path.empty()) return;
  for (const auto& [key, value] : read_config(config_path)) {
    CLI::Option* opt = sub.get_option_no_throw("--" + key);
    if (opt == nullptr || key == "config") {
      throw ValidationError("config: unknown key '" + key + "' for " + sub.get_name());
    }
    if (opt->count() > 0) continue;
    opt->add_result(value);
    opt->run_callback();
  }
}

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw CLI::RequiredError(flag);
}

std::string echo_model_config(const ModelConfig& c) {
  std::ostringstream os;
  os << "d_model=" << c.d_model << ",n_layers=" << c.n_layers << ",n_heads=" << c.n_heads
     << ",context=" << c.context << ",d_ff=" << c.d_ff;
  return os.str();
}

struct Common {
  std::string config;
};

struct GenCorpusArgs : Common {
  std::size_t n = kDefaultCorpusSize;
  std::uint64_t seed = 7;
  std::string schema;
  std::size_t vocab_size = kDefaultVocabSize;
  std::string out;
};

struct TrainArgs : Common {
  std::string corpus;
  std::string schema;
  std::size_t vocab_size = kDefaultVocabSize;
  std::string out;
  TrainConfig train;
  ModelConfig model;
};

struct AttackArgs : Common {
  std::string checkpoint;
  std::string corpus;
  std::string mode = "weak";
  std::optional<std::size_t> topk, batch, epochs, delta, len;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  bool allow_regression = false;
  bool normalized_match = false;
  std::string out_dir;
};

struct DefendArgs : Common {
  std::string checkpoint;
  std::string corpus;
  std::string weak_report;
  std::string ood_report;
  std::size_t points = 64;
  double margin = 0.05;
  std::optional<double> threshold;
  std::size_t workers = 1;
  std::string out_dir;
};

struct ReportArgs : Common {
  std::vector<std::string> reports;
  std::string checkpoint;
  std::string corpus;
  std::optional<std::size_t> verify_item;
  std::string out;
};

struct AblateArgs : Common {
  std::string checkpoint;
  std::string corpus;
  std::vector<std::size_t> lengths = {10, 20, 30};
  std::optional<std::size_t> topk, batch, epochs;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::string out_dir;
};

Vocab vocab_for(const std::string& schema_path, std::size_t size) {
  return build_vocab(schema_path.empty() ? default_schema() : load_schema(schema_path), size);
}

int run_gen_corpus(const GenCorpusArgs& a) {
  require(a.out, "--out");
  const Schema schema = a.schema.empty() ? default_schema() : load_schema(a.schema);
  const Vocab vocab = build_vocab(schema, a.vocab_size);
  const Corpus corpus = generate_corpus(a.n, a.seed, schema, vocab);
  const fs::path out = a.out;
  const json meta = {
      {"format", "halluc-corpus-meta"},
      {"config",
       {{"n", a.n}, {"seed", a.seed}, {"vocab_size", a.vocab_size}, {"schema", a.schema.empty() ? "default" : a.schema}}},
      {"schema_digest", a.schema.empty() ? "" : file_digest(a.schema)},
      {"vocab_hash", hex64(vocab.hash())},
  };
  save_corpus(out, corpus, vocab);
  std::cout << out.string() << "\n";
  emit(fs::path(out.string() + ".meta.json"), meta.dump(2) + "\n");
  return 0;
}

int run_train(const TrainArgs& a) {
  require(a.corpus, "--corpus");
  Vocab vocab = vocab_for(a.schema, a.vocab_size);
  const Corpus corpus = load_corpus(a.corpus, vocab);
  ModelConfig mc = a.model;
  mc.vocab_size = vocab.size();
  TrainResult r = train_lm(corpus, mc, a.train);
  r.model.training_info().corpus_digest = file_digest(a.corpus);
  std::cerr << "trained " << r.steps << " steps (" << echo_model_config(mc) << "), loss " << r.final_loss
            << ", memorization " << format_percent(static_cast<std::size_t>(r.memorization_rate * corpus.size() + 0.5),
                                                   corpus.size())
            << "%\n";
  if (r.below_target) std::cerr << "warning: memorization below target after the step budget\n";
  const fs::path out = a.out.empty() ? default_out_dir() / "checkpoint.json" : fs::path(a.out);
  save_checkpoint(out, r.model, vocab);
  std::cout << out.string() << "\n";
  return 0;
}

AttackConfig resolve_attack(const std::string& mode, std::optional<std::size_t> topk, std::optional<std::size_t> batch,
                            std::optional<std::size_t> epochs, std::uint64_t seed) {
  AttackConfig cfg = AttackConfig::defaults(parse_attack_mode(mode));
  if (topk) cfg.topk = *topk;
  if (batch) cfg.batch = *batch;
  if (epochs) cfg.epochs = *epochs;
  cfg.seed = seed;
  return cfg;
}

int run_attack_cmd(const AttackArgs& a) {
  require(a.checkpoint, "--checkpoint");
  require(a.corpus, "--corpus");
  auto [model, vocab] = load_checkpoint(a.checkpoint);
  const Corpus corpus = load_corpus(a.corpus, vocab);
  AttackConfig cfg = resolve_attack(a.mode, a.topk, a.batch, a.epochs, a.seed);
  if (a.delta) cfg.edit_budget = *a.delta;
  if (a.len) cfg.prompt_length = *a.len;
  cfg.allow_regression = a.allow_regression;
  cfg.validate(model.vocab_size());

  const ReportProvenance prov{file_digest(a.checkpoint), file_digest(a.corpus)};
  std::vector<AttackTrace> traces;
  const EvalReport report = evaluate(model, corpus, vocab, cfg, {a.workers, a.normalized_match}, &traces);

  const fs::path dir = a.out_dir.empty() ? default_out_dir() : fs::path(a.out_dir);
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const TraceMetadata meta{i, prov.checkpoint_digest, prov.corpus_digest};
    write_file_atomic(dir / "traces" / (pair_name(i) + ".jsonl"), trace_to_jsonl(traces[i], meta, vocab));
    write_file_atomic(dir / "plots" / (pair_name(i) + ".csv"),
                      plotdata_to_csv(loss_trace_plotdata(traces[i], vocab)));
  }
  std::cout << (dir / "traces").string() << "\n" << (dir / "plots").string() << "\n";
  emit(dir / "report.json", report_to_json(report, vocab, prov));
  std::cerr << report_table(report, vocab);
  return 0;
}

std::vector<TokenSequence> successful_prompts(const std::string& path, const Vocab& vocab) {
  std::vector<TokenSequence> out;
  if (path.empty()) return out;
  for (const auto& o : report_from_json(read_file(path), vocab).outcomes) {
    if (o.success) out.push_back(o.final_prompt);
  }
  return out;
}

int run_defend(const DefendArgs& a) {
  require(a.checkpoint, "--checkpoint");
  require(a.corpus, "--corpus");
  auto [model, vocab] = load_checkpoint(a.checkpoint);
  const Corpus corpus = load_corpus(a.corpus, vocab);
  std::vector<TokenSequence> raw;
  for (const auto& p : corpus) raw.push_back(p.question);
  const auto weak = successful_prompts(a.weak_report, vocab);
  const auto ood = successful_prompts(a.ood_report, vocab);

  const auto h_raw = prompt_entropies(model, raw, a.workers);
  const auto h_weak = prompt_entropies(model, weak, a.workers);
  const auto h_ood = prompt_entropies(model, ood, a.workers);
  double h_max = 0.0;
  for (double h : h_raw) h_max = std::max(h_max, h);
  const double calibrated = h_max * (1.0 + a.margin);

  std::vector<double> grid = default_threshold_grid(model.vocab_size(), a.points);
  grid.push_back(calibrated);
  grid.push_back(kReferenceEntropyThreshold);
  if (a.threshold) grid.push_back(*a.threshold);
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  const RecallCurve curve = sweep_entropies(h_raw, h_weak, h_ood, grid);

  const fs::path dir = a.out_dir.empty() ? default_out_dir() : fs::path(a.out_dir);
  json j = json::parse(recall_curve_to_json(curve));
  j["config"] = {{"points", a.points},
                 {"margin", a.margin},
                 {"calibrated_threshold", calibrated},
                 {"reference_threshold", kReferenceEntropyThreshold},
                 {"extra_threshold", a.threshold ? json(*a.threshold) : json(nullptr)}};
  j["inputs"] = {{"checkpoint_digest", file_digest(a.checkpoint)},
                 {"corpus_digest", file_digest(a.corpus)},
                 {"weak_report_digest", a.weak_report.empty() ? "" : file_digest(a.weak_report)},
                 {"ood_report_digest", a.ood_report.empty() ? "" : file_digest(a.ood_report)}};
  j["class_sizes"] = {{"raw", raw.size()}, {"weak", weak.size()}, {"ood", ood.size()}};
  emit(dir / "recall.csv", recall_curve_to_csv(curve));
  emit(dir / "recall.json", j.dump(2) + "\n");

  auto refused = [](const std::vector<double>& h, double theta) {
    return std::count_if(h.begin(), h.end(), [&](double e) { return e > theta; });
  };
  for (double theta : {calibrated, kReferenceEntropyThreshold}) {
    std::fprintf(stderr, "theta %.4f: refused raw %td/%zu, weak %td/%zu, ood %td/%zu\n", theta,
                 refused(h_raw, theta), h_raw.size(), refused(h_weak, theta), h_weak.size(), refused(h_ood, theta),
                 h_ood.size());
  }
  return 0;
}

int run_report(const ReportArgs& a) {
  if (a.reports.empty()) throw CLI::RequiredError("--report");
  std::optional<std::pair<TinyLM, Vocab>> loaded;
  if (!a.checkpoint.empty()) loaded.emplace(load_checkpoint(a.checkpoint));
  const Vocab vocab = loaded ? loaded->second : build_vocab(default_schema());
  json summary = json::array();
  for (const auto& path : a.reports) {
    ReportProvenance prov;
    const EvalReport r = report_from_json(read_file(path), vocab, &prov);
    std::cout << path << "\n" << report_table(r, vocab);
    summary.push_back({{"report", std::filesystem::path(path).filename().string()},
                       {"report_digest", file_digest(path)},
                       {"mode", std::string(to_string(r.mode))},
                       {"n", r.n},
                       {"successes", r.successes},
                       {"rate_percent", format_percent(r.successes, r.n)}});

    if (a.verify_item) {
      require(a.corpus, "--corpus");
      if (!loaded) throw CLI::RequiredError("--checkpoint");
      if (file_digest(a.checkpoint) != prov.checkpoint_digest || file_digest(a.corpus) != prov.corpus_digest) {
        throw ValidationError("report: checkpoint or corpus digest differs from the one recorded");
      }
      const Corpus corpus = load_corpus(a.corpus, vocab);
      const std::size_t i = *a.verify_item;
      if (i >= corpus.size() || i >= r.outcomes.size()) throw ValidationError("report: no item " + std::to_string(i));
      AttackConfig cfg = r.config;
      cfg.seed = r.outcomes[i].seed;
      const AttackOutcome again =
          summarize(run_attack(loaded->first, corpus[i], cfg, make_matcher(r.normalized_match, vocab)), i);
      const AttackOutcome& was = r.outcomes[i];
      const bool same = again.success == was.success && again.epochs_used == was.epochs_used &&
                        again.final_prompt == was.final_prompt && again.decoded_output == was.decoded_output;
      std::cout << "item " << i << " rerun " << (same ? "matches" : "DIFFERS") << "\n";
      if (!same) throw std::runtime_error("report: rerun of item " + std::to_string(i) + " does not reproduce");
    }
  }
  if (!a.out.empty()) emit(a.out, json{{"format", "halluc-summary"}, {"reports", summary}}.dump(2) + "\n");
  return 0;
}

int run_ablate(const AblateArgs& a) {
  require(a.checkpoint, "--checkpoint");
  require(a.corpus, "--corpus");
  auto [model, vocab] = load_checkpoint(a.checkpoint);
  const Corpus corpus = load_corpus(a.corpus, vocab);
  const AttackConfig base = resolve_attack("ood", a.topk, a.batch, a.epochs, a.seed);
  const AblationTable table = run_ablation_ood_length(model, corpus, vocab, a.lengths, base, {a.workers, false});
  const fs::path dir = a.out_dir.empty() ? default_out_dir() : fs::path(a.out_dir);
  const ReportProvenance prov{file_digest(a.checkpoint), file_digest(a.corpus)};
  for (const auto& row : table.rows) {
    write_file_atomic(dir / ("ablation_len" + std::to_string(row.length) + ".json"),
                      report_to_json(row.report, vocab, prov));
  }
  emit(dir / "ablation.csv", ablation_to_csv(table));
  std::cerr << ablation_to_csv(table);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-guided hallucination attack toolkit"};
  app.require_subcommand(1);

  GenCorpusArgs gen;
  auto* g = app.add_subcommand("gen-corpus", "Generate the synthetic QA corpus");
  g->add_option("--config", gen.config, "key=value defaults file");
  g->add_option("--n", gen.n, "Number of QA pairs");
  g->add_option("--seed", gen.seed);
  g->add_option("--schema", gen.schema, "Schema JSON (default: built-in)");
  g->add_option("--vocab-size", gen.vocab_size);
  g->add_option("--out", gen.out, "Output corpus file (required)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the tiny language model on a corpus");
  t->add_option("--config", tr.config, "key=value defaults file");
  t->add_option("--corpus", tr.corpus);
  t->add_option("--schema", tr.schema);
  t->add_option("--vocab-size", tr.vocab_size);
  t->add_option("--out", tr.out, "Checkpoint path (default: $HALLUC_OUT_DIR/checkpoint.json)");
  t->add_option("--seed", tr.train.seed);
  t->add_option("--max-steps", tr.train.max_steps);
  t->add_option("--min-steps", tr.train.min_steps);
  t->add_option("--eval-every", tr.train.eval_every);
  t->add_option("--lr", tr.train.learning_rate);
  t->add_option("--target-rate", tr.train.target_rate);
  t->add_option("--d-model", tr.model.d_model);
  t->add_option("--layers", tr.model.n_layers);
  t->add_option("--heads", tr.model.n_heads);
  t->add_option("--context", tr.model.context);
  t->add_option("--d-ff", tr.model.d_ff);

  AttackArgs at;
  auto* a = app.add_subcommand("attack", "Run the attack on every corpus pair");
  a->add_option("--config", at.config, "key=value defaults file");
  a->add_option("--checkpoint", at.checkpoint);
  a->add_option("--corpus", at.corpus);
  a->add_option("--mode", at.mode, "weak or ood");
  a->add_option("--topk", at.topk);
  a->add_option("--batch", at.batch);
  a->add_option("--epochs", at.epochs);
  a->add_option("--delta", at.delta, "Edit budget (weak)");
  a->add_option("--len", at.len, "Prompt length (ood)");
  a->add_option("--seed", at.seed);
  a->add_option("--workers", at.workers);
  a->add_flag("--allow-regression", at.allow_regression, "Leave the incumbent out of each batch");
  a->add_flag("--normalized-match", at.normalized_match, "Case and punctuation insensitive success test");
  a->add_option("--out-dir", at.out_dir);

  DefendArgs df;
  auto* d = app.add_subcommand("defend", "Sweep entropy thresholds over raw and adversarial prompts");
  d->add_option("--config", df.config, "key=value defaults file");
  d->add_option("--checkpoint", df.checkpoint);
  d->add_option("--corpus", df.corpus);
  d->add_option("--weak-report", df.weak_report);
  d->add_option("--ood-report", df.ood_report);
  d->add_option("--points", df.points);
  d->add_option("--margin", df.margin);
  d->add_option("--threshold", df.threshold);
  d->add_option("--workers", df.workers);
  d->add_option("--out-dir", df.out_dir);

  ReportArgs rp;
  auto* r = app.add_subcommand("report", "Summarize attack reports");
  r->add_option("--config", rp.config, "key=value defaults file");
  r->add_option("--report", rp.reports);
  r->add_option("--checkpoint", rp.checkpoint);
  r->add_option("--corpus", rp.corpus);
  r->add_option("--verify-item", rp.verify_item, "Re-run one pair from the report's own config");
  r->add_option("--out", rp.out);

  AblateArgs ab;
  auto* b = app.add_subcommand("ablate", "OoD attack success rate per prompt length");
  b->add_option("--config", ab.config, "key=value defaults file");
  b->add_option("--checkpoint", ab.checkpoint);
  b->add_option("--corpus", ab.corpus);
  b->add_option("--lengths", ab.lengths)->delimiter(',');
  b->add_option("--topk", ab.topk);
  b->add_option("--batch", ab.batch);
  b->add_option("--epochs", ab.epochs);
  b->add_option("--seed", ab.seed);
  b->add_option("--workers", ab.workers);
  b->add_option("--out-dir", ab.out_dir);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*g) {
      apply_config(*g, gen.config);
      return run_gen_corpus(gen);
    }
    if (*t) {
      apply_config(*t, tr.config);
      return run_train(tr);
    }
    if (*a) {
      apply_config(*a, at.config);
      return run_attack_cmd(at);
    }
    if (*d) {
      apply_config(*d, df.config);
      return run_defend(df);
    }
    if (*r) {
      apply_config(*r, rp.config);
      return run_report(rp);
    }
    if (*b) {
      apply_config(*b, ab.config);
      return run_ablate(ab);
    }
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
