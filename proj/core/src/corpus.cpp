#include "halluc/corpus.hpp"

#include <algorithm>
#include <map>
#include "json.hpp"
#include <set>
#include <sstream>

#include "halluc/error.hpp"
#include "halluc/io.hpp"
#include "halluc/rng.hpp"

namespace halluc {

using nlohmann::json;

std::string_view to_string(Slot slot) {
  switch (slot) {
    case Slot::subject: return "subject";
    case Slot::predicate: return "predicate";
    case Slot::object: return "object";
  }
  return "object";
}

Slot parse_slot(std::string_view name) {
  if (name == "subject") return Slot::subject;
  if (name == "predicate") return Slot::predicate;
  if (name == "object") return Slot::object;
  throw ValidationError("unknown slot '" + std::string(name) + "'");
}

Schema default_schema() {
  // subject, capital, language, currency
  static const char* const kRows[][4] = {
      {"france", "paris", "french", "euro"},       {"germany", "berlin", "german", "euro"},
      {"spain", "madrid", "spanish", "euro"},      {"italy", "rome", "italian", "euro"},
      {"japan", "tokyo", "japanese", "yen"},       {"china", "beijing", "chinese", "yuan"},
      {"russia", "moscow", "russian", "ruble"},    {"egypt", "cairo", "arabic", "pound"},
      {"brazil", "brasilia", "portuguese", "real"}, {"peru", "lima", "spanish", "sol"},
      {"india", "delhi", "hindi", "rupee"},        {"kenya", "nairobi", "swahili", "shilling"},
  };
  Schema s;
  s.predicates = {"capital", "language", "currency"};
  s.question_templates = {"what is the {p} of {s}"};
  s.answer_template = "{s} {p} is {o}";
  std::set<std::string> seen;
  for (const auto& row : kRows) {
    s.subjects.emplace_back(row[0]);
    for (int j = 0; j < 3; ++j) {
      s.facts.push_back({row[0], s.predicates[j], row[j + 1]});
      if (seen.insert(row[j + 1]).second) s.objects.emplace_back(row[j + 1]);
    }
  }
  return s;
}

namespace {

std::vector<std::string> string_array(const json& j, const char* key, bool required) {
  if (!j.contains(key)) {
    if (required) throw ValidationError(std::string("schema: missing array '") + key + "'");
    return {};
  }
  if (!j.at(key).is_array()) throw ValidationError(std::string("schema: '") + key + "' must be an array");
  std::vector<std::string> out;
  for (const auto& v : j.at(key)) {
    if (!v.is_string()) throw ValidationError(std::string("schema: '") + key + "' must hold strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

std::vector<std::string> split_words(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

bool is_placeholder(const std::string& w) { return w == "{s}" || w == "{p}" || w == "{o}"; }

std::string render(const std::string& tmpl, const Fact& f) {
  std::string out;
  for (const auto& w : split_words(tmpl)) {
    if (!out.empty()) out += ' ';
    if (w == "{s}") out += f.subject;
    else if (w == "{p}") out += f.predicate;
    else if (w == "{o}") out += f.object;
    else out += w;
  }
  return out;
}

void check_template(const std::string& tmpl, bool answer) {
  auto words = split_words(tmpl);
  auto count = [&](const char* p) { return std::count(words.begin(), words.end(), p); };
  if (answer) {
    if (count("{s}") != 1 || count("{p}") != 1 || count("{o}") != 1) {
      throw ValidationError("answer template must contain {s}, {p} and {o} exactly once: '" + tmpl + "'");
    }
  } else if (count("{s}") != 1 || count("{p}") != 1 || count("{o}") != 0) {
    throw ValidationError("question template must contain {s} and {p} once and no {o}: '" + tmpl + "'");
  }
  for (const auto& w : words) {
    if (!is_placeholder(w) && w.find('{') != std::string::npos) {
      throw ValidationError("unknown placeholder '" + w + "' in template '" + tmpl + "'");
    }
  }
}

std::string filler_word(std::size_t k) {
  static constexpr std::string_view kConsonants = "bdfgklmnprstvz";
  static constexpr std::string_view kVowels = "aeiou";
  constexpr std::size_t kSyllables = kConsonants.size() * kVowels.size();
  const std::size_t pair = (k * 2221) % (kSyllables * kSyllables);
  std::string w;
  for (std::size_t syl : {pair / kSyllables, pair % kSyllables}) {
    w += kConsonants[syl / kVowels.size()];
    w += kVowels[syl % kVowels.size()];
  }
  return w;
}

}  // namespace

Schema parse_schema(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("schema: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("schema: top level must be an object");
  Schema s;
  s.subjects = string_array(j, "subjects", true);
  s.predicates = string_array(j, "predicates", true);
  s.objects = string_array(j, "objects", true);
  s.question_templates = string_array(j, "question_templates", true);
  if (!j.contains("answer_template") || !j.at("answer_template").is_string()) {
    throw ValidationError("schema: missing string 'answer_template'");
  }
  s.answer_template = j.at("answer_template").get<std::string>();
  s.fillers = string_array(j, "fillers", false);
  if (j.contains("facts")) {
    for (const auto& f : j.at("facts")) {
      if (!f.is_array() || f.size() != 3 || !f[0].is_string() || !f[1].is_string() || !f[2].is_string()) {
        throw ValidationError("schema: each fact must be [subject, predicate, object]");
      }
      s.facts.push_back({f[0].get<std::string>(), f[1].get<std::string>(), f[2].get<std::string>()});
    }
  }
  truth_facts(s);
  return s;
}

Schema load_schema(const std::filesystem::path& path) { return parse_schema(read_file(path)); }

std::vector<Fact> truth_facts(const Schema& schema) {
  if (schema.subjects.empty() || schema.predicates.empty() || schema.objects.empty()) {
    throw ValidationError("schema: subjects, predicates and objects must be non-empty");
  }
  if (schema.question_templates.empty()) throw ValidationError("schema: no question templates");
  for (const auto& t : schema.question_templates) check_template(t, false);
  check_template(schema.answer_template, true);

  std::vector<Fact> facts = schema.facts;
  if (facts.empty()) {
    for (std::size_t i = 0; i < schema.subjects.size(); ++i) {
      for (std::size_t j = 0; j < schema.predicates.size(); ++j) {
        facts.push_back({schema.subjects[i], schema.predicates[j],
                         schema.objects[(i * schema.predicates.size() + j) % schema.objects.size()]});
      }
    }
  }
  auto member = [](const std::vector<std::string>& pool, const std::string& v) {
    return std::find(pool.begin(), pool.end(), v) != pool.end();
  };
  std::set<std::pair<std::string, std::string>> keys;
  for (const auto& f : facts) {
    if (!member(schema.subjects, f.subject) || !member(schema.predicates, f.predicate) ||
        !member(schema.objects, f.object)) {
      throw ValidationError("schema: fact (" + f.subject + ", " + f.predicate + ", " + f.object +
                            ") uses a value missing from its slot list");
    }
    if (!keys.emplace(f.subject, f.predicate).second) {
      throw ValidationError("schema: duplicate fact for (" + f.subject + ", " + f.predicate + ")");
    }
  }
  return facts;
}

Vocab build_vocab(const Schema& schema, std::size_t size) {
  truth_facts(schema);  // validates templates and slot lists
  std::vector<std::string> words;
  std::set<std::string> seen = {std::string(kPadToken), std::string(kBosToken), std::string(kEosToken),
                                std::string(kSepToken)};
  auto add = [&](const std::string& w) {
    if (seen.insert(w).second) words.push_back(w);
  };
  for (const auto& t : schema.question_templates) {
    for (const auto& w : split_words(t)) {
      if (!is_placeholder(w)) add(w);
    }
  }
  for (const auto& w : split_words(schema.answer_template)) {
    if (!is_placeholder(w)) add(w);
  }
  for (const auto& w : schema.subjects) add(w);
  for (const auto& w : schema.predicates) add(w);
  for (const auto& w : schema.objects) add(w);

  if (words.size() + 4 > size) {
    throw ValidationError("schema needs " + std::to_string(words.size() + 4) +
                          " tokens, more than the vocabulary size " + std::to_string(size));
  }
  const std::size_t filler_count = size - 4 - words.size();
  if (filler_count * 4 < size) {
    throw ValidationError("vocabulary of size " + std::to_string(size) + " leaves only " +
                          std::to_string(filler_count) + " filler tokens (at least 25% required)");
  }
  std::size_t added = 0;
  for (const auto& w : schema.fillers) {
    if (added == filler_count) break;
    if (seen.insert(w).second) {
      words.push_back(w);
      ++added;
    }
  }
  for (std::size_t k = 0; added < filler_count; ++k) {
    if (k >= 4900) throw ValidationError("ran out of generated filler words");
    auto w = filler_word(k);
    if (seen.insert(w).second) {
      words.push_back(std::move(w));
      ++added;
    }
  }
  return Vocab(std::move(words));
}

Corpus generate_corpus(std::size_t n, std::uint64_t seed, const Schema& schema, const Vocab& vocab) {
  if (n == 0) throw ValidationError("schema exhausted / n must be >= 1");
  const auto facts = truth_facts(schema);
  if (facts.size() < n) {
    throw ValidationError("schema exhausted: " + std::to_string(facts.size()) + " distinct facts, " +
                          std::to_string(n) + " requested");
  }
  std::set<std::tuple<std::string, std::string, std::string>> truth;
  for (const auto& f : facts) truth.emplace(f.subject, f.predicate, f.object);
  auto is_true = [&](const Fact& f) { return truth.count({f.subject, f.predicate, f.object}) > 0; };

  Rng rng(seed);
  std::vector<std::size_t> order(facts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.uniform_index(i)]);
  }
  order.resize(n);

  // Replacement values come from the slot values the selected facts use, in
  // schema order; the full schema list is the fallback for tiny corpora.
  auto corpus_pool = [&](const std::vector<std::string>& schema_pool, auto member) {
    std::vector<std::string> pool;
    for (const auto& v : schema_pool) {
      for (std::size_t idx : order) {
        if (facts[idx].*member == v) {
          pool.push_back(v);
          break;
        }
      }
    }
    return pool;
  };
  const std::vector<std::string> pools[3] = {
      corpus_pool(schema.subjects, &Fact::subject),
      corpus_pool(schema.predicates, &Fact::predicate),
      corpus_pool(schema.objects, &Fact::object),
  };
  const std::vector<std::string>* schema_pools[3] = {&schema.subjects, &schema.predicates, &schema.objects};

  auto alternatives = [&](const Fact& f, int slot, const std::vector<std::string>& pool) {
    std::vector<Fact> out;
    for (const auto& v : pool) {
      Fact g = f;
      std::string& field = slot == 0 ? g.subject : slot == 1 ? g.predicate : g.object;
      if (field == v) continue;
      field = v;
      if (!is_true(g)) out.push_back(std::move(g));
    }
    return out;
  };

  Corpus corpus;
  corpus.reserve(n);
  for (std::size_t idx : order) {
    const Fact& fact = facts[idx];
    const auto& qt = schema.question_templates[rng.uniform_index(schema.question_templates.size())];

    std::vector<std::vector<Fact>> options(3);
    std::vector<int> feasible;
    for (int slot = 0; slot < 3; ++slot) {
      options[slot] = alternatives(fact, slot, pools[slot]);
      if (options[slot].empty()) options[slot] = alternatives(fact, slot, *schema_pools[slot]);
      if (!options[slot].empty()) feasible.push_back(slot);
    }
    if (feasible.empty()) {
      throw ValidationError("no slot of fact (" + fact.subject + ", " + fact.predicate + ", " + fact.object +
                            ") can be replaced without producing another true fact");
    }
    const int slot = feasible[rng.uniform_index(feasible.size())];
    const Fact& fake = options[slot][rng.uniform_index(options[slot].size())];

    QAPair pair;
    pair.question = tokenize(render(qt, fact), vocab);
    pair.truthful_answer = tokenize(render(schema.answer_template, fact), vocab);
    pair.truthful_answer.push_back(vocab.special().eos);
    pair.hallucinated_answer = tokenize(render(schema.answer_template, fake), vocab);
    pair.hallucinated_answer.push_back(vocab.special().eos);
    pair.perturbed_slot = static_cast<Slot>(slot);
    corpus.push_back(std::move(pair));
  }
  return corpus;
}

std::string corpus_to_jsonl(const Corpus& corpus, const Vocab& vocab) {
  std::string out;
  for (const auto& p : corpus) {
    json j = {
        {"question", to_strings(p.question, vocab)},
        {"truthful_answer", to_strings(p.truthful_answer, vocab)},
        {"hallucinated_answer", to_strings(p.hallucinated_answer, vocab)},
        {"perturbed_slot", std::string(to_string(p.perturbed_slot))},
    };
    out += j.dump();
    out += '\n';
  }
  return out;
}

Corpus corpus_from_jsonl(std::string_view text, const Vocab& vocab) {
  Corpus corpus;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    ++line_no;
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) {
      throw ValidationError("line " + std::to_string(line_no) + ": missing trailing newline");
    }
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    try {
      const json j = json::parse(line);
      auto field = [&](const char* key) {
        if (!j.is_object() || !j.contains(key) || !j.at(key).is_array()) {
          throw ValidationError(std::string("missing token array '") + key + "'");
        }
        return from_strings(j.at(key).get<std::vector<std::string>>(), vocab);
      };
      QAPair p;
      p.question = field("question");
      p.truthful_answer = field("truthful_answer");
      p.hallucinated_answer = field("hallucinated_answer");
      if (!j.contains("perturbed_slot") || !j.at("perturbed_slot").is_string()) {
        throw ValidationError("missing string 'perturbed_slot'");
      }
      p.perturbed_slot = parse_slot(j.at("perturbed_slot").get<std::string>());
      const TokenId eos = vocab.special().eos;
      if (p.question.empty()) throw ValidationError("empty question");
      if (p.truthful_answer.empty() || p.truthful_answer.back() != eos ||
          p.hallucinated_answer.empty() || p.hallucinated_answer.back() != eos) {
        throw ValidationError("answers must end with " + std::string(kEosToken));
      }
      if (p.truthful_answer == p.hallucinated_answer) {
        throw ValidationError("hallucinated answer equals truthful answer");
      }
      corpus.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw ValidationError(where + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
  }
  return corpus;
}

void save_corpus(const std::filesystem::path& path, const Corpus& corpus, const Vocab& vocab) {
  write_file_atomic(path, corpus_to_jsonl(corpus, vocab));
}

Corpus load_corpus(const std::filesystem::path& path, const Vocab& vocab) {
  return corpus_from_jsonl(read_file(path), vocab);
}

}  // namespace halluc
