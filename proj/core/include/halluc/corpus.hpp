#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "halluc/vocab.hpp"

namespace halluc {

enum class Slot { subject, predicate, object };

std::string_view to_string(Slot slot);
Slot parse_slot(std::string_view name);

struct Fact {
  std::string subject;
  std::string predicate;
  std::string object;

  bool operator==(const Fact&) const = default;
};

/// Fact world for the synthetic corpus. Question templates use {s} and {p};
/// the answer template uses {s}, {p} and {o}. Slot values are single words.
struct Schema {
  std::vector<std::string> subjects;
  std::vector<std::string> predicates;
  std::vector<std::string> objects;
  std::vector<std::string> question_templates;
  std::string answer_template;
  // Truth set. When empty, one fact per (subject, predicate) is derived with
  // object objects[(i * |predicates| + j) % |objects|].
  std::vector<Fact> facts;
  // Words never used in facts. Generated when empty.
  std::vector<std::string> fillers;
};

Schema default_schema();
Schema parse_schema(std::string_view json_text);
Schema load_schema(const std::filesystem::path& path);

/// The truth set, validated: every value belongs to its slot list and no
/// (subject, predicate) pair repeats.
std::vector<Fact> truth_facts(const Schema& schema);

inline constexpr std::size_t kDefaultVocabSize = 256;
inline constexpr std::size_t kDefaultCorpusSize = 24;

/// Specials, template words, slot values, then filler words up to `size`.
/// Throws ValidationError when fillers would make up less than a quarter of it.
Vocab build_vocab(const Schema& schema, std::size_t size = kDefaultVocabSize);

struct QAPair {
  TokenSequence question;
  TokenSequence truthful_answer;      // ends with EOS
  TokenSequence hallucinated_answer;  // ends with EOS, differs from the truth in one slot
  Slot perturbed_slot = Slot::object;

  bool operator==(const QAPair&) const = default;
};

using Corpus = std::vector<QAPair>;

/// Picks n distinct truthful facts and plants one hallucinated answer per
/// question by replacing one slot value. Deterministic in (n, seed, schema).
Corpus generate_corpus(std::size_t n, std::uint64_t seed, const Schema& schema, const Vocab& vocab);

std::string corpus_to_jsonl(const Corpus& corpus, const Vocab& vocab);
Corpus corpus_from_jsonl(std::string_view text, const Vocab& vocab);

void save_corpus(const std::filesystem::path& path, const Corpus& corpus, const Vocab& vocab);
Corpus load_corpus(const std::filesystem::path& path, const Vocab& vocab);

}  // namespace halluc
