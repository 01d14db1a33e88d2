#include <filesystem>
#include <set>

#include "doctest.h"
#include "halluc/corpus.hpp"
#include "halluc/error.hpp"
#include "halluc/io.hpp"

using namespace halluc;

namespace {

Schema france_schema() {
  Schema s;
  s.subjects = {"france"};
  s.predicates = {"capital"};
  s.objects = {"paris", "london"};
  s.question_templates = {"what is the {p} of {s}"};
  s.answer_template = "the {p} city of {s} is {o}";
  s.facts = {{"france", "capital", "paris"}};
  return s;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "halluc_test_corpus";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("vocab keeps specials at fixed ids and a bijective index") {
  const Vocab v = build_vocab(default_schema());
  CHECK(v.size() == kDefaultVocabSize);
  CHECK(v.token(0) == "<pad>");
  CHECK(v.token(1) == "<bos>");
  CHECK(v.token(2) == "<eos>");
  CHECK(v.token(3) == "<sep>");
  std::set<std::string> seen(v.tokens().begin(), v.tokens().end());
  CHECK(seen.size() == v.size());
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(v.id(v.token(static_cast<TokenId>(i))) == static_cast<TokenId>(i));
}

TEST_CASE("fillers make up at least a quarter of the vocabulary") {
  const Schema schema = default_schema();
  const Vocab v = build_vocab(schema);
  std::set<std::string> used;
  for (const auto& w : schema.subjects) used.insert(w);
  for (const auto& w : schema.predicates) used.insert(w);
  for (const auto& w : schema.objects) used.insert(w);
  std::size_t fillers = 0;
  for (const auto& t : v.tokens()) {
    if (t.front() == '<') continue;
    if (used.count(t) == 0 && t != "what" && t != "is" && t != "the" && t != "of") ++fillers;
  }
  CHECK(fillers * 4 >= v.size());
  CHECK_THROWS_AS(build_vocab(schema, 64), ValidationError);
}

TEST_CASE("tokenize") {
  const Vocab v = build_vocab(default_schema());
  CHECK_THROWS_AS(tokenize("", v), ValidationError);
  CHECK_THROWS_AS(tokenize("   ", v), ValidationError);
  CHECK(tokenize("paris", v) == TokenSequence{v.id("paris")});
  try {
    tokenize("what is zzyzx", v);
    FAIL("expected an error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("zzyzx") != std::string::npos);
  }
}

TEST_CASE("generated questions round trip through detokenize") {
  const Schema schema = default_schema();
  const Vocab v = build_vocab(schema);
  for (const auto& p : generate_corpus(36, 3, schema, v)) {
    CHECK(tokenize(detokenize(p.question, v), v) == p.question);
    CHECK(tokenize(detokenize(p.truthful_answer, v), v) == p.truthful_answer);
  }
}

TEST_CASE("single fact with a two-value object pool") {
  const Schema schema = france_schema();
  const Vocab v = build_vocab(schema, 32);
  const Corpus c = generate_corpus(1, 0, schema, v);
  REQUIRE(c.size() == 1);
  CHECK(c[0].perturbed_slot == Slot::object);
  CHECK(detokenize(c[0].truthful_answer, v) == "the capital city of france is paris <eos>");
  CHECK(detokenize(c[0].hallucinated_answer, v) == "the capital city of france is london <eos>");
}

TEST_CASE("n = 0 and oversized requests are rejected") {
  const Schema schema = default_schema();
  const Vocab v = build_vocab(schema);
  CHECK_THROWS_WITH_AS(generate_corpus(0, 1, schema, v), "schema exhausted / n must be >= 1", ValidationError);
  CHECK_THROWS_AS(generate_corpus(37, 1, schema, v), ValidationError);
}

TEST_CASE("generation is deterministic in the seed") {
  const Schema schema = default_schema();
  const Vocab v = build_vocab(schema);
  CHECK(corpus_to_jsonl(generate_corpus(20, 7, schema, v), v) ==
        corpus_to_jsonl(generate_corpus(20, 7, schema, v), v));
  CHECK(generate_corpus(20, 7, schema, v) != generate_corpus(20, 8, schema, v));
}

TEST_CASE("each hallucinated answer swaps exactly one slot for a false value") {
  const Schema schema = default_schema();
  const Vocab v = build_vocab(schema);
  std::set<std::string> truths;
  for (const auto& f : truth_facts(schema)) truths.insert(f.subject + " " + f.predicate + " is " + f.object + " <eos>");
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const auto& p : generate_corpus(24, seed, schema, v)) {
      REQUIRE(p.truthful_answer.size() == p.hallucinated_answer.size());
      CHECK(p.truthful_answer.back() == v.special().eos);
      CHECK(p.hallucinated_answer.back() == v.special().eos);
      CHECK(hamming(p.truthful_answer, p.hallucinated_answer) == 1);
      const std::size_t slot_pos = p.perturbed_slot == Slot::subject ? 0 : p.perturbed_slot == Slot::predicate ? 1 : 3;
      CHECK(p.truthful_answer[slot_pos] != p.hallucinated_answer[slot_pos]);
      CHECK(truths.count(detokenize(p.truthful_answer, v)) == 1);
      CHECK(truths.count(detokenize(p.hallucinated_answer, v)) == 0);
    }
  }
}

TEST_CASE("derived facts when the schema lists none") {
  Schema s;
  s.subjects = {"a1", "a2"};
  s.predicates = {"p1", "p2"};
  s.objects = {"o1", "o2", "o3"};
  s.question_templates = {"what is the {p} of {s}"};
  s.answer_template = "{s} {p} is {o}";
  const auto facts = truth_facts(s);
  REQUIRE(facts.size() == 4);
  CHECK(facts[0] == Fact{"a1", "p1", "o1"});
  CHECK(facts[1] == Fact{"a1", "p2", "o2"});
  CHECK(facts[2] == Fact{"a2", "p1", "o3"});
  CHECK(facts[3] == Fact{"a2", "p2", "o1"});
}

TEST_CASE("schema json") {
  const Schema s = parse_schema(R"({"subjects":["france"],"predicates":["capital"],"objects":["paris","london"],
    "question_templates":["what is the {p} of {s}"],"answer_template":"{s} {p} is {o}",
    "facts":[["france","capital","paris"]]})");
  CHECK(s.facts.size() == 1);
  CHECK_THROWS_AS(parse_schema("{"), ValidationError);
  CHECK_THROWS_AS(parse_schema(R"({"subjects":["a"]})"), ValidationError);
  CHECK_THROWS_AS(parse_schema(R"({"subjects":["a"],"predicates":["b"],"objects":["c"],
    "question_templates":["what {o}"],"answer_template":"{s} {p} {o}"})"), ValidationError);
}

TEST_CASE("corpus persistence") {
  const Schema schema = default_schema();
  const Vocab v = build_vocab(schema);

  SUBCASE("empty corpus is an empty file") {
    const auto path = temp_path("empty.jsonl");
    save_corpus(path, {}, v);
    CHECK(read_file(path).empty());
    CHECK(load_corpus(path, v).empty());
  }
  SUBCASE("20 pairs round trip") {
    const Corpus c = generate_corpus(20, 7, schema, v);
    const auto path = temp_path("c20.jsonl");
    save_corpus(path, c, v);
    const std::string text = read_file(path);
    CHECK(std::count(text.begin(), text.end(), '\n') == 20);
    CHECK(load_corpus(path, v) == c);
  }
  SUBCASE("malformed line reports its number") {
    std::string text = corpus_to_jsonl(generate_corpus(4, 1, schema, v), v);
    std::size_t second = text.find('\n', text.find('\n') + 1);
    text.insert(second + 1, "not json\n");
    try {
      corpus_from_jsonl(text, v);
      FAIL("expected an error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).rfind("line 3:", 0) == 0);
    }
  }
  SUBCASE("missing trailing newline") {
    std::string text = corpus_to_jsonl(generate_corpus(2, 1, schema, v), v);
    text.pop_back();
    CHECK_THROWS_AS(corpus_from_jsonl(text, v), ValidationError);
  }
  SUBCASE("token outside the vocabulary") {
    std::string text = corpus_to_jsonl(generate_corpus(1, 1, schema, v), v);
    text.replace(text.find("\"what\""), 6, "\"whot\"");
    CHECK_THROWS_AS(corpus_from_jsonl(text, v), ValidationError);
  }
}

}  // TEST_SUITE
