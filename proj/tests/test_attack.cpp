#include <algorithm>
#include <set>

#include "doctest.h"
#include "fixtures.hpp"
#include "halluc/attack.hpp"
#include "halluc/error.hpp"

using namespace halluc;
using namespace halluc::testing;

namespace {

SubstitutionScores scores_of(std::vector<std::vector<double>> rows) {
  SubstitutionScores s;
  s.scores = Matrix(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy(rows[r].begin(), rows[r].end(), s.scores.row(r).begin());
  }
  return s;
}

std::vector<TokenId> ids(const std::vector<ScoredToken>& c) {
  std::vector<TokenId> out;
  for (const auto& t : c) out.push_back(t.token);
  return out;
}

QAPair pair_of(TokenSequence question, TokenSequence target) {
  QAPair p;
  p.question = std::move(question);
  p.truthful_answer = {4, 2};
  p.hallucinated_answer = std::move(target);
  return p;
}

}  // namespace

TEST_SUITE("attack") {

TEST_CASE("substitution scores match the explicit dot-product oracle") {
  const TinyLM m = random_model(micro_config(16, 8), 31);
  const TokenSequence prompt = {5, 9, 14};
  const TokenSequence target = {7, 11, 2};
  const SubstitutionScores s = score_substitutions(m, prompt, target);
  const Matrix g = m.input_gradients(prompt, target).grads;
  const Matrix& e = m.embedding_table();
  REQUIRE(s.scores.rows() == 3);
  REQUIRE(s.scores.cols() == 16);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(s.scores(i, static_cast<std::size_t>(prompt[i])) == 0.0);
    for (std::size_t v = 0; v < 16; ++v) {
      double ref = 0;
      for (std::size_t c = 0; c < 8; ++c) ref += (e(v, c) - e(static_cast<std::size_t>(prompt[i]), c)) * g(i, c);
      CHECK(std::abs(s.scores(i, v) - ref) <= 1e-6);
    }
  }
}

TEST_CASE("empty target gives all-zero scores") {
  const TinyLM m = random_model(micro_config(16, 8), 32);
  const SubstitutionScores s = score_substitutions(m, TokenSequence{5, 6}, {});
  for (double v : s.scores.values()) CHECK(v == 0.0);
}

TEST_CASE("top-k ordering and tie-breaks") {
  CHECK(ids(topk_candidates(scores_of({{0.5, -0.2, 0.9, 0.0}}), 2, {}).positions[0]) == std::vector<TokenId>{2, 0});
  const std::vector<TokenId> forbid0 = {0};
  CHECK(ids(topk_candidates(scores_of({{0, 0, 0, 0, 0}}), 3, forbid0).positions[0]) ==
        std::vector<TokenId>{1, 2, 3});
  const auto c = topk_candidates(scores_of({{0.1, 0.3, 0.3, -1.0, 0.3}, {0, 0, 0, 0, 0}}), 4, {});
  CHECK(ids(c.positions[0]) == std::vector<TokenId>{1, 2, 4, 0});
  for (std::size_t i = 1; i < c.positions[0].size(); ++i) CHECK(c.positions[0][i - 1].score >= c.positions[0][i].score);
}

TEST_CASE("top-k larger than the allowed vocabulary is an error") {
  SubstitutionScores s;
  s.scores = Matrix(2, 256);
  const std::vector<TokenId> specials = {0, 1, 2, 3};
  CHECK_THROWS_AS(topk_candidates(s, 256, specials), std::invalid_argument);
  CHECK(topk_candidates(s, 252, specials).positions[0].size() == 252);
  AttackConfig cfg;
  cfg.topk = 256;
  CHECK_THROWS_AS(cfg.validate(256), ValidationError);
}

TEST_CASE("config validation") {
  AttackConfig cfg;
  CHECK_NOTHROW(cfg.validate(256));
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(256), ValidationError);
  cfg = {};
  cfg.batch = 0;
  CHECK_THROWS_AS(cfg.validate(256), ValidationError);
  cfg = {};
  cfg.edit_budget = 0;
  CHECK_THROWS_AS(cfg.validate(256), ValidationError);
  cfg = AttackConfig::defaults(AttackMode::ood);
  CHECK(cfg.epochs == 1000);
  cfg.prompt_length = 0;
  CHECK_THROWS_AS(cfg.validate(256), ValidationError);
  CHECK(AttackConfig{}.resolved_edit_budget(1) == 1);
  CHECK(AttackConfig{}.resolved_edit_budget(6) == 2);
  CHECK(AttackConfig{}.resolved_edit_budget(10) == 2);
  CHECK(AttackConfig{}.resolved_edit_budget(11) == 3);
}

TEST_CASE("candidate enumeration") {
  SUBCASE("one position, one candidate") {
    CandidateSet c;
    c.positions = {{{7, 1.0}}};
    const auto x = enumerate_candidates(TokenSequence{5}, c);
    REQUIRE(x.size() == 1);
    CHECK(x[0].prompt == TokenSequence{7});
    CHECK(x[0].position == 0);
    CHECK(x[0].old_token == 5);
    CHECK(x[0].new_token == 7);
  }
  SUBCASE("l = 20, k = 64 gives 1280 prompts one edit away") {
    TokenSequence prompt(20, 4);
    CandidateSet c;
    c.positions.assign(20, {});
    for (auto& pos : c.positions) {
      for (TokenId t = 100; t < 164; ++t) pos.push_back({t, 0.0});
    }
    const auto x = enumerate_candidates(prompt, c);
    CHECK(x.size() == 1280);
    for (const auto& cand : x) CHECK(hamming(cand.prompt, prompt) == 1);
  }
  SUBCASE("self-substitutions are skipped") {
    CandidateSet c;
    c.positions = {{{5, 0.0}, {6, 0.0}}, {{6, 0.0}, {7, 0.0}}};
    CHECK(enumerate_candidates(TokenSequence{5, 6}, c).size() == 2);
  }
}

TEST_CASE("batch sampling") {
  std::vector<CandidatePrompt> pool;
  for (TokenId t = 0; t < 1280; ++t) pool.push_back({{t, 4}, std::size_t{0}, 4, t});
  const TokenSequence incumbent = {4, 4};

  SUBCASE("exhaustive when B covers the pool") {
    Rng rng(1);
    std::vector<CandidatePrompt> small(pool.begin(), pool.begin() + 10);
    const auto b = sample_batch(small, 64, incumbent, rng);
    REQUIRE(b.size() == 11);
    CHECK(b.back().prompt == incumbent);
    CHECK_FALSE(b.back().position.has_value());
    std::set<TokenSequence> seen;
    for (std::size_t i = 0; i < 10; ++i) seen.insert(b[i].prompt);
    CHECK(seen.size() == 10);
  }
  SUBCASE("B = 1024 of 1280 without replacement") {
    Rng rng(2);
    const auto b = sample_batch(pool, 1024, incumbent, rng);
    REQUIRE(b.size() == 1025);
    std::set<TokenSequence> seen;
    for (std::size_t i = 0; i < 1024; ++i) seen.insert(b[i].prompt);
    CHECK(seen.size() == 1024);
  }
  SUBCASE("same seed, same batch") {
    Rng a(3), b(3);
    const auto x = sample_batch(pool, 100, incumbent, a);
    const auto y = sample_batch(pool, 100, incumbent, b);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x[i].prompt == y[i].prompt);
  }
  SUBCASE("empty pool leaves only the incumbent") {
    Rng rng(4);
    const auto b = sample_batch({}, 8, incumbent, rng);
    REQUIRE(b.size() == 1);
    CHECK(b[0].prompt == incumbent);
  }
  SUBCASE("regression mode omits the incumbent") {
    Rng rng(5);
    CHECK(sample_batch(pool, 8, incumbent, rng, false).size() == 8);
  }
}

TEST_CASE("selection") {
  const TinyLM m = random_model(micro_config(16, 8), 33);
  const TokenSequence incumbent = {5, 6, 7};
  const TokenSequence target = {9, 2};

  SUBCASE("incumbent alone") {
    const std::vector<CandidatePrompt> batch = {{incumbent, std::nullopt, -1, -1}};
    const auto s = select_best(m, batch, target, std::nullopt);
    REQUIRE(s);
    CHECK(s->index == 0);
    CHECK(s->nll == m.target_nll(incumbent, target).value);
  }
  SUBCASE("every sampled candidate violates the budget") {
    const TokenSequence original = {5, 6, 7};
    std::vector<CandidatePrompt> batch = {{{12, 13, 7}, std::size_t{1}, 6, 13},
                                          {{12, 6, 14}, std::size_t{2}, 7, 14},
                                          {{5, 6, 7}, std::nullopt, -1, -1}};
    const TokenSequence current = {12, 6, 7};
    batch.back().prompt = current;
    const auto s = select_best(m, batch, target, EditConstraint{original, 1});
    REQUIRE(s);
    CHECK(s->index == 2);
  }
  SUBCASE("eight candidates against brute-force NLL") {
    Rng rng(8);
    std::vector<CandidatePrompt> batch;
    for (int k = 0; k < 8; ++k) {
      TokenSequence p = incumbent;
      const std::size_t pos = rng.uniform_index(3);
      p[pos] = static_cast<TokenId>(4 + rng.uniform_index(12));
      batch.push_back({p, pos, incumbent[pos], p[pos]});
    }
    std::size_t best = 0;
    double best_nll = m.target_nll(batch[0].prompt, target).value;
    for (std::size_t i = 1; i < batch.size(); ++i) {
      const double v = m.target_nll(batch[i].prompt, target).value;
      if (v < best_nll) {
        best_nll = v;
        best = i;
      }
    }
    const auto s = select_best(m, batch, target, std::nullopt);
    REQUIRE(s);
    CHECK(s->index == best);
    CHECK(s->nll == best_nll);
  }
  SUBCASE("ties go to the first occurrence") {
    const std::vector<CandidatePrompt> batch = {{{9, 6, 7}, std::size_t{0}, 5, 9},
                                                {{9, 6, 7}, std::size_t{0}, 5, 9},
                                                {incumbent, std::nullopt, -1, -1}};
    const auto s = select_best(m, batch, target, std::nullopt);
    REQUIRE(s);
    CHECK(s->index != 1);
  }
}

TEST_CASE("one exhaustive epoch reaches the best single substitution") {
  const ModelConfig cfg = micro_config(16, 8);
  for (std::uint64_t seed = 40; seed < 44; ++seed) {
    const TinyLM m = random_model(cfg, seed);
    Rng rng(seed);
    const TokenSequence prompt = random_tokens(rng, 1 + seed % 3, 16);
    TokenSequence target = random_tokens(rng, 2, 16);
    target.push_back(2);
    AttackConfig ac;
    ac.mode = AttackMode::weak_semantic;
    ac.epochs = 1;
    ac.topk = 12;
    ac.batch = prompt.size() * 12;
    ac.edit_budget = prompt.size();
    ac.seed = seed;
    const AttackTrace t = run_attack(m, pair_of(prompt, target), ac);
    if (t.success && t.epochs_used == 0) continue;
    double best = m.target_nll(prompt, target).value;
    for (std::size_t i = 0; i < prompt.size(); ++i) {
      for (TokenId v = 4; v < 16; ++v) {
        TokenSequence p = prompt;
        p[i] = v;
        best = std::min(best, m.target_nll(p, target).value);
      }
    }
    CHECK(t.records.back().nll == best);
  }
}

TEST_CASE("initial prompt already decoding to the target stops at epoch 0") {
  const TinyLM m = random_model(micro_config(16, 8), 50);
  const TokenSequence prompt = {5, 6, 7};
  const TokenSequence target = m.greedy_decode(prompt, 4);
  AttackConfig ac;
  ac.topk = 8;
  const AttackTrace t = run_attack(m, pair_of(prompt, target), ac);
  CHECK(t.success);
  CHECK(t.epochs_used == 0);
  CHECK(t.records.size() == 1);
  CHECK(t.final_prompt == prompt);
  CHECK(trace_violations(m, t).empty());
}

TEST_CASE("weak-semantic runs respect every trace invariant") {
  const TinyLM m = random_model(micro_config(32, 8, 2, 2, 24), 51);
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    Rng rng(seed + 100);
    const TokenSequence q = random_tokens(rng, 6, 32);
    TokenSequence target = random_tokens(rng, 3, 32);
    target.push_back(2);
    AttackConfig ac;
    ac.epochs = 20;
    ac.topk = 8;
    ac.batch = 16;
    ac.seed = seed;
    const AttackTrace t = run_attack(m, pair_of(q, target), ac);
    CHECK(t.edit_budget == 2);
    CHECK(t.records.size() == t.epochs_used + 1);
    const auto v = trace_violations(m, t);
    CHECK_MESSAGE(v.empty(), (v.empty() ? "" : v.front()));
  }
}

TEST_CASE("OoD initialization avoids forbidden tokens and honors the length") {
  const TinyLM m = random_model(micro_config(32, 8, 1, 2, 40), 52);
  AttackConfig ac = AttackConfig::defaults(AttackMode::ood);
  ac.epochs = 3;
  ac.topk = 4;
  ac.batch = 8;
  ac.prompt_length = 25;
  ac.forbidden = {0, 1, 2, 3, 4, 5};
  const AttackTrace t = run_attack(m, pair_of({7}, {9, 10, 2}), ac);
  CHECK(t.records.front().prompt.size() == 25);
  for (const auto& r : t.records) {
    for (TokenId tok : r.prompt) CHECK(tok > 5);
  }
  CHECK(trace_violations(m, t).empty());
}

TEST_CASE("traces are reproducible and survive serialization") {
  const TinyLM m = random_model(micro_config(32, 8, 1, 2, 24), 53);
  std::vector<std::string> words;
  for (int i = 4; i < 32; ++i) words.push_back("w" + std::to_string(i));
  const Vocab vocab(words);
  AttackConfig ac;
  ac.epochs = 10;
  ac.topk = 6;
  ac.batch = 10;
  ac.seed = 9;
  const QAPair p = pair_of({5, 6, 7, 8, 9}, {10, 11, 2});
  const AttackTrace a = run_attack(m, p, ac);
  const AttackTrace b = run_attack(m, p, ac);
  const TraceMetadata meta{3, "abc", "def"};
  const std::string text = trace_to_jsonl(a, meta, vocab);
  CHECK(text == trace_to_jsonl(b, meta, vocab));
  TraceMetadata back;
  const AttackTrace c = trace_from_jsonl(text, vocab, &back);
  CHECK(back.pair_id == 3);
  CHECK(back.checkpoint_digest == "abc");
  CHECK(trace_to_jsonl(c, back, vocab) == text);
}

TEST_CASE("regression mode may raise the loss but keeps locality") {
  const TinyLM m = random_model(micro_config(32, 8, 1, 2, 24), 54);
  AttackConfig ac;
  ac.epochs = 15;
  ac.topk = 4;
  ac.batch = 4;
  ac.allow_regression = true;
  ac.edit_budget = 6;
  const AttackTrace t = run_attack(m, pair_of({5, 6, 7, 8, 9, 10}, {11, 12, 2}), ac);
  for (std::size_t e = 1; e < t.records.size(); ++e) {
    CHECK(hamming(t.records[e].prompt, t.records[e - 1].prompt) <= 1);
  }
  CHECK(trace_violations(m, t).empty());
}

}  // TEST_SUITE
