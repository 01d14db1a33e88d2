#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "json.hpp"
#include "fixtures.hpp"
#include "halluc/corpus.hpp"
#include "halluc/error.hpp"
#include "halluc/model.hpp"
#include "oracle.hpp"

using namespace halluc;
using namespace halluc::testing;


TEST_SUITE("model") {

TEST_CASE("target NLL matches the loop oracle on a |V|=8, d=4 model") {
  const ModelConfig cfg = micro_config(8, 4, 1, 2, 12);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const TinyLM m = random_model(cfg, seed);
    Rng rng(seed);
    const TokenSequence prompt = random_tokens(rng, 1 + seed % 4, 8);
    const TokenSequence target = random_tokens(rng, 1 + seed % 3, 8);
    const TargetLoss loss = m.target_nll(prompt, target);
    CHECK(loss.value == doctest::Approx(oracle_target_nll(cfg, m.params(), prompt, target)).epsilon(1e-6));
    double sum = 0;
    for (double t : loss.per_token) sum += t;
    CHECK(std::abs(sum - loss.value) <= 1e-9);
    CHECK(loss.value >= 0.0);

    TokenSequence seq = {1};
    seq.insert(seq.end(), prompt.begin(), prompt.end());
    const Matrix logits = m.logits(seq);
    const auto ref = oracle_logits(cfg, m.params(), seq);
    for (std::size_t r = 0; r < seq.size(); ++r) {
      for (std::size_t v = 0; v < 8; ++v) CHECK(std::abs(logits(r, v) - ref[r][v]) <= 1e-9);
    }
  }
}

TEST_CASE("empty target") {
  const TinyLM m = random_model(micro_config(16, 8), 3);
  const TokenSequence prompt = {4, 5, 6};
  CHECK(m.target_nll(prompt, {}).value == 0.0);
  const Matrix g = m.input_gradients(prompt, {}).grads;
  CHECK(g.rows() == 3);
  for (double v : g.values()) CHECK(v == 0.0);
}

TEST_CASE("input gradients match central finite differences") {
  const ModelConfig cfg = micro_config(16, 8, 1, 2, 16);
  for (std::uint64_t seed = 10; seed < 15; ++seed) {
    const TinyLM m = random_model(cfg, seed);
    Rng rng(seed);
    const TokenSequence prompt = random_tokens(rng, 2 + seed % 4, 16);
    const TokenSequence target = random_tokens(rng, 1 + seed % 3, 16);
    CHECK(gradient_fd_error(m, prompt, target) <= 1e-4);
  }
}

TEST_CASE("gradients of a two-layer model") {
  const TinyLM m = random_model(micro_config(16, 8, 2, 4, 16), 21);
  CHECK(gradient_fd_error(m, {4, 9, 12, 7}, {5, 6}) <= 1e-4);
}

TEST_CASE("gradients depend only on the prompt passed in") {
  const TinyLM m = random_model(micro_config(16, 8), 4);
  const TokenSequence a = {4, 5, 6, 7};
  const TokenSequence b = {4, 5, 9, 7};
  const TokenSequence target = {8, 2};
  const Matrix first = m.input_gradients(a, target).grads;
  (void)m.input_gradients(b, target);
  CHECK(m.input_gradients(a, target).grads == first);
}

TEST_CASE("causal masking is exact") {
  const TinyLM m = random_model(micro_config(16, 8, 2, 2, 16), 5);
  TokenSequence seq = {1, 4, 5, 6, 7, 8, 9, 3};
  const Matrix base = m.logits(seq);
  for (std::size_t i = 1; i < seq.size(); ++i) {
    TokenSequence changed = seq;
    changed[i] = changed[i] == 15 ? 14 : 15;
    const Matrix other = m.logits(changed);
    for (std::size_t r = 0; r < i; ++r) {
      for (std::size_t v = 0; v < 16; ++v) REQUIRE(other(r, v) == base(r, v));
    }
  }
}

TEST_CASE("batched NLL equals one-at-a-time NLL bit for bit") {
  const TinyLM m = random_model(micro_config(16, 8, 2, 2, 16), 6);
  Rng rng(6);
  const TokenSequence target = random_tokens(rng, 3, 16);
  std::vector<TokenSequence> prompts;
  const TokenSequence base = random_tokens(rng, 5, 16);
  for (int k = 0; k < 12; ++k) {
    TokenSequence p = base;
    p[rng.uniform_index(5)] = static_cast<TokenId>(4 + rng.uniform_index(12));
    prompts.push_back(p);
  }
  prompts.push_back(random_tokens(rng, 5, 16));
  const auto batch = m.target_nll_batch(prompts, target);
  for (std::size_t i = 0; i < prompts.size(); ++i) CHECK(batch[i] == m.target_nll(prompts[i], target).value);
}

TEST_CASE("greedy decoding") {
  const TinyLM m = random_model(micro_config(16, 8), 7);
  const TokenSequence prompt = {4, 5, 6};
  CHECK(m.greedy_decode(prompt, 1).size() == 1);
  CHECK(m.greedy_decode(prompt, 6) == m.greedy_decode(prompt, 6));
  CHECK_THROWS(m.greedy_decode(prompt, 0));
  const TokenSequence out = m.greedy_decode(prompt, 6);
  CHECK(m.decodes_to(prompt, out));
  if (out.back() != 2) {
    TokenSequence longer = out;
    longer.push_back(out.front() == 4 ? 5 : 4);
    CHECK_FALSE(m.decodes_to(prompt, longer));
  }
}

TEST_CASE("context overflow is an error") {
  const TinyLM m = random_model(micro_config(16, 8, 1, 2, 8), 8);
  CHECK_THROWS_AS(m.target_nll(TokenSequence(5, 4), TokenSequence(3, 5)), ValidationError);
  CHECK_THROWS_AS(m.input_gradients(TokenSequence(7, 4), TokenSequence(1, 5)), ValidationError);
  CHECK_NOTHROW(m.target_nll(TokenSequence(4, 4), TokenSequence(3, 5)));
}

TEST_CASE("first-token distribution") {
  const TinyLM fresh(ModelConfig{}, 123);
  const TokenSequence prompt = {10, 20, 30, 40};
  const auto dist = fresh.first_token_distribution(prompt);
  double sum = 0, best = 0;
  for (double p : dist) {
    sum += p;
    best = std::max(best, p);
  }
  CHECK(std::abs(sum - 1.0) <= 1e-6);
  CHECK(best < 10.0 / 256.0);
}

TEST_CASE("checkpoint round trip reproduces forward outputs exactly") {
  const Vocab vocab = build_vocab(default_schema());
  TinyLM m = random_model(ModelConfig{}, 9, 0.1);
  m.training_info().seed = 42;
  m.training_info().optimizer = "test";
  const auto path = std::filesystem::temp_directory_path() / "halluc_test_ckpt.json";
  save_checkpoint(path, m, vocab);
  auto [loaded, lv] = load_checkpoint(path);
  CHECK(lv == vocab);
  CHECK(loaded.config() == m.config());
  CHECK(loaded.training_info().seed == 42);
  for (const auto& [name, t] : m.params().named()) {
    bool found = false;
    for (const auto& [n2, t2] : loaded.params().named()) {
      if (n2 == name) {
        found = true;
        CHECK(*t2 == *t);
      }
    }
    CHECK(found);
  }
  const TokenSequence prompt = {10, 20, 30};
  const TokenSequence target = {40, 50, 2};
  CHECK(loaded.target_nll(prompt, target).value == m.target_nll(prompt, target).value);
  CHECK(loaded.input_gradients(prompt, target).grads == m.input_gradients(prompt, target).grads);
  CHECK(checkpoint_to_json(loaded, lv) == checkpoint_to_json(m, vocab));
}

TEST_CASE("checkpoint with a mismatched vocab hash is rejected") {
  const Vocab vocab = build_vocab(default_schema());
  auto j = nlohmann::json::parse(checkpoint_to_json(TinyLM(ModelConfig{}, 1), vocab));
  j["vocab_hash"] = "0000000000000000";
  const std::string text = j.dump();
  CHECK_THROWS_AS(checkpoint_from_json(text), ValidationError);
}

TEST_CASE("training") {
  const Schema schema = default_schema();
  const Vocab vocab = build_vocab(schema);
  const Corpus one = generate_corpus(1, 2, schema, vocab);
  TrainConfig tc;
  tc.seed = 5;
  tc.min_steps = 50;
  tc.max_steps = 400;
  const TrainResult a = train_lm(one, ModelConfig{}, tc);
  CHECK(a.memorization_rate == 1.0);
  CHECK_FALSE(a.below_target);
  CHECK(a.model.greedy_decode(one[0].question, 16) == one[0].truthful_answer);
  const auto dist = a.model.first_token_distribution(one[0].question);
  CHECK(std::max_element(dist.begin(), dist.end()) - dist.begin() == one[0].truthful_answer[0]);

  const TrainResult b = train_lm(one, ModelConfig{}, tc);
  CHECK(a.final_loss == b.final_loss);
  CHECK(a.steps == b.steps);
  CHECK(checkpoint_to_json(a.model, vocab) == checkpoint_to_json(b.model, vocab));
}

TEST_CASE("exhausted training budget is flagged, not thrown") {
  const Schema schema = default_schema();
  const Vocab vocab = build_vocab(schema);
  TrainConfig tc;
  tc.min_steps = 1;
  tc.max_steps = 2;
  tc.eval_every = 1;
  const TrainResult r = train_lm(generate_corpus(24, 1, schema, vocab), ModelConfig{}, tc);
  CHECK(r.below_target);
  CHECK(r.steps == 2);
}

}  // TEST_SUITE
