#include <benchmark/benchmark.h>

#include "halluc/attack.hpp"
#include "halluc/model.hpp"
#include "halluc/rng.hpp"

using namespace halluc;

namespace {

const TinyLM& model() {
  static const TinyLM m(ModelConfig{}, 17);
  return m;
}

TokenSequence tokens(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  TokenSequence t(n);
  for (auto& x : t) x = static_cast<TokenId>(4 + rng.uniform_index(252));
  return t;
}

void BM_TargetNll(benchmark::State& state) {
  const auto prompt = tokens(static_cast<std::size_t>(state.range(0)), 1);
  const auto target = tokens(5, 2);
  for (auto _ : state) benchmark::DoNotOptimize(model().target_nll(prompt, target).value);
}
BENCHMARK(BM_TargetNll)->Arg(6)->Arg(20)->Arg(30);

void BM_InputGradients(benchmark::State& state) {
  const auto prompt = tokens(static_cast<std::size_t>(state.range(0)), 3);
  const auto target = tokens(5, 4);
  for (auto _ : state) benchmark::DoNotOptimize(model().input_gradients(prompt, target).grads.data());
}
BENCHMARK(BM_InputGradients)->Arg(6)->Arg(20);

void BM_BatchNll(benchmark::State& state) {
  const auto base = tokens(20, 5);
  const auto target = tokens(5, 6);
  Rng rng(7);
  std::vector<TokenSequence> batch;
  for (int i = 0; i < state.range(0); ++i) {
    TokenSequence p = base;
    p[rng.uniform_index(p.size())] = static_cast<TokenId>(4 + rng.uniform_index(252));
    batch.push_back(p);
  }
  for (auto _ : state) benchmark::DoNotOptimize(model().target_nll_batch(batch, target).data());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_BatchNll)->Arg(129);

void BM_AttackEpoch(benchmark::State& state) {
  QAPair pair;
  pair.question = tokens(static_cast<std::size_t>(state.range(0)), 8);
  pair.truthful_answer = {10, 2};
  pair.hallucinated_answer = tokens(4, 9);
  pair.hallucinated_answer.push_back(2);
  AttackConfig cfg = AttackConfig::defaults(AttackMode::ood);
  cfg.prompt_length = static_cast<std::size_t>(state.range(0));
  cfg.epochs = 1;
  for (auto _ : state) benchmark::DoNotOptimize(run_attack(model(), pair, cfg).records.size());
}
BENCHMARK(BM_AttackEpoch)->Arg(10)->Arg(20)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
