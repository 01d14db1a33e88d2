#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "halluc/attack.hpp"
#include "halluc/model.hpp"
#include "halluc/rng.hpp"

namespace halluc::testing {

/// Model whose every parameter is redrawn at a scale large enough for
/// non-trivial gradients.
TinyLM random_model(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.5);

ModelConfig micro_config(std::size_t vocab, std::size_t d, std::size_t layers = 1,
                         std::size_t heads = 2, std::size_t context = 16);

/// Uniform tokens from [4, vocab).
TokenSequence random_tokens(Rng& rng, std::size_t n, std::size_t vocab);

/// Largest per-position relative error between input_gradients and central
/// differences (h = 1e-3) over every embedding coordinate.
double gradient_fd_error(const TinyLM& model, const TokenSequence& prompt, const TokenSequence& target);

/// Trace invariants: non-increasing NLL, edit budget, one change per epoch,
/// success implies exact decode. Returns one message per violation.
std::vector<std::string> trace_violations(const LanguageModel& model, const AttackTrace& trace);

}  // namespace halluc::testing
