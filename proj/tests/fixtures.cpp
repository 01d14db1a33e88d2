#include "fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace halluc::testing {

TinyLM random_model(const ModelConfig& cfg, std::uint64_t seed, double scale) {
  TinyLM model(cfg, seed);
  Rng rng(seed ^ 0x5eedULL);
  for (auto& [name, m] : model.mutable_params().named()) {
    const bool gain = name.find("gain") != std::string::npos;
    for (double& v : m->values()) v = gain ? 1.0 + rng.normal(0.0, 0.2) : rng.normal(0.0, scale);
  }
  return model;
}

ModelConfig micro_config(std::size_t vocab, std::size_t d, std::size_t layers, std::size_t heads,
                         std::size_t context) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = d;
  cfg.n_layers = layers;
  cfg.n_heads = heads;
  cfg.context = context;
  cfg.d_ff = 2 * d;
  return cfg;
}

TokenSequence random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  TokenSequence out(n);
  for (auto& t : out) t = static_cast<TokenId>(4 + rng.uniform_index(vocab - 4));
  return out;
}

double gradient_fd_error(const TinyLM& model, const TokenSequence& prompt, const TokenSequence& target) {
  const double h = 1e-3;
  const Matrix g = model.input_gradients(prompt, target).grads;
  const std::size_t d = model.config().d_model;
  double worst = 0.0;
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    double diff = 0, ga = 0, gf = 0;
    for (std::size_t c = 0; c < d; ++c) {
      Matrix off(prompt.size(), d);
      off(i, c) = h;
      const double up = model.target_nll_perturbed(prompt, target, off);
      off(i, c) = -h;
      const double down = model.target_nll_perturbed(prompt, target, off);
      const double fd = -(up - down) / (2 * h);
      diff += (g(i, c) - fd) * (g(i, c) - fd);
      ga += g(i, c) * g(i, c);
      gf += fd * fd;
    }
    const double scale = std::max({std::sqrt(ga), std::sqrt(gf), 1e-12});
    worst = std::max(worst, std::sqrt(diff) / scale);
  }
  return worst;
}

std::vector<std::string> trace_violations(const LanguageModel& model, const AttackTrace& trace) {
  std::vector<std::string> out;
  auto fail = [&](std::size_t epoch, const std::string& what) {
    std::ostringstream s;
    s << "epoch " << epoch << ": " << what;
    out.push_back(s.str());
  };
  const bool weak = trace.config.mode == AttackMode::weak_semantic;
  const auto& r = trace.records;
  if (r.empty()) {
    out.push_back("empty trace");
    return out;
  }
  for (std::size_t e = 0; e < r.size(); ++e) {
    if (weak && hamming(r[e].prompt, trace.original) > trace.edit_budget) fail(e, "edit budget exceeded");
    if (e == 0) continue;
    if (!trace.config.allow_regression && r[e].nll > r[e - 1].nll) fail(e, "nll increased");
    if (hamming(r[e].prompt, r[e - 1].prompt) > 1) fail(e, "more than one position changed");
  }
  if (trace.final_prompt != r.back().prompt) out.push_back("final prompt differs from last record");
  if (trace.success && model.greedy_decode(trace.final_prompt, trace.target.size()) != trace.target) {
    out.push_back("success without exact decode");
  }
  return out;
}

}  // namespace halluc::testing
