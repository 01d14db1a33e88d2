#include "halluc/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "halluc/error.hpp"
#include "halluc/rng.hpp"
#include "transformer.hpp"

namespace halluc {

std::vector<double> LanguageModel::target_nll_batch(std::span<const TokenSequence> prompts,
                                                    TokenSpan target) const {
  std::vector<double> out;
  out.reserve(prompts.size());
  for (const auto& p : prompts) out.push_back(target_nll(p, target).value);
  return out;
}

bool LanguageModel::decodes_to(TokenSpan prompt, TokenSpan target) const {
  if (target.empty()) return true;
  const TokenSequence decoded = greedy_decode(prompt, target.size());
  return std::equal(decoded.begin(), decoded.end(), target.begin(), target.end());
}

void ModelConfig::validate() const {
  if (vocab_size < 5) throw ValidationError("model: vocab_size must be at least 5");
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0) {
    throw ValidationError("model: dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw ValidationError("model: d_model must be divisible by n_heads");
  if (context < 3) throw ValidationError("model: context must be at least 3");
}

Params Params::zeros(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model;
  Params p;
  p.tok_emb.reset(cfg.vocab_size, d);
  p.pos_emb.reset(cfg.context, d);
  p.layers.resize(cfg.n_layers);
  for (auto& l : p.layers) {
    l.ln1_gain.reset(1, d);
    l.ln1_bias.reset(1, d);
    l.w_qkv.reset(d, 3 * d);
    l.b_qkv.reset(1, 3 * d);
    l.w_proj.reset(d, d);
    l.b_proj.reset(1, d);
    l.ln2_gain.reset(1, d);
    l.ln2_bias.reset(1, d);
    l.w_ff1.reset(d, cfg.d_ff);
    l.b_ff1.reset(1, cfg.d_ff);
    l.w_ff2.reset(cfg.d_ff, d);
    l.b_ff2.reset(1, d);
  }
  p.lnf_gain.reset(1, d);
  p.lnf_bias.reset(1, d);
  p.w_out.reset(d, cfg.vocab_size);
  p.b_out.reset(1, cfg.vocab_size);
  return p;
}

std::vector<std::pair<std::string, Matrix*>> Params::named() {
  std::vector<std::pair<std::string, Matrix*>> out = {{"tok_emb", &tok_emb}, {"pos_emb", &pos_emb}};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    const std::string pre = "layers." + std::to_string(i) + ".";
    out.insert(out.end(), {{pre + "ln1_gain", &l.ln1_gain},
                           {pre + "ln1_bias", &l.ln1_bias},
                           {pre + "w_qkv", &l.w_qkv},
                           {pre + "b_qkv", &l.b_qkv},
                           {pre + "w_proj", &l.w_proj},
                           {pre + "b_proj", &l.b_proj},
                           {pre + "ln2_gain", &l.ln2_gain},
                           {pre + "ln2_bias", &l.ln2_bias},
                           {pre + "w_ff1", &l.w_ff1},
                           {pre + "b_ff1", &l.b_ff1},
                           {pre + "w_ff2", &l.w_ff2},
                           {pre + "b_ff2", &l.b_ff2}});
  }
  out.insert(out.end(),
             {{"lnf_gain", &lnf_gain}, {"lnf_bias", &lnf_bias}, {"w_out", &w_out}, {"b_out", &b_out}});
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> Params::named() const {
  auto mut = const_cast<Params*>(this)->named();
  std::vector<std::pair<std::string, const Matrix*>> out;
  out.reserve(mut.size());
  for (auto& [name, m] : mut) out.emplace_back(std::move(name), m);
  return out;
}

TinyLM::TinyLM(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  params_ = Params::zeros(cfg_);
  Rng rng(init_seed);
  auto init = [&](Matrix& m, double stddev) {
    for (double& v : m.values()) v = rng.normal(0.0, stddev);
  };
  const double resid_std = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
  init(params_.tok_emb, 0.02);
  init(params_.pos_emb, 0.01);
  for (auto& l : params_.layers) {
    l.ln1_gain.fill(1.0);
    l.ln2_gain.fill(1.0);
    init(l.w_qkv, 0.02);
    init(l.w_proj, resid_std);
    init(l.w_ff1, 0.02);
    init(l.w_ff2, resid_std);
  }
  params_.lnf_gain.fill(1.0);
  init(params_.w_out, 0.02);
  info_.seed = init_seed;
}

TinyLM::TinyLM(const ModelConfig& cfg, Params params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  const Params shape = Params::zeros(cfg_);
  const auto want = shape.named();
  const auto got = params_.named();
  if (want.size() != got.size()) throw ValidationError("model: parameter count mismatch");
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (want[i].second->rows() != got[i].second->rows() || want[i].second->cols() != got[i].second->cols()) {
      throw ValidationError("model: tensor '" + want[i].first + "' has the wrong shape");
    }
  }
}

TokenSequence TinyLM::build_input(TokenSpan prompt, TokenSpan target) const {
  TokenSequence seq;
  seq.reserve(prompt.size() + target.size() + 2);
  seq.push_back(special_.bos);
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  seq.push_back(special_.sep);
  if (!target.empty()) seq.insert(seq.end(), target.begin(), target.end() - 1);
  if (seq.size() > cfg_.context) {
    throw ValidationError("context overflow: prompt of " + std::to_string(prompt.size()) +
                          " tokens plus target of " + std::to_string(target.size()) +
                          " tokens does not fit context " + std::to_string(cfg_.context));
  }
  for (TokenId t : seq) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab_size) {
      throw ValidationError("token id " + std::to_string(t) + " outside vocabulary");
    }
  }
  return seq;
}

namespace {

std::vector<std::size_t> target_rows(std::size_t prompt_len, std::size_t target_len) {
  std::vector<std::size_t> rows(target_len);
  for (std::size_t t = 0; t < target_len; ++t) rows[t] = prompt_len + 1 + t;
  return rows;
}

TokenId argmax_lowest(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t v = 1; v < row.size(); ++v) {
    if (row[v] > row[best]) best = v;
  }
  return static_cast<TokenId>(best);
}

}  // namespace

TargetLoss TinyLM::target_nll(TokenSpan prompt, TokenSpan target) const {
  TargetLoss loss;
  const TokenSequence input = build_input(prompt, target);
  if (target.empty()) return loss;
  detail::InferState st;
  detail::infer(cfg_, params_, input, {}, 0, st);
  const auto rows = target_rows(prompt.size(), target.size());
  loss.value = detail::head_nll(params_, st.hidden, rows, target, 1.0, &loss.per_token, nullptr, nullptr);
  return loss;
}

double TinyLM::target_nll_perturbed(TokenSpan prompt, TokenSpan target, const Matrix& offsets) const {
  if (offsets.rows() != prompt.size() || offsets.cols() != cfg_.d_model) {
    throw std::invalid_argument("target_nll_perturbed: offsets must be prompt_len x d_model");
  }
  const TokenSequence input = build_input(prompt, target);
  if (target.empty()) return 0.0;
  detail::InferState st;
  detail::infer(cfg_, params_, input, {&offsets, 1}, 0, st);
  const auto rows = target_rows(prompt.size(), target.size());
  return detail::head_nll(params_, st.hidden, rows, target, 1.0, nullptr, nullptr, nullptr);
}

std::vector<double> TinyLM::target_nll_batch(std::span<const TokenSequence> prompts,
                                             TokenSpan target) const {
  std::vector<double> out;
  if (prompts.empty()) return out;
  const std::size_t l = prompts.front().size();
  const bool same_length = std::all_of(prompts.begin(), prompts.end(),
                                       [&](const TokenSequence& p) { return p.size() == l; });
  if (!same_length || target.empty()) return LanguageModel::target_nll_batch(prompts, target);

  // Most candidates share a long prefix with the per-position majority prompt;
  // rows before the first difference are reused from its cached keys/values.
  TokenSequence reference(l);
  for (std::size_t i = 0; i < l; ++i) {
    std::map<TokenId, std::size_t> counts;
    for (const auto& p : prompts) ++counts[p[i]];
    reference[i] = std::max_element(counts.begin(), counts.end(), [](const auto& a, const auto& b) {
                     return a.second < b.second;
                   })->first;
  }
  const auto rows = target_rows(l, target.size());
  detail::InferState ref_state;
  detail::infer(cfg_, params_, build_input(reference, target), {}, 0, ref_state);

  out.reserve(prompts.size());
  detail::InferState st;
  for (const auto& p : prompts) {
    const auto diff = std::mismatch(p.begin(), p.end(), reference.begin()).first;
    const TokenSequence input = build_input(p, target);
    if (diff == p.end()) {
      out.push_back(detail::head_nll(params_, ref_state.hidden, rows, target, 1.0, nullptr, nullptr, nullptr));
      continue;
    }
    st = ref_state;
    const auto first_row = static_cast<std::size_t>(diff - p.begin()) + 1;
    detail::infer(cfg_, params_, input, {}, first_row, st);
    out.push_back(detail::head_nll(params_, st.hidden, rows, target, 1.0, nullptr, nullptr, nullptr));
  }
  return out;
}

InputGradients TinyLM::input_gradients(TokenSpan prompt, TokenSpan target) const {
  InputGradients g;
  g.grads.reset(prompt.size(), cfg_.d_model);
  const TokenSequence input = build_input(prompt, target);
  if (target.empty()) return g;
  detail::ForwardCache cache;
  detail::forward(cfg_, params_, input, {}, cache);
  Matrix d_hidden(input.size(), cfg_.d_model);
  const auto rows = target_rows(prompt.size(), target.size());
  detail::head_nll(params_, cache.hidden, rows, target, 1.0, nullptr, &d_hidden, nullptr);
  Matrix d_x0;
  detail::backward(cfg_, params_, input, cache, d_hidden, nullptr, &d_x0);
  // d_x0 is the gradient of the NLL; the attack scores use log-likelihood.
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    for (std::size_t c = 0; c < cfg_.d_model; ++c) g.grads(i, c) = -d_x0(i + 1, c);
  }
  return g;
}

TokenSequence TinyLM::greedy_decode(TokenSpan prompt, std::size_t max_len) const {
  if (max_len == 0) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
  TokenSequence seq = build_input(prompt, {});
  TokenSequence out;
  detail::InferState st;
  while (out.size() < max_len) {
    detail::infer(cfg_, params_, seq, {}, 0, st);
    const std::size_t last = seq.size() - 1;
    const Matrix logits = detail::head_logits(params_, st.hidden, std::span<const std::size_t>(&last, 1));
    const TokenId next = argmax_lowest(logits.row(0));
    out.push_back(next);
    if (next == special_.eos || seq.size() == cfg_.context) break;
    seq.push_back(next);
  }
  return out;
}

bool TinyLM::decodes_to(TokenSpan prompt, TokenSpan target) const {
  if (target.empty()) return true;
  for (std::size_t t = 0; t + 1 < target.size(); ++t) {
    if (target[t] == special_.eos) return false;
  }
  const TokenSequence input = build_input(prompt, target);
  detail::InferState st;
  detail::infer(cfg_, params_, input, {}, 0, st);
  const auto rows = target_rows(prompt.size(), target.size());
  const Matrix logits = detail::head_logits(params_, st.hidden, rows);
  for (std::size_t t = 0; t < target.size(); ++t) {
    if (argmax_lowest(logits.row(t)) != target[t]) return false;
  }
  return true;
}

std::vector<double> TinyLM::first_token_distribution(TokenSpan prompt) const {
  const TokenSequence input = build_input(prompt, {});
  detail::InferState st;
  detail::infer(cfg_, params_, input, {}, 0, st);
  const std::size_t last = input.size() - 1;
  const Matrix logits = detail::head_logits(params_, st.hidden, std::span<const std::size_t>(&last, 1));
  const auto z = logits.row(0);
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double sum = 0.0;
  for (std::size_t v = 0; v < z.size(); ++v) {
    p[v] = std::exp(z[v] - mx);
    sum += p[v];
  }
  for (double& x : p) x /= sum;
  return p;
}

Matrix TinyLM::logits(TokenSpan sequence) const {
  detail::InferState st;
  detail::infer(cfg_, params_, sequence, {}, 0, st);
  std::vector<std::size_t> rows(sequence.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return detail::head_logits(params_, st.hidden, rows);
}

double TinyLM::sequence_loss_and_grad(TokenSpan sequence, Params& grads, double weight) const {
  if (sequence.size() < 2) throw std::invalid_argument("sequence_loss_and_grad: need at least 2 tokens");
  const TokenSpan input = sequence.first(sequence.size() - 1);
  detail::ForwardCache cache;
  detail::forward(cfg_, params_, input, {}, cache);
  std::vector<std::size_t> rows(input.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  const double mean = 1.0 / static_cast<double>(rows.size());
  Matrix d_hidden(input.size(), cfg_.d_model);
  const double total = detail::head_nll(params_, cache.hidden, rows, sequence.subspan(1), weight * mean,
                                        nullptr, &d_hidden, &grads);
  detail::backward(cfg_, params_, input, cache, d_hidden, &grads, nullptr);
  return total * mean;
}

}  // namespace halluc
