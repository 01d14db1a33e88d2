#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "halluc/corpus.hpp"
#include "halluc/matrix.hpp"
#include "halluc/vocab.hpp"

namespace halluc {

/// Negative log-likelihood (nats) of a target answer given a prompt, summed
/// over target tokens with teacher forcing.
struct TargetLoss {
  double value = 0.0;
  std::vector<double> per_token;
};

/// Row i is the gradient of log p(target | prompt) with respect to the
/// embedding of prompt position i (taken before positional encodings are added).
struct InputGradients {
  Matrix grads;
};

/// What the attack and the defense need from a language model. Inputs are laid
/// out as "<bos> prompt <sep> answer <eos>" and only the prompt is optimized.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t context_length() const = 0;
  virtual const SpecialTokens& special() const = 0;

  /// |V| x d token embedding table.
  virtual const Matrix& embedding_table() const = 0;

  virtual TargetLoss target_nll(TokenSpan prompt, TokenSpan target) const = 0;

  /// Total NLL for several equal-role prompts against one target. The default
  /// evaluates them one at a time.
  virtual std::vector<double> target_nll_batch(std::span<const TokenSequence> prompts,
                                               TokenSpan target) const;

  virtual InputGradients input_gradients(TokenSpan prompt, TokenSpan target) const = 0;

  /// Argmax decoding after "<bos> prompt <sep>" until <eos> (included in the
  /// result) or max_len tokens; ties go to the lowest token id.
  virtual TokenSequence greedy_decode(TokenSpan prompt, std::size_t max_len) const = 0;

  /// Softmax of the logits at the first answer position.
  virtual std::vector<double> first_token_distribution(TokenSpan prompt) const = 0;

  /// Equivalent to greedy_decode(prompt, target.size()) == target.
  virtual bool decodes_to(TokenSpan prompt, TokenSpan target) const;
};

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t context = 64;
  std::size_t d_ff = 256;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Matrix ln1_gain, ln1_bias;
  Matrix w_qkv, b_qkv;
  Matrix w_proj, b_proj;
  Matrix ln2_gain, ln2_bias;
  Matrix w_ff1, b_ff1;
  Matrix w_ff2, b_ff2;
};

struct Params {
  Matrix tok_emb;  // vocab x d
  Matrix pos_emb;  // context x d
  std::vector<LayerParams> layers;
  Matrix lnf_gain, lnf_bias;
  Matrix w_out, b_out;  // d x vocab, 1 x vocab

  static Params zeros(const ModelConfig& cfg);

  /// Every tensor with a stable name, in serialization order.
  std::vector<std::pair<std::string, Matrix*>> named();
  std::vector<std::pair<std::string, const Matrix*>> named() const;
};

/// Provenance stored alongside the weights.
struct TrainingInfo {
  std::uint64_t seed = 0;
  std::string optimizer;
  std::string schedule;
  std::string corpus_digest;  // set by callers that trained from a file
  std::size_t steps = 0;
  double final_loss = 0.0;
  double memorization_rate = 0.0;
};

/// Pre-LayerNorm decoder-only transformer with learned positional embeddings,
/// causal multi-head attention, and a GELU feed-forward block.
class TinyLM final : public LanguageModel {
 public:
  TinyLM(const ModelConfig& cfg, std::uint64_t init_seed);
  TinyLM(const ModelConfig& cfg, Params params);

  const ModelConfig& config() const { return cfg_; }
  const Params& params() const { return params_; }
  Params& mutable_params() { return params_; }
  TrainingInfo& training_info() { return info_; }
  const TrainingInfo& training_info() const { return info_; }

  std::size_t vocab_size() const override { return cfg_.vocab_size; }
  std::size_t context_length() const override { return cfg_.context; }
  const SpecialTokens& special() const override { return special_; }
  const Matrix& embedding_table() const override { return params_.tok_emb; }

  TargetLoss target_nll(TokenSpan prompt, TokenSpan target) const override;
  std::vector<double> target_nll_batch(std::span<const TokenSequence> prompts,
                                       TokenSpan target) const override;
  InputGradients input_gradients(TokenSpan prompt, TokenSpan target) const override;
  TokenSequence greedy_decode(TokenSpan prompt, std::size_t max_len) const override;
  std::vector<double> first_token_distribution(TokenSpan prompt) const override;
  bool decodes_to(TokenSpan prompt, TokenSpan target) const override;

  /// NLL with `offsets` (prompt.size() x d) added to the prompt embeddings;
  /// the finite-difference counterpart of input_gradients.
  double target_nll_perturbed(TokenSpan prompt, TokenSpan target, const Matrix& offsets) const;

  /// Logits for every position of a raw token sequence (no template applied).
  Matrix logits(TokenSpan sequence) const;

  /// Mean next-token NLL over a raw sequence; `weight` times its parameter
  /// gradient is accumulated into `grads`.
  double sequence_loss_and_grad(TokenSpan sequence, Params& grads, double weight = 1.0) const;

 private:
  TokenSequence build_input(TokenSpan prompt, TokenSpan target) const;

  ModelConfig cfg_;
  Params params_;
  SpecialTokens special_;
  TrainingInfo info_;
};

struct TrainConfig {
  std::size_t max_steps = 1500;
  std::size_t min_steps = 200;
  std::size_t eval_every = 25;
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double target_rate = 0.95;
  std::uint64_t seed = 0;
};

struct TrainResult {
  TinyLM model;
  double memorization_rate = 0.0;
  double final_loss = 0.0;
  std::size_t steps = 0;
  bool below_target = false;  // budget ran out before reaching target_rate
};

/// Full-batch Adam on "<bos> question <sep> truthful_answer" sequences until the
/// memorization rate reaches target_rate (after min_steps) or max_steps.
TrainResult train_lm(const Corpus& corpus, const ModelConfig& model_cfg, const TrainConfig& cfg);

/// Fraction of questions whose greedy decode equals the truthful answer.
double memorization_rate(const LanguageModel& model, const Corpus& corpus);

std::string checkpoint_to_json(const TinyLM& model, const Vocab& vocab);
std::pair<TinyLM, Vocab> checkpoint_from_json(std::string_view text);
void save_checkpoint(const std::filesystem::path& path, const TinyLM& model, const Vocab& vocab);
std::pair<TinyLM, Vocab> load_checkpoint(const std::filesystem::path& path);

}  // namespace halluc
