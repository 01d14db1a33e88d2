#pragma once

// Forward and backward passes of the TinyLM transformer. Two forward variants
// share the same per-row primitives: a caching pass used for gradients, and an
// inference pass that can resume from a row using cached keys and values.

#include <vector>

#include "halluc/matrix.hpp"
#include "halluc/model.hpp"

namespace halluc::detail {

struct LayerCache {
  Matrix x_in;
  Matrix ln1_hat;
  std::vector<double> ln1_rstd;
  Matrix ln1_out;
  Matrix qkv;
  std::vector<Matrix> probs;  // per head, T x T, lower triangular
  Matrix attn;
  Matrix resid;
  Matrix ln2_hat;
  std::vector<double> ln2_rstd;
  Matrix ln2_out;
  Matrix ff_pre;
  Matrix ff_act;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Matrix x_final;
  Matrix lnf_hat;
  std::vector<double> lnf_rstd;
  Matrix hidden;  // final normalized hidden states, T x d
};

/// Keys/values per layer plus final hidden states; enough to resume inference
/// from any row with the rows before it unchanged.
struct InferState {
  std::vector<Matrix> qkv;
  Matrix hidden;
};

/// `offsets`, when given, is added to the embeddings of rows
/// [offset_row, offset_row + offsets.rows()).
struct EmbeddingOffsets {
  const Matrix* offsets = nullptr;
  std::size_t first_row = 0;
};

void forward(const ModelConfig& cfg, const Params& p, TokenSpan tokens, EmbeddingOffsets off,
             ForwardCache& cache);

/// Backpropagates d_hidden (T x d). Parameter gradients are accumulated into
/// `grads` when non-null; the embedding-output gradient is written to `d_x0`
/// when non-null.
void backward(const ModelConfig& cfg, const Params& p, TokenSpan tokens, const ForwardCache& cache,
              const Matrix& d_hidden, Params* grads, Matrix* d_x0);

/// Recomputes rows >= row_begin. Rows below row_begin of `state` must hold the
/// values for the same token prefix.
void infer(const ModelConfig& cfg, const Params& p, TokenSpan tokens, EmbeddingOffsets off,
           std::size_t row_begin, InferState& state);

/// Summed NLL of labels[i] at hidden row rows[i]. When d_hidden is non-null the
/// gradient of scale * NLL is accumulated into it (and into grads if non-null).
double head_nll(const Params& p, const Matrix& hidden, std::span<const std::size_t> rows,
                std::span<const TokenId> labels, double scale, std::vector<double>* per_token,
                Matrix* d_hidden, Params* grads);

/// Logits for the given hidden rows, one output row each.
Matrix head_logits(const Params& p, const Matrix& hidden, std::span<const std::size_t> rows);

}  // namespace halluc::detail
