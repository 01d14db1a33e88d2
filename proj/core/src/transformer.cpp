#include "transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace halluc::detail {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluCoeff = 0.044715;
const double kGeluScale = std::sqrt(2.0 / std::numbers::pi);

// y = gain * (x - mean) / sqrt(var + eps) + bias
void layer_norm_row(const double* x, const Matrix& gain, const Matrix& bias, std::size_t d,
                    double* out, double* hat, double* rstd_out) {
  double mean = 0.0;
  for (std::size_t c = 0; c < d; ++c) mean += x[c];
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    const double t = x[c] - mean;
    var += t * t;
  }
  var /= static_cast<double>(d);
  const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::size_t c = 0; c < d; ++c) {
    const double h = (x[c] - mean) * rstd;
    if (hat) hat[c] = h;
    out[c] = h * gain.data()[c] + bias.data()[c];
  }
  if (rstd_out) *rstd_out = rstd;
}

void layer_norm_backward_row(const double* dy, const double* hat, double rstd, const Matrix& gain,
                             std::size_t d, double* dx_acc, Matrix* dgain, Matrix* dbias) {
  double mean_dhat = 0.0;
  double mean_dhat_hat = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    const double dh = dy[c] * gain.data()[c];
    mean_dhat += dh;
    mean_dhat_hat += dh * hat[c];
    if (dgain) dgain->data()[c] += dy[c] * hat[c];
    if (dbias) dbias->data()[c] += dy[c];
  }
  mean_dhat /= static_cast<double>(d);
  mean_dhat_hat /= static_cast<double>(d);
  for (std::size_t c = 0; c < d; ++c) {
    const double dh = dy[c] * gain.data()[c];
    dx_acc[c] += rstd * (dh - mean_dhat - hat[c] * mean_dhat_hat);
  }
}

// 0.5 * (1 + tanh(z)) in logistic form.
double gelu_half(double u) {
  const double z = kGeluScale * (u + kGeluCoeff * u * u * u);
  return 1.0 / (1.0 + std::exp(-2.0 * z));
}

double gelu(double u) { return u * gelu_half(u); }

double gelu_grad(double u) {
  const double s = gelu_half(u);
  return s + 2.0 * u * s * (1.0 - s) * kGeluScale * (1.0 + 3.0 * kGeluCoeff * u * u);
}

// Causal attention output for query row i of one head; probs (length i + 1)
// receives the attention weights when non-null.
void attention_row(const Matrix& qkv, std::size_t i, std::size_t head, std::size_t d,
                   std::size_t dh, double* out, double* probs, std::vector<double>& scratch) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* q = qkv.data() + i * qkv.cols() + head * dh;
  scratch.resize(i + 1);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j <= i; ++j) {
    const double* k = qkv.data() + j * qkv.cols() + d + head * dh;
    double s = 0.0;
    for (std::size_t c = 0; c < dh; ++c) s += q[c] * k[c];
    s *= scale;
    scratch[j] = s;
    mx = std::max(mx, s);
  }
  double z = 0.0;
  for (std::size_t j = 0; j <= i; ++j) {
    scratch[j] = std::exp(scratch[j] - mx);
    z += scratch[j];
  }
  std::fill(out, out + dh, 0.0);
  for (std::size_t j = 0; j <= i; ++j) {
    const double w = scratch[j] / z;
    if (probs) probs[j] = w;
    const double* v = qkv.data() + j * qkv.cols() + 2 * d + head * dh;
    for (std::size_t c = 0; c < dh; ++c) out[c] += w * v[c];
  }
}

void embed_rows(const ModelConfig& cfg, const Params& p, TokenSpan tokens, EmbeddingOffsets off,
                std::size_t row_begin, Matrix& x) {
  const std::size_t d = cfg.d_model;
  for (std::size_t r = row_begin; r < tokens.size(); ++r) {
    const auto tok = static_cast<std::size_t>(tokens[r]);
    if (tokens[r] < 0 || tok >= cfg.vocab_size) throw std::out_of_range("token id outside vocabulary");
    const double* e = p.tok_emb.data() + tok * d;
    const double* pe = p.pos_emb.data() + r * d;
    double* xr = x.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) xr[c] = e[c];
    if (off.offsets && r >= off.first_row && r < off.first_row + off.offsets->rows()) {
      const double* o = off.offsets->data() + (r - off.first_row) * d;
      for (std::size_t c = 0; c < d; ++c) xr[c] += o[c];
    }
    for (std::size_t c = 0; c < d; ++c) xr[c] += pe[c];
  }
}

void check_length(const ModelConfig& cfg, TokenSpan tokens) {
  if (tokens.empty()) throw std::invalid_argument("empty input sequence");
  if (tokens.size() > cfg.context) {
    throw std::length_error("sequence of length " + std::to_string(tokens.size()) +
                            " exceeds context " + std::to_string(cfg.context));
  }
}

}  // namespace

void forward(const ModelConfig& cfg, const Params& p, TokenSpan tokens, EmbeddingOffsets off,
             ForwardCache& cache) {
  check_length(cfg, tokens);
  const std::size_t T = tokens.size();
  const std::size_t d = cfg.d_model;
  const std::size_t H = cfg.n_heads;
  const std::size_t dh = d / H;
  std::vector<double> scratch;

  Matrix x(T, d);
  embed_rows(cfg, p, tokens, off, 0, x);
  cache.layers.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = p.layers[l];
    LayerCache& lc = cache.layers[l];
    lc.x_in = x;
    lc.ln1_hat.reset(T, d);
    lc.ln1_out.reset(T, d);
    lc.ln1_rstd.assign(T, 0.0);
    for (std::size_t r = 0; r < T; ++r) {
      layer_norm_row(x.data() + r * d, lp.ln1_gain, lp.ln1_bias, d, lc.ln1_out.data() + r * d,
                     lc.ln1_hat.data() + r * d, &lc.ln1_rstd[r]);
    }
    matmul(lc.ln1_out, lp.w_qkv, &lp.b_qkv, lc.qkv);
    lc.attn.reset(T, d);
    lc.probs.assign(H, Matrix(T, T));
    for (std::size_t r = 0; r < T; ++r) {
      for (std::size_t h = 0; h < H; ++h) {
        attention_row(lc.qkv, r, h, d, dh, lc.attn.data() + r * d + h * dh,
                      lc.probs[h].data() + r * T, scratch);
      }
    }
    Matrix proj;
    matmul(lc.attn, lp.w_proj, &lp.b_proj, proj);
    lc.resid = lc.x_in;
    for (std::size_t i = 0; i < lc.resid.size(); ++i) lc.resid.data()[i] += proj.data()[i];

    lc.ln2_hat.reset(T, d);
    lc.ln2_out.reset(T, d);
    lc.ln2_rstd.assign(T, 0.0);
    for (std::size_t r = 0; r < T; ++r) {
      layer_norm_row(lc.resid.data() + r * d, lp.ln2_gain, lp.ln2_bias, d, lc.ln2_out.data() + r * d,
                     lc.ln2_hat.data() + r * d, &lc.ln2_rstd[r]);
    }
    matmul(lc.ln2_out, lp.w_ff1, &lp.b_ff1, lc.ff_pre);
    lc.ff_act.reset(T, cfg.d_ff);
    for (std::size_t i = 0; i < lc.ff_pre.size(); ++i) lc.ff_act.data()[i] = gelu(lc.ff_pre.data()[i]);
    Matrix ff_out;
    matmul(lc.ff_act, lp.w_ff2, &lp.b_ff2, ff_out);
    x = lc.resid;
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += ff_out.data()[i];
  }
  cache.x_final = x;
  cache.lnf_hat.reset(T, d);
  cache.hidden.reset(T, d);
  cache.lnf_rstd.assign(T, 0.0);
  for (std::size_t r = 0; r < T; ++r) {
    layer_norm_row(x.data() + r * d, p.lnf_gain, p.lnf_bias, d, cache.hidden.data() + r * d,
                   cache.lnf_hat.data() + r * d, &cache.lnf_rstd[r]);
  }
}

void backward(const ModelConfig& cfg, const Params& p, TokenSpan tokens, const ForwardCache& cache,
              const Matrix& d_hidden, Params* grads, Matrix* d_x0) {
  const std::size_t T = tokens.size();
  const std::size_t d = cfg.d_model;
  const std::size_t H = cfg.n_heads;
  const std::size_t dh = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix dx(T, d);
  for (std::size_t r = 0; r < T; ++r) {
    layer_norm_backward_row(d_hidden.data() + r * d, cache.lnf_hat.data() + r * d, cache.lnf_rstd[r],
                            p.lnf_gain, d, dx.data() + r * d, grads ? &grads->lnf_gain : nullptr,
                            grads ? &grads->lnf_bias : nullptr);
  }

  Matrix tmp;
  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const LayerParams& lp = p.layers[li];
    const LayerCache& lc = cache.layers[li];
    LayerParams* lg = grads ? &grads->layers[li] : nullptr;

    // Feed-forward block: x = resid + W2 gelu(W1 ln2(resid))
    const Matrix& d_ff_out = dx;
    if (lg) {
      matmul_tn_acc(lc.ff_act, d_ff_out, lg->w_ff2);
      add_colsum(d_ff_out, lg->b_ff2);
    }
    Matrix d_act;
    matmul_nt(d_ff_out, lp.w_ff2, d_act);
    for (std::size_t i = 0; i < d_act.size(); ++i) d_act.data()[i] *= gelu_grad(lc.ff_pre.data()[i]);
    if (lg) {
      matmul_tn_acc(lc.ln2_out, d_act, lg->w_ff1);
      add_colsum(d_act, lg->b_ff1);
    }
    Matrix d_ln2;
    matmul_nt(d_act, lp.w_ff1, d_ln2);
    Matrix d_resid = dx;
    for (std::size_t r = 0; r < T; ++r) {
      layer_norm_backward_row(d_ln2.data() + r * d, lc.ln2_hat.data() + r * d, lc.ln2_rstd[r],
                              lp.ln2_gain, d, d_resid.data() + r * d, lg ? &lg->ln2_gain : nullptr,
                              lg ? &lg->ln2_bias : nullptr);
    }

    // Attention block: resid = x_in + Wp attn(ln1(x_in))
    if (lg) {
      matmul_tn_acc(lc.attn, d_resid, lg->w_proj);
      add_colsum(d_resid, lg->b_proj);
    }
    Matrix d_attn;
    matmul_nt(d_resid, lp.w_proj, d_attn);
    Matrix d_qkv(T, 3 * d);
    std::vector<double> dp(T);
    for (std::size_t h = 0; h < H; ++h) {
      const Matrix& P = lc.probs[h];
      for (std::size_t i = 0; i < T; ++i) {
        const double* dout = d_attn.data() + i * d + h * dh;
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* v = lc.qkv.data() + j * 3 * d + 2 * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += dout[c] * v[c];
          dp[j] = s;
          dot += P(i, j) * s;
          double* dv = d_qkv.data() + j * 3 * d + 2 * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) dv[c] += P(i, j) * dout[c];
        }
        const double* q = lc.qkv.data() + i * 3 * d + h * dh;
        double* dq = d_qkv.data() + i * 3 * d + h * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = P(i, j) * (dp[j] - dot) * scale;
          if (ds == 0.0) continue;
          const double* k = lc.qkv.data() + j * 3 * d + d + h * dh;
          double* dk = d_qkv.data() + j * 3 * d + d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) {
            dq[c] += ds * k[c];
            dk[c] += ds * q[c];
          }
        }
      }
    }
    if (lg) {
      matmul_tn_acc(lc.ln1_out, d_qkv, lg->w_qkv);
      add_colsum(d_qkv, lg->b_qkv);
    }
    Matrix d_ln1;
    matmul_nt(d_qkv, lp.w_qkv, d_ln1);
    dx = d_resid;
    for (std::size_t r = 0; r < T; ++r) {
      layer_norm_backward_row(d_ln1.data() + r * d, lc.ln1_hat.data() + r * d, lc.ln1_rstd[r],
                              lp.ln1_gain, d, dx.data() + r * d, lg ? &lg->ln1_gain : nullptr,
                              lg ? &lg->ln1_bias : nullptr);
    }
  }

  if (grads) {
    for (std::size_t r = 0; r < T; ++r) {
      double* te = grads->tok_emb.data() + static_cast<std::size_t>(tokens[r]) * d;
      double* pe = grads->pos_emb.data() + r * d;
      const double* g = dx.data() + r * d;
      for (std::size_t c = 0; c < d; ++c) {
        te[c] += g[c];
        pe[c] += g[c];
      }
    }
  }
  if (d_x0) *d_x0 = std::move(dx);
}

void infer(const ModelConfig& cfg, const Params& p, TokenSpan tokens, EmbeddingOffsets off,
           std::size_t row_begin, InferState& state) {
  check_length(cfg, tokens);
  const std::size_t T = tokens.size();
  const std::size_t d = cfg.d_model;
  const std::size_t H = cfg.n_heads;
  const std::size_t dh = d / H;
  if (row_begin == 0 || state.qkv.size() != cfg.n_layers) {
    row_begin = 0;
    state.qkv.assign(cfg.n_layers, Matrix(T, 3 * d));
    state.hidden.reset(T, d);
  } else if (state.hidden.rows() != T) {
    throw std::invalid_argument("infer: cached state has a different length");
  }
  std::vector<double> scratch;

  Matrix x(T, d), normed(T, d), attn(T, d), proj(T, d), ff(T, cfg.d_ff), ff_out(T, d);
  embed_rows(cfg, p, tokens, off, row_begin, x);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = p.layers[l];
    Matrix& qkv = state.qkv[l];
    for (std::size_t r = row_begin; r < T; ++r) {
      layer_norm_row(x.data() + r * d, lp.ln1_gain, lp.ln1_bias, d, normed.data() + r * d, nullptr, nullptr);
    }
    matmul_rows(normed, lp.w_qkv, &lp.b_qkv, qkv, row_begin);
    for (std::size_t r = row_begin; r < T; ++r) {
      for (std::size_t h = 0; h < H; ++h) {
        attention_row(qkv, r, h, d, dh, attn.data() + r * d + h * dh, nullptr, scratch);
      }
    }
    matmul_rows(attn, lp.w_proj, &lp.b_proj, proj, row_begin);
    for (std::size_t i = row_begin * d; i < T * d; ++i) x.data()[i] += proj.data()[i];
    for (std::size_t r = row_begin; r < T; ++r) {
      layer_norm_row(x.data() + r * d, lp.ln2_gain, lp.ln2_bias, d, normed.data() + r * d, nullptr, nullptr);
    }
    matmul_rows(normed, lp.w_ff1, &lp.b_ff1, ff, row_begin);
    for (std::size_t i = row_begin * cfg.d_ff; i < T * cfg.d_ff; ++i) ff.data()[i] = gelu(ff.data()[i]);
    matmul_rows(ff, lp.w_ff2, &lp.b_ff2, ff_out, row_begin);
    for (std::size_t i = row_begin * d; i < T * d; ++i) x.data()[i] += ff_out.data()[i];
  }
  for (std::size_t r = row_begin; r < T; ++r) {
    layer_norm_row(x.data() + r * d, p.lnf_gain, p.lnf_bias, d, state.hidden.data() + r * d, nullptr,
                   nullptr);
  }
}

Matrix head_logits(const Params& p, const Matrix& hidden, std::span<const std::size_t> rows) {
  Matrix sel(rows.size(), hidden.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(hidden.data() + rows[i] * hidden.cols(), hidden.cols(), sel.data() + i * hidden.cols());
  }
  Matrix out;
  matmul(sel, p.w_out, &p.b_out, out);
  return out;
}

double head_nll(const Params& p, const Matrix& hidden, std::span<const std::size_t> rows,
                std::span<const TokenId> labels, double scale, std::vector<double>* per_token,
                Matrix* d_hidden, Params* grads) {
  if (rows.size() != labels.size()) throw std::invalid_argument("head_nll: rows/labels mismatch");
  if (rows.empty()) return 0.0;
  Matrix logits = head_logits(p, hidden, rows);
  const std::size_t V = logits.cols();
  double total = 0.0;
  Matrix dlogits;
  if (d_hidden) dlogits.reset(rows.size(), V);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double* z = logits.data() + i * V;
    const double mx = *std::max_element(z, z + V);
    double sum = 0.0;
    for (std::size_t v = 0; v < V; ++v) sum += std::exp(z[v] - mx);
    const double lse = mx + std::log(sum);
    const double nll = lse - z[static_cast<std::size_t>(labels[i])];
    if (per_token) per_token->push_back(nll);
    total += nll;
    if (d_hidden) {
      double* g = dlogits.data() + i * V;
      for (std::size_t v = 0; v < V; ++v) g[v] = scale * std::exp(z[v] - lse);
      g[static_cast<std::size_t>(labels[i])] -= scale;
    }
  }
  if (d_hidden) {
    Matrix dsel;
    matmul_nt(dlogits, p.w_out, dsel);
    const std::size_t d = hidden.cols();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      double* dst = d_hidden->data() + rows[i] * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += dsel(i, c);
    }
    if (grads) {
      Matrix sel(rows.size(), d);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(hidden.data() + rows[i] * d, d, sel.data() + i * d);
      }
      matmul_tn_acc(sel, dlogits, grads->w_out);
      add_colsum(dlogits, grads->b_out);
    }
  }
  return total;
}

}  // namespace halluc::detail
