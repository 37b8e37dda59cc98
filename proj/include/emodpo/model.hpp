#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "emodpo/corpus.hpp"
#include "emodpo/errors.hpp"
#include "emodpo/rng.hpp"
#include "emodpo/vocab.hpp"

namespace emodpo {

struct ModelConfig {
  VocabConfig vocab{};
  int d_model = 64;
  int layers = 2;
  int heads = 2;
  int ffn = 256;
  int max_len = 64;
  /// Position ids restart at 0 after <endofprompt> and after every </s>, so
  /// each segment (prompt, text, speech) is indexed from its own start.
  /// When false, ids are absolute offsets in the sequence.
  bool segment_positions = true;

  int vocab_size() const { return Vocabulary(vocab).size(); }

  void validate() const {
    if (d_model < 1 || layers < 0 || heads < 1 || ffn < 1 || max_len < 1) {
      throw ConfigError("model dimensions must be positive");
    }
    if (d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Named slice of the flat parameter vector. Matrices are row-major
/// (rows x cols), vectors have rows == 1.
struct ArraySpec {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

/// Fixed array order of the decoder. This order is also the checkpoint order.
class ParamLayout {
 public:
  struct Block {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  explicit ParamLayout(const ModelConfig& c) {
    c.validate();
    const int d = c.d_model;
    const int v = c.vocab_size();
    tok_emb = add("tok_emb", v, d);
    pos_emb = add("pos_emb", c.max_len, d);
    for (int l = 0; l < c.layers; ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      Block b{};
      b.ln1_g = add(p + "ln1.scale", 1, d);
      b.ln1_b = add(p + "ln1.offset", 1, d);
      b.wq = add(p + "attn.wq", d, d);
      b.bq = add(p + "attn.bq", 1, d);
      b.wk = add(p + "attn.wk", d, d);
      b.bk = add(p + "attn.bk", 1, d);
      b.wv = add(p + "attn.wv", d, d);
      b.bv = add(p + "attn.bv", 1, d);
      b.wo = add(p + "attn.wo", d, d);
      b.bo = add(p + "attn.bo", 1, d);
      b.ln2_g = add(p + "ln2.scale", 1, d);
      b.ln2_b = add(p + "ln2.offset", 1, d);
      b.w1 = add(p + "ffn.w1", d, c.ffn);
      b.b1 = add(p + "ffn.b1", 1, c.ffn);
      b.w2 = add(p + "ffn.w2", c.ffn, d);
      b.b2 = add(p + "ffn.b2", 1, d);
      blocks.push_back(b);
    }
    lnf_g = add("final_ln.scale", 1, d);
    lnf_b = add("final_ln.offset", 1, d);
    w_out = add("out.w", d, v);
    b_out = add("out.b", 1, v);
  }

  const std::vector<ArraySpec>& arrays() const noexcept { return arrays_; }
  std::size_t total() const noexcept { return total_; }

  std::size_t tok_emb, pos_emb;
  std::vector<Block> blocks;
  std::size_t lnf_g, lnf_b, w_out, b_out;

 private:
  std::size_t add(std::string name, int rows, int cols) {
    ArraySpec s{std::move(name), rows, cols, total_};
    total_ += s.size();
    arrays_.push_back(std::move(s));
    return arrays_.back().offset;
  }

  std::vector<ArraySpec> arrays_;
  std::size_t total_ = 0;
};

/// All trainable arrays of the decoder, stored contiguously. Gradients use
/// the same type.
template <typename T>
struct ModelParams {
  ModelConfig config;
  ParamLayout layout;
  std::vector<T> values;

  explicit ModelParams(const ModelConfig& c) : config(c), layout(c), values(layout.total(), T(0)) {}

  std::size_t count() const noexcept { return values.size(); }
  T* at(std::size_t offset) noexcept { return values.data() + offset; }
  const T* at(std::size_t offset) const noexcept { return values.data() + offset; }

  ModelParams zeros_like() const { return ModelParams(config); }

  bool all_finite() const {
    return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
  }
};

template <typename To, typename From>
ModelParams<To> convert_params(const ModelParams<From>& p) {
  ModelParams<To> out(p.config);
  std::transform(p.values.begin(), p.values.end(), out.values.begin(),
                 [](From v) { return static_cast<To>(v); });
  return out;
}

/// Normal(0, std) weights, unit norm scales, zero biases and offsets.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, Rng& rng, double std = 0.02) {
  ModelParams<T> p(config);
  for (const auto& a : p.layout.arrays()) {
    const bool is_scale = a.name.ends_with(".scale");
    const bool is_vector = a.rows == 1;
    for (std::size_t i = 0; i < a.size(); ++i) {
      T v = T(0);
      if (is_scale) {
        v = T(1);
      } else if (!is_vector) {
        v = static_cast<T>(std * rng.normal());
      }
      p.values[a.offset + i] = v;
    }
  }
  return p;
}

/// Padded batch. `mask[r * time + t]` marks token t of row r as a target.
struct SequenceBatch {
  int rows = 0;
  int time = 0;
  std::vector<int> tokens;
  std::vector<std::uint8_t> mask;
  std::vector<int> lengths;

  int token(int r, int t) const { return tokens[static_cast<std::size_t>(r * time + t)]; }
  bool target(int r, int t) const { return mask[static_cast<std::size_t>(r * time + t)] != 0; }
  std::span<const int> row(int r) const {
    return std::span(tokens).subspan(static_cast<std::size_t>(r * time),
                                     static_cast<std::size_t>(lengths[static_cast<std::size_t>(r)]));
  }
};

inline SequenceBatch make_batch(std::span<const EncodedSequence> seqs, int pad_id) {
  SequenceBatch b;
  b.rows = static_cast<int>(seqs.size());
  for (const auto& s : seqs) b.time = std::max(b.time, static_cast<int>(s.tokens.size()));
  b.tokens.assign(static_cast<std::size_t>(b.rows * b.time), pad_id);
  b.mask.assign(static_cast<std::size_t>(b.rows * b.time), 0);
  for (int r = 0; r < b.rows; ++r) {
    const auto& s = seqs[static_cast<std::size_t>(r)];
    if (s.loss_mask.size() != s.tokens.size()) throw InputDomainError("mask/token length mismatch");
    std::copy(s.tokens.begin(), s.tokens.end(), b.tokens.begin() + r * b.time);
    std::copy(s.loss_mask.begin(), s.loss_mask.end(), b.mask.begin() + r * b.time);
    b.lengths.push_back(static_cast<int>(s.tokens.size()));
  }
  return b;
}

namespace detail {

// y[rows x out] = x[rows x in] * w[in x out] + b
template <typename T>
void linear(const T* x, int rows, int in, const T* w, const T* b, int out, T* y) {
  for (int r = 0; r < rows; ++r) {
    T* yr = y + static_cast<std::ptrdiff_t>(r) * out;
    for (int o = 0; o < out; ++o) yr[o] = b ? b[o] : T(0);
    const T* xr = x + static_cast<std::ptrdiff_t>(r) * in;
    for (int i = 0; i < in; ++i) {
      const T xv = xr[i];
      const T* wi = w + static_cast<std::ptrdiff_t>(i) * out;
      for (int o = 0; o < out; ++o) yr[o] += xv * wi[o];
    }
  }
}

// Accumulates dw, db and (if dx) writes dx += dy * w^T.
template <typename T>
void linear_backward(const T* x, int rows, int in, const T* w, int out, const T* dy, T* dx, T* dw,
                     T* db) {
  for (int r = 0; r < rows; ++r) {
    const T* xr = x + static_cast<std::ptrdiff_t>(r) * in;
    const T* dyr = dy + static_cast<std::ptrdiff_t>(r) * out;
    if (db) {
      for (int o = 0; o < out; ++o) db[o] += dyr[o];
    }
    for (int i = 0; i < in; ++i) {
      const T* wi = w + static_cast<std::ptrdiff_t>(i) * out;
      T* dwi = dw + static_cast<std::ptrdiff_t>(i) * out;
      const T xv = xr[i];
      T acc = T(0);
      for (int o = 0; o < out; ++o) {
        dwi[o] += xv * dyr[o];
        acc += dyr[o] * wi[o];
      }
      if (dx) dx[static_cast<std::ptrdiff_t>(r) * in + i] += acc;
    }
  }
}

template <typename T>
constexpr T kLayerNormEps = T(1e-5);

template <typename T>
void layer_norm(const T* x, int rows, int d, const T* g, const T* b, T* y, T* mean, T* rstd) {
  for (int r = 0; r < rows; ++r) {
    const T* xr = x + static_cast<std::ptrdiff_t>(r) * d;
    T mu = T(0);
    for (int i = 0; i < d; ++i) mu += xr[i];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (int i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + kLayerNormEps<T>);
    mean[r] = mu;
    rstd[r] = rs;
    T* yr = y + static_cast<std::ptrdiff_t>(r) * d;
    for (int i = 0; i < d; ++i) yr[i] = (xr[i] - mu) * rs * g[i] + b[i];
  }
}

// dx += layer-norm backward of dy.
template <typename T>
void layer_norm_backward(const T* x, int rows, int d, const T* g, const T* mean, const T* rstd,
                         const T* dy, T* dx, T* dg, T* db) {
  std::vector<T> dxhat(static_cast<std::size_t>(d));
  for (int r = 0; r < rows; ++r) {
    const T* xr = x + static_cast<std::ptrdiff_t>(r) * d;
    const T* dyr = dy + static_cast<std::ptrdiff_t>(r) * d;
    T sum_dxhat = T(0);
    T sum_dxhat_xhat = T(0);
    for (int i = 0; i < d; ++i) {
      const T xhat = (xr[i] - mean[r]) * rstd[r];
      dg[i] += dyr[i] * xhat;
      db[i] += dyr[i];
      dxhat[static_cast<std::size_t>(i)] = dyr[i] * g[i];
      sum_dxhat += dxhat[static_cast<std::size_t>(i)];
      sum_dxhat_xhat += dxhat[static_cast<std::size_t>(i)] * xhat;
    }
    const T inv_d = T(1) / static_cast<T>(d);
    T* dxr = dx + static_cast<std::ptrdiff_t>(r) * d;
    for (int i = 0; i < d; ++i) {
      const T xhat = (xr[i] - mean[r]) * rstd[r];
      dxr[i] += rstd[r] * (dxhat[static_cast<std::size_t>(i)] - sum_dxhat * inv_d -
                           xhat * sum_dxhat_xhat * inv_d);
    }
  }
}

// tanh-approximated GELU; smooth everywhere, which keeps finite-difference
// checks meaningful.
template <typename T>
T gelu(T x) {
  const T c = T(0.7978845608028654);
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T c = T(0.7978845608028654);
  const T th = std::tanh(c * (x + T(0.044715) * x * x * x));
  return T(0.5) * (T(1) + th) +
         T(0.5) * x * (T(1) - th * th) * c * (T(1) + T(3) * T(0.044715) * x * x);
}

}  // namespace detail

/// Row of the positional table used by each token; depends only on the
/// tokens up to and including t, so causality is preserved.
inline std::vector<int> position_ids(const ModelConfig& c, std::span<const int> tokens) {
  std::vector<int> ids(tokens.size());
  if (!c.segment_positions) {
    std::iota(ids.begin(), ids.end(), 0);
    return ids;
  }
  const Vocabulary vocab(c.vocab);
  int pos = 0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    ids[t] = pos++;
    if (tokens[t] == vocab.end_of_prompt() || tokens[t] == vocab.separator()) pos = 0;
  }
  return ids;
}

/// Everything the backward pass needs from one sequence's forward pass.
template <typename T>
struct Activations {
  struct Block {
    std::vector<T> x_in, h1, mu1, rstd1, q, k, v, probs, att, x_mid, h2, mu2, rstd2, ff_pre, ff_act;
  };
  int length = 0;
  std::vector<int> tokens;
  std::vector<int> positions;
  std::vector<Block> blocks;
  std::vector<T> x_final, hf, muf, rstdf, logits;
};

/// Forward pass over one unpadded sequence. Logits are length x vocab.
template <typename T>
Activations<T> forward_sequence(const ModelParams<T>& p, std::span<const int> tokens) {
  const auto& c = p.config;
  const auto& L = p.layout;
  const int n = static_cast<int>(tokens.size());
  const int d = c.d_model;
  const int V = c.vocab_size();
  const int H = c.heads;
  const int dh = d / H;
  const int F = c.ffn;
  if (n > c.max_len) {
    throw InputDomainError("sequence length " + std::to_string(n) + " exceeds max_len " +
                           std::to_string(c.max_len));
  }
  const auto sz = [](int a, int b = 1) { return static_cast<std::size_t>(a) * static_cast<std::size_t>(b); };

  Activations<T> a;
  a.length = n;
  a.tokens.assign(tokens.begin(), tokens.end());
  a.positions = position_ids(c, tokens);
  std::vector<T> x(sz(n, d));
  for (int t = 0; t < n; ++t) {
    const int id = tokens[static_cast<std::size_t>(t)];
    if (id < 0 || id >= V) throw InputDomainError("token id out of vocabulary: " + std::to_string(id));
    const T* te = p.at(L.tok_emb) + sz(id, d);
    const T* pe = p.at(L.pos_emb) + sz(a.positions[static_cast<std::size_t>(t)], d);
    for (int i = 0; i < d; ++i) x[sz(t, d) + static_cast<std::size_t>(i)] = te[i] + pe[i];
  }

  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (const auto& bo : L.blocks) {
    typename Activations<T>::Block blk;
    blk.x_in = x;
    blk.h1.resize(sz(n, d));
    blk.mu1.resize(sz(n));
    blk.rstd1.resize(sz(n));
    detail::layer_norm(x.data(), n, d, p.at(bo.ln1_g), p.at(bo.ln1_b), blk.h1.data(), blk.mu1.data(),
                       blk.rstd1.data());
    blk.q.resize(sz(n, d));
    blk.k.resize(sz(n, d));
    blk.v.resize(sz(n, d));
    detail::linear(blk.h1.data(), n, d, p.at(bo.wq), p.at(bo.bq), d, blk.q.data());
    detail::linear(blk.h1.data(), n, d, p.at(bo.wk), p.at(bo.bk), d, blk.k.data());
    detail::linear(blk.h1.data(), n, d, p.at(bo.wv), p.at(bo.bv), d, blk.v.data());

    blk.probs.assign(sz(H, n * n), T(0));
    blk.att.assign(sz(n, d), T(0));
    for (int h = 0; h < H; ++h) {
      T* P = blk.probs.data() + sz(h, n * n);
      for (int t = 0; t < n; ++t) {
        const T* qt = blk.q.data() + sz(t, d) + sz(h, dh);
        T mx = -std::numeric_limits<T>::infinity();
        for (int s = 0; s <= t; ++s) {
          const T* ks = blk.k.data() + sz(s, d) + sz(h, dh);
          T dot = T(0);
          for (int i = 0; i < dh; ++i) dot += qt[i] * ks[i];
          P[sz(t, n) + static_cast<std::size_t>(s)] = dot * scale;
          mx = std::max(mx, dot * scale);
        }
        T z = T(0);
        for (int s = 0; s <= t; ++s) {
          T& e = P[sz(t, n) + static_cast<std::size_t>(s)];
          e = std::exp(e - mx);
          z += e;
        }
        T* out = blk.att.data() + sz(t, d) + sz(h, dh);
        for (int s = 0; s <= t; ++s) {
          T& e = P[sz(t, n) + static_cast<std::size_t>(s)];
          e /= z;
          const T* vs = blk.v.data() + sz(s, d) + sz(h, dh);
          for (int i = 0; i < dh; ++i) out[i] += e * vs[i];
        }
      }
    }

    blk.x_mid.resize(sz(n, d));
    detail::linear(blk.att.data(), n, d, p.at(bo.wo), p.at(bo.bo), d, blk.x_mid.data());
    for (std::size_t i = 0; i < x.size(); ++i) blk.x_mid[i] += x[i];

    blk.h2.resize(sz(n, d));
    blk.mu2.resize(sz(n));
    blk.rstd2.resize(sz(n));
    detail::layer_norm(blk.x_mid.data(), n, d, p.at(bo.ln2_g), p.at(bo.ln2_b), blk.h2.data(),
                       blk.mu2.data(), blk.rstd2.data());
    blk.ff_pre.resize(sz(n, F));
    blk.ff_act.resize(sz(n, F));
    detail::linear(blk.h2.data(), n, d, p.at(bo.w1), p.at(bo.b1), F, blk.ff_pre.data());
    for (std::size_t i = 0; i < blk.ff_pre.size(); ++i) blk.ff_act[i] = detail::gelu(blk.ff_pre[i]);
    detail::linear(blk.ff_act.data(), n, F, p.at(bo.w2), p.at(bo.b2), d, x.data());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += blk.x_mid[i];
    a.blocks.push_back(std::move(blk));
  }

  a.x_final = std::move(x);
  a.hf.resize(sz(n, d));
  a.muf.resize(sz(n));
  a.rstdf.resize(sz(n));
  detail::layer_norm(a.x_final.data(), n, d, p.at(L.lnf_g), p.at(L.lnf_b), a.hf.data(), a.muf.data(),
                     a.rstdf.data());
  a.logits.resize(sz(n, V));
  detail::linear(a.hf.data(), n, d, p.at(L.w_out), p.at(L.b_out), V, a.logits.data());
  return a;
}

/// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(logits).
template <typename T>
void backward_sequence(const ModelParams<T>& p, const Activations<T>& a, std::span<const T> dlogits,
                       ModelParams<T>& grad) {
  const auto& c = p.config;
  const auto& L = p.layout;
  const int n = a.length;
  const int d = c.d_model;
  const int V = c.vocab_size();
  const int H = c.heads;
  const int dh = d / H;
  const int F = c.ffn;
  const auto sz = [](int x, int y = 1) { return static_cast<std::size_t>(x) * static_cast<std::size_t>(y); };
  if (dlogits.size() != sz(n, V)) throw InputDomainError("dlogits shape mismatch");

  std::vector<T> dhf(sz(n, d), T(0));
  detail::linear_backward(a.hf.data(), n, d, p.at(L.w_out), V, dlogits.data(), dhf.data(),
                          grad.at(L.w_out), grad.at(L.b_out));
  std::vector<T> dx(sz(n, d), T(0));
  detail::layer_norm_backward(a.x_final.data(), n, d, p.at(L.lnf_g), a.muf.data(), a.rstdf.data(),
                              dhf.data(), dx.data(), grad.at(L.lnf_g), grad.at(L.lnf_b));

  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (int l = static_cast<int>(L.blocks.size()) - 1; l >= 0; --l) {
    const auto& bo = L.blocks[static_cast<std::size_t>(l)];
    const auto& blk = a.blocks[static_cast<std::size_t>(l)];

    // feed-forward
    std::vector<T> dff(sz(n, F), T(0));
    detail::linear_backward(blk.ff_act.data(), n, F, p.at(bo.w2), d, dx.data(), dff.data(),
                            grad.at(bo.w2), grad.at(bo.b2));
    for (std::size_t i = 0; i < dff.size(); ++i) dff[i] *= detail::gelu_grad(blk.ff_pre[i]);
    std::vector<T> dh2(sz(n, d), T(0));
    detail::linear_backward(blk.h2.data(), n, d, p.at(bo.w1), F, dff.data(), dh2.data(),
                            grad.at(bo.w1), grad.at(bo.b1));
    std::vector<T> dmid = dx;
    detail::layer_norm_backward(blk.x_mid.data(), n, d, p.at(bo.ln2_g), blk.mu2.data(),
                                blk.rstd2.data(), dh2.data(), dmid.data(), grad.at(bo.ln2_g),
                                grad.at(bo.ln2_b));

    // attention
    std::vector<T> datt(sz(n, d), T(0));
    detail::linear_backward(blk.att.data(), n, d, p.at(bo.wo), d, dmid.data(), datt.data(),
                            grad.at(bo.wo), grad.at(bo.bo));
    std::vector<T> dq(sz(n, d), T(0)), dk(sz(n, d), T(0)), dv(sz(n, d), T(0));
    std::vector<T> dP(sz(n));
    for (int h = 0; h < H; ++h) {
      const T* P = blk.probs.data() + sz(h, n * n);
      for (int t = 0; t < n; ++t) {
        const T* dout = datt.data() + sz(t, d) + sz(h, dh);
        T dot_sum = T(0);
        for (int s = 0; s <= t; ++s) {
          const T* vs = blk.v.data() + sz(s, d) + sz(h, dh);
          T* dvs = dv.data() + sz(s, d) + sz(h, dh);
          const T pts = P[sz(t, n) + static_cast<std::size_t>(s)];
          T g = T(0);
          for (int i = 0; i < dh; ++i) {
            g += dout[i] * vs[i];
            dvs[i] += pts * dout[i];
          }
          dP[static_cast<std::size_t>(s)] = g;
          dot_sum += pts * g;
        }
        const T* qt = blk.q.data() + sz(t, d) + sz(h, dh);
        T* dqt = dq.data() + sz(t, d) + sz(h, dh);
        for (int s = 0; s <= t; ++s) {
          const T pts = P[sz(t, n) + static_cast<std::size_t>(s)];
          const T dscore = pts * (dP[static_cast<std::size_t>(s)] - dot_sum) * scale;
          const T* ks = blk.k.data() + sz(s, d) + sz(h, dh);
          T* dks = dk.data() + sz(s, d) + sz(h, dh);
          for (int i = 0; i < dh; ++i) {
            dqt[i] += dscore * ks[i];
            dks[i] += dscore * qt[i];
          }
        }
      }
    }
    std::vector<T> dh1(sz(n, d), T(0));
    detail::linear_backward(blk.h1.data(), n, d, p.at(bo.wq), d, dq.data(), dh1.data(),
                            grad.at(bo.wq), grad.at(bo.bq));
    detail::linear_backward(blk.h1.data(), n, d, p.at(bo.wk), d, dk.data(), dh1.data(),
                            grad.at(bo.wk), grad.at(bo.bk));
    detail::linear_backward(blk.h1.data(), n, d, p.at(bo.wv), d, dv.data(), dh1.data(),
                            grad.at(bo.wv), grad.at(bo.bv));
    dx = dmid;
    detail::layer_norm_backward(blk.x_in.data(), n, d, p.at(bo.ln1_g), blk.mu1.data(),
                                blk.rstd1.data(), dh1.data(), dx.data(), grad.at(bo.ln1_g),
                                grad.at(bo.ln1_b));
  }

  for (int t = 0; t < n; ++t) {
    T* te = grad.at(L.tok_emb) + sz(a.tokens[static_cast<std::size_t>(t)], d);
    T* pe = grad.at(L.pos_emb) + sz(a.positions[static_cast<std::size_t>(t)], d);
    for (int i = 0; i < d; ++i) {
      te[i] += dx[sz(t, d) + static_cast<std::size_t>(i)];
      pe[i] += dx[sz(t, d) + static_cast<std::size_t>(i)];
    }
  }
}

/// Per-position logits for a padded batch, laid out rows x time x vocab.
/// Positions at or beyond a row's length are zero.
template <typename T>
std::vector<T> forward_logits(const ModelParams<T>& p, const SequenceBatch& batch) {
  const std::size_t V = static_cast<std::size_t>(p.config.vocab_size());
  std::vector<T> out(static_cast<std::size_t>(batch.rows * batch.time) * V, T(0));
  for (int r = 0; r < batch.rows; ++r) {
    const auto a = forward_sequence(p, batch.row(r));
    std::copy(a.logits.begin(), a.logits.end(),
              out.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(r * batch.time) * V));
  }
  return out;
}

/// Numerically stable log-softmax of one row.
template <typename T>
void log_softmax(std::span<const T> logits, std::span<T> out) {
  const T mx = *std::max_element(logits.begin(), logits.end());
  T z = T(0);
  for (T v : logits) z += std::exp(v - mx);
  const T lz = mx + std::log(z);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
}

/// Iterates the loss-bearing (row, t) pairs of a batch: the logits at t - 1
/// predict token t.
template <typename Fn>
void for_each_target(const SequenceBatch& batch, int row, Fn&& fn) {
  const int len = batch.lengths[static_cast<std::size_t>(row)];
  if (len > 0 && batch.target(row, 0)) {
    throw InputDomainError("loss mask marks position 0, which has no prefix to predict from");
  }
  for (int t = 1; t < len; ++t) {
    if (batch.target(row, t)) fn(t - 1, batch.token(row, t));
  }
}

template <typename T>
struct LogprobResult {
  std::vector<T> values;
  /// Rows whose mask was empty (their value is exactly zero).
  std::vector<int> empty_rows;
};

/// Sum over loss-masked positions of log softmax(logits)[target], per row.
template <typename T>
LogprobResult<T> sequence_logprob(const ModelParams<T>& p, const SequenceBatch& batch) {
  const std::size_t V = static_cast<std::size_t>(p.config.vocab_size());
  LogprobResult<T> res;
  std::vector<T> ls(V);
  for (int r = 0; r < batch.rows; ++r) {
    const auto a = forward_sequence(p, batch.row(r));
    T total = T(0);
    int count = 0;
    for_each_target(batch, r, [&](int pos, int target) {
      log_softmax<T>(std::span(a.logits).subspan(static_cast<std::size_t>(pos) * V, V), ls);
      total += ls[static_cast<std::size_t>(target)];
      ++count;
    });
    if (count == 0) res.empty_rows.push_back(r);
    res.values.push_back(total);
  }
  return res;
}

/// Per-component loss values; `total` is the optimised quantity.
template <typename T>
struct LossBreakdown {
  T total = T(0);
  T dpo = T(0);
  T kl = T(0);
  T sft = T(0);
  /// Mean JS-corrected DPO logits over the batch (zero when no pairs).
  T margin = T(0);
};

/// Runs forward over every row, lets `loss` turn the logits into a value and
/// d(value)/d(logits), then backpropagates into `grad` (overwritten).
///
/// `loss` is called as `loss(batch, logits, dlogits)` where both spans are
/// rows x time x vocab and must return a LossBreakdown<T>.
template <typename T, typename LossFn>
LossBreakdown<T> gradients(const ModelParams<T>& p, LossFn&& loss, const SequenceBatch& batch,
                           ModelParams<T>& grad) {
  const std::size_t V = static_cast<std::size_t>(p.config.vocab_size());
  const std::size_t row_stride = static_cast<std::size_t>(batch.time) * V;
  std::vector<Activations<T>> acts;
  acts.reserve(static_cast<std::size_t>(batch.rows));
  std::vector<T> logits(static_cast<std::size_t>(batch.rows) * row_stride, T(0));
  for (int r = 0; r < batch.rows; ++r) {
    acts.push_back(forward_sequence(p, batch.row(r)));
    const auto& l = acts.back().logits;
    std::copy(l.begin(), l.end(), logits.begin() + static_cast<std::ptrdiff_t>(r * row_stride));
  }
  std::vector<T> dlogits(logits.size(), T(0));
  const LossBreakdown<T> value = loss(batch, std::span<const T>(logits), std::span<T>(dlogits));
  if (!std::isfinite(value.total)) {
    const char* component = !std::isfinite(value.dpo)  ? "dpo"
                            : !std::isfinite(value.kl) ? "kl"
                            : !std::isfinite(value.sft) ? "sft"
                                                        : "total";
    throw NumericalError(component, std::string("non-finite loss in component '") + component + "'");
  }
  std::fill(grad.values.begin(), grad.values.end(), T(0));
  for (int r = 0; r < batch.rows; ++r) {
    const auto& a = acts[static_cast<std::size_t>(r)];
    const auto row = std::span<const T>(dlogits).subspan(r * row_stride, static_cast<std::size_t>(a.length) * V);
    if (std::all_of(row.begin(), row.end(), [](T v) { return v == T(0); })) continue;
    backward_sequence(p, a, row, grad);
  }
  return value;
}

struct SamplingPolicy {
  /// k <= 1 means greedy (argmax, lowest id on ties).
  int top_k = 1;
  double temperature = 1.0;

  static SamplingPolicy greedy() { return {}; }
  static SamplingPolicy top_k_sampling(int k, double temperature) { return {k, temperature}; }
};

struct Generation {
  std::vector<int> tokens;  // excludes the terminating </s>
  bool terminated = false;
};

/// Autoregressive continuation of `prompt` until </s>, max_new tokens, or
/// the positional limit.
template <typename T>
Generation sample(const ModelParams<T>& p, std::span<const int> prompt, const SamplingPolicy& policy,
                  Rng& rng, int max_new) {
  if (prompt.empty()) throw InputDomainError("sample: empty prompt");
  if (policy.top_k > 1 && !(policy.temperature > 0.0)) throw ConfigError("temperature must be positive");
  const Vocabulary vocab(p.config.vocab);
  const std::size_t V = static_cast<std::size_t>(p.config.vocab_size());
  std::vector<int> seq(prompt.begin(), prompt.end());
  Generation gen;
  std::vector<std::size_t> order(V);
  std::vector<double> weights;
  while (static_cast<int>(gen.tokens.size()) < max_new &&
         static_cast<int>(seq.size()) < p.config.max_len) {
    const auto a = forward_sequence(p, seq);
    const T* row = a.logits.data() + (seq.size() - 1) * V;
    int next = 0;
    if (policy.top_k <= 1) {
      next = static_cast<int>(std::max_element(row, row + V) - row);
    } else {
      std::iota(order.begin(), order.end(), std::size_t{0});
      const std::size_t k = std::min(V, static_cast<std::size_t>(policy.top_k));
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                        [&](std::size_t x, std::size_t y) { return row[x] > row[y] || (row[x] == row[y] && x < y); });
      weights.assign(k, 0.0);
      const double top = static_cast<double>(row[order[0]]);
      double z = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        weights[i] = std::exp((static_cast<double>(row[order[i]]) - top) / policy.temperature);
        z += weights[i];
      }
      double u = rng.uniform() * z;
      std::size_t pick = 0;
      while (pick + 1 < k && u >= weights[pick]) u -= weights[pick++];
      next = static_cast<int>(order[pick]);
    }
    if (next == vocab.separator()) {
      gen.terminated = true;
      break;
    }
    gen.tokens.push_back(next);
    seq.push_back(next);
  }
  return gen;
}

}  // namespace emodpo
