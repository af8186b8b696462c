#pragma once

// Scaled dot-product attention, multi-head self-attention and the single
// pre-norm transformer encoder block that turns per-frame embeddings into
// sequence-aware context vectors.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "seqhand/nn.hpp"

namespace seqhand::attention {

using ad::ParamList;
using ad::Tensor;

// Scores for keys at or beyond a sequence's valid length are replaced by this
// before the softmax; exp() of it underflows to exactly zero.
inline constexpr double kMaskedScore = -1e9;

// Q[B x n x dk], K[B x n x dk], V[B x n x dv] -> softmax(Q K^T / sqrt(dk)) V.
// `valid_lengths`, when given, holds one length per batch item.
template <class T>
struct AttentionResult {
  Tensor<T> output;   // B x n x dv
  Tensor<T> weights;  // B x n x n, rows sum to one
};

template <class T>
AttentionResult<T> batched_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                     const std::vector<std::size_t>* valid_lengths = nullptr) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
    throw DimensionError("attention: expects rank-3 Q, K, V");
  }
  if (q.dim(2) != k.dim(2)) {
    throw DimensionError("attention: query width " + std::to_string(q.dim(2)) +
                         " != key width " + std::to_string(k.dim(2)));
  }
  if (k.dim(1) != v.dim(1) || q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0)) {
    throw DimensionError("attention: key/value count mismatch " + shape_str(k.shape()) + " vs " +
                         shape_str(v.shape()));
  }
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(k.dim(2)));
  auto scores = ad::scale(ad::batched_matmul(q, k, /*transpose_b=*/true), inv_scale);
  if (valid_lengths) {
    const auto batch = scores.dim(0), nq = scores.dim(1), nk = scores.dim(2);
    if (valid_lengths->size() != batch) {
      throw DimensionError("attention: need one valid length per batch item");
    }
    std::vector<bool> mask(scores.numel(), false);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto len = (*valid_lengths)[b];
      if (len == 0 || len > nk) throw DimensionError("attention: valid length out of range");
      for (std::size_t i = 0; i < nq; ++i)
        for (std::size_t j = len; j < nk; ++j) mask[(b * nq + i) * nk + j] = true;
    }
    scores = ad::masked_fill(scores, mask, static_cast<T>(kMaskedScore));
  }
  auto weights = ad::softmax_rows(scores);
  return {ad::batched_matmul(weights, v), weights};
}

// Single-sequence form: Q[n x dk], K[n x dk], V[n x dv] -> [n x dv].
template <class T>
Tensor<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k,
                                       const Tensor<T>& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw DimensionError("scaled_dot_product_attention: expects rank-2 Q, K, V");
  }
  auto lift = [](const Tensor<T>& t) { return ad::reshape(t, {1, t.dim(0), t.dim(1)}); };
  auto res = batched_attention(lift(q), lift(k), lift(v));
  return ad::reshape(res.output, {q.dim(0), v.dim(1)});
}

// Per-head projections are stored side by side: columns [h*d, (h+1)*d) of
// w_q / w_k / w_v are head h's f x d matrix.
template <class T>
struct AttentionParams {
  Tensor<T> w_q;    // f x (H*dk)
  Tensor<T> w_k;    // f x (H*dk)
  Tensor<T> w_v;    // f x (H*dv)
  Tensor<T> w_out;  // (H*dv) x L
  std::size_t heads = 1;

  static AttentionParams init(std::size_t width, std::size_t heads, std::size_t out_width,
                              nn::Rng& rng) {
    if (heads == 0 || width % heads != 0) {
      throw ContractError("attention: width " + std::to_string(width) +
                          " not divisible by head count " + std::to_string(heads));
    }
    const double s = nn::glorot_std(width, width);
    AttentionParams p;
    p.w_q = nn::normal_param<T>({width, width}, s, rng);
    p.w_k = nn::normal_param<T>({width, width}, s, rng);
    p.w_v = nn::normal_param<T>({width, width}, s, rng);
    p.w_out = nn::normal_param<T>({width, out_width}, nn::glorot_std(width, out_width), rng);
    p.heads = heads;
    return p;
  }

  std::size_t in_width() const { return w_q.dim(0); }
  std::size_t key_width() const { return w_k.dim(1) / heads; }
  std::size_t value_width() const { return w_v.dim(1) / heads; }
  std::size_t out_width() const { return w_out.dim(1); }

  void validate() const {
    if (heads == 0) throw ContractError("attention: head count must be at least 1");
    if (w_q.dim(1) != w_k.dim(1)) throw DimensionError("attention: d_q must equal d_k");
    if (w_q.dim(1) % heads || w_v.dim(1) % heads) {
      throw DimensionError("attention: projection widths not divisible by head count");
    }
    if (w_k.dim(0) != in_width() || w_v.dim(0) != in_width()) {
      throw DimensionError("attention: projection input widths differ");
    }
    if (w_out.dim(0) != heads * value_width()) {
      throw DimensionError("attention: W_out input width must be H*d_v");
    }
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".w_q", w_q});
    out.push_back({prefix + ".w_k", w_k});
    out.push_back({prefix + ".w_v", w_v});
    out.push_back({prefix + ".w_out", w_out});
  }
};

namespace detail {

// [B*n x H*d] -> [B*H x n x d]
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t batch, std::size_t n, std::size_t heads) {
  const auto d = x.dim(1) / heads;
  auto t = ad::permute(ad::reshape(x, {batch, n, heads, d}), {0, 2, 1, 3});
  return ad::reshape(t, {batch * heads, n, d});
}

// [B*H x n x d] -> [B*n x H*d]
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t batch, std::size_t heads) {
  const auto n = x.dim(1), d = x.dim(2);
  auto t = ad::permute(ad::reshape(x, {batch, heads, n, d}), {0, 2, 1, 3});
  return ad::reshape(t, {batch * n, heads * d});
}

}  // namespace detail

// Self-attention over X[B x n x f] (or X[n x f]); returns [B x n x L]
// (or [n x L]). Each head attends with its own projections; the
// concatenated head outputs are mixed by W_out.
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& x, const AttentionParams<T>& p,
                               const std::vector<std::size_t>* valid_lengths = nullptr) {
  p.validate();
  const bool single = x.rank() == 2;
  if ((x.rank() != 2 && x.rank() != 3) || x.shape().back() != p.in_width()) {
    throw DimensionError("multi_head_attention: input " + shape_str(x.shape()) +
                         " does not match width " + std::to_string(p.in_width()));
  }
  const auto batch = single ? 1 : x.dim(0);
  const auto n = single ? x.dim(0) : x.dim(1);
  auto flat = ad::reshape(x, {batch * n, p.in_width()});
  auto q = detail::split_heads(ad::matmul(flat, p.w_q), batch, n, p.heads);
  auto k = detail::split_heads(ad::matmul(flat, p.w_k), batch, n, p.heads);
  auto v = detail::split_heads(ad::matmul(flat, p.w_v), batch, n, p.heads);
  std::optional<std::vector<std::size_t>> head_lengths;
  if (valid_lengths) {
    if (valid_lengths->size() != batch) {
      throw DimensionError("multi_head_attention: need one valid length per sequence");
    }
    head_lengths.emplace();
    for (const auto len : *valid_lengths) head_lengths->insert(head_lengths->end(), p.heads, len);
  }
  auto heads = batched_attention(q, k, v, head_lengths ? &*head_lengths : nullptr).output;
  auto mixed = ad::matmul(detail::merge_heads(heads, batch, p.heads), p.w_out);
  if (single) return mixed;
  return ad::reshape(mixed, {batch, n, p.out_width()});
}

template <class T>
struct EncoderBlockParams {
  AttentionParams<T> attn;
  Tensor<T> positions;  // N_max x f learned table
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> ln2_gain, ln2_bias;
  nn::Linear<T> ff1;  // f -> f_ff
  nn::Linear<T> ff2;  // f_ff -> f
  bool use_positions = true;

  static EncoderBlockParams init(std::size_t width, std::size_t heads, std::size_t ff_width,
                                 std::size_t max_len, nn::Rng& rng) {
    EncoderBlockParams p;
    p.attn = AttentionParams<T>::init(width, heads, width, rng);
    p.positions = nn::normal_param<T>({max_len, width}, 0.02, rng);
    p.ln1_gain = nn::constant_param<T>({width}, 1.0);
    p.ln1_bias = nn::constant_param<T>({width}, 0.0);
    p.ln2_gain = nn::constant_param<T>({width}, 1.0);
    p.ln2_bias = nn::constant_param<T>({width}, 0.0);
    p.ff1 = nn::Linear<T>::init(width, ff_width, nn::he_std(width), rng);
    p.ff2 = nn::Linear<T>::init(ff_width, width, nn::glorot_std(ff_width, width), rng);
    return p;
  }

  std::size_t width() const { return attn.in_width(); }
  std::size_t max_len() const { return positions.dim(0); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    attn.collect(out, prefix + ".attn");
    out.push_back({prefix + ".positions", positions});
    out.push_back({prefix + ".ln1.gain", ln1_gain});
    out.push_back({prefix + ".ln1.bias", ln1_bias});
    out.push_back({prefix + ".ln2.gain", ln2_gain});
    out.push_back({prefix + ".ln2.bias", ln2_bias});
    ff1.collect(out, prefix + ".ff1");
    ff2.collect(out, prefix + ".ff2");
  }
};

// X[B x N x f] (or [N x f]) with one position index per sequence slot.
// h = X + pos;  a = h + MHA(LN1(h));  out = a + FF(LN2(a)).
template <class T>
Tensor<T> encoder_block_forward(const Tensor<T>& x, const EncoderBlockParams<T>& p,
                                const std::vector<std::size_t>& positions,
                                const std::vector<std::size_t>* valid_lengths = nullptr) {
  const bool single = x.rank() == 2;
  if ((x.rank() != 2 && x.rank() != 3) || x.shape().back() != p.width()) {
    throw DimensionError("encoder block: input " + shape_str(x.shape()) +
                         " does not match width " + std::to_string(p.width()));
  }
  if (p.attn.out_width() != p.width() || p.ff2.out_features() != p.width()) {
    throw DimensionError("encoder block: residual widths disagree");
  }
  const auto batch = single ? 1 : x.dim(0);
  const auto n = single ? x.dim(0) : x.dim(1);
  if (n > p.max_len()) {
    throw CapacityError("encoder block: sequence length " + std::to_string(n) +
                        " exceeds position table size " + std::to_string(p.max_len()));
  }
  if (positions.size() != n) {
    throw DimensionError("encoder block: need one position index per sequence slot");
  }
  for (const auto pos : positions) {
    if (pos >= p.max_len()) {
      throw CapacityError("encoder block: position " + std::to_string(pos) + " beyond table");
    }
  }
  auto h = ad::reshape(x, {batch, n, p.width()});
  if (p.use_positions) {
    std::vector<std::size_t> rows;
    rows.reserve(batch * n);
    for (std::size_t b = 0; b < batch; ++b) rows.insert(rows.end(), positions.begin(), positions.end());
    h = ad::add(h, ad::reshape(ad::gather_rows(p.positions, rows), {batch, n, p.width()}));
  }
  auto a = ad::add(h, multi_head_attention(ad::layer_norm(h, p.ln1_gain, p.ln1_bias), p.attn,
                                           valid_lengths));
  auto ff = p.ff2(ad::relu(p.ff1(ad::layer_norm(a, p.ln2_gain, p.ln2_bias))));
  auto out = ad::add(a, ff);
  return single ? ad::reshape(out, {n, p.width()}) : out;
}

}  // namespace seqhand::attention
