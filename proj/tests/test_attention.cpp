#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "seqhand/attention.hpp"
#include "seqhand/gradcheck.hpp"
#include "test_util.hpp"

using namespace seqhand;
using namespace seqhand::ad;
using namespace seqhand::attention;
using seqhand::testing::random_tensor;
using seqhand::testing::to_vec;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensord& t, std::size_t col0 = 0, std::size_t cols = 0) {
  const auto r = t.dim(0), c = t.dim(1);
  if (cols == 0) cols = c - col0;
  Mat m(r, std::vector<double>(cols));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < cols; ++j) m[i][j] = t[i * c + col0 + j];
  return m;
}

Mat mm(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// Scalar-loop reference for softmax(QK^T/sqrt(dk))V.
Mat oracle_attention(const Mat& q, const Mat& k, const Mat& v) {
  const auto n = q.size(), dk = q[0].size();
  Mat out(n, std::vector<double>(v[0].size(), 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(k.size());
    for (std::size_t j = 0; j < k.size(); ++j) {
      double dot = 0;
      for (std::size_t d = 0; d < dk; ++d) dot += q[i][d] * k[j][d];
      s[j] = dot / std::sqrt(static_cast<double>(dk));
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0;
    for (auto& e : s) z += (e = std::exp(e - mx));
    for (std::size_t j = 0; j < k.size(); ++j)
      for (std::size_t d = 0; d < v[0].size(); ++d) out[i][d] += s[j] / z * v[j][d];
  }
  return out;
}

Mat oracle_mha(const Mat& x, const AttentionParams<double>& p) {
  const auto dk = p.key_width(), dv = p.value_width();
  Mat concat(x.size());
  for (std::size_t h = 0; h < p.heads; ++h) {
    auto head = oracle_attention(mm(x, to_mat(p.w_q, h * dk, dk)), mm(x, to_mat(p.w_k, h * dk, dk)),
                                 mm(x, to_mat(p.w_v, h * dv, dv)));
    for (std::size_t i = 0; i < x.size(); ++i)
      concat[i].insert(concat[i].end(), head[i].begin(), head[i].end());
  }
  return mm(concat, to_mat(p.w_out));
}

void expect_mat_near(const Tensord& t, const Mat& m, double tol) {
  ASSERT_EQ(t.dim(0), m.size());
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[0].size(); ++j) EXPECT_NEAR(t[i * m[0].size() + j], m[i][j], tol);
}

Tensord permute_rows(const Tensord& x, const std::vector<std::size_t>& perm) {
  return gather_rows(x, perm).detach();
}

}  // namespace

TEST(ScaledDotProductAttention, SingleTokenReturnsValue) {
  std::mt19937_64 rng(1);
  auto q = random_tensor<double>({1, 4}, rng);
  auto k = random_tensor<double>({1, 4}, rng);
  auto v = random_tensor<double>({1, 3}, rng);
  EXPECT_EQ(to_vec(scaled_dot_product_attention(q, k, v)), to_vec(v));
}

TEST(ScaledDotProductAttention, IdenticalRowsAverageValues) {
  Tensord q({2, 2}, {0.3, -1.0, 0.3, -1.0});
  Tensord k({2, 2}, {2.0, 0.5, 2.0, 0.5});
  Tensord v({2, 3}, {1, 2, 3, 5, 6, 7});
  auto out = scaled_dot_product_attention(q, k, v);
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_NEAR(out[r * 3 + 0], 3.0, 1e-12);
    EXPECT_NEAR(out[r * 3 + 1], 4.0, 1e-12);
    EXPECT_NEAR(out[r * 3 + 2], 5.0, 1e-12);
  }
}

TEST(ScaledDotProductAttention, MatchesScalarOracle) {
  std::mt19937_64 rng(2);
  auto q = random_tensor<double>({3, 4}, rng);
  auto k = random_tensor<double>({3, 4}, rng);
  auto v = random_tensor<double>({3, 4}, rng);
  expect_mat_near(scaled_dot_product_attention(q, k, v),
                  oracle_attention(to_mat(q), to_mat(k), to_mat(v)), 1e-6);
}

TEST(ScaledDotProductAttention, KeyWidthMismatchThrows) {
  EXPECT_THROW(scaled_dot_product_attention(Tensord::zeros({2, 3}), Tensord::zeros({2, 4}),
                                            Tensord::zeros({2, 4})),
               DimensionError);
}

TEST(ScaledDotProductAttention, WeightsAreStochasticAndOutputsInConvexHull) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 25; ++trial) {
    auto q = random_tensor<double>({1, 5, 4}, rng, -3, 3);
    auto k = random_tensor<double>({1, 5, 4}, rng, -3, 3);
    auto v = random_tensor<double>({1, 5, 3}, rng, -3, 3);
    auto res = batched_attention(q, k, v);
    for (std::size_t i = 0; i < 5; ++i) {
      double total = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_GE(res.weights[i * 5 + j], 0.0);
        total += res.weights[i * 5 + j];
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
      for (std::size_t d = 0; d < 3; ++d) {
        double lo = 1e9, hi = -1e9;
        for (std::size_t j = 0; j < 5; ++j) {
          lo = std::min(lo, v[j * 3 + d]);
          hi = std::max(hi, v[j * 3 + d]);
        }
        EXPECT_GE(res.output[i * 3 + d], lo - 1e-12);
        EXPECT_LE(res.output[i * 3 + d], hi + 1e-12);
      }
    }
  }
}

TEST(ScaledDotProductAttention, ScaleFactorMatters) {
  std::mt19937_64 rng(4);
  auto q = random_tensor<double>({4, 8}, rng);
  auto k = random_tensor<double>({4, 8}, rng);
  auto v = random_tensor<double>({4, 3}, rng);
  auto scaled = scaled_dot_product_attention(q, k, v);
  // Pre-multiplying Q by sqrt(dk) cancels the 1/sqrt(dk) factor.
  auto unscaled = scaled_dot_product_attention(scale(q, std::sqrt(8.0)), k, v);
  double diff = 0;
  for (std::size_t i = 0; i < scaled.numel(); ++i) diff = std::max(diff, std::abs(scaled[i] - unscaled[i]));
  EXPECT_GT(diff, 1e-3);
}

TEST(ScaledDotProductAttention, MaskedKeysGetZeroWeight) {
  std::mt19937_64 rng(5);
  auto q = random_tensor<double>({2, 4, 3}, rng);
  auto k = random_tensor<double>({2, 4, 3}, rng);
  auto v = random_tensor<double>({2, 4, 2}, rng);
  std::vector<std::size_t> lengths{2, 4};
  auto res = batched_attention(q, k, v, &lengths);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(res.weights[i * 4 + 2], 0.0);
    EXPECT_EQ(res.weights[i * 4 + 3], 0.0);
    EXPECT_NEAR(res.weights[i * 4 + 0] + res.weights[i * 4 + 1], 1.0, 1e-12);
  }
  // The truncated item matches attention over its first two tokens alone.
  auto head = [](const Tensord& t, std::size_t rows) {
    const auto c = t.dim(2);
    return Tensord({rows, c}, std::vector<double>(t.data().begin(), t.data().begin() + rows * c));
  };
  auto short_out = scaled_dot_product_attention(head(q, 4), head(k, 2), head(v, 2));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(res.output[i], short_out[i], 1e-12);
}

TEST(MultiHeadAttention, SingleHeadWithIdentityOutputIsPlainAttention) {
  std::mt19937_64 rng(6);
  auto x = random_tensor<double>({5, 4}, rng);
  nn::Rng init(7);
  auto p = AttentionParams<double>::init(4, 1, 4, init);
  p.w_out = Tensord::identity(4);
  auto expected = scaled_dot_product_attention(matmul(x, p.w_q), matmul(x, p.w_k), matmul(x, p.w_v));
  auto got = multi_head_attention(x, p);
  for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-12);
}

TEST(MultiHeadAttention, PermutationEquivariant) {
  std::mt19937_64 rng(8);
  nn::Rng init(9);
  auto p = AttentionParams<double>::init(8, 4, 8, init);
  auto x = random_tensor<double>({5, 8}, rng);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  auto out = multi_head_attention(x, p);
  auto out_perm = multi_head_attention(permute_rows(x, perm), p);
  auto expected = permute_rows(out, perm);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out_perm[i], expected[i], 1e-6);
}

TEST(MultiHeadAttention, TwoHeadsMatchScalarOracle) {
  std::mt19937_64 rng(10);
  nn::Rng init(11);
  auto p = AttentionParams<double>::init(6, 2, 5, init);
  auto x = random_tensor<double>({4, 6}, rng);
  expect_mat_near(multi_head_attention(x, p), oracle_mha(to_mat(x), p), 1e-6);
}

TEST(MultiHeadAttention, WidthMismatchThrows) {
  nn::Rng init(12);
  auto p = AttentionParams<double>::init(8, 2, 8, init);
  EXPECT_THROW(multi_head_attention(Tensord::zeros({3, 6}), p), DimensionError);
  EXPECT_THROW(AttentionParams<double>::init(8, 3, 8, init), ContractError);
}

TEST(MultiHeadAttention, BatchedEqualsPerSequence) {
  std::mt19937_64 rng(13);
  nn::Rng init(14);
  auto p = AttentionParams<double>::init(8, 2, 8, init);
  auto x = random_tensor<double>({3, 4, 8}, rng);
  auto batched = multi_head_attention(x, p);
  for (std::size_t b = 0; b < 3; ++b) {
    Tensord xb({4, 8}, std::vector<double>(x.data().begin() + b * 32, x.data().begin() + (b + 1) * 32));
    auto single = multi_head_attention(xb, p);
    for (std::size_t i = 0; i < 32; ++i) EXPECT_NEAR(batched[b * 32 + i], single[i], 1e-12);
  }
}

TEST(EncoderBlock, OutputShape) {
  nn::Rng init(15);
  auto p = EncoderBlockParams<float>::init(64, 8, 128, 16, init);
  std::mt19937_64 rng(16);
  auto x = random_tensor<float>({5, 64}, rng);
  EXPECT_EQ(encoder_block_forward(x, p, {0, 1, 2, 3, 4}).shape(), (Shape{5, 64}));
}

TEST(EncoderBlock, PermutationEquivariantWithoutPositions) {
  nn::Rng init(17);
  auto p = EncoderBlockParams<double>::init(8, 2, 16, 8, init);
  p.use_positions = false;
  std::mt19937_64 rng(18);
  auto x = random_tensor<double>({5, 8}, rng);
  const std::vector<std::size_t> pos{0, 1, 2, 3, 4};
  const std::vector<std::size_t> perm{4, 2, 0, 3, 1};
  auto out = encoder_block_forward(x, p, pos);
  auto out_perm = encoder_block_forward(permute_rows(x, perm), p, pos);
  auto expected = permute_rows(out, perm);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out_perm[i], expected[i], 1e-6);
}

TEST(EncoderBlock, ZeroPositionTableMatchesDisabledTable) {
  nn::Rng init(19);
  auto p = EncoderBlockParams<double>::init(8, 2, 16, 8, init);
  std::mt19937_64 rng(20);
  auto x = random_tensor<double>({2, 4, 8}, rng);
  std::fill(p.positions.mutable_data().begin(), p.positions.mutable_data().end(), 0.0);
  auto with = encoder_block_forward(x, p, {0, 1, 2, 3});
  p.use_positions = false;
  auto without = encoder_block_forward(x, p, {0, 1, 2, 3});
  EXPECT_EQ(to_vec(with), to_vec(without));
}

TEST(EncoderBlock, TooLongSequenceIsACapacityError) {
  nn::Rng init(21);
  auto p = EncoderBlockParams<float>::init(8, 2, 16, 4, init);
  EXPECT_THROW(encoder_block_forward(Tensorf::zeros({5, 8}), p, {0, 1, 2, 3, 4}), CapacityError);
}

TEST(EncoderBlock, GradientsMatchFiniteDifferences) {
  nn::Rng init(22);
  auto p = EncoderBlockParams<double>::init(8, 2, 16, 6, init);
  std::mt19937_64 rng(23);
  auto x = random_tensor<double>({2, 3, 8}, rng);
  // Non-default norms so gain/bias gradients are generic.
  p.ln1_gain = random_tensor<double>({8}, rng, 0.5, 1.5);
  p.ln2_bias = random_tensor<double>({8}, rng, -0.5, 0.5);
  auto weights = random_tensor<double>({2, 3, 8}, rng);
  ParamList<double> params{{"x", x}};
  p.collect(params, "block");
  const std::vector<std::size_t> lengths{3, 2};
  auto reports = check_gradients<double>(
      [&] { return sum_all(mul(encoder_block_forward(x, p, {1, 0, 2}, &lengths), weights)); },
      params);
  for (const auto& r : reports) EXPECT_LT(r.worst, 1e-4) << r.name;
}
