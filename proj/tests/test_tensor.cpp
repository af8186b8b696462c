#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "seqhand/gradcheck.hpp"
#include "seqhand/ops.hpp"
#include "test_util.hpp"

using namespace seqhand;
using namespace seqhand::ad;
using seqhand::testing::random_tensor;
using seqhand::testing::to_vec;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  std::mt19937_64 rng(1);
  auto m = random_tensor<double>({3, 4}, rng);
  auto out = matmul(Tensord::identity(3), m);
  EXPECT_EQ(out.shape(), (Shape{3, 4}));
  EXPECT_EQ(to_vec(out), to_vec(m));
}

TEST(Matmul, TwoByTwoProduct) {
  Tensorf a({2, 2}, {1, 2, 3, 4});
  Tensorf b({2, 2}, {0, 1, 1, 0});
  EXPECT_EQ(to_vec(matmul(a, b)), (std::vector<float>{2, 1, 4, 3}));
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  auto a = Tensorf::zeros({2, 3});
  auto b = Tensorf::zeros({4, 5});
  EXPECT_THROW(matmul(a, b), DimensionError);
}

TEST(Softmax, UniformRow) {
  auto y = softmax_rows(Tensord::zeros({1, 3}));
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(Softmax, TwoElementClosedForm) {
  const double c = 0.37;
  auto y = softmax_rows(Tensord({1, 2}, {c, c + std::log(2.0)}));
  EXPECT_NEAR(y[0], 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(y[1], 2.0 / 3.0, 1e-12);
}

TEST(Softmax, ShiftInvarianceAndRowSums) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor<float>({4, 7}, rng, -5.f, 5.f);
    auto y = softmax_rows(x);
    auto ys = softmax_rows(add_scalar(x, 12.5f));
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_GE(y[r * 7 + j], 0.f);
        EXPECT_NEAR(y[r * 7 + j], ys[r * 7 + j], 1e-6);
        total += y[r * 7 + j];
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, LargeInputsStayFinite) {
  auto y = softmax_rows(Tensorf({1, 2}, {1000.f, 1001.f}));
  EXPECT_TRUE(std::isfinite(y[0]) && std::isfinite(y[1]));
}

TEST(Softmax, NaNInputThrows) {
  Tensorf x({1, 2}, {0.f, std::nanf("")});
  EXPECT_THROW(softmax_rows(x), NumericError);
}

TEST(Elementwise, Definitions) {
  EXPECT_EQ(to_vec(relu(Tensorf({3}, {-1, 0, 2}))), (std::vector<float>{0, 0, 2}));
  Tensorf x({2}, {1.5f, -2.f});
  EXPECT_EQ(to_vec(add(x, Tensorf::scalar(0.f))), to_vec(x));
  auto s = scale(Tensord({2}, {1, 2}), 0.1);
  EXPECT_DOUBLE_EQ(s[0], 0.1);
  EXPECT_DOUBLE_EQ(s[1], 0.2);
  EXPECT_EQ(to_vec(square(Tensorf({2}, {3, -2}))), (std::vector<float>{9, 4}));
  EXPECT_EQ(to_vec(sqrt(Tensorf({2}, {9, 0}))), (std::vector<float>{3, 0}));
}

TEST(Elementwise, ShapeMismatchThrows) {
  EXPECT_THROW(add(Tensorf::zeros({2, 3}), Tensorf::zeros({3, 2})), DimensionError);
  EXPECT_THROW(mul(Tensorf::zeros({2}), Tensorf::zeros({3})), DimensionError);
}

TEST(Elementwise, ReluSubgradientAtZeroIsZero) {
  Tensord x({3}, {-1, 0, 1}, true);
  backward(sum_all(relu(x)));
  EXPECT_EQ(to_vec(Tensord({3}, {x.grad().begin(), x.grad().end()})),
            (std::vector<double>{0, 0, 1}));
}

TEST(Elementwise, OverflowIsANumericError) {
  Tensorf x({1}, {1e30f});
  EXPECT_THROW(square(x), NumericError);
}

TEST(Reduce, Mean) {
  EXPECT_DOUBLE_EQ(mean_all(Tensord({3}, {2, 4, 6})).item(), 4.0);
}

TEST(Reduce, EmptyAxisListReturnsInput) {
  Tensorf x({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(to_vec(sum(x, {})), to_vec(x));
}

TEST(Reduce, MeanOfCopiesIsTheCopy) {
  std::vector<double> data;
  const std::vector<double> v{0.5, -1.25, 3.0};
  for (int n = 0; n < 5; ++n) data.insert(data.end(), v.begin(), v.end());
  auto m = mean(Tensord({5, 3}, data), {0});
  EXPECT_EQ(to_vec(m), v);
}

TEST(Reduce, AxesAndErrors) {
  Tensord x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(to_vec(sum(x, {1})), (std::vector<double>{6, 15}));
  EXPECT_EQ(to_vec(sum(x, {0})), (std::vector<double>{5, 7, 9}));
  EXPECT_THROW(sum(x, {2}), DimensionError);
}

TEST(Backward, SumGivesOnes) {
  Tensord x({2, 3}, {1, -2, 3, 0.5, 0, 9}, true);
  backward(sum_all(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwiceInput) {
  Tensord x({4}, {1, -2, 3, 0.25}, true);
  backward(sum_all(mul(x, x)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x[i]);
}

TEST(Backward, FanOutAccumulates) {
  Tensord x({3}, {1, 2, 3}, true);
  backward(add(sum_all(x), sum_all(x)));
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, NonScalarLossIsAContractError) {
  Tensord x({3}, {1, 2, 3}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, TapeIsTopologicallyOrdered) {
  std::mt19937_64 rng(3);
  auto x = random_tensor<double>({3, 3}, rng, -1, 1, true);
  auto w = random_tensor<double>({3, 3}, rng, -1, 1, true);
  auto h = relu(matmul(x, w));
  auto loss = sum_all(add(matmul(h, w), h));
  auto tape = Tape<double>::record(loss);
  std::vector<const Node<double>*> order(tape.ops().begin(), tape.ops().end());
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (const auto& p : order[i]->parents) {
      if (!p->requires_grad) continue;
      auto pos = std::find(order.begin(), order.end(), p.get());
      ASSERT_NE(pos, order.end());
      EXPECT_LT(static_cast<std::size_t>(pos - order.begin()), i);
    }
  }
  EXPECT_EQ(order.back(), loss.node());
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensord x({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = square(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(FdGrad, SumIsOnes) {
  std::mt19937_64 rng(4);
  auto x = random_tensor<double>({5}, rng);
  auto g = fd_grad<double>([](const Tensord& t) { return sum_all(t); }, x);
  for (double v : g.data()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FdGrad, SquaredNorm) {
  auto g = fd_grad<double>([](const Tensord& t) { return sum_all(square(t)); },
                           Tensord({2}, {3, 4}));
  EXPECT_NEAR(g[0], 6.0, 1e-8);
  EXPECT_NEAR(g[1], 8.0, 1e-8);
}

TEST(FdGrad, RejectsNonPositiveStep) {
  EXPECT_THROW(fd_grad<double>([](const Tensord& t) { return sum_all(t); }, Tensord::zeros({1}),
                               0.0),
               ContractError);
}

// Weighted sum with fixed random weights so no gradient is trivially uniform.
template <class F>
void expect_gradcheck(std::vector<NamedParam<double>> params, F body, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto probe = body();
  auto weights = random_tensor<double>(probe.shape(), rng);
  auto reports = check_gradients<double>(
      [&] { return sum_all(mul(body(), weights)); }, std::move(params));
  for (const auto& r : reports) {
    EXPECT_LT(r.worst, 1e-4) << r.name;
  }
}

TEST(GradCheck, CompositeGraphMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  auto x = random_tensor<double>({4, 3}, rng);
  auto w = random_tensor<double>({3, 5}, rng);
  auto b = random_tensor<double>({5}, rng);
  expect_gradcheck({{"x", x}, {"w", w}, {"b", b}}, [&] {
    auto h = softplus(add_bias(matmul(x, w), b));
    auto s = softmax_rows(h);
    return add(mul(s, h), scale(square(h), 0.3));
  }, 6);
}

TEST(GradCheck, ElementwiseAndReductions) {
  std::mt19937_64 rng(7);
  auto a = random_tensor<double>({2, 3, 4}, rng, 0.5, 2.0);
  auto b = random_tensor<double>({2, 3, 4}, rng, 0.5, 2.0);
  auto c = random_tensor<double>({1}, rng, 0.5, 2.0);
  expect_gradcheck({{"a", a}, {"b", b}, {"c", c}}, [&] {
    auto q = div(sub(a, b), add(b, c));
    auto r = sqrt(add(square(a), b));
    return add(mean(add(q, r), {1}), scale(sum(mul(a, c), {1}), 0.5));
  }, 8);
}

TEST(GradCheck, LayerNorm) {
  std::mt19937_64 rng(9);
  auto x = random_tensor<double>({3, 6}, rng, -2, 2);
  auto g = random_tensor<double>({6}, rng, 0.5, 1.5);
  auto b = random_tensor<double>({6}, rng);
  expect_gradcheck({{"x", x}, {"gain", g}, {"bias", b}}, [&] { return layer_norm(x, g, b); }, 10);
}

TEST(GradCheck, LayoutOps) {
  std::mt19937_64 rng(11);
  auto x = random_tensor<double>({2, 3, 4}, rng);
  auto table = random_tensor<double>({5, 4}, rng);
  expect_gradcheck({{"x", x}, {"table", table}}, [&] {
    auto p = reshape(permute(x, {1, 0, 2}), {6, 4});
    auto g = gather_rows(table, {0, 4, 4, 1, 2, 0});
    return masked_fill(mul(p, g), std::vector<bool>(24, false), 0.0);
  }, 12);
}

TEST(GradCheck, BatchedProductsAndNodeMix) {
  std::mt19937_64 rng(13);
  auto a = random_tensor<double>({2, 3, 4}, rng);
  auto b = random_tensor<double>({2, 4, 2}, rng);
  auto bt = random_tensor<double>({2, 5, 4}, rng);
  auto mix = random_tensor<double>({2, 3}, rng);
  expect_gradcheck({{"a", a}, {"b", b}, {"bt", bt}, {"mix", mix}}, [&] {
    auto p = batched_matmul(a, b);              // 2x3x2
    auto q = batched_matmul(a, bt, true);       // 2x3x5
    return add(sum(node_mix(mix, p), {2}), sum(node_mix(mix, q), {2}));
  }, 14);
}

TEST(GradCheck, Conv2d) {
  std::mt19937_64 rng(15);
  auto x = random_tensor<double>({2, 2, 5, 5}, rng);
  auto w = random_tensor<double>({3, 2, 3, 3}, rng);
  auto b = random_tensor<double>({3}, rng);
  expect_gradcheck({{"x", x}, {"w", w}, {"b", b}},
                   [&] { return conv2d(x, w, b, {.stride = 2, .pad = 1}); }, 16);
}

TEST(Conv2d, MatchesDirectLoop) {
  std::mt19937_64 rng(17);
  auto x = random_tensor<double>({1, 2, 6, 5}, rng);
  auto w = random_tensor<double>({3, 2, 3, 3}, rng);
  auto b = random_tensor<double>({3}, rng);
  auto y = conv2d(x, w, b, {.stride = 2, .pad = 1});
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 3}));
  for (int co = 0; co < 3; ++co)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double acc = b[co];
        for (int c = 0; c < 2; ++c)
          for (int ki = 0; ki < 3; ++ki)
            for (int kj = 0; kj < 3; ++kj) {
              const int iy = oy * 2 + ki - 1, ix = ox * 2 + kj - 1;
              if (iy < 0 || ix < 0 || iy >= 6 || ix >= 5) continue;
              acc += w[((co * 2 + c) * 3 + ki) * 3 + kj] * x[(c * 6 + iy) * 5 + ix];
            }
        EXPECT_NEAR(y[(co * 3 + oy) * 3 + ox], acc, 1e-12);
      }
}

TEST(GradCheck, FaultInjectionIsDetected) {
  std::mt19937_64 rng(19);
  auto x = random_tensor<double>({3, 3}, rng);
  auto w = random_tensor<double>({3, 3}, rng);
  ScopedFaultInjection fault("matmul");
  auto reports = check_gradients<double>([&] { return sum_all(square(matmul(x, w))); },
                                         {{"x", x}, {"w", w}});
  for (const auto& r : reports) EXPECT_FALSE(r.passed) << r.name;
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalGrads) {
  auto run = [] {
    std::mt19937_64 rng(21);
    auto x = random_tensor<float>({4, 4}, rng, -1.f, 1.f, true);
    auto w = random_tensor<float>({4, 4}, rng, -1.f, 1.f, true);
    auto loss = mean_all(softmax_rows(matmul(relu(x), w)));
    backward(loss);
    auto out = to_vec(Tensorf({16}, {w.grad().begin(), w.grad().end()}));
    out.push_back(loss.item());
    return out;
  };
  EXPECT_EQ(run(), run());
}
