#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "seqhand/gradcheck.hpp"
#include "seqhand/graph.hpp"
#include "seqhand/optim.hpp"
#include "test_util.hpp"

using namespace seqhand;
using namespace seqhand::ad;
using namespace seqhand::graph;
using seqhand::testing::random_tensor;
using seqhand::testing::to_vec;

namespace {

// raw value whose softplus is `v`; very negative raw approximates zero.
double inverse_softplus(double v) { return v <= 0 ? -60.0 : std::log(std::expm1(v)); }

LearnableAdjacency<double> adjacency_from_hat(const std::vector<double>& hat, std::size_t k) {
  std::vector<double> raw(k * k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      raw[i * k + j] = inverse_softplus(hat[i * k + j] - (i == j ? 1.0 : 0.0));
  return {Tensord({k, k}, raw, true)};
}

}  // namespace

TEST(NormalizeAdjacency, IdentityHatGivesIdentity) {
  auto a_bar = normalize_adjacency(adjacency_from_hat({1, 0, 0, 0, 1, 0, 0, 0, 1}, 3));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(a_bar[i * 3 + j], i == j ? 1.0 : 0.0, 1e-12);
}

TEST(NormalizeAdjacency, AllOnesTwoByTwo) {
  auto a_bar = symmetric_normalize(Tensord({2, 2}, {1, 1, 1, 1}));
  for (double v : a_bar.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(NormalizeAdjacency, ElementwiseFormulaOnRandomGraphs) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> size(2, 21);
  for (int trial = 0; trial < 50; ++trial) {
    const auto k = size(rng);
    LearnableAdjacency<double> adj{random_tensor<double>({k, k}, rng, -3, 3)};
    auto hat = adjacency_with_self_loops(adj);
    auto a_bar = normalize_adjacency(adj);
    std::vector<double> d(k, 0.0);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) d[i] += hat[i * k + j];
    for (std::size_t i = 0; i < k; ++i) {
      EXPECT_GE(hat[i * k + i], 1.0);
      for (std::size_t j = 0; j < k; ++j) {
        EXPECT_GE(hat[i * k + j], 0.0);
        EXPECT_NEAR(a_bar[i * k + j], hat[i * k + j] / std::sqrt(d[i] * d[j]), 1e-6);
      }
    }
  }
}

TEST(NormalizeAdjacency, SymmetricInputGivesSymmetricOutput) {
  std::mt19937_64 rng(2);
  const std::size_t k = 7;
  auto raw = random_tensor<double>({k, k}, rng, -2, 2);
  auto d = raw.mutable_data();
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < i; ++j) d[i * k + j] = d[j * k + i];
  auto a_bar = normalize_adjacency(LearnableAdjacency<double>{raw});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) EXPECT_NEAR(a_bar[i * k + j], a_bar[j * k + i], 1e-15);
}

TEST(NormalizeAdjacency, DefaultInitHasUniformPrior) {
  auto adj = LearnableAdjacency<double>::init(5, 0.5);
  auto hat = adjacency_with_self_loops(adj);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(hat[i * 5 + j], i == j ? 1.5 : 0.5, 1e-12);
}

TEST(NormalizeAdjacency, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(3);
  LearnableAdjacency<double> adj{random_tensor<double>({5, 5}, rng, -2, 2)};
  auto weights = random_tensor<double>({5, 5}, rng);
  auto reports = check_gradients<double>(
      [&] { return sum_all(mul(normalize_adjacency(adj), weights)); }, {{"raw", adj.raw}});
  EXPECT_LT(reports[0].worst, 1e-4);
}

TEST(GCLayer, IdentityCase) {
  std::mt19937_64 rng(4);
  auto x = random_tensor<double>({4, 4}, rng);
  GCLayerParams<double> p{Tensord::identity(4), true};
  EXPECT_EQ(to_vec(gc_layer_forward(x, Tensord::identity(4), p)), to_vec(x));
}

TEST(GCLayer, LinearWithIdentityActivation) {
  std::mt19937_64 rng(5);
  auto a = random_tensor<double>({4, 4}, rng);
  GCLayerParams<double> p{random_tensor<double>({3, 2}, rng), true};
  auto x1 = random_tensor<double>({4, 3}, rng);
  auto x2 = random_tensor<double>({4, 3}, rng);
  auto lhs = gc_layer_forward(add(x1, x2), a, p);
  auto rhs = add(gc_layer_forward(x1, a, p), gc_layer_forward(x2, a, p));
  for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-12);
}

// sigma(A X W) by triple loop.
TEST(GCLayer, MatchesScalarOracle) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> size(1, 6);
  for (int trial = 0; trial < 30; ++trial) {
    const auto k = size(rng), f = size(rng), e = size(rng);
    const bool final = trial % 2 == 0;
    auto a = random_tensor<double>({k, k}, rng);
    auto x = random_tensor<double>({k, f}, rng);
    GCLayerParams<double> p{random_tensor<double>({f, e}, rng), final};
    auto out = gc_layer_forward(x, a, p);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t o = 0; o < e; ++o) {
        double acc = 0;
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t c = 0; c < f; ++c) acc += a[i * k + j] * x[j * f + c] * p.weight[c * e + o];
        if (!final) acc = std::max(acc, 0.0);
        EXPECT_NEAR(out[i * e + o], acc, 1e-6);
      }
  }
}

TEST(GCLayer, ShapeMismatchThrows) {
  GCLayerParams<double> p{Tensord::zeros({3, 2}), false};
  EXPECT_THROW(gc_layer_forward(Tensord::zeros({4, 2}), Tensord::identity(4), p), DimensionError);
  EXPECT_THROW(gc_layer_forward(Tensord::zeros({4, 3}), Tensord::identity(5), p), DimensionError);
}

TEST(GraphPool, RowSelector) {
  std::mt19937_64 rng(7);
  auto x = random_tensor<double>({5, 3}, rng);
  Tensord select({2, 5}, {0, 0, 1, 0, 0, 0, 0, 0, 0, 1});
  auto pooled = graph_pool(x, select);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(pooled[j], x[2 * 3 + j]);
    EXPECT_EQ(pooled[3 + j], x[4 * 3 + j]);
  }
}

TEST(GraphPool, UnpoolOfPoolRestoresNodeCount) {
  std::mt19937_64 rng(8);
  auto x = random_tensor<double>({21, 4}, rng);
  auto p = random_tensor<double>({12, 21}, rng);
  auto u = random_tensor<double>({21, 12}, rng);
  EXPECT_EQ(graph_unpool(graph_pool(x, p), u).shape(), (Shape{21, 4}));
  EXPECT_THROW(graph_pool(x, u), DimensionError);
}

TEST(GraphPool, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(9);
  auto x = random_tensor<double>({2, 6, 3}, rng);
  auto p = random_tensor<double>({3, 6}, rng);
  auto u = random_tensor<double>({6, 3}, rng);
  auto weights = random_tensor<double>({2, 6, 3}, rng);
  auto reports = check_gradients<double>(
      [&] { return sum_all(mul(graph_unpool(graph_pool(x, p), u), weights)); },
      {{"pool", p}, {"unpool", u}, {"x", x}});
  for (const auto& r : reports) EXPECT_LT(r.worst, 1e-4) << r.name;
}

TEST(GraphUNet, OutputShapeAndScheduleChecks) {
  nn::Rng init(10);
  auto p = GraphUNetParams<float>::init({}, 0.05, init);
  std::mt19937_64 rng(11);
  EXPECT_EQ(graph_unet_forward(random_tensor<float>({21, 2}, rng), p).shape(), (Shape{21, 3}));
  EXPECT_EQ(graph_unet_forward(random_tensor<float>({4, 21, 2}, rng), p).shape(),
            (Shape{4, 21, 3}));
  EXPECT_THROW(graph_unet_forward(Tensorf::zeros({20, 2}), p), DimensionError);
  UNetSchedule bad;
  bad.nodes = {21, 12, 12, 3};
  EXPECT_THROW(GraphUNetParams<float>::init(bad, 0.05, init), ContractError);
  // Skip connections join levels of equal node count and width.
  for (std::size_t i = 0; i < p.pool.size(); ++i) {
    EXPECT_EQ(p.unpool[i].dim(0), p.pool[i].dim(1));
    EXPECT_EQ(p.up[i].in_features(), p.down[i].out_features());
  }
}

TEST(GraphUNet, BatchItemsAreIndependent) {
  nn::Rng init(12);
  auto p = GraphUNetParams<double>::init({}, 0.05, init);
  std::mt19937_64 rng(13);
  auto z = random_tensor<double>({2, 21, 2}, rng);
  auto out = graph_unet_forward(z, p);
  Tensord z0({21, 2}, std::vector<double>(z.data().begin(), z.data().begin() + 42));
  auto single = graph_unet_forward(z0, p);
  for (std::size_t i = 0; i < 63; ++i) EXPECT_NEAR(out[i], single[i], 1e-12);
}

TEST(GraphUNet, GradientsMatchFiniteDifferences) {
  UNetSchedule small;
  small.nodes = {21, 6, 3};
  small.widths = {4, 5};
  nn::Rng init(14);
  auto p = GraphUNetParams<double>::init(small, 0.05, init);
  // Perturb adjacency away from the uniform prior.
  std::mt19937_64 rng(15);
  for (auto& adj : p.adjacency) adj.raw = random_tensor<double>(adj.raw.shape(), rng, -1, 1);
  auto z = random_tensor<double>({2, 21, 2}, rng);
  auto weights = random_tensor<double>({2, 21, 3}, rng);
  ParamList<double> params;
  p.collect(params, "lifter");
  auto reports = check_gradients<double>(
      [&] { return sum_all(mul(graph_unet_forward(z, p), weights)); }, params);
  for (const auto& r : reports) EXPECT_LT(r.worst, 1e-4) << r.name;
}

// Mean per-joint Euclidean distance, 500 full-batch Adam steps with two
// tenfold rate drops.
TEST(GraphUNet, OverfitsASinglePair) {
  for (std::uint64_t seed : {16, 17, 18}) {
    nn::Rng init(seed);
    auto p = GraphUNetParams<float>::init({}, 0.05, init);
    std::mt19937_64 rng(seed + 100);
    auto z = random_tensor<float>({21, 2}, rng, -1.f, 1.f);
    auto target = random_tensor<float>({21, 3}, rng, -1.f, 1.f);
    ParamList<float> params;
    p.collect(params, "lifter");
    optim::Adam<float> adam(params, {});
    float loss_value = 0;
    for (int step = 0; step < 500; ++step) {
      adam.zero_grad();
      auto dist = sqrt(sum(square(sub(graph_unet_forward(z, p), target)), {1}));
      auto loss = mean_all(dist);
      backward(loss);
      adam.step(step < 300 ? 3e-3 : step < 420 ? 3e-4 : 3e-5);
      loss_value = loss.item();
    }
    EXPECT_LT(loss_value, 1e-3f) << "seed " << seed;
  }
}
