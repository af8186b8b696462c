#pragma once

// Graph convolution over a learnable, symmetrically normalized adjacency and
// the Graph U-Net that lifts 2D joints to 3D.

#include <cmath>
#include <string>
#include <vector>

#include "seqhand/nn.hpp"

namespace seqhand::graph {

using ad::ParamList;
using ad::Tensor;

// Trainable K x K connectivity. Entries pass through softplus before the
// self-loops are added, so every degree is at least 1.
template <class T>
struct LearnableAdjacency {
  Tensor<T> raw;  // K x K

  // softplus(raw) == prior everywhere.
  static LearnableAdjacency init(std::size_t nodes, double prior = 0.05) {
    const double raw_value = std::log(std::expm1(prior));
    return {nn::constant_param<T>({nodes, nodes}, raw_value)};
  }

  std::size_t nodes() const { return raw.dim(0); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".raw", raw});
  }
};

// A_hat = softplus(raw) + I
template <class T>
Tensor<T> adjacency_with_self_loops(const LearnableAdjacency<T>& adj) {
  if (adj.raw.rank() != 2 || adj.raw.dim(0) != adj.raw.dim(1) || adj.raw.dim(0) == 0) {
    throw DimensionError("adjacency must be a non-empty square matrix, got " +
                         shape_str(adj.raw.shape()));
  }
  return ad::add(ad::softplus(adj.raw), Tensor<T>::identity(adj.nodes()));
}

// D^-1/2 A_hat D^-1/2 for a given A_hat, D = diag(row sums).
template <class T>
Tensor<T> symmetric_normalize(const Tensor<T>& a_hat) {
  const auto k = a_hat.dim(0);
  auto degree = ad::sum(a_hat, {1});
  auto inv_sqrt = ad::div(Tensor<T>::scalar(T(1)), ad::sqrt(degree));
  auto outer = ad::matmul(ad::reshape(inv_sqrt, {k, 1}), ad::reshape(inv_sqrt, {1, k}));
  return ad::mul(a_hat, outer);
}

template <class T>
Tensor<T> normalize_adjacency(const LearnableAdjacency<T>& adj) {
  return symmetric_normalize(adjacency_with_self_loops(adj));
}

template <class T>
struct GCLayerParams {
  Tensor<T> weight;  // F x E
  bool final = false;  // identity activation instead of ReLU

  static GCLayerParams init(std::size_t in, std::size_t out, bool final, nn::Rng& rng) {
    const double s = final ? nn::glorot_std(in, out) : nn::he_std(in);
    return {nn::normal_param<T>({in, out}, s, rng), final};
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

// O = sigma(A_bar X W) for X[K x F] or a batch X[B x K x F].
template <class T>
Tensor<T> gc_layer_forward(const Tensor<T>& x, const Tensor<T>& a_bar, const GCLayerParams<T>& p) {
  const bool single = x.rank() == 2;
  if ((x.rank() != 2 && x.rank() != 3) || x.shape().back() != p.in_features()) {
    throw DimensionError("gc layer: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(p.weight.shape()));
  }
  const auto batch = single ? 1 : x.dim(0);
  const auto k = single ? x.dim(0) : x.dim(1);
  if (a_bar.rank() != 2 || a_bar.dim(0) != k || a_bar.dim(1) != k) {
    throw DimensionError("gc layer: adjacency " + shape_str(a_bar.shape()) + " for " +
                         std::to_string(k) + " nodes");
  }
  auto mixed = ad::node_mix(a_bar, ad::reshape(x, {batch, k, p.in_features()}));
  auto y = ad::matmul(ad::reshape(mixed, {batch * k, p.in_features()}), p.weight);
  if (!p.final) y = ad::relu(y);
  return single ? y : ad::reshape(y, {batch, k, p.out_features()});
}

namespace detail {

template <class T>
Tensor<T> project_nodes(const Tensor<T>& x, const Tensor<T>& proj, const char* what) {
  const bool single = x.rank() == 2;
  const auto k = single ? x.dim(0) : x.dim(1);
  if ((x.rank() != 2 && x.rank() != 3) || proj.rank() != 2 || proj.dim(1) != k) {
    throw DimensionError(std::string(what) + ": projection " + shape_str(proj.shape()) +
                         " vs input " + shape_str(x.shape()));
  }
  const auto batch = single ? 1 : x.dim(0);
  const auto f = x.shape().back();
  auto y = ad::node_mix(proj, ad::reshape(x, {batch, k, f}));
  return single ? ad::reshape(y, {proj.dim(0), f}) : y;
}

}  // namespace detail

// X[K x F], P[K' x K] -> [K' x F] (batched inputs allowed).
template <class T>
Tensor<T> graph_pool(const Tensor<T>& x, const Tensor<T>& pool) {
  return detail::project_nodes(x, pool, "graph_pool");
}

// X[K' x F], U[K x K'] -> [K x F] (batched inputs allowed).
template <class T>
Tensor<T> graph_unpool(const Tensor<T>& x, const Tensor<T>& unpool) {
  return detail::project_nodes(x, unpool, "graph_unpool");
}

struct UNetSchedule {
  std::vector<std::size_t> nodes{21, 12, 6, 3};    // per resolution, strictly decreasing
  std::vector<std::size_t> widths{32, 64, 128};    // encoder width at each non-bottom resolution
  std::size_t in_features = 2;
  std::size_t out_features = 3;

  void validate() const {
    if (nodes.size() < 2 || widths.size() + 1 != nodes.size()) {
      throw ContractError("graph u-net: need one width per pooled resolution");
    }
    for (std::size_t i = 1; i < nodes.size(); ++i) {
      if (nodes[i] == 0 || nodes[i] >= nodes[i - 1]) {
        throw ContractError("graph u-net: node counts must strictly decrease");
      }
    }
  }
};

// Encoder: GC at each resolution, then pool. Bottleneck GC at the coarsest
// resolution. Decoder: unpool, add the encoder output of equal size, GC.
// One adjacency per resolution, shared by encoder and decoder layers there.
template <class T>
struct GraphUNetParams {
  UNetSchedule schedule;
  std::vector<LearnableAdjacency<T>> adjacency;  // one per resolution
  std::vector<GCLayerParams<T>> down;            // encoder, one per pooled level
  std::vector<Tensor<T>> pool;                   // nodes[i+1] x nodes[i]
  GCLayerParams<T> bottleneck;
  std::vector<Tensor<T>> unpool;                 // nodes[i] x nodes[i+1]
  std::vector<GCLayerParams<T>> up;              // decoder, indexed by level

  static GraphUNetParams init(const UNetSchedule& s, double adjacency_prior, nn::Rng& rng) {
    s.validate();
    GraphUNetParams p;
    p.schedule = s;
    const auto levels = s.widths.size();
    for (const auto k : s.nodes) p.adjacency.push_back(LearnableAdjacency<T>::init(k, adjacency_prior));
    std::size_t in = s.in_features;
    for (std::size_t i = 0; i < levels; ++i) {
      p.down.push_back(GCLayerParams<T>::init(in, s.widths[i], false, rng));
      p.pool.push_back(group_projection(s.nodes[i + 1], s.nodes[i], false, rng));
      p.unpool.push_back(group_projection(s.nodes[i], s.nodes[i + 1], true, rng));
      in = s.widths[i];
    }
    p.bottleneck = GCLayerParams<T>::init(in, in, false, rng);
    for (std::size_t i = 0; i < levels; ++i) {
      const bool last = i == 0;
      p.up.push_back(GCLayerParams<T>::init(s.widths[i], last ? s.out_features : s.widths[i - 1],
                                            last, rng));
    }
    return p;
  }

  // Contiguous node groups: pooling averages each group, unpooling copies the
  // group value back to its members. A little noise breaks symmetry.
  static Tensor<T> group_projection(std::size_t rows, std::size_t cols, bool expand, nn::Rng& rng) {
    const auto coarse = expand ? cols : rows;
    const auto fine = expand ? rows : cols;
    std::vector<std::size_t> group(fine);
    std::vector<std::size_t> size(coarse, 0);
    for (std::size_t i = 0; i < fine; ++i) {
      group[i] = i * coarse / fine;
      ++size[group[i]];
    }
    auto t = nn::normal_param<T>({rows, cols}, 0.01, rng);
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < fine; ++i) {
      if (expand) {
        d[i * cols + group[i]] += T(1);
      } else {
        d[group[i] * cols + i] += T(1) / static_cast<T>(size[group[i]]);
      }
    }
    return t;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < adjacency.size(); ++i) {
      adjacency[i].collect(out, prefix + ".adj" + std::to_string(i));
    }
    for (std::size_t i = 0; i < down.size(); ++i) {
      out.push_back({prefix + ".down" + std::to_string(i) + ".weight", down[i].weight});
      out.push_back({prefix + ".pool" + std::to_string(i), pool[i]});
    }
    out.push_back({prefix + ".bottleneck.weight", bottleneck.weight});
    for (std::size_t i = 0; i < up.size(); ++i) {
      out.push_back({prefix + ".unpool" + std::to_string(i), unpool[i]});
      out.push_back({prefix + ".up" + std::to_string(i) + ".weight", up[i].weight});
    }
  }
};

// z[K0 x in] (or batched [B x K0 x in]) -> [K0 x out].
template <class T>
Tensor<T> graph_unet_forward(const Tensor<T>& z, const GraphUNetParams<T>& p) {
  const auto& s = p.schedule;
  const bool single = z.rank() == 2;
  const Shape expect_tail{s.nodes[0], s.in_features};
  if ((z.rank() != 2 && z.rank() != 3) ||
      !std::equal(expect_tail.begin(), expect_tail.end(), z.shape().end() - 2)) {
    throw DimensionError("graph u-net: input " + shape_str(z.shape()) + ", expected [.. x " +
                         std::to_string(s.nodes[0]) + " x " + std::to_string(s.in_features) + "]");
  }
  const auto batch = single ? 1 : z.dim(0);
  const auto levels = s.widths.size();
  std::vector<Tensor<T>> a_bar;
  for (const auto& adj : p.adjacency) a_bar.push_back(normalize_adjacency(adj));

  auto x = ad::reshape(z, {batch, s.nodes[0], s.in_features});
  std::vector<Tensor<T>> skips;
  for (std::size_t i = 0; i < levels; ++i) {
    x = gc_layer_forward(x, a_bar[i], p.down[i]);
    skips.push_back(x);
    x = graph_pool(x, p.pool[i]);
  }
  x = gc_layer_forward(x, a_bar[levels], p.bottleneck);
  for (std::size_t i = levels; i-- > 0;) {
    x = ad::add(graph_unpool(x, p.unpool[i]), skips[i]);
    x = gc_layer_forward(x, a_bar[i], p.up[i]);
  }
  return single ? ad::reshape(x, {s.nodes[0], s.out_features}) : x;
}

}  // namespace seqhand::graph
