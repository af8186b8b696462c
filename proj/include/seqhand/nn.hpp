#pragma once

// Parameter initialization and the dense layer shared by every module.

#include <cmath>
#include <random>
#include <string>

#include "seqhand/ops.hpp"

namespace seqhand::nn {

using ad::ParamList;
using ad::Tensor;

using Rng = std::mt19937_64;

template <class T>
Tensor<T> normal_param(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(data), true);
}

template <class T>
Tensor<T> constant_param(Shape shape, double value) {
  const auto n = shape_numel(shape);
  return Tensor<T>(std::move(shape), std::vector<T>(n, static_cast<T>(value)), true);
}

// He-normal for layers followed by ReLU, Glorot-normal otherwise.
inline double he_std(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }
inline double glorot_std(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
}

// y = x W + b over the last axis of x.
template <class T>
struct Linear {
  Tensor<T> weight;  // in x out
  Tensor<T> bias;    // out

  static Linear init(std::size_t in, std::size_t out, double stddev, Rng& rng) {
    return {normal_param<T>({in, out}, stddev, rng), constant_param<T>({out}, 0.0)};
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.rank() < 1 || x.shape().back() != in_features()) {
      throw DimensionError("linear: input " + shape_str(x.shape()) + " does not end in width " +
                           std::to_string(in_features()));
    }
    Shape out_shape = x.shape();
    out_shape.back() = out_features();
    auto flat = x.rank() == 2 ? x : ad::reshape(x, {x.numel() / in_features(), in_features()});
    auto y = ad::add_bias(ad::matmul(flat, weight), bias);
    return x.rank() == 2 ? y : ad::reshape(y, std::move(out_shape));
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

}  // namespace seqhand::nn
