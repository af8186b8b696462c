#pragma once

#include <random>
#include <vector>

#include "seqhand/config.hpp"
#include "seqhand/tensor.hpp"

namespace seqhand::testing {

template <class T>
ad::Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, T lo = T(-1), T hi = T(1),
                            bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return ad::Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

template <class T>
std::vector<T> to_vec(const ad::Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

// Reduced model for finite-difference checks: 8x8 frames, f = 8.
inline ModelConfig tiny_config(std::size_t seq_len = 2) {
  ModelConfig cfg;
  cfg.seq_len = seq_len;
  cfg.max_seq_len = 4;
  cfg.img_h = cfg.img_w = 8;
  cfg.conv_channels = {3, 4};
  cfg.embed_dim = cfg.context_dim = 8;
  cfg.heads = 2;
  cfg.ff_dim = 16;
  cfg.head_hidden = 8;
  cfg.unet_nodes = {21, 6, 3};
  cfg.unet_widths = {4, 5};
  return cfg;
}

}  // namespace seqhand::testing
