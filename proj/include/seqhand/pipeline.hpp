#pragma once

// End-to-end model: per-frame image encoder, sequence encoder block, 2D joint
// head and the graph lifter. The single-frame ablation swaps the sequence
// encoder for one dense layer; that path is also the first training stage.

#include <string>
#include <vector>

#include "seqhand/attention.hpp"
#include "seqhand/config.hpp"
#include "seqhand/graph.hpp"

namespace seqhand::pipeline {

using ad::ParamList;
using ad::Tensor;

inline constexpr std::size_t kJoints = 21;

// Strided 3x3 conv stages with ReLU, global average pooling, dense to f.
template <class T>
struct ImageEncoderParams {
  std::vector<Tensor<T>> conv_weight;  // Co x Ci x 3 x 3
  std::vector<Tensor<T>> conv_bias;
  nn::Linear<T> proj;  // last conv channels -> f
  std::size_t channels = 3;
  std::size_t img_h = 0, img_w = 0;
  bool coord_channels = true;

  static ImageEncoderParams init(const ModelConfig& cfg, nn::Rng& rng) {
    ImageEncoderParams p;
    p.channels = cfg.channels;
    p.img_h = cfg.img_h;
    p.img_w = cfg.img_w;
    p.coord_channels = cfg.coord_channels;
    std::size_t in = cfg.channels + (cfg.coord_channels ? 2 : 0);
    for (const auto out : cfg.conv_channels) {
      p.conv_weight.push_back(nn::normal_param<T>({out, in, 3, 3}, nn::he_std(in * 9), rng));
      p.conv_bias.push_back(nn::constant_param<T>({out}, 0.0));
      in = out;
    }
    p.proj = nn::Linear<T>::init(in, cfg.embed_dim, nn::glorot_std(in, cfg.embed_dim), rng);
    return p;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < conv_weight.size(); ++i) {
      out.push_back({prefix + ".conv" + std::to_string(i) + ".weight", conv_weight[i]});
      out.push_back({prefix + ".conv" + std::to_string(i) + ".bias", conv_bias[i]});
    }
    proj.collect(out, prefix + ".proj");
  }
};

namespace detail {

// Two constant planes holding x and y pixel positions scaled to [-1, 1].
template <class T>
Tensor<T> coordinate_planes(std::size_t batch, std::size_t h, std::size_t w) {
  std::vector<T> data(batch * 2 * h * w);
  for (std::size_t b = 0; b < batch; ++b) {
    T* xs = data.data() + b * 2 * h * w;
    T* ys = xs + h * w;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        xs[i * w + j] = w > 1 ? T(2) * T(j) / T(w - 1) - T(1) : T(0);
        ys[i * w + j] = h > 1 ? T(2) * T(i) / T(h - 1) - T(1) : T(0);
      }
  }
  return Tensor<T>({batch, 2, h, w}, std::move(data));
}

}  // namespace detail

// frames[B x 3 x h x w] -> [B x f]. A single frame [3 x h x w] gives [1 x f].
template <class T>
Tensor<T> image_encode(const Tensor<T>& frames, const ImageEncoderParams<T>& p) {
  const Shape frame{p.channels, p.img_h, p.img_w};
  const bool single = frames.rank() == 3;
  if ((frames.rank() != 3 && frames.rank() != 4) ||
      !std::equal(frame.begin(), frame.end(), frames.shape().end() - 3)) {
    throw DimensionError("image encoder: frames " + shape_str(frames.shape()) +
                         " do not end in " + shape_str(frame));
  }
  const auto batch = single ? 1 : frames.dim(0);
  auto x = ad::reshape(frames, {batch, p.channels, p.img_h, p.img_w});
  if (p.coord_channels) {
    x = ad::concat<T>({x, detail::coordinate_planes<T>(batch, p.img_h, p.img_w)}, 1);
  }
  for (std::size_t i = 0; i < p.conv_weight.size(); ++i) {
    x = ad::relu(ad::conv2d(x, p.conv_weight[i], p.conv_bias[i], {2, 1}));
  }
  return p.proj(ad::mean(x, {2, 3}));
}

// L -> hidden -> 42, read as 21 x 2 pixel coordinates.
template <class T>
struct JointHeadParams {
  nn::Linear<T> hidden;
  nn::Linear<T> out;

  // The output bias starts at `center` so early predictions sit mid-frame.
  static JointHeadParams init(std::size_t width, std::size_t hidden_width, T center_x,
                              T center_y, nn::Rng& rng) {
    JointHeadParams p;
    p.hidden = nn::Linear<T>::init(width, hidden_width, nn::he_std(width), rng);
    p.out = nn::Linear<T>::init(hidden_width, kJoints * 2,
                                nn::glorot_std(hidden_width, kJoints * 2), rng);
    auto b = p.out.bias.mutable_data();
    for (std::size_t j = 0; j < kJoints; ++j) {
      b[2 * j] = center_x;
      b[2 * j + 1] = center_y;
    }
    return p;
  }

  void collect(ParamList<T>& out_list, const std::string& prefix) const {
    hidden.collect(out_list, prefix + ".hidden");
    out.collect(out_list, prefix + ".out");
  }
};

// c[... x L] -> [... x 21 x 2]
template <class T>
Tensor<T> joints2d_head(const Tensor<T>& c, const JointHeadParams<T>& p) {
  if (c.rank() < 1 || c.shape().back() != p.hidden.in_features()) {
    throw DimensionError("joint head: context " + shape_str(c.shape()) + " vs width " +
                         std::to_string(p.hidden.in_features()));
  }
  auto y = p.out(ad::relu(p.hidden(c)));
  Shape shape(c.shape().begin(), c.shape().end() - 1);
  shape.push_back(kJoints);
  shape.push_back(2);
  return ad::reshape(y, std::move(shape));
}

template <class T>
struct PoseSet {
  Tensor<T> joints2d;  // [... x 21 x 2]
  Tensor<T> joints3d;  // [... x 21 x 3]
};

enum class Stage : int { fresh = 0, step1 = 1, step2 = 2 };

template <class T>
struct Model {
  ModelConfig cfg;
  ImageEncoderParams<T> encoder;
  nn::Linear<T> fc;  // single-frame replacement for the sequence encoder
  attention::EncoderBlockParams<T> block;
  JointHeadParams<T> head;
  graph::GraphUNetParams<T> lifter;
  Stage stage = Stage::fresh;

  static Model init(const ModelConfig& cfg) {
    cfg.validate();
    nn::Rng rng(cfg.seed);
    Model m;
    m.cfg = cfg;
    m.encoder = ImageEncoderParams<T>::init(cfg, rng);
    m.fc = nn::Linear<T>::init(cfg.embed_dim, cfg.context_dim,
                               nn::glorot_std(cfg.embed_dim, cfg.context_dim), rng);
    m.block = init_block(cfg, rng);
    m.init_head_and_lifter(rng);
    return m;
  }

  static attention::EncoderBlockParams<T> init_block(const ModelConfig& cfg, nn::Rng& rng) {
    auto b = attention::EncoderBlockParams<T>::init(cfg.embed_dim, cfg.heads, cfg.ff_dim,
                                                    cfg.max_seq_len, rng);
    b.use_positions = cfg.use_positions;
    return b;
  }

  void init_head_and_lifter(nn::Rng& rng) {
    head = JointHeadParams<T>::init(cfg.context_dim, cfg.head_hidden, T(cfg.img_w) / T(2),
                                    T(cfg.img_h) / T(2), rng);
    graph::UNetSchedule s;
    s.nodes = cfg.unet_nodes;
    s.widths = cfg.unet_widths;
    lifter = graph::GraphUNetParams<T>::init(s, cfg.adjacency_prior, rng);
  }

  void collect_encoder(ParamList<T>& out) const { encoder.collect(out, "encoder"); }
  void collect_fc(ParamList<T>& out) const { fc.collect(out, "fc"); }
  void collect_block(ParamList<T>& out) const { block.collect(out, "block"); }
  void collect_head(ParamList<T>& out) const {
    head.collect(out, "head");
    lifter.collect(out, "lifter");
  }

  // Every tensor, in checkpoint order.
  ParamList<T> parameters() const {
    ParamList<T> out;
    collect_encoder(out);
    collect_fc(out);
    collect_block(out);
    collect_head(out);
    return out;
  }

  ParamList<T> step1_parameters() const {
    ParamList<T> out;
    collect_encoder(out);
    collect_fc(out);
    collect_head(out);
    return out;
  }

  ParamList<T> step2_parameters() const {
    ParamList<T> out;
    collect_block(out);
    collect_head(out);
    return out;
  }

  // Stage 2 of the single-frame ablation: the dense layer takes the place of
  // the sequence encoder.
  ParamList<T> step2_ablation_parameters() const {
    ParamList<T> out;
    collect_fc(out);
    collect_head(out);
    return out;
  }
};

// Lifter input: 2D joints relative to the wrist, scaled so a hand spanning a
// quarter of the frame has coordinates of order one.
template <class T>
Tensor<T> lifter_input(const Tensor<T>& joints2d, std::size_t img_w) {
  const auto batch = joints2d.numel() / (kJoints * 2);
  const T s = T(4) / static_cast<T>(img_w);
  std::vector<T> center(kJoints * kJoints, T(0));
  for (std::size_t i = 0; i < kJoints; ++i) {
    center[i * kJoints + i] += s;
    center[i * kJoints] -= s;
  }
  return ad::node_mix(Tensor<T>({kJoints, kJoints}, std::move(center)),
                      ad::reshape(joints2d, {batch, kJoints, 2}));
}

// joints2d[... x 21 x 2] -> joints3d[... x 21 x 3], one graph per frame.
template <class T>
Tensor<T> lift(const Tensor<T>& joints2d, const Model<T>& m) {
  if (joints2d.rank() < 2 || joints2d.dim(joints2d.rank() - 1) != 2 ||
      joints2d.dim(joints2d.rank() - 2) != kJoints) {
    throw DimensionError("lifter: input " + shape_str(joints2d.shape()) + " is not [.. x 21 x 2]");
  }
  auto out = graph::graph_unet_forward(lifter_input(joints2d, m.cfg.img_w), m.lifter);
  Shape shape = joints2d.shape();
  shape.back() = 3;
  return ad::reshape(out, std::move(shape));
}

// embeddings[B x N x f] (or [N x f]) through the sequence encoder.
template <class T>
PoseSet<T> forward_from_embeddings(const Tensor<T>& embeddings, const Model<T>& m) {
  if (embeddings.rank() != 2 && embeddings.rank() != 3) {
    throw DimensionError("sequence encoder: embeddings " + shape_str(embeddings.shape()));
  }
  const auto n = embeddings.dim(embeddings.rank() - 2);
  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = i;
  auto context = attention::encoder_block_forward(embeddings, m.block, positions);
  auto z = joints2d_head(context, m.head);
  return {z, lift(z, m)};
}

// frames[B x N x 3 x h x w] or [N x 3 x h x w].
template <class T>
PoseSet<T> forward_full(const Tensor<T>& frames, const Model<T>& m) {
  if (frames.rank() != 4 && frames.rank() != 5) {
    throw DimensionError("forward_full: frames " + shape_str(frames.shape()) +
                         " are not [B x N x 3 x h x w]");
  }
  const bool single = frames.rank() == 4;
  const auto batch = single ? 1 : frames.dim(0);
  const auto n = frames.dim(single ? 0 : 1);
  if (n != m.cfg.seq_len) {
    throw DimensionError("forward_full: sequence length " + std::to_string(n) +
                         " differs from configured " + std::to_string(m.cfg.seq_len));
  }
  Shape flat{batch * n};
  flat.insert(flat.end(), frames.shape().end() - 3, frames.shape().end());
  auto x = image_encode(ad::reshape(frames, flat), m.encoder);
  x = ad::reshape(x, single ? Shape{n, m.cfg.embed_dim} : Shape{batch, n, m.cfg.embed_dim});
  return forward_from_embeddings(x, m);
}

// embeddings[... x f] through the dense layer instead of the sequence
// encoder; every row is independent.
template <class T>
PoseSet<T> ablation_from_embeddings(const Tensor<T>& embeddings, const Model<T>& m) {
  auto z = joints2d_head(m.fc(embeddings), m.head);
  return {z, lift(z, m)};
}

// frames[B x 3 x h x w] or one frame [3 x h x w]; no cross-frame context.
template <class T>
PoseSet<T> forward_ablation(const Tensor<T>& frames, const Model<T>& m) {
  auto x = image_encode(frames, m.encoder);
  auto z = joints2d_head(m.fc(x), m.head);
  if (frames.rank() == 3) z = ad::reshape(z, {kJoints, 2});
  return {z, lift(z, m)};
}

// Euclidean distance per joint: [... x d] -> [...]
template <class T>
Tensor<T> joint_distances(const Tensor<T>& pred, const Tensor<T>& gt) {
  if (pred.shape() != gt.shape() || pred.rank() < 2) {
    throw DimensionError("loss: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(gt.shape()));
  }
  return ad::sqrt(ad::sum(ad::square(ad::sub(pred, gt)), {pred.rank() - 1}));
}

enum class Reduction { mean, sum };

inline Reduction reduction_from(const std::string& name) {
  if (name == "mean") return Reduction::mean;
  if (name == "sum") return Reduction::sum;
  throw ContractError("loss reduction must be 'mean' or 'sum', got '" + name + "'");
}

// Per-frame joint loss averaged over frames: mean distance, or the sum over
// the 21 joints under Reduction::sum.
template <class T>
Tensor<T> pose_loss(const Tensor<T>& pred, const Tensor<T>& gt, Reduction r = Reduction::mean) {
  auto loss = ad::mean_all(joint_distances(pred, gt));
  if (r == Reduction::sum) loss = ad::scale(loss, static_cast<T>(pred.dim(pred.rank() - 2)));
  return loss;
}

// alpha * L2D + L3D
template <class T>
Tensor<T> loss_step1(const Tensor<T>& pred2d, const Tensor<T>& gt2d, const Tensor<T>& pred3d,
                     const Tensor<T>& gt3d, T alpha, Reduction r = Reduction::mean) {
  return ad::add(ad::scale(pose_loss(pred2d, gt2d, r), alpha), pose_loss(pred3d, gt3d, r));
}

template <class T>
Tensor<T> loss_step2(const Tensor<T>& pred3d, const Tensor<T>& gt3d,
                     Reduction r = Reduction::mean) {
  return pose_loss(pred3d, gt3d, r);
}

}  // namespace seqhand::pipeline
