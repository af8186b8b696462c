#pragma once

// Two-stage training. Stage 1 fits image encoder, dense layer, joint head and
// lifter on single frames. Stage 2 freezes the image encoder, trains a fresh
// sequence encoder and fine-tunes head and lifter on whole sequences.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "seqhand/data.hpp"
#include "seqhand/io.hpp"
#include "seqhand/optim.hpp"
#include "seqhand/pipeline.hpp"

namespace seqhand::train {

using ad::Tensor;
using pipeline::Model;
using pipeline::Stage;

struct LogEntry {
  int stage = 0;
  std::size_t step = 0;
  double loss = 0;
  double rate = 0;
};

struct TrainLog {
  std::vector<LogEntry> entries;
  std::function<void(const LogEntry&)> on_step;  // optional progress hook

  void add(const LogEntry& e) {
    entries.push_back(e);
    if (on_step) on_step(e);
  }

  // step,loss,rate rows for one stage.
  std::string csv(int stage) const {
    std::string out = "step,loss,rate\n";
    char line[96];
    for (const auto& e : entries) {
      if (e.stage != stage) continue;
      std::snprintf(line, sizeof line, "%zu,%.9g,%.9g\n", e.step, e.loss, e.rate);
      out += line;
    }
    return out;
  }
};

namespace detail {

enum : std::uint64_t { kShuffleTag = 11, kBlockInitTag = 12, kHeadInitTag = 13 };

inline void check_frames(const ModelConfig& cfg, const data::Dataset& ds) {
  if (ds.img_h != cfg.img_h || ds.img_w != cfg.img_w || ds.channels != cfg.channels) {
    throw ContractError("dataset frames are " + std::to_string(ds.img_h) + "x" +
                        std::to_string(ds.img_w) + ", model expects " + std::to_string(cfg.img_h) +
                        "x" + std::to_string(cfg.img_w));
  }
}

inline void check_samples(const data::Dataset& ds, const std::vector<std::size_t>& samples) {
  if (samples.empty()) throw ContractError("training set is empty");
  for (const auto s : samples) {
    if (s >= ds.size()) throw ContractError("sample index " + std::to_string(s) + " out of range");
  }
}

template <class T, class S>
Tensor<T> gather(const S* base, std::size_t stride, const std::vector<std::size_t>& rows,
                 Shape shape) {
  std::vector<T> out(rows.size() * stride);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy(base + rows[r] * stride, base + (rows[r] + 1) * stride, out.begin() + r * stride);
  }
  return Tensor<T>(std::move(shape), std::move(out));
}

// Tracks the first loss and aborts on NaN or blow-up.
class DivergenceGuard {
 public:
  explicit DivergenceGuard(double factor) : factor_(factor) {}

  void check(double loss, int stage, std::size_t step) {
    if (!std::isfinite(loss)) fail(stage, step, "loss is not finite");
    if (!initial_) initial_ = loss;
    if (loss > factor_ * std::max(*initial_, 1e-12)) {
      fail(stage, step, "loss " + std::to_string(loss) + " exceeds " + std::to_string(factor_) +
                            "x the initial " + std::to_string(*initial_));
    }
  }

  [[noreturn]] static void fail(int stage, std::size_t step, const std::string& why) {
    throw DivergenceError("stage " + std::to_string(stage) + " step " + std::to_string(step) +
                          ": " + why);
  }

 private:
  double factor_;
  std::optional<double> initial_;
};

template <class T>
optim::Adam<T> make_adam(ad::ParamList<T> params, const ModelConfig& cfg) {
  return optim::Adam<T>(std::move(params), {cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps});
}

// One optimizer step on `loss`; numeric faults become divergence.
template <class T>
double apply_step(const std::function<Tensor<T>()>& build_loss, optim::Adam<T>& adam, double rate,
                  DivergenceGuard& guard, int stage, std::size_t step) {
  double value = 0;
  try {
    auto loss = build_loss();
    value = static_cast<double>(loss.item());
    guard.check(value, stage, step);
    adam.zero_grad();
    ad::backward(loss);
  } catch (const NumericError& e) {
    DivergenceGuard::fail(stage, step, e.what());
  }
  adam.step(rate);
  return value;
}

}  // namespace detail

// Stage 1 over every frame of `samples`, batch_size * seq_len frames per step.
template <class T>
void train_step1(Model<T>& m, const data::Dataset& ds, const std::vector<std::size_t>& samples,
                 TrainLog* log = nullptr) {
  const auto& cfg = m.cfg;
  detail::check_frames(cfg, ds);
  detail::check_samples(ds, samples);
  std::vector<std::size_t> frames;
  for (const auto s : samples)
    for (std::size_t i = 0; i < ds.length; ++i) frames.push_back(s * ds.length + i);
  const std::size_t batch = std::min(frames.size(), cfg.batch_size * cfg.seq_len);
  const std::size_t per_epoch = (frames.size() + batch - 1) / batch;
  const std::size_t total = cfg.step1.total_steps(per_epoch);
  const auto reduction = pipeline::reduction_from(cfg.loss_reduction);
  const std::size_t fs = ds.frame_size();

  auto adam = detail::make_adam(m.step1_parameters(), cfg);
  detail::DivergenceGuard guard(cfg.divergence_factor);
  std::mt19937_64 rng(data::detail::sub_seed(cfg.seed, detail::kShuffleTag, 1));
  for (std::size_t step = 0; step < total; ++step) {
    const std::size_t slot = step % per_epoch;
    if (slot == 0) std::shuffle(frames.begin(), frames.end(), rng);
    const std::vector<std::size_t> rows(frames.begin() + slot * batch,
                                        frames.begin() + std::min(frames.size(), (slot + 1) * batch));
    const auto b = rows.size();
    auto x = detail::gather<T>(ds.frames.data(), fs, rows, {b, cfg.channels, cfg.img_h, cfg.img_w});
    auto gt2 = detail::gather<T>(ds.gt2d.data(), data::kJoints * 2, rows, {b, data::kJoints, 2});
    auto gt3 = detail::gather<T>(ds.gt3d.data(), data::kJoints * 3, rows, {b, data::kJoints, 3});
    const double rate = cfg.step1.rate_at(step, per_epoch);
    const double loss = detail::apply_step<T>(
        [&] {
          auto pred = pipeline::forward_ablation(x, m);
          return pipeline::loss_step1(pred.joints2d, gt2, pred.joints3d, gt3, static_cast<T>(cfg.alpha),
                                      reduction);
        },
        adam, rate, guard, 1, step);
    if (log) log->add({1, step, loss, rate});
  }
  m.stage = Stage::step1;
}

// Image embeddings [S x N x f] of whole samples, computed without a tape.
template <class T>
std::vector<T> encode_samples(const Model<T>& m, const data::Dataset& ds,
                              const std::vector<std::size_t>& samples) {
  ad::NoGradGuard no_grad;
  const auto f = m.cfg.embed_dim, n = ds.length, fs = ds.frame_size();
  std::vector<T> out(samples.size() * n * f);
  for (std::size_t k = 0; k < samples.size(); ++k) {
    std::vector<std::size_t> rows(n);
    std::iota(rows.begin(), rows.end(), samples[k] * n);
    auto x = detail::gather<T>(ds.frames.data(), fs, rows, {n, m.cfg.channels, m.cfg.img_h, m.cfg.img_w});
    const auto e = pipeline::image_encode(x, m.encoder);
    std::copy(e.data().begin(), e.data().end(), out.begin() + k * n * f);
  }
  return out;
}

namespace detail {

// Stage 2 over whole sequences, batch_size sequences per step. With
// `single_frame` the dense layer stands in for the sequence encoder, which is
// the ablation trained under the same budget.
template <class T>
void run_step2(Model<T>& m, const data::Dataset& ds, const std::vector<std::size_t>& samples, TrainLog* log,
               bool single_frame) {
  if (m.stage == Stage::fresh) {
    throw ContractError("stage 2 needs a model that completed stage 1");
  }
  const auto& cfg = m.cfg;
  detail::check_frames(cfg, ds);
  detail::check_samples(ds, samples);
  if (ds.length != cfg.seq_len) {
    throw ContractError("dataset sequences have " + std::to_string(ds.length) +
                        " frames, model expects " + std::to_string(cfg.seq_len));
  }
  const auto n = cfg.seq_len, f = cfg.embed_dim;
  const auto embeddings = encode_samples(m, ds, samples);
  if (!single_frame) {
    nn::Rng rng(data::detail::sub_seed(cfg.seed, kBlockInitTag, 0));
    m.block = Model<T>::init_block(cfg, rng);
  }
  if (cfg.step2_reinit_heads) {
    nn::Rng rng(data::detail::sub_seed(cfg.seed, kHeadInitTag, 0));
    m.init_head_and_lifter(rng);
  }

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t batch = std::min(order.size(), cfg.batch_size);
  const std::size_t per_epoch = (order.size() + batch - 1) / batch;
  const std::size_t total = cfg.step2.total_steps(per_epoch);
  const auto reduction = pipeline::reduction_from(cfg.loss_reduction);

  auto adam = make_adam(single_frame ? m.step2_ablation_parameters() : m.step2_parameters(), cfg);
  DivergenceGuard guard(cfg.divergence_factor);
  std::mt19937_64 rng(data::detail::sub_seed(cfg.seed, kShuffleTag, 2));
  for (std::size_t step = 0; step < total; ++step) {
    const std::size_t slot = step % per_epoch;
    if (slot == 0) std::shuffle(order.begin(), order.end(), rng);
    const std::vector<std::size_t> picked(order.begin() + slot * batch,
                                          order.begin() + std::min(order.size(), (slot + 1) * batch));
    std::vector<std::size_t> gt_rows;
    for (const auto k : picked) gt_rows.push_back(samples[k]);
    const auto b = picked.size();
    auto x = gather<T>(embeddings.data(), n * f, picked, {b, n, f});
    auto gt3 = gather<T>(ds.gt3d.data(), n * data::kJoints * 3, gt_rows, {b, n, data::kJoints, 3});
    const double rate = cfg.step2.rate_at(step, per_epoch);
    const double loss = apply_step<T>(
        [&] {
          const auto pose = single_frame ? pipeline::ablation_from_embeddings(x, m)
                                         : pipeline::forward_from_embeddings(x, m);
          return pipeline::loss_step2(pose.joints3d, gt3, reduction);
        },
        adam, rate, guard, 2, step);
    if (log) log->add({2, step, loss, rate});
  }
  m.stage = Stage::step2;
}

}  // namespace detail

template <class T>
void train_step2(Model<T>& m, const data::Dataset& ds, const std::vector<std::size_t>& samples,
                 TrainLog* log = nullptr) {
  detail::run_step2(m, ds, samples, log, false);
}

// Stage 2 for the single-frame ablation: encoder frozen, dense layer, head and
// lifter trained on the same sequences and loss as train_step2.
template <class T>
void train_step2_ablation(Model<T>& m, const data::Dataset& ds, const std::vector<std::size_t>& samples,
                          TrainLog* log = nullptr) {
  detail::run_step2(m, ds, samples, log, true);
}

struct Predictions {
  std::vector<float> joints2d;  // S x N x 21 x 2
  std::vector<float> joints3d;  // S x N x 21 x 3
};

// Per-sample inference; `ablation` runs every frame through the single-frame
// path. Workers take interleaved samples and write disjoint slots, so the
// result does not depend on the worker count.
template <class T>
Predictions predict(const Model<T>& m, const data::Dataset& ds, const std::vector<std::size_t>& samples,
                    bool ablation, std::size_t workers = 1) {
  detail::check_frames(m.cfg, ds);
  if (!ablation && ds.length != m.cfg.seq_len) {
    throw ContractError("dataset sequences have " + std::to_string(ds.length) +
                        " frames, model expects " + std::to_string(m.cfg.seq_len));
  }
  const auto n = ds.length, fs = ds.frame_size();
  Predictions out;
  out.joints2d.resize(samples.size() * n * data::kJoints * 2);
  out.joints3d.resize(samples.size() * n * data::kJoints * 3);
  auto work = [&](std::size_t first, std::size_t stride) {
    ad::NoGradGuard no_grad;
    for (std::size_t k = first; k < samples.size(); k += stride) {
      std::vector<std::size_t> rows(n);
      std::iota(rows.begin(), rows.end(), samples[k] * n);
      auto x = detail::gather<T>(ds.frames.data(), fs, rows, {n, m.cfg.channels, m.cfg.img_h, m.cfg.img_w});
      const auto pose = ablation ? pipeline::forward_ablation(x, m) : pipeline::forward_full(x, m);
      const auto p2 = pose.joints2d.data();
      const auto p3 = pose.joints3d.data();
      std::copy(p2.begin(), p2.end(), out.joints2d.begin() + k * p2.size());
      std::copy(p3.begin(), p3.end(), out.joints3d.begin() + k * p3.size());
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(samples.size(), 1));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
  }
  return out;
}

// Ground-truth 3D joints of `samples`, in prediction layout.
inline std::vector<float> targets3d(const data::Dataset& ds, const std::vector<std::size_t>& samples) {
  const std::size_t stride = ds.length * data::kJoints * 3;
  std::vector<float> out;
  out.reserve(samples.size() * stride);
  for (const auto s : samples) {
    out.insert(out.end(), ds.gt3d.begin() + s * stride, ds.gt3d.begin() + (s + 1) * stride);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: every parameter plus a one-element "meta.stage" record.

template <class T>
void save_model(const std::string& path, const Model<T>& m) {
  auto params = m.parameters();
  params.push_back({"meta.stage", Tensor<T>({1}, {static_cast<T>(static_cast<int>(m.stage))})});
  io::save_checkpoint(path, params);
}

template <class T>
Model<T> load_model(const std::string& path, const ModelConfig& cfg) {
  auto m = Model<T>::init(cfg);
  const auto ck = io::load_checkpoint(path);
  auto params = m.parameters();
  io::restore(ck, params);
  const auto it = ck.find("meta.stage");
  if (it == ck.end() || it->second.data.size() != 1) {
    throw ContractError("checkpoint '" + path + "' has no meta.stage record");
  }
  const int stage = static_cast<int>(it->second.data[0]);
  if (stage < 0 || stage > 2) throw ContractError("checkpoint '" + path + "' has invalid stage");
  m.stage = static_cast<Stage>(stage);
  return m;
}

}  // namespace seqhand::train
