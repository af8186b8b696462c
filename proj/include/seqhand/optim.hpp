#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "seqhand/tensor.hpp"

namespace seqhand::optim {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive moment estimation with bias correction.
template <class T>
class Adam {
 public:
  Adam(ad::ParamList<T> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void step(double rate) {
    for (const auto& p : params_) {
      if (!p.tensor.has_grad()) {
        throw ContractError("optimizer step: no gradient for parameter '" + p.name + "'");
      }
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto w = params_[k].tensor.mutable_data();
      const auto g = params_[k].tensor.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
        const double update = rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - update);
      }
    }
  }

  std::size_t steps() const { return steps_; }
  const std::vector<double>& first_moment(std::size_t k) const { return m_[k]; }
  const std::vector<double>& second_moment(std::size_t k) const { return v_[k]; }
  const ad::ParamList<T>& params() const { return params_; }

 private:
  ad::ParamList<T> params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t steps_ = 0;
};

}  // namespace seqhand::optim
