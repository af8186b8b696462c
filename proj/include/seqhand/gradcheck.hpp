#pragma once

// Central finite differences and a reverse-mode vs. finite-difference
// comparison harness. Meant for 64-bit tensors.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "seqhand/ops.hpp"

namespace seqhand::ad {

// (f(x + eps e_i) - f(x - eps e_i)) / 2eps for every element of x.
template <class T>
Tensor<T> fd_grad(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x,
                  T eps = T(1e-5)) {
  if (!(eps > T(0))) throw ContractError("fd_grad: eps must be positive");
  NoGradGuard no_grad;
  std::vector<T> probe(x.data().begin(), x.data().end());
  std::vector<T> out(probe.size());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + eps;
    const T up = f(Tensor<T>(x.shape(), probe)).item();
    probe[i] = orig - eps;
    const T down = f(Tensor<T>(x.shape(), probe)).item();
    probe[i] = orig;
    out[i] = (up - down) / (T(2) * eps);
  }
  return Tensor<T>(x.shape(), std::move(out));
}

// Same difference quotient, perturbing a parameter in place and re-running a
// closure that reads it. Only `indices` are probed.
template <class T>
std::vector<T> fd_grad_inplace(const std::function<T()>& loss, Tensor<T>& param,
                               const std::vector<std::size_t>& indices, T eps = T(1e-5)) {
  NoGradGuard no_grad;
  auto data = param.mutable_data();
  std::vector<T> out;
  out.reserve(indices.size());
  for (const auto i : indices) {
    const T orig = data[i];
    data[i] = orig + eps;
    const T up = loss();
    data[i] = orig - eps;
    const T down = loss();
    data[i] = orig;
    out.push_back((up - down) / (T(2) * eps));
  }
  return out;
}

// |a - b| / max(|a|, |b|, floor). The floor keeps gradients that are zero up
// to finite-difference noise from reading as large relative errors.
template <class T>
T relative_error(T analytic, T numeric, T floor = T(1e-6)) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GroupReport {
  std::string name;
  std::size_t checked = 0;
  double worst = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  double floor = 1e-6;
  std::size_t max_probes = 48;  // per tensor; evenly strided when larger
  // Test hook: negates the analytic gradient of this group, as a sign error
  // in its backward rule would.
  std::string negate_group = {};
};

inline std::vector<std::size_t> probe_indices(std::size_t n, std::size_t max_probes) {
  std::vector<std::size_t> idx;
  if (n <= max_probes) {
    for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    return idx;
  }
  for (std::size_t k = 0; k < max_probes; ++k) idx.push_back(k * n / max_probes);
  return idx;
}

// Compares backward() against central differences for every listed tensor.
template <class T>
std::vector<GroupReport> check_gradients(const std::function<Tensor<T>()>& build_loss,
                                         std::vector<NamedParam<T>> params,
                                         const GradCheckOptions& opt = {}) {
  for (auto& p : params) {
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }
  backward(build_loss());
  std::function<T()> scalar_loss = [&] { return build_loss().item(); };
  std::vector<GroupReport> reports;
  for (auto& p : params) {
    GroupReport rep;
    rep.name = p.name;
    const auto idx = probe_indices(p.tensor.numel(), opt.max_probes);
    const auto numeric = fd_grad_inplace<T>(scalar_loss, p.tensor, idx, static_cast<T>(opt.eps));
    const bool has = p.tensor.has_grad();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      T analytic = has ? p.tensor.grad()[idx[k]] : T(0);
      if (p.name == opt.negate_group) analytic = -analytic;
      rep.worst = std::max(rep.worst, static_cast<double>(relative_error<T>(
                                          analytic, numeric[k], static_cast<T>(opt.floor))));
    }
    rep.checked = idx.size();
    rep.passed = rep.worst < opt.tolerance;
    reports.push_back(rep);
  }
  return reports;
}

}  // namespace seqhand::ad
