#pragma once

// Differentiable primitives. Every op returns a fresh tensor whose backward
// rule accumulates into its inputs' grads. Broadcasting is limited to a
// one-element operand against a tensor; the few places that need a vector
// broadcast (biases, position tables) have dedicated ops.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "seqhand/tensor.hpp"

namespace seqhand::ad {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

inline std::string mismatch(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b);
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products

// a[m x k] . b[k x n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail;
  require(a.rank() == 2 && b.rank() == 2,
          "matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
  require(a.dim(1) == b.dim(0), mismatch("matmul", a.shape(), b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  return make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    ConstMatMap<T> g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      MatMap<T>(pa.grad.data(), m, k).noalias() +=
          g * ConstMatMap<T>(pb.data.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MatMap<T>(pb.grad.data(), k, n).noalias() +=
          ConstMatMap<T>(pa.data.data(), m, k).transpose() * g;
    }
  });
}

// Batched product over the leading axis: a[B x m x k] . b[B x k x n], or
// b[B x n x k] transposed when `transpose_b` is set.
template <class T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  using namespace detail;
  require(a.rank() == 3 && b.rank() == 3, "batched_matmul: expects rank-3 operands, got " +
                                              shape_str(a.shape()) + " and " +
                                              shape_str(b.shape()));
  const auto batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const auto n = transpose_b ? b.dim(1) : b.dim(2);
  const auto bk = transpose_b ? b.dim(2) : b.dim(1);
  require(b.dim(0) == batch && bk == k, mismatch("batched_matmul", a.shape(), b.shape()));
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMatMap<T> am(a.data().data() + i * m * k, m, k);
    MatMap<T> om(out.data() + i * m * n, m, n);
    if (transpose_b) {
      om.noalias() = am * ConstMatMap<T>(b.data().data() + i * n * k, n, k).transpose();
    } else {
      om.noalias() = am * ConstMatMap<T>(b.data().data() + i * k * n, k, n);
    }
  }
  return make_result<T>(
      "batched_matmul", {batch, m, n}, std::move(out), {a, b},
      [batch, m, k, n, transpose_b](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::size_t i = 0; i < batch; ++i) {
          ConstMatMap<T> g(self.grad.data() + i * m * n, m, n);
          ConstMatMap<T> am(pa.data.data() + i * m * k, m, k);
          if (transpose_b) {
            ConstMatMap<T> bm(pb.data.data() + i * n * k, n, k);
            if (pa.requires_grad) MatMap<T>(pa.grad.data() + i * m * k, m, k).noalias() += g * bm;
            if (pb.requires_grad)
              MatMap<T>(pb.grad.data() + i * n * k, n, k).noalias() += g.transpose() * am;
          } else {
            ConstMatMap<T> bm(pb.data.data() + i * k * n, k, n);
            if (pa.requires_grad)
              MatMap<T>(pa.grad.data() + i * m * k, m, k).noalias() += g * bm.transpose();
            if (pb.requires_grad)
              MatMap<T>(pb.grad.data() + i * k * n, k, n).noalias() += am.transpose() * g;
          }
        }
      });
}

// Applies a node-axis operator to every item of a batch:
// mix[K' x K], x[B x K x F] -> [B x K' x F].
template <class T>
Tensor<T> node_mix(const Tensor<T>& mix, const Tensor<T>& x) {
  using namespace detail;
  require(mix.rank() == 2 && x.rank() == 3 && mix.dim(1) == x.dim(1),
          mismatch("node_mix", mix.shape(), x.shape()));
  const auto kout = mix.dim(0), kin = mix.dim(1), batch = x.dim(0), feat = x.dim(2);
  std::vector<T> out(batch * kout * feat);
  ConstMatMap<T> am(mix.data().data(), kout, kin);
  for (std::size_t b = 0; b < batch; ++b) {
    MatMap<T>(out.data() + b * kout * feat, kout, feat).noalias() =
        am * ConstMatMap<T>(x.data().data() + b * kin * feat, kin, feat);
  }
  return make_result<T>("node_mix", {batch, kout, feat}, std::move(out), {mix, x},
                        [=](Node<T>& self) {
                          auto& pm = *self.parents[0];
                          auto& px = *self.parents[1];
                          ConstMatMap<T> a(pm.data.data(), kout, kin);
                          for (std::size_t b = 0; b < batch; ++b) {
                            ConstMatMap<T> g(self.grad.data() + b * kout * feat, kout, feat);
                            if (pm.requires_grad) {
                              MatMap<T>(pm.grad.data(), kout, kin).noalias() +=
                                  g * ConstMatMap<T>(px.data.data() + b * kin * feat, kin, feat)
                                          .transpose();
                            }
                            if (px.requires_grad) {
                              MatMap<T>(px.grad.data() + b * kin * feat, kin, feat).noalias() +=
                                  a.transpose() * g;
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

enum class BinaryOp { add, sub, mul, div };

template <class T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryOp kind, const char* name) {
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  require(a_scalar || b_scalar || a.shape() == b.shape(), mismatch(name, a.shape(), b.shape()));
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const auto n = shape_numel(shape);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = ad[a_scalar ? 0 : i];
    const T y = bd[b_scalar ? 0 : i];
    switch (kind) {
      case BinaryOp::add: out[i] = x + y; break;
      case BinaryOp::sub: out[i] = x - y; break;
      case BinaryOp::mul: out[i] = x * y; break;
      case BinaryOp::div: out[i] = x / y; break;
    }
  }
  return make_result<T>(name, shape, std::move(out), {a, b},
                        [n, a_scalar, b_scalar, kind](Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          for (std::size_t i = 0; i < n; ++i) {
                            const T g = self.grad[i];
                            const std::size_t ia = a_scalar ? 0 : i;
                            const std::size_t ib = b_scalar ? 0 : i;
                            const T x = pa.data[ia];
                            const T y = pb.data[ib];
                            T ga{}, gb{};
                            switch (kind) {
                              case BinaryOp::add: ga = g; gb = g; break;
                              case BinaryOp::sub: ga = g; gb = -g; break;
                              case BinaryOp::mul: ga = g * y; gb = g * x; break;
                              case BinaryOp::div: ga = g / y; gb = -g * x / (y * y); break;
                            }
                            if (pa.requires_grad) pa.grad[ia] += ga;
                            if (pb.requires_grad) pb.grad[ib] += gb;
                          }
                        });
}

// Unary op with a derivative expressed through input x and output y.
template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  return make_result<T>(name, x.shape(), std::move(out), {x}, [deriv](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      px.grad[i] += self.grad[i] * deriv(px.data[i], self.data[i]);
    }
  });
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryOp::add, "add");
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryOp::sub, "sub");
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryOp::mul, "mul");
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryOp::div, "div");
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary(
      x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary(
      x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

// relu'(0) is taken as 0.
template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// sqrt'(0) is taken as 0 so distances to coincident points stay differentiable.
template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  for (const T v : x.data()) {
    if (v < T(0)) throw NumericError("sqrt of a negative value");
  }
  return detail::unary(
      x, "sqrt", [](T v) { return std::sqrt(v); },
      [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(
      x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// log(1 + e^x), evaluated without overflow.
template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary(
      x, "softplus",
      [](T v) { return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

// x[..., n] + bias[n]
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  using namespace detail;
  require(bias.rank() == 1 && x.rank() >= 1 && x.shape().back() == bias.dim(0),
          mismatch("add_bias", x.shape(), bias.shape()));
  const auto n = bias.dim(0);
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto bd = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % n];
  return make_result<T>("add_bias", x.shape(), std::move(out), {x, bias}, [n](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (px.requires_grad) px.grad[i] += self.grad[i];
      if (pb.requires_grad) pb.grad[i % n] += self.grad[i];
    }
  });
}

// Entries where mask[i] is true become `value` and pass no gradient.
template <class T>
Tensor<T> masked_fill(const Tensor<T>& x, const std::vector<bool>& mask, T value) {
  detail::require(mask.size() == x.numel(), "masked_fill: mask length mismatch");
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i]) out[i] = value;
  }
  return detail::make_result<T>("masked_fill", x.shape(), std::move(out), {x},
                                [mask](Node<T>& self) {
                                  auto& px = *self.parents[0];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    if (!mask[i]) px.grad[i] += self.grad[i];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Reductions

enum class Reduce { sum, mean };

// Reduces over `axes` (dropped from the result). An empty axis list returns
// the input; reducing every axis yields shape [1].
template <class T>
Tensor<T> reduce(const Tensor<T>& x, Reduce kind, std::vector<std::size_t> axes) {
  using namespace detail;
  if (axes.empty()) return x;
  std::vector<bool> reduced(x.rank(), false);
  for (const auto ax : axes) {
    require(ax < x.rank(), "reduce: axis " + std::to_string(ax) + " invalid for shape " +
                               shape_str(x.shape()));
    require(!reduced[ax], "reduce: axis " + std::to_string(ax) + " repeated");
    reduced[ax] = true;
  }
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t d = 0; d < x.rank(); ++d) {
    if (reduced[d]) {
      count *= x.dim(d);
    } else {
      out_shape.push_back(x.dim(d));
    }
  }
  if (out_shape.empty()) out_shape = {1};
  // Flat output index for every input element.
  const auto in_strides = strides_of(x.shape());
  Shape kept_shape;
  for (std::size_t d = 0; d < x.rank(); ++d) {
    if (!reduced[d]) kept_shape.push_back(x.dim(d));
  }
  const auto kept_strides = strides_of(kept_shape);
  std::vector<std::size_t> target(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    std::size_t rem = i, o = 0, k = 0;
    for (std::size_t d = 0; d < x.rank(); ++d) {
      const std::size_t idx = rem / in_strides[d];
      rem %= in_strides[d];
      if (!reduced[d]) o += idx * kept_strides[k++];
    }
    target[i] = o;
  }
  const T factor = kind == Reduce::mean ? T(1) / static_cast<T>(count) : T(1);
  std::vector<T> out(shape_numel(out_shape), T(0));
  const auto xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) out[target[i]] += xd[i];
  if (kind == Reduce::mean) {
    for (auto& v : out) v *= factor;
  }
  return make_result<T>(kind == Reduce::sum ? "sum" : "mean", std::move(out_shape), std::move(out),
                        {x}, [target = std::move(target), factor](Node<T>& self) {
                          auto& px = *self.parents[0];
                          for (std::size_t i = 0; i < target.size(); ++i) {
                            px.grad[i] += self.grad[target[i]] * factor;
                          }
                        });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x, std::vector<std::size_t> axes) {
  return reduce(x, Reduce::sum, std::move(axes));
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, std::vector<std::size_t> axes) {
  return reduce(x, Reduce::mean, std::move(axes));
}

template <class T>
std::vector<std::size_t> all_axes(const Tensor<T>& x) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  return axes;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  return reduce(x, Reduce::sum, all_axes(x));
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return reduce(x, Reduce::mean, all_axes(x));
}

// ---------------------------------------------------------------------------
// Normalizations

// Softmax over the last axis, stabilized by subtracting each row's maximum.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  using namespace detail;
  require(x.rank() >= 1, "softmax_rows: rank-0 input");
  for (const T v : x.data()) {
    if (std::isnan(v)) throw NumericError("softmax_rows: NaN input");
  }
  const auto n = x.shape().back();
  const auto rows = x.numel() / n;
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * n;
    T* o = out.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  return make_result<T>("softmax_rows", x.shape(), std::move(out), {x}, [rows, n](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.data.data() + r * n;
      const T* g = self.grad.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) px.grad[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

// Normalizes each last-axis row to zero mean / unit variance, then applies
// gain[n] and bias[n].
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  using namespace detail;
  require(x.rank() >= 1 && gain.rank() == 1 && bias.rank() == 1 &&
              gain.dim(0) == x.shape().back() && bias.dim(0) == x.shape().back(),
          mismatch("layer_norm", x.shape(), gain.shape()));
  const auto n = x.shape().back();
  const auto rows = x.numel() / n;
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  std::vector<T> out(xd.size()), xhat(xd.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(n);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (in[j] - mu) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * gd[j] + bd[j];
    }
  }
  return make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        std::vector<T> dxhat(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* g = self.grad.data() + r * n;
          const T* xh = xhat.data() + r * n;
          T mean_d = 0, mean_dx = 0;
          for (std::size_t j = 0; j < n; ++j) {
            if (pg.requires_grad) pg.grad[j] += g[j] * xh[j];
            if (pb.requires_grad) pb.grad[j] += g[j];
            dxhat[j] = g[j] * pg.data[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
          }
          if (!px.requires_grad) continue;
          mean_d /= static_cast<T>(n);
          mean_dx /= static_cast<T>(n);
          for (std::size_t j = 0; j < n; ++j) {
            px.grad[r * n + j] += inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Layout

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(shape_numel(shape) == x.numel(),
                  "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {x},
                                [](Node<T>& self) {
                                  auto& px = *self.parents[0];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    px.grad[i] += self.grad[i];
                                  }
                                });
}

// Output axis d is input axis perm[d].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  using namespace detail;
  require(perm.size() == x.rank(), "permute: permutation rank mismatch");
  std::vector<bool> used(perm.size(), false);
  for (const auto p : perm) {
    require(p < perm.size() && !used[p], "permute: invalid permutation");
    used[p] = true;
  }
  Shape out_shape(perm.size());
  for (std::size_t d = 0; d < perm.size(); ++d) out_shape[d] = x.dim(perm[d]);
  const auto in_strides = strides_of(x.shape());
  const auto out_strides = strides_of(out_shape);
  // source[o] = flat input index feeding flat output index o
  std::vector<std::size_t> source(x.numel());
  for (std::size_t o = 0; o < source.size(); ++o) {
    std::size_t rem = o, src = 0;
    for (std::size_t d = 0; d < perm.size(); ++d) {
      const std::size_t idx = rem / out_strides[d];
      rem %= out_strides[d];
      src += idx * in_strides[perm[d]];
    }
    source[o] = src;
  }
  const auto xd = x.data();
  std::vector<T> out(source.size());
  for (std::size_t o = 0; o < source.size(); ++o) out[o] = xd[source[o]];
  return make_result<T>("permute", std::move(out_shape), std::move(out), {x},
                        [source = std::move(source)](Node<T>& self) {
                          auto& px = *self.parents[0];
                          for (std::size_t o = 0; o < source.size(); ++o) {
                            px.grad[source[o]] += self.grad[o];
                          }
                        });
}

// Joins tensors along `axis`; all other dimensions must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  using namespace detail;
  require(!parts.empty(), "concat: no inputs");
  const Shape& base = parts[0].shape();
  require(axis < base.size(), "concat: axis out of range");
  Shape out_shape = base;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    require(p.rank() == base.size(), mismatch("concat", base, p.shape()));
    for (std::size_t d = 0; d < base.size(); ++d) {
      if (d != axis) require(p.dim(d) == base[d], mismatch("concat", base, p.shape()));
    }
    out_shape[axis] += p.dim(axis);
  }
  // outer = product of dims before axis, inner = product after.
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= base[d];
  for (std::size_t d = axis + 1; d < base.size(); ++d) inner *= base[d];
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * chunk, chunk, out.data() + o * out_row + offset);
    }
    offset += chunk;
  }
  auto node = make_result<T>("concat", out_shape, std::move(out), {}, nullptr);
  if (grad_enabled() && std::any_of(parts.begin(), parts.end(),
                                    [](const Tensor<T>& p) { return p.requires_grad(); })) {
    auto* n = node.node();
    n->requires_grad = true;
    for (const auto& p : parts) n->parents.push_back(p.node_ptr());
    n->backward = [outer, out_row, offsets](Node<T>& self) {
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        auto& pk = *self.parents[k];
        if (!pk.requires_grad) continue;
        const std::size_t chunk = pk.data.size() / outer;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < chunk; ++j)
            pk.grad[o * chunk + j] += self.grad[o * out_row + offsets[k] + j];
      }
    };
  }
  return node;
}

// table[M x F] -> [len(rows) x F]
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::size_t>& rows) {
  using namespace detail;
  require(table.rank() == 2, "gather_rows: table must be rank 2");
  const auto m = table.dim(0), f = table.dim(1);
  std::vector<T> out(rows.size() * f);
  const auto td = table.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] < m, "gather_rows: row " + std::to_string(rows[r]) + " out of range");
    std::copy_n(td.data() + rows[r] * f, f, out.data() + r * f);
  }
  return make_result<T>("gather_rows", {rows.size(), f}, std::move(out), {table},
                        [rows, f](Node<T>& self) {
                          auto& pt = *self.parents[0];
                          for (std::size_t r = 0; r < rows.size(); ++r) {
                            for (std::size_t j = 0; j < f; ++j) {
                              pt.grad[rows[r] * f + j] += self.grad[r * f + j];
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// x[B x C x H x W], weight[Co x C x kh x kw], bias[Co] -> [B x Co x Ho x Wo].
// Lowered to one GEMM per image over an im2col buffer.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dGeometry geo) {
  using namespace detail;
  require(x.rank() == 4 && weight.rank() == 4 && bias.rank() == 1,
          "conv2d: expects x[BxCxHxW], weight[CoxCxkhxkw], bias[Co]");
  require(weight.dim(1) == x.dim(1), mismatch("conv2d", x.shape(), weight.shape()));
  require(bias.dim(0) == weight.dim(0), mismatch("conv2d", weight.shape(), bias.shape()));
  require(geo.stride >= 1, "conv2d: stride must be positive");
  const auto batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  require(h + 2 * geo.pad >= kh && w + 2 * geo.pad >= kw, "conv2d: kernel larger than input");
  const auto ho = (h + 2 * geo.pad - kh) / geo.stride + 1;
  const auto wo = (w + 2 * geo.pad - kw) / geo.stride + 1;
  const auto patch = cin * kh * kw;
  const auto pix = ho * wo;

  // cols[b] is patch x pix; entry (c,ki,kj ; oy,ox) = x[b,c,oy*s+ki-p,ox*s+kj-p]
  // src[i] is the flat x offset feeding column entry i, or npos for padding.
  constexpr auto npos = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> src(patch * pix);
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const auto row = (c * kh + ki) * kw + kj;
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * geo.stride + ki) -
                            static_cast<std::ptrdiff_t>(geo.pad);
            const auto ix = static_cast<std::ptrdiff_t>(ox * geo.stride + kj) -
                            static_cast<std::ptrdiff_t>(geo.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                ix < static_cast<std::ptrdiff_t>(w);
            src[row * pix + oy * wo + ox] =
                inside ? (c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)
                       : npos;
          }
      }

  const auto xd = x.data();
  std::vector<T> cols(batch * patch * pix);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xb = xd.data() + b * cin * h * w;
    T* cb = cols.data() + b * patch * pix;
    for (std::size_t i = 0; i < patch * pix; ++i) cb[i] = src[i] == npos ? T(0) : xb[src[i]];
  }
  std::vector<T> out(batch * cout * pix);
  ConstMatMap<T> wm(weight.data().data(), cout, patch);
  const auto bd = bias.data();
  for (std::size_t b = 0; b < batch; ++b) {
    MatMap<T> om(out.data() + b * cout * pix, cout, pix);
    om.noalias() = wm * ConstMatMap<T>(cols.data() + b * patch * pix, patch, pix);
    for (std::size_t co = 0; co < cout; ++co) om.row(co).array() += bd[co];
  }
  return make_result<T>(
      "conv2d", {batch, cout, ho, wo}, std::move(out), {x, weight, bias},
      [=, cols = std::move(cols), src = std::move(src)](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        ConstMatMap<T> wmat(pw.data.data(), cout, patch);
        std::vector<T> dcols(patch * pix);
        for (std::size_t b = 0; b < batch; ++b) {
          ConstMatMap<T> g(self.grad.data() + b * cout * pix, cout, pix);
          if (pw.requires_grad) {
            MatMap<T>(pw.grad.data(), cout, patch).noalias() +=
                g * ConstMatMap<T>(cols.data() + b * patch * pix, patch, pix).transpose();
          }
          if (pb.requires_grad) {
            for (std::size_t co = 0; co < cout; ++co) pb.grad[co] += g.row(co).sum();
          }
          if (px.requires_grad) {
            MatMap<T>(dcols.data(), patch, pix).noalias() = wmat.transpose() * g;
            T* gx = px.grad.data() + b * cin * h * w;
            for (std::size_t i = 0; i < patch * pix; ++i) {
              if (src[i] != npos) gx[src[i]] += dcols[i];
            }
          }
        }
      });
}

}  // namespace seqhand::ad
