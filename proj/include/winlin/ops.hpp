#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>

#include "winlin/eigen_map.hpp"
#include "winlin/tensor.hpp"

namespace winlin {

namespace detail {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  check_shape(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<T> y = Tensor<T>::make_result(a.shape());
  const std::int64_t n = a.numel();
  const T* pa = a.data();
  const T* pb = b.data();
  T* py = y.data();
  for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
  auto an = a.node();
  auto bn = b.node();
  y.attach(
      "add",
      [an, bn](typename Tensor<T>::Node& self) {
        const auto& g = self.grad;
        if (an->requires_grad) {
          auto& ga = an->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (bn->requires_grad) {
          auto& gb = bn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      },
      a, b);
  y.check_finite_debug();
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<T> y = Tensor<T>::make_result(a.shape());
  const std::int64_t n = a.numel();
  const T* pa = a.data();
  const T* pb = b.data();
  T* py = y.data();
  for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
  auto an = a.node();
  auto bn = b.node();
  y.attach(
      "mul",
      [an, bn](typename Tensor<T>::Node& self) {
        const auto& g = self.grad;
        if (an->requires_grad) {
          auto& ga = an->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
        }
        if (bn->requires_grad) {
          auto& gb = bn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
        }
      },
      a, b);
  return y;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
  Tensor<T> y = Tensor<T>::make_result(x.shape());
  const std::int64_t n = x.numel();
  const T* px = x.data();
  T* py = y.data();
  for (std::int64_t i = 0; i < n; ++i) py[i] = px[i] * s;
  auto xn = x.node();
  y.attach(
      "mul_scalar",
      [xn, s](typename Tensor<T>::Node& self) {
        auto& gx = xn->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * s;
      },
      x);
  return y;
}

template <typename T>
Tensor<T> relu6(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::make_result(x.shape());
  const std::int64_t n = x.numel();
  const T* px = x.data();
  T* py = y.data();
  for (std::int64_t i = 0; i < n; ++i) py[i] = std::min(std::max(px[i], T(0)), T(6));
  auto xn = x.node();
  y.attach(
      "relu6",
      [xn](typename Tensor<T>::Node& self) {
        auto& gx = xn->grad_buffer();
        const auto& xd = xn->data;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (xd[i] > T(0) && xd[i] < T(6)) gx[i] += self.grad[i];
      },
      x);
  return y;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::make_result(x.shape());
  const std::int64_t n = x.numel();
  const T* px = x.data();
  T* py = y.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const T v = px[i];
    py[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  auto xn = x.node();
  y.attach(
      "sigmoid",
      [xn](typename Tensor<T>::Node& self) {
        auto& gx = xn->grad_buffer();
        const auto& yd = self.data;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          gx[i] += self.grad[i] * yd[i] * (T(1) - yd[i]);
      },
      x);
  return y;
}

template <typename T>
Tensor<T> abs_val(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::make_result(x.shape());
  const std::int64_t n = x.numel();
  const T* px = x.data();
  T* py = y.data();
  for (std::int64_t i = 0; i < n; ++i) py[i] = std::abs(px[i]);
  auto xn = x.node();
  y.attach(
      "abs",
      [xn](typename Tensor<T>::Node& self) {
        auto& gx = xn->grad_buffer();
        const auto& xd = xn->data;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (xd[i] > T(0))
            gx[i] += self.grad[i];
          else if (xd[i] < T(0))
            gx[i] -= self.grad[i];
        }
      },
      x);
  return y;
}

// Gradient passes only strictly inside (lo, hi).
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  Tensor<T> y = Tensor<T>::make_result(x.shape());
  const std::int64_t n = x.numel();
  const T* px = x.data();
  T* py = y.data();
  for (std::int64_t i = 0; i < n; ++i) py[i] = std::min(std::max(px[i], lo), hi);
  auto xn = x.node();
  y.attach(
      "clamp",
      [xn, lo, hi](typename Tensor<T>::Node& self) {
        auto& gx = xn->grad_buffer();
        const auto& xd = xn->data;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (xd[i] > lo && xd[i] < hi) gx[i] += self.grad[i];
      },
      x);
  return y;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::make_result({1});
  const std::int64_t n = x.numel();
  const T* px = x.data();
  T acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) acc += px[i];
  y.data()[0] = acc;
  auto xn = x.node();
  y.attach(
      "sum_all",
      [xn](typename Tensor<T>::Node& self) {
        auto& gx = xn->grad_buffer();
        const T g = self.grad[0];
        for (auto& v : gx) v += g;
      },
      x);
  return y;
}

// Same storage layout, new shape; the backward pass is a flat copy.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  check_shape(numel_of(shape) == x.numel(),
              "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<T> y = Tensor<T>::from(std::move(shape), x.vec());
  auto xn = x.node();
  y.attach(
      "reshape",
      [xn](typename Tensor<T>::Node& self) {
        auto& gx = xn->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
      },
      x);
  return y;
}

// [B,C1,H,W] ++ [B,C2,H,W] -> [B,C1+C2,H,W]
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.ndim() == 4 && b.ndim() == 4, "concat_channels: expects 4-D inputs");
  check_shape(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
              "concat_channels: shape mismatch " + shape_str(a.shape()) + " vs " +
                  shape_str(b.shape()));
  const std::int64_t B = a.dim(0), C1 = a.dim(1), C2 = b.dim(1), H = a.dim(2), W = a.dim(3);
  const std::int64_t hw = H * W;
  Tensor<T> y = Tensor<T>::make_result({B, C1 + C2, H, W});
  for (std::int64_t i = 0; i < B; ++i) {
    std::memcpy(y.data() + i * (C1 + C2) * hw, a.data() + i * C1 * hw, sizeof(T) * C1 * hw);
    std::memcpy(y.data() + i * (C1 + C2) * hw + C1 * hw, b.data() + i * C2 * hw,
                sizeof(T) * C2 * hw);
  }
  auto an = a.node();
  auto bn = b.node();
  y.attach(
      "concat_channels",
      [an, bn, B, C1, C2, hw](typename Tensor<T>::Node& self) {
        for (std::int64_t i = 0; i < B; ++i) {
          const T* g = self.grad.data() + i * (C1 + C2) * hw;
          if (an->requires_grad) {
            auto& ga = an->grad_buffer();
            for (std::int64_t j = 0; j < C1 * hw; ++j) ga[i * C1 * hw + j] += g[j];
          }
          if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::int64_t j = 0; j < C2 * hw; ++j) gb[i * C2 * hw + j] += g[C1 * hw + j];
          }
        }
      },
      a, b);
  return y;
}

// C = A·B. Backward: dA = dC·Bᵀ, dB = Aᵀ·dC.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.ndim() == 2 && b.ndim() == 2, "matmul: expects 2-D operands, got " +
                                                  shape_str(a.shape()) + " and " +
                                                  shape_str(b.shape()));
  check_shape(a.dim(1) == b.dim(0), "matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> y = Tensor<T>::make_result({m, n});
  as_matrix(y, m, n).noalias() = as_matrix(a, m, k) * as_matrix(b, k, n);
  auto an = a.node();
  auto bn = b.node();
  y.attach(
      "matmul",
      [an, bn, m, k, n](typename Tensor<T>::Node& self) {
        ConstMatMap<T> gy(self.grad.data(), m, n);
        if (an->requires_grad) {
          MatMap<T> ga(an->grad_buffer().data(), m, k);
          ConstMatMap<T> B(bn->data.data(), k, n);
          ga.noalias() += gy * B.transpose();
        }
        if (bn->requires_grad) {
          MatMap<T> gb(bn->grad_buffer().data(), k, n);
          ConstMatMap<T> A(an->data.data(), m, k);
          gb.noalias() += A.transpose() * gy;
        }
      },
      a, b);
  y.check_finite_debug();
  return y;
}

// Row-wise exp-normalize with max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  check_shape(x.ndim() == 2, "softmax_rows: expects 2-D input, got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), m = x.dim(1);
  Tensor<T> y = Tensor<T>::make_result({n, m});
  const T* px = x.data();
  T* py = y.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const T* row = px + i * m;
    T* out = py + i * m;
    T mx = row[0];
    for (std::int64_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (std::int64_t j = 0; j < m; ++j) {
      out[j] = std::exp(row[j] - mx);
      denom += out[j];
    }
    for (std::int64_t j = 0; j < m; ++j) out[j] /= denom;
  }
  auto xn = x.node();
  y.attach(
      "softmax_rows",
      [xn, n, m](typename Tensor<T>::Node& self) {
        auto& gx = xn->grad_buffer();
        for (std::int64_t i = 0; i < n; ++i) {
          const T* yrow = self.data.data() + i * m;
          const T* grow = self.grad.data() + i * m;
          T dot = T(0);
          for (std::int64_t j = 0; j < m; ++j) dot += yrow[j] * grow[j];
          for (std::int64_t j = 0; j < m; ++j) gx[i * m + j] += yrow[j] * (grow[j] - dot);
        }
      },
      x);
  return y;
}

// Each row divided by max(‖row‖₂, eps).
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12)) {
  check_shape(x.ndim() == 2, "l2_normalize_rows: expects 2-D input, got " + shape_str(x.shape()));
  check_shape(eps > T(0), "l2_normalize_rows: eps must be positive");
  const std::int64_t n = x.dim(0), d = x.dim(1);
  Tensor<T> y = Tensor<T>::make_result({n, d});
  std::vector<T> norms(static_cast<std::size_t>(n));
  const T* px = x.data();
  T* py = y.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const T* row = px + i * d;
    T ss = T(0);
    for (std::int64_t j = 0; j < d; ++j) ss += row[j] * row[j];
    const T norm = std::sqrt(ss);
    const T div = std::max(norm, eps);
    norms[static_cast<std::size_t>(i)] = norm;
    for (std::int64_t j = 0; j < d; ++j) py[i * d + j] = row[j] / div;
  }
  auto xn = x.node();
  y.attach(
      "l2_normalize_rows",
      [xn, norms = std::move(norms), n, d, eps](typename Tensor<T>::Node& self) {
        auto& gx = xn->grad_buffer();
        for (std::int64_t i = 0; i < n; ++i) {
          const T* yrow = self.data.data() + i * d;
          const T* grow = self.grad.data() + i * d;
          const T norm = norms[static_cast<std::size_t>(i)];
          if (norm > eps) {
            T dot = T(0);
            for (std::int64_t j = 0; j < d; ++j) dot += yrow[j] * grow[j];
            for (std::int64_t j = 0; j < d; ++j)
              gx[i * d + j] += (grow[j] - yrow[j] * dot) / norm;
          } else {
            for (std::int64_t j = 0; j < d; ++j) gx[i * d + j] += grow[j] / eps;
          }
        }
      },
      x);
  return y;
}

}  // namespace winlin
