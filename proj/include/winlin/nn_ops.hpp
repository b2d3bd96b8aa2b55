#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "winlin/eigen_map.hpp"
#include "winlin/ops.hpp"
#include "winlin/tensor.hpp"

namespace winlin {

namespace detail {

// Unpacks x[b, g·Cg .. , :, :] into [Cg·kh·kw, Ho·Wo] with zero padding.
// Cross-correlation layout: row (c·kh+ki)·kw+kj holds the (ki,kj) tap of
// channel c inside the group.
template <typename T>
void im2col(const T* x, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t c0,
            std::int64_t Cg, std::int64_t kh, std::int64_t kw, std::int64_t stride,
            std::int64_t pad, std::int64_t Ho, std::int64_t Wo, T* col) {
  const std::int64_t out_hw = Ho * Wo;
  for (std::int64_t c = 0; c < Cg; ++c) {
    const T* xc = x + (c0 + c) * H * W;
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        T* dst = col + ((c * kh + ki) * kw + kj) * out_hw;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          const std::int64_t ih = oh * stride + ki - pad;
          if (ih < 0 || ih >= H) {
            std::fill(dst + oh * Wo, dst + (oh + 1) * Wo, T(0));
            continue;
          }
          const T* xrow = xc + ih * W;
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            const std::int64_t iw = ow * stride + kj - pad;
            dst[oh * Wo + ow] = (iw >= 0 && iw < W) ? xrow[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accum(const T* col, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t c0,
                  std::int64_t Cg, std::int64_t kh, std::int64_t kw, std::int64_t stride,
                  std::int64_t pad, std::int64_t Ho, std::int64_t Wo, T* gx) {
  const std::int64_t out_hw = Ho * Wo;
  for (std::int64_t c = 0; c < Cg; ++c) {
    T* gc = gx + (c0 + c) * H * W;
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        const T* src = col + ((c * kh + ki) * kw + kj) * out_hw;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          const std::int64_t ih = oh * stride + ki - pad;
          if (ih < 0 || ih >= H) continue;
          T* grow = gc + ih * W;
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            const std::int64_t iw = ow * stride + kj - pad;
            if (iw >= 0 && iw < W) grow[iw] += src[oh * Wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation (no kernel flip) with zero padding.
// x: [B,C,H,W], w: [O,C/g,kh,kw], bias: [O] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::int64_t stride, std::int64_t pad, std::int64_t groups = 1) {
  check_shape(x.ndim() == 4, "conv2d: input must be 4-D, got " + shape_str(x.shape()));
  check_shape(w.ndim() == 4, "conv2d: weight must be 4-D, got " + shape_str(w.shape()));
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t O = w.dim(0), Cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (C % groups != 0 || O % groups != 0)
    throw ConfigError("conv2d: channels " + std::to_string(C) + " and filters " +
                      std::to_string(O) + " must both divide by groups " + std::to_string(groups));
  check_shape(Cg == C / groups, "conv2d: weight " + shape_str(w.shape()) +
                                    " inconsistent with input channels " + std::to_string(C) +
                                    " at groups " + std::to_string(groups));
  if (bias.defined())
    check_shape(bias.ndim() == 1 && bias.dim(0) == O,
                "conv2d: bias must be [" + std::to_string(O) + "], got " +
                    shape_str(bias.shape()));
  const std::int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  check_shape(Ho >= 1 && Wo >= 1, "conv2d: kernel does not fit input " + shape_str(x.shape()));
  const std::int64_t Og = O / groups;
  const std::int64_t ksz = Cg * kh * kw;
  const std::int64_t out_hw = Ho * Wo;

  Tensor<T> y = Tensor<T>::make_result({B, O, Ho, Wo});
  std::vector<T> col(static_cast<std::size_t>(ksz * out_hw));
  for (std::int64_t b = 0; b < B; ++b) {
    const T* xb = x.data() + b * C * H * W;
    for (std::int64_t g = 0; g < groups; ++g) {
      detail::im2col(xb, C, H, W, g * Cg, Cg, kh, kw, stride, pad, Ho, Wo, col.data());
      ConstMatMap<T> Wg(w.data() + g * Og * ksz, Og, ksz);
      ConstMatMap<T> Col(col.data(), ksz, out_hw);
      MatMap<T> Yg(y.data() + (b * O + g * Og) * out_hw, Og, out_hw);
      Yg.noalias() = Wg * Col;
    }
    if (bias.defined()) {
      T* yb = y.data() + b * O * out_hw;
      for (std::int64_t o = 0; o < O; ++o) {
        const T bo = bias.data()[o];
        for (std::int64_t i = 0; i < out_hw; ++i) yb[o * out_hw + i] += bo;
      }
    }
  }

  auto xn = x.node();
  auto wn = w.node();
  auto bnode = bias.defined() ? bias.node() : nullptr;
  auto backward = [xn, wn, bnode, B, C, H, W, O, Cg, kh, kw, stride, pad, groups, Ho, Wo,
                   Og, ksz, out_hw](typename Tensor<T>::Node& self) {
    std::vector<T> col(static_cast<std::size_t>(ksz * out_hw));
    std::vector<T> colgrad;
    if (xn->requires_grad) colgrad.resize(static_cast<std::size_t>(ksz * out_hw));
    for (std::int64_t b = 0; b < B; ++b) {
      const T* xb = xn->data.data() + b * C * H * W;
      for (std::int64_t g = 0; g < groups; ++g) {
        ConstMatMap<T> Gy(self.grad.data() + (b * O + g * Og) * out_hw, Og, out_hw);
        if (wn->requires_grad) {
          detail::im2col(xb, C, H, W, g * Cg, Cg, kh, kw, stride, pad, Ho, Wo, col.data());
          ConstMatMap<T> Col(col.data(), ksz, out_hw);
          MatMap<T> Gw(wn->grad_buffer().data() + g * Og * ksz, Og, ksz);
          Gw.noalias() += Gy * Col.transpose();
        }
        if (xn->requires_grad) {
          ConstMatMap<T> Wg(wn->data.data() + g * Og * ksz, Og, ksz);
          MatMap<T> Gcol(colgrad.data(), ksz, out_hw);
          Gcol.noalias() = Wg.transpose() * Gy;
          detail::col2im_accum(colgrad.data(), C, H, W, g * Cg, Cg, kh, kw, stride, pad, Ho, Wo,
                               xn->grad_buffer().data() + b * C * H * W);
        }
      }
      if (bnode && bnode->requires_grad) {
        auto& gb = bnode->grad_buffer();
        const T* gy = self.grad.data() + b * O * out_hw;
        for (std::int64_t o = 0; o < O; ++o) {
          T acc = T(0);
          for (std::int64_t i = 0; i < out_hw; ++i) acc += gy[o * out_hw + i];
          gb[o] += acc;
        }
      }
    }
  };
  if (bias.defined())
    y.attach("conv2d", backward, x, w, bias);
  else
    y.attach("conv2d", backward, x, w);
  y.check_finite_debug();
  return y;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::int64_t stride, std::int64_t pad,
                 std::int64_t groups = 1) {
  return conv2d(x, w, Tensor<T>(), stride, pad, groups);
}

// Running statistics for one batchnorm layer. Checkpointed alongside weights.
template <typename T>
struct BnState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BnState(std::int64_t channels = 0)
      : running_mean(static_cast<std::size_t>(channels), T(0)),
        running_var(static_cast<std::size_t>(channels), T(1)) {}
};

// Training mode normalizes per channel over B,H,W with biased variance and
// updates the running stats (unbiased variance when count > 1). Eval mode
// applies the running stats.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BnState<T>& state, bool training, T eps = T(1e-5), T momentum = T(0.1)) {
  check_shape(x.ndim() == 4, "batchnorm2d: input must be 4-D, got " + shape_str(x.shape()));
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check_shape(gamma.numel() == C && beta.numel() == C,
              "batchnorm2d: affine parameters must have " + std::to_string(C) + " channels");
  check_shape(eps > T(0), "batchnorm2d: eps must be positive");
  check_shape(static_cast<std::int64_t>(state.running_mean.size()) == C,
              "batchnorm2d: state has " + std::to_string(state.running_mean.size()) +
                  " channels, input has " + std::to_string(C));
  const std::int64_t m = B * H * W;
  check_shape(m >= 1, "batchnorm2d: empty spatial extent");
  const std::int64_t hw = H * W;

  Tensor<T> y = Tensor<T>::make_result(x.shape());
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();

  if (!training) {
    const T* px = x.data();
    T* py = y.data();
    std::vector<T> rmean(state.running_mean);
    std::vector<T> rinvstd(static_cast<std::size_t>(C));
    std::vector<T> scale(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c) {
      rinvstd[c] = T(1) / std::sqrt(state.running_var[c] + eps);
      scale[c] = gamma.data()[c] * rinvstd[c];
    }
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c) {
        const T* xr = px + (b * C + c) * hw;
        T* yr = py + (b * C + c) * hw;
        const T sh = beta.data()[c] - rmean[c] * scale[c];
        for (std::int64_t i = 0; i < hw; ++i) yr[i] = xr[i] * scale[c] + sh;
      }
    // Running stats are constants here, so the op is per-channel affine.
    y.attach(
        "batchnorm2d.eval",
        [xn, gn, bn, rmean = std::move(rmean), rinvstd = std::move(rinvstd),
         scale = std::move(scale), B, C, hw](typename Tensor<T>::Node& self) {
          for (std::int64_t c = 0; c < C; ++c) {
            T sum_g = T(0), sum_gxhat = T(0);
            for (std::int64_t b = 0; b < B; ++b) {
              const T* g = self.grad.data() + (b * C + c) * hw;
              const T* xr = xn->data.data() + (b * C + c) * hw;
              if (xn->requires_grad) {
                T* gx = xn->grad_buffer().data() + (b * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) gx[i] += g[i] * scale[c];
              }
              for (std::int64_t i = 0; i < hw; ++i) {
                sum_g += g[i];
                sum_gxhat += g[i] * (xr[i] - rmean[c]) * rinvstd[c];
              }
            }
            if (gn->requires_grad) gn->grad_buffer()[c] += sum_gxhat;
            if (bn->requires_grad) bn->grad_buffer()[c] += sum_g;
          }
        },
        x, gamma, beta);
    return y;
  }

  std::vector<T> mean(static_cast<std::size_t>(C), T(0));
  std::vector<T> invstd(static_cast<std::size_t>(C), T(0));
  const T* px = x.data();
  for (std::int64_t c = 0; c < C; ++c) {
    T acc = T(0);
    for (std::int64_t b = 0; b < B; ++b) {
      const T* xr = px + (b * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) acc += xr[i];
    }
    mean[c] = acc / static_cast<T>(m);
  }
  std::vector<T> var(static_cast<std::size_t>(C), T(0));
  for (std::int64_t c = 0; c < C; ++c) {
    T acc = T(0);
    for (std::int64_t b = 0; b < B; ++b) {
      const T* xr = px + (b * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        const T d = xr[i] - mean[c];
        acc += d * d;
      }
    }
    var[c] = acc / static_cast<T>(m);
    invstd[c] = T(1) / std::sqrt(var[c] + eps);
  }
  for (std::int64_t c = 0; c < C; ++c) {
    state.running_mean[c] = (T(1) - momentum) * state.running_mean[c] + momentum * mean[c];
    const T unbiased = m > 1 ? var[c] * static_cast<T>(m) / static_cast<T>(m - 1) : var[c];
    state.running_var[c] = (T(1) - momentum) * state.running_var[c] + momentum * unbiased;
  }
  T* py = y.data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      const T* xr = px + (b * C + c) * hw;
      T* yr = py + (b * C + c) * hw;
      const T g = gamma.data()[c], be = beta.data()[c];
      for (std::int64_t i = 0; i < hw; ++i) yr[i] = (xr[i] - mean[c]) * invstd[c] * g + be;
    }

  y.attach(
      "batchnorm2d",
      [xn, gn, bn, mean = std::move(mean), invstd = std::move(invstd), B, C, hw,
       m](typename Tensor<T>::Node& self) {
        for (std::int64_t c = 0; c < C; ++c) {
          // per-channel reductions over the batch
          T sum_g = T(0), sum_gx = T(0);
          for (std::int64_t b = 0; b < B; ++b) {
            const T* g = self.grad.data() + (b * C + c) * hw;
            const T* xr = xn->data.data() + (b * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              sum_g += g[i];
              sum_gx += g[i] * (xr[i] - mean[c]) * invstd[c];
            }
          }
          if (gn->requires_grad) gn->grad_buffer()[c] += sum_gx;
          if (bn->requires_grad) bn->grad_buffer()[c] += sum_g;
          if (xn->requires_grad) {
            const T ga = gn->data[c];
            const T k = ga * invstd[c] / static_cast<T>(m);
            for (std::int64_t b = 0; b < B; ++b) {
              const T* g = self.grad.data() + (b * C + c) * hw;
              const T* xr = xn->data.data() + (b * C + c) * hw;
              T* gx = xn->grad_buffer().data() + (b * C + c) * hw;
              for (std::int64_t i = 0; i < hw; ++i) {
                const T xhat = (xr[i] - mean[c]) * invstd[c];
                gx[i] += k * (static_cast<T>(m) * g[i] - sum_g - xhat * sum_gx);
              }
            }
          }
        }
      },
      x, gamma, beta);
  y.check_finite_debug();
  return y;
}

// Integer-factor bilinear upsampling, align_corners = false.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::int64_t factor) {
  check_shape(x.ndim() == 4, "upsample_bilinear: input must be 4-D, got " + shape_str(x.shape()));
  check_shape(factor >= 1, "upsample_bilinear: factor must be >= 1");
  if (factor == 1) {
    Tensor<T> y = Tensor<T>::from(x.shape(), x.vec());
    auto xn = x.node();
    y.attach(
        "upsample_bilinear",
        [xn](typename Tensor<T>::Node& self) {
          auto& gx = xn->grad_buffer();
          for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
        },
        x);
    return y;
  }
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Ho = H * factor, Wo = W * factor;

  struct Taps {
    std::vector<std::int64_t> lo, hi;
    std::vector<T> frac;
  };
  auto make_taps = [factor](std::int64_t in, std::int64_t out) {
    Taps t;
    t.lo.resize(out);
    t.hi.resize(out);
    t.frac.resize(out);
    for (std::int64_t o = 0; o < out; ++o) {
      const double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
      const double fl = std::floor(src);
      std::int64_t lo = static_cast<std::int64_t>(fl);
      T frac = static_cast<T>(src - fl);
      std::int64_t hi = lo + 1;
      if (lo < 0) {
        lo = 0;
        hi = 0;
        frac = T(0);
      }
      if (hi > in - 1) {
        hi = in - 1;
        if (lo > in - 1) lo = in - 1;
      }
      t.lo[o] = lo;
      t.hi[o] = hi;
      t.frac[o] = frac;
    }
    return t;
  };
  const Taps ty = make_taps(H, Ho), tx = make_taps(W, Wo);

  Tensor<T> y = Tensor<T>::make_result({B, C, Ho, Wo});
  const T* px = x.data();
  T* py = y.data();
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const T* xp = px + bc * H * W;
    T* yp = py + bc * Ho * Wo;
    for (std::int64_t oy = 0; oy < Ho; ++oy) {
      const std::int64_t y0 = ty.lo[oy], y1 = ty.hi[oy];
      const T fy = ty.frac[oy];
      for (std::int64_t ox = 0; ox < Wo; ++ox) {
        const std::int64_t x0 = tx.lo[ox], x1 = tx.hi[ox];
        const T fx = tx.frac[ox];
        const T v00 = xp[y0 * W + x0], v01 = xp[y0 * W + x1];
        const T v10 = xp[y1 * W + x0], v11 = xp[y1 * W + x1];
        yp[oy * Wo + ox] = (T(1) - fy) * ((T(1) - fx) * v00 + fx * v01) +
                           fy * ((T(1) - fx) * v10 + fx * v11);
      }
    }
  }
  auto xn = x.node();
  y.attach(
      "upsample_bilinear",
      [xn, ty, tx, B, C, H, W, Ho, Wo](typename Tensor<T>::Node& self) {
        auto& gx = xn->grad_buffer();
        for (std::int64_t bc = 0; bc < B * C; ++bc) {
          const T* g = self.grad.data() + bc * Ho * Wo;
          T* gp = gx.data() + bc * H * W;
          for (std::int64_t oy = 0; oy < Ho; ++oy) {
            const std::int64_t y0 = ty.lo[oy], y1 = ty.hi[oy];
            const T fy = ty.frac[oy];
            for (std::int64_t ox = 0; ox < Wo; ++ox) {
              const std::int64_t x0 = tx.lo[ox], x1 = tx.hi[ox];
              const T fx = tx.frac[ox];
              const T gv = g[oy * Wo + ox];
              gp[y0 * W + x0] += (T(1) - fy) * (T(1) - fx) * gv;
              gp[y0 * W + x1] += (T(1) - fy) * fx * gv;
              gp[y1 * W + x0] += fy * (T(1) - fx) * gv;
              gp[y1 * W + x1] += fy * fx * gv;
            }
          }
        }
      },
      x);
  return y;
}

}  // namespace winlin
