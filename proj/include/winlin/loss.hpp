#pragma once

#include <cmath>

#include "winlin/nn_ops.hpp"
#include "winlin/ops.hpp"

namespace winlin {

// |Laplacian(map)| clamped to [0,1]: soft boundary strength of a [0,1] map.
// Zero padding means frame pixels of a constant-1 map light up; callers mask
// by validity where that matters.
template <typename T>
Tensor<T> laplacian_boundary(const Tensor<T>& map) {
  check_shape(map.ndim() == 4 && map.dim(1) == 1,
              "laplacian_boundary: expects [B,1,H,W], got " + shape_str(map.shape()));
  Tensor<T> kernel =
      Tensor<T>::from({1, 1, 3, 3}, {T(-1), T(-1), T(-1), T(-1), T(8), T(-1), T(-1), T(-1), T(-1)});
  return clamp(abs_val(conv2d(map, kernel, 1, 1)), T(0), T(1));
}

// Numerically stable sigmoid BCE on logits, averaged over valid pixels.
// Zero valid pixels yields 0 and sets *degenerate.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets,
                          const Tensor<T>& valid, bool* degenerate = nullptr) {
  detail::check_same_shape(logits, targets, "bce_with_logits");
  detail::check_same_shape(logits, valid, "bce_with_logits");
  const std::int64_t n = logits.numel();
  T count = T(0);
  for (std::int64_t i = 0; i < n; ++i) count += valid.data()[i];
  if (degenerate) *degenerate = count == T(0);

  Tensor<T> loss = Tensor<T>::make_result({1});
  if (count > T(0)) {
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
      if (valid.data()[i] == T(0)) continue;
      const T z = logits.data()[i];
      const T t = targets.data()[i];
      acc += std::max(z, T(0)) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
    loss.data()[0] = acc / count;
  }
  auto ln = logits.node();
  auto tn = targets.node();
  auto vn = valid.node();
  loss.attach(
      "bce_with_logits",
      [ln, tn, vn, n, count](typename Tensor<T>::Node& self) {
        if (count == T(0) || !ln->requires_grad) return;
        const T g = self.grad[0] / count;
        auto& gx = ln->grad_buffer();
        for (std::int64_t i = 0; i < n; ++i) {
          if (vn->data[i] == T(0)) continue;
          const T z = ln->data[i];
          const T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
          gx[i] += g * (s - tn->data[i]);
        }
      },
      logits, targets, valid);
  return loss;
}

// BCE in probability space with eps clamping; used on boundary maps where the
// prediction is already a [0,1] strength rather than a logit.
template <typename T>
Tensor<T> bce_on_probs(const Tensor<T>& probs, const Tensor<T>& targets, const Tensor<T>& valid,
                       T eps = T(1e-7)) {
  detail::check_same_shape(probs, targets, "bce_on_probs");
  detail::check_same_shape(probs, valid, "bce_on_probs");
  const std::int64_t n = probs.numel();
  T count = T(0);
  for (std::int64_t i = 0; i < n; ++i) count += valid.data()[i];

  Tensor<T> loss = Tensor<T>::make_result({1});
  if (count > T(0)) {
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
      if (valid.data()[i] == T(0)) continue;
      const T p = std::min(std::max(probs.data()[i], eps), T(1) - eps);
      const T t = targets.data()[i];
      acc += -(t * std::log(p) + (T(1) - t) * std::log(T(1) - p));
    }
    loss.data()[0] = acc / count;
  }
  auto pn = probs.node();
  auto tn = targets.node();
  auto vn = valid.node();
  loss.attach(
      "bce_on_probs",
      [pn, tn, vn, n, count, eps](typename Tensor<T>::Node& self) {
        if (count == T(0) || !pn->requires_grad) return;
        const T g = self.grad[0] / count;
        auto& gx = pn->grad_buffer();
        for (std::int64_t i = 0; i < n; ++i) {
          if (vn->data[i] == T(0)) continue;
          const T raw = pn->data[i];
          if (raw <= eps || raw >= T(1) - eps) continue;  // clamp kills the gradient
          gx[i] += g * (raw - tn->data[i]) / (raw * (T(1) - raw));
        }
      },
      probs, targets, valid);
  return loss;
}

// 1 - (2Σpg + smooth)/(Σp + Σg + smooth) over valid pixels.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& targets, const Tensor<T>& valid,
                    T smooth = T(1)) {
  detail::check_same_shape(probs, targets, "dice_loss");
  detail::check_same_shape(probs, valid, "dice_loss");
  const std::int64_t n = probs.numel();
  T inter = T(0), psum = T(0), gsum = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    if (valid.data()[i] == T(0)) continue;
    inter += probs.data()[i] * targets.data()[i];
    psum += probs.data()[i];
    gsum += targets.data()[i];
  }
  Tensor<T> loss = Tensor<T>::make_result({1});
  const T denom = psum + gsum + smooth;
  loss.data()[0] = T(1) - (T(2) * inter + smooth) / denom;

  auto pn = probs.node();
  auto tn = targets.node();
  auto vn = valid.node();
  loss.attach(
      "dice_loss",
      [pn, tn, vn, n, inter, denom, smooth](typename Tensor<T>::Node& self) {
        if (!pn->requires_grad) return;
        const T g = self.grad[0];
        auto& gx = pn->grad_buffer();
        const T num = T(2) * inter + smooth;
        for (std::int64_t i = 0; i < n; ++i) {
          if (vn->data[i] == T(0)) continue;
          // d/dp of -(2Σpg+s)/(Σp+Σg+s)
          gx[i] += g * (num - T(2) * tn->data[i] * denom) / (denom * denom);
        }
      },
      probs, targets, valid);
  return loss;
}

template <typename T>
struct JointLoss {
  Tensor<T> total;
  Tensor<T> ce;
  Tensor<T> dice;
  Tensor<T> boundary;
};

// ce + dice + boundary-BCE. The boundary term compares Laplacian strengths of
// the predicted probability map against the binarized boundary of the ground
// truth. Both maps are pre-masked by validity so padded content cannot leak
// through the 3x3 stencil.
template <typename T>
JointLoss<T> joint_loss(const Tensor<T>& logits, const Tensor<T>& target_mask,
                        const Tensor<T>& valid_mask) {
  detail::check_same_shape(logits, target_mask, "joint_loss");
  detail::check_same_shape(logits, valid_mask, "joint_loss");
  JointLoss<T> out;
  out.ce = bce_with_logits(logits, target_mask, valid_mask);
  Tensor<T> probs = sigmoid(logits);
  out.dice = dice_loss(probs, target_mask, valid_mask);

  Tensor<T> probs_masked = mul(probs, valid_mask);
  Tensor<T> pred_boundary = laplacian_boundary(probs_masked);
  Tensor<T> target_masked = Tensor<T>::make_result(target_mask.shape());
  for (std::int64_t i = 0; i < target_mask.numel(); ++i)
    target_masked.data()[i] = target_mask.data()[i] * valid_mask.data()[i];
  Tensor<T> target_boundary;
  {
    NoGradGuard no_grad;
    target_boundary = laplacian_boundary(target_masked);
    for (std::int64_t i = 0; i < target_boundary.numel(); ++i)
      target_boundary.data()[i] = target_boundary.data()[i] > T(0) ? T(1) : T(0);
  }
  out.boundary = bce_on_probs(pred_boundary, target_boundary, valid_mask);
  out.total = add(add(out.ce, out.dice), out.boundary);
  return out;
}

}  // namespace winlin
