#pragma once

#include <cstdint>
#include <functional>
#include <sstream>
#include <string>

#include "winlin/ops.hpp"
#include "winlin/tensor.hpp"

namespace winlin {

struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;

  std::int64_t total() const { return tp + fp + fn + tn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

struct MetricReport {
  double iou = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool degenerate = false;  // some denominator was zero

  std::string csv_row(const std::string& split) const {
    std::ostringstream os;
    os.precision(6);
    os << std::fixed << split << ',' << iou << ',' << precision << ',' << recall << ',' << f1;
    return os.str();
  }
};

inline MetricReport metrics_from_counts(const ConfusionCounts& c) {
  MetricReport r;
  const double tp = static_cast<double>(c.tp);
  if (c.tp + c.fp > 0)
    r.precision = tp / static_cast<double>(c.tp + c.fp);
  else
    r.degenerate = true;
  if (c.tp + c.fn > 0)
    r.recall = tp / static_cast<double>(c.tp + c.fn);
  else
    r.degenerate = true;
  if (r.precision + r.recall > 0.0)
    r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  else
    r.degenerate = true;
  if (c.tp + c.fn + c.fp > 0)
    r.iou = tp / static_cast<double>(c.tp + c.fn + c.fp);
  else
    r.degenerate = true;
  return r;
}

// Binarizes at the threshold and pools counts over valid pixels only.
template <typename T>
ConfusionCounts confusion_counts(const Tensor<T>& pred_probs, const Tensor<T>& target,
                                 const Tensor<T>& valid, T threshold = T(0.5)) {
  detail::check_same_shape(pred_probs, target, "confusion_counts");
  detail::check_same_shape(pred_probs, valid, "confusion_counts");
  check_shape(threshold > T(0) && threshold < T(1),
              "confusion_counts: threshold must lie in (0,1)");
  ConfusionCounts c;
  const std::int64_t n = pred_probs.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    if (valid.data()[i] == T(0)) continue;
    const bool p = pred_probs.data()[i] > threshold;
    const bool t = target.data()[i] > T(0.5);
    if (p && t)
      ++c.tp;
    else if (p && !t)
      ++c.fp;
    else if (!p && t)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

template <typename T>
MetricReport compute_metrics(const Tensor<T>& pred_probs, const Tensor<T>& target,
                             const Tensor<T>& valid, T threshold = T(0.5)) {
  return metrics_from_counts(confusion_counts(pred_probs, target, valid, threshold));
}

// --- flips (value-level; used by TTA and augmentation) ----------------------

template <typename T>
Tensor<T> hflip(const Tensor<T>& x) {
  check_shape(x.ndim() == 4 || x.ndim() == 3, "hflip: expects 3-D or 4-D input");
  const std::int64_t W = x.dim(x.ndim() - 1);
  const std::int64_t H = x.dim(x.ndim() - 2);
  const std::int64_t planes = x.numel() / (H * W);
  Tensor<T> y = Tensor<T>::make_result(x.shape());
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j)
        y.data()[(p * H + i) * W + j] = x.data()[(p * H + i) * W + (W - 1 - j)];
  return y;
}

template <typename T>
Tensor<T> vflip(const Tensor<T>& x) {
  check_shape(x.ndim() == 4 || x.ndim() == 3, "vflip: expects 3-D or 4-D input");
  const std::int64_t W = x.dim(x.ndim() - 1);
  const std::int64_t H = x.dim(x.ndim() - 2);
  const std::int64_t planes = x.numel() / (H * W);
  Tensor<T> y = Tensor<T>::make_result(x.shape());
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j)
        y.data()[(p * H + i) * W + j] = x.data()[(p * (H) + (H - 1 - i)) * W + j];
  return y;
}

// Averages sigmoid(model(img)) over {id, h, v, hv} flips, each inverted on
// the way back out. The result is invariant under h/v flips of the input.
template <typename T>
Tensor<T> tta_predict(const std::function<Tensor<T>(const Tensor<T>&)>& model,
                      const Tensor<T>& img) {
  NoGradGuard no_grad;
  Tensor<T> acc;
  int count = 0;
  for (int f = 0; f < 4; ++f) {
    const bool h = f & 1, v = f & 2;
    Tensor<T> in = img;
    if (h) in = hflip(in);
    if (v) in = vflip(in);
    Tensor<T> probs = sigmoid(model(in));
    if (v) probs = vflip(probs);
    if (h) probs = hflip(probs);
    if (count == 0)
      acc = probs;
    else
      acc = add(acc, probs);
    ++count;
  }
  return mul_scalar(acc, T(1) / static_cast<T>(count));
}

}  // namespace winlin
