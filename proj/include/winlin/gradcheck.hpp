#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "winlin/ops.hpp"
#include "winlin/tensor.hpp"

namespace winlin {

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::int64_t worst_element = -1;

  bool within(double tol) const { return max_rel_error < tol; }
};

// Central finite differences against the analytic reverse pass, on the scalar
// sum of the op's output. float64 only; the step is too coarse for float32.
//
// forward() must rebuild the computation from the current leaf values each
// time it is called.
inline GradcheckResult gradcheck(const std::function<Tensor<double>()>& forward,
                                 std::vector<Tensor<double>> leaves, double step = 1e-5) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  Tensor<double> loss = sum_all(forward());
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    std::vector<double> g = leaf.has_grad() ? leaf.grad()
                                            : std::vector<double>(leaf.numel(), 0.0);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(g.size()); ++i)
      if (!std::isfinite(g[i]))
        throw NumericError("gradcheck: non-finite analytic gradient at input " +
                           std::to_string(li) + " element " + std::to_string(i));
    analytic.push_back(std::move(g));
  }

  GradcheckResult result;
  NoGradGuard no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    for (std::int64_t i = 0; i < leaf.numel(); ++i) {
      const double saved = leaf.data()[i];
      leaf.data()[i] = saved + step;
      double up = 0.0;
      {
        Tensor<double> y = forward();
        for (std::int64_t j = 0; j < y.numel(); ++j) up += y.data()[j];
      }
      leaf.data()[i] = saved - step;
      double down = 0.0;
      {
        Tensor<double> y = forward();
        for (std::int64_t j = 0; j < y.numel(); ++j) down += y.data()[j];
      }
      leaf.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double ga = analytic[li][static_cast<std::size_t>(i)];
      const double denom = std::max({1.0, std::abs(ga), std::abs(numeric)});
      const double rel = std::abs(ga - numeric) / denom;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_input = li;
        result.worst_element = i;
      }
    }
  }
  return result;
}

// Same check restricted to a sampled subset of elements per leaf; used for
// whole-model checks where perturbing every weight is prohibitive.
inline GradcheckResult gradcheck_sampled(const std::function<Tensor<double>()>& forward,
                                         std::vector<Tensor<double>> leaves,
                                         const std::vector<std::vector<std::int64_t>>& elements,
                                         double step = 1e-5) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  Tensor<double> loss = sum_all(forward());
  loss.backward();

  GradcheckResult result;
  NoGradGuard no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    const std::vector<double>* grad = leaf.has_grad() ? &leaf.grad() : nullptr;
    for (const std::int64_t i : elements[li]) {
      const double ga = grad ? (*grad)[static_cast<std::size_t>(i)] : 0.0;
      if (!std::isfinite(ga))
        throw NumericError("gradcheck: non-finite analytic gradient at input " +
                           std::to_string(li) + " element " + std::to_string(i));
      const double saved = leaf.data()[i];
      leaf.data()[i] = saved + step;
      double up = 0.0;
      {
        Tensor<double> y = forward();
        for (std::int64_t j = 0; j < y.numel(); ++j) up += y.data()[j];
      }
      leaf.data()[i] = saved - step;
      double down = 0.0;
      {
        Tensor<double> y = forward();
        for (std::int64_t j = 0; j < y.numel(); ++j) down += y.data()[j];
      }
      leaf.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double denom = std::max({1.0, std::abs(ga), std::abs(numeric)});
      const double rel = std::abs(ga - numeric) / denom;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_input = li;
        result.worst_element = i;
      }
    }
  }
  return result;
}

}  // namespace winlin
