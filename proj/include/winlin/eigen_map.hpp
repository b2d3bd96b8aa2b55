#pragma once

#include <Eigen/Dense>

#include "winlin/tensor.hpp"

namespace winlin {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
using MatMap = Eigen::Map<MatRM<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const MatRM<T>>;
template <typename T>
using StridedMatMap = Eigen::Map<MatRM<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMatMap = Eigen::Map<const MatRM<T>, 0, Eigen::OuterStride<>>;

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t, std::int64_t rows, std::int64_t cols) {
  return MatMap<T>(t.data(), rows, cols);
}

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, std::int64_t rows, std::int64_t cols) {
  return ConstMatMap<T>(t.data(), rows, cols);
}

// View of a row/column block inside a row-major [rows, row_stride] buffer.
template <typename T>
StridedMatMap<T> block_map(T* base, std::int64_t row0, std::int64_t col0, std::int64_t rows,
                           std::int64_t cols, std::int64_t row_stride) {
  return StridedMatMap<T>(base + row0 * row_stride + col0, rows, cols,
                          Eigen::OuterStride<>(row_stride));
}

template <typename T>
ConstStridedMatMap<T> block_map(const T* base, std::int64_t row0, std::int64_t col0,
                                std::int64_t rows, std::int64_t cols, std::int64_t row_stride) {
  return ConstStridedMatMap<T>(base + row0 * row_stride + col0, rows, cols,
                               Eigen::OuterStride<>(row_stride));
}

}  // namespace winlin
