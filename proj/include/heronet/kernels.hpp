// SPDX-License-Identifier: Apache-2.0
#pragma once

// Hot loops of the training and retrieval paths. Each kernel has a serial
// reference implementation and an OpenMP version that must produce
// bit-identical results: parallelism is only over independent output rows,
// so every output element is accumulated in the same order by one thread.

#include <span>
#include <vector>

#include "heronet/tensor.hpp"

namespace heronet::kernels {

enum class Trans { no, yes };

namespace serial {

/// C (+)= op(A) * op(B).
template <class T>
void gemm(const Tensor<T>& a, Trans ta, const Tensor<T>& b, Trans tb, Tensor<T>& c, bool accumulate);

/// Euclidean distance from `query` to every row of `rows`.
std::vector<double> euclidean_distances(std::span<const double> query, const std::vector<std::vector<double>>& rows);

}  // namespace serial

namespace parallel {

template <class T>
void gemm(const Tensor<T>& a, Trans ta, const Tensor<T>& b, Trans tb, Tensor<T>& c, bool accumulate);

std::vector<double> euclidean_distances(std::span<const double> query, const std::vector<std::vector<double>>& rows);

}  // namespace parallel

/// Dispatches to the parallel kernel for large products, serial otherwise.
template <class T>
void gemm(const Tensor<T>& a, Trans ta, const Tensor<T>& b, Trans tb, Tensor<T>& c, bool accumulate);

/// Number of OpenMP threads available (1 without OpenMP).
int max_threads();
void set_threads(int n);

}  // namespace heronet::kernels
