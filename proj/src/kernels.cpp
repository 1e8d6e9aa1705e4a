// SPDX-License-Identifier: Apache-2.0
#include "heronet/kernels.hpp"

#include <cmath>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace heronet::kernels {

namespace {

struct GemmShape {
  int m, n, k;
};

template <class T>
GemmShape check_shapes(const Tensor<T>& a, Trans ta, const Tensor<T>& b, Trans tb, Tensor<T>& c, bool accumulate) {
  const int m = ta == Trans::no ? a.rows : a.cols;
  const int k = ta == Trans::no ? a.cols : a.rows;
  const int kb = tb == Trans::no ? b.rows : b.cols;
  const int n = tb == Trans::no ? b.cols : b.rows;
  if (k != kb) throw std::invalid_argument("gemm: inner dimensions differ");
  if (accumulate) {
    if (c.rows != m || c.cols != n) throw std::invalid_argument("gemm: accumulator shape mismatch");
  } else if (c.rows != m || c.cols != n) {
    c = Tensor<T>(m, n);
  }
  return {m, n, k};
}

// One output row of C. Shared by both kernels so they agree bit for bit.
template <class T>
inline void gemm_row(int i, const GemmShape& s, const Tensor<T>& a, Trans ta, const Tensor<T>& b, Trans tb,
                     Tensor<T>& c, bool accumulate) {
  T* crow = c.data.data() + static_cast<std::size_t>(i) * s.n;
  if (!accumulate)
    for (int j = 0; j < s.n; ++j) crow[j] = T(0);
  if (tb == Trans::no) {
    for (int p = 0; p < s.k; ++p) {
      const T av = ta == Trans::no ? a(i, p) : a(p, i);
      const T* brow = b.data.data() + static_cast<std::size_t>(p) * s.n;
      for (int j = 0; j < s.n; ++j) crow[j] += av * brow[j];
    }
  } else {
    for (int j = 0; j < s.n; ++j) {
      const T* brow = b.data.data() + static_cast<std::size_t>(j) * s.k;
      T acc = T(0);
      if (ta == Trans::no) {
        const T* arow = a.data.data() + static_cast<std::size_t>(i) * s.k;
        for (int p = 0; p < s.k; ++p) acc += arow[p] * brow[p];
      } else {
        for (int p = 0; p < s.k; ++p) acc += a(p, i) * brow[p];
      }
      crow[j] += acc;
    }
  }
}

double distance_to(std::span<const double> q, const std::vector<double>& r) {
  if (r.size() != q.size()) throw std::invalid_argument("euclidean_distances: dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double d = q[i] - r[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace

namespace serial {

template <class T>
void gemm(const Tensor<T>& a, Trans ta, const Tensor<T>& b, Trans tb, Tensor<T>& c, bool accumulate) {
  const GemmShape s = check_shapes(a, ta, b, tb, c, accumulate);
  for (int i = 0; i < s.m; ++i) gemm_row(i, s, a, ta, b, tb, c, accumulate);
}

std::vector<double> euclidean_distances(std::span<const double> query, const std::vector<std::vector<double>>& rows) {
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = distance_to(query, rows[i]);
  return out;
}

template void gemm<float>(const Tensor<float>&, Trans, const Tensor<float>&, Trans, Tensor<float>&, bool);
template void gemm<double>(const Tensor<double>&, Trans, const Tensor<double>&, Trans, Tensor<double>&, bool);

}  // namespace serial

namespace parallel {

template <class T>
void gemm(const Tensor<T>& a, Trans ta, const Tensor<T>& b, Trans tb, Tensor<T>& c, bool accumulate) {
  const GemmShape s = check_shapes(a, ta, b, tb, c, accumulate);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < s.m; ++i) gemm_row(i, s, a, ta, b, tb, c, accumulate);
}

std::vector<double> euclidean_distances(std::span<const double> query, const std::vector<std::vector<double>>& rows) {
  std::vector<double> out(rows.size());
  const auto n = static_cast<long>(rows.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) out[i] = distance_to(query, rows[i]);
  return out;
}

template void gemm<float>(const Tensor<float>&, Trans, const Tensor<float>&, Trans, Tensor<float>&, bool);
template void gemm<double>(const Tensor<double>&, Trans, const Tensor<double>&, Trans, Tensor<double>&, bool);

}  // namespace parallel

template <class T>
void gemm(const Tensor<T>& a, Trans ta, const Tensor<T>& b, Trans tb, Tensor<T>& c, bool accumulate) {
  const long m = ta == Trans::no ? a.rows : a.cols;
  const long work = m * (tb == Trans::no ? b.cols : b.rows) * (ta == Trans::no ? a.cols : a.rows);
  bool go_parallel = m >= 4 && work >= (1L << 16);
#ifdef _OPENMP
  go_parallel = go_parallel && !omp_in_parallel() && omp_get_max_threads() > 1;
#else
  go_parallel = false;
#endif
  if (go_parallel)
    parallel::gemm(a, ta, b, tb, c, accumulate);
  else
    serial::gemm(a, ta, b, tb, c, accumulate);
}

template void gemm<float>(const Tensor<float>&, Trans, const Tensor<float>&, Trans, Tensor<float>&, bool);
template void gemm<double>(const Tensor<double>&, Trans, const Tensor<double>&, Trans, Tensor<double>&, bool);

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

}  // namespace heronet::kernels
