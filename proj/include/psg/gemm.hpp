#pragma once

// Single funnel for matrix products. Eigen's packed kernels do the heavy
// lifting; keeping Eigen single-threaded here makes results independent of
// thread count (training parallelism is per-sample, one level up).
#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE
#endif
#include <Eigen/Core>

namespace psg {

using EigenRowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<EigenRowMat>;
using CMapRM = Eigen::Map<const EigenRowMat>;

// C[M,N] = A[M,K] * B[K,N]  (+= when accumulate)
inline void gemm(const float* a, const float* b, float* c, int m, int k, int n,
                 bool accumulate = false) {
  CMapRM A(a, m, k), B(b, k, n);
  MapRM C(c, m, n);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

// C[M,N] = A^T[M,K] * B[K,N] with A stored as [K,M]
inline void gemm_at(const float* a, const float* b, float* c, int m, int k, int n,
                    bool accumulate = false) {
  CMapRM A(a, k, m), B(b, k, n);
  MapRM C(c, m, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

// C[M,N] = A[M,K] * B^T[K,N] with B stored as [N,K]
inline void gemm_bt(const float* a, const float* b, float* c, int m, int k, int n,
                    bool accumulate = false) {
  CMapRM A(a, m, k), B(b, n, k);
  MapRM C(c, m, n);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

}  // namespace psg
