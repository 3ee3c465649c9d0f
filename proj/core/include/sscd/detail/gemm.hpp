#pragma once

#include <cstdint>

namespace sscd::detail {

// Small row-major matmul kernels. The j-inner loops stream contiguous rows so
// the compiler can vectorize them; that is all the tuning the desk-scale
// workloads need.

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_acc(const T* A, const T* B, T* C, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const T* a = A + static_cast<int64_t>(i) * K;
    T* c = C + static_cast<int64_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const T av = a[k];
      if (av == T(0)) continue;
      const T* b = B + static_cast<int64_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A[M,L] * B[N,L]^T
template <class T>
void gemm_nt_acc(const T* A, const T* B, T* C, int M, int L, int N) {
  for (int i = 0; i < M; ++i) {
    const T* a = A + static_cast<int64_t>(i) * L;
    T* c = C + static_cast<int64_t>(i) * N;
    for (int j = 0; j < N; ++j) {
      const T* b = B + static_cast<int64_t>(j) * L;
      T acc = T(0);
      for (int l = 0; l < L; ++l) acc += a[l] * b[l];
      c[j] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <class T>
void gemm_tn_acc(const T* A, const T* B, T* C, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const T* a = A + static_cast<int64_t>(i) * K;
    const T* b = B + static_cast<int64_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const T av = a[k];
      if (av == T(0)) continue;
      T* c = C + static_cast<int64_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace sscd::detail
