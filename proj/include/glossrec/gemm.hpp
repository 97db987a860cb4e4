#pragma once

// Small row-major matrix kernels. Every output element is reduced by a single
// thread in a fixed k order, so results are bit-identical regardless of the
// number of OpenMP threads.

namespace glossrec {

// C(M,N) = A(M,K) * B(K,N), or += when accumulate.
template <typename R>
void gemm_nn(int M, int N, int K, const R* A, const R* B, R* C, bool accumulate) {
#pragma omp parallel for schedule(static) if (M > 1)
  for (int i = 0; i < M; ++i) {
    R* c = C + long(i) * N;
    if (!accumulate) {
      for (int j = 0; j < N; ++j) c[j] = R(0);
    }
    const R* a = A + long(i) * K;
    for (int k = 0; k < K; ++k) {
      const R ak = a[k];
      const R* b = B + long(k) * N;
      for (int j = 0; j < N; ++j) c[j] += ak * b[j];
    }
  }
}

// C(M,N) = A(M,K) * B(N,K)^T.
template <typename R>
void gemm_nt(int M, int N, int K, const R* A, const R* B, R* C, bool accumulate) {
#pragma omp parallel for schedule(static) if (M > 1)
  for (int i = 0; i < M; ++i) {
    const R* a = A + long(i) * K;
    R* c = C + long(i) * N;
    for (int j = 0; j < N; ++j) {
      const R* b = B + long(j) * K;
      R acc = R(0);
      for (int k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] = accumulate ? c[j] + acc : acc;
    }
  }
}

// C(M,N) = A(K,M)^T * B(K,N).
template <typename R>
void gemm_tn(int M, int N, int K, const R* A, const R* B, R* C, bool accumulate) {
#pragma omp parallel for schedule(static) if (M > 1)
  for (int i = 0; i < M; ++i) {
    R* c = C + long(i) * N;
    if (!accumulate) {
      for (int j = 0; j < N; ++j) c[j] = R(0);
    }
    for (int k = 0; k < K; ++k) {
      const R ak = A[long(k) * M + i];
      const R* b = B + long(k) * N;
      for (int j = 0; j < N; ++j) c[j] += ak * b[j];
    }
  }
}

}  // namespace glossrec
