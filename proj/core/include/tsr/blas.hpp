#pragma once

#include <cstddef>

namespace tsr::blasx {

// Row-major GEMM wrappers over the chosen backend (OpenBLAS when available,
// a blocked fallback otherwise). Parallel execution partitions the OUTPUT of
// each product into fixed-size chunks, so results are bitwise identical for
// any thread count. Matrices are tightly packed unless a leading dimension
// is given.

// C(M x N) = A(M x K) * B(K x N) + beta * C
template <typename T>
void gemm_nn(int m, int n, int k, const T* a, const T* b, T* c, T beta,
             int lda = -1, int ldb = -1, int ldc = -1);

// C(M x N) = A(M x K) * B(N x K)^T + beta * C
template <typename T>
void gemm_nt(int m, int n, int k, const T* a, const T* b, T* c, T beta,
             int lda = -1, int ldb = -1, int ldc = -1);

// C(M x N) = A(K x M)^T * B(K x N) + beta * C
template <typename T>
void gemm_tn(int m, int n, int k, const T* a, const T* b, T* c, T beta,
             int lda = -1, int ldb = -1, int ldc = -1);

const char* backend_name();

}  // namespace tsr::blasx
