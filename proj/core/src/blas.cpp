#include "tsr/blas.hpp"

#include <omp.h>

#include <algorithm>
#include <cstdint>

#if TSR_WITH_CBLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int) __attribute__((weak));
#endif

namespace tsr::blasx {

namespace {

// Output chunk sizes. Fixed constants (not thread-count dependent) keep the
// chunk grid, and therefore the floating point result, independent of the
// number of worker threads.
constexpr int kColChunk = 4096;
constexpr int kRowChunk = 64;
constexpr std::int64_t kParallelFlops = 1 << 22;

#if TSR_WITH_CBLAS

struct BlasInit {
  BlasInit() {
    // Threading is managed here via output chunking; the BLAS itself must
    // stay single threaded or determinism and core budgets are lost.
    if (openblas_set_num_threads) openblas_set_num_threads(1);
  }
};
const BlasInit blas_init;

void raw_gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, const float* a, int lda,
              const float* b, int ldb, float* c, int ldc, float beta) {
  cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, 1.0f, a, lda, b, ldb, beta, c, ldc);
}
void raw_gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, const double* a, int lda,
              const double* b, int ldb, double* c, int ldc, double beta) {
  cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, 1.0, a, lda, b, ldb, beta, c, ldc);
}

#else

enum CBLAS_TRANSPOSE { CblasNoTrans, CblasTrans };

// Portable fallback: straightforward blocked kernel.
template <typename T>
void raw_gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, const T* a, int lda,
              const T* b, int ldb, T* c, int ldc, T beta) {
  auto at = [&](int i, int p) { return ta == CblasNoTrans ? a[std::size_t(i) * lda + p]
                                                          : a[std::size_t(p) * lda + i]; };
  auto bt = [&](int p, int j) { return tb == CblasNoTrans ? b[std::size_t(p) * ldb + j]
                                                          : b[std::size_t(j) * ldb + p]; };
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += at(i, p) * bt(p, j);
      T* out = &c[std::size_t(i) * ldc + j];
      *out = beta * *out + acc;
    }
  }
}

#endif

template <typename T>
void dispatch(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, const T* a, int lda,
              const T* b, int ldb, T* c, int ldc, T beta, bool split_rows) {
  const std::int64_t flops = 2ll * m * n * k;
  const bool parallel = flops >= kParallelFlops && !omp_in_parallel() && omp_get_max_threads() > 1;
  if (!parallel) {
    raw_gemm(ta, tb, m, n, k, a, lda, b, ldb, c, ldc, beta);
    return;
  }
  if (split_rows) {
    const int chunks = (m + kRowChunk - 1) / kRowChunk;
#pragma omp parallel for schedule(dynamic)
    for (int ci = 0; ci < chunks; ++ci) {
      const int r0 = ci * kRowChunk, r1 = std::min(m, r0 + kRowChunk);
      const T* ac = ta == CblasNoTrans ? a + std::size_t(r0) * lda : a + r0;
      raw_gemm(ta, tb, r1 - r0, n, k, ac, lda, b, ldb, c + std::size_t(r0) * ldc, ldc, beta);
    }
  } else {
    const int chunks = (n + kColChunk - 1) / kColChunk;
#pragma omp parallel for schedule(dynamic)
    for (int ci = 0; ci < chunks; ++ci) {
      const int c0 = ci * kColChunk, c1 = std::min(n, c0 + kColChunk);
      const T* bc = tb == CblasNoTrans ? b + c0 : b + std::size_t(c0) * ldb;
      raw_gemm(ta, tb, m, c1 - c0, k, a, lda, bc, ldb, c + c0, ldc, beta);
    }
  }
}

}  // namespace

template <typename T>
void gemm_nn(int m, int n, int k, const T* a, const T* b, T* c, T beta, int lda, int ldb, int ldc) {
  if (lda < 0) lda = k;
  if (ldb < 0) ldb = n;
  if (ldc < 0) ldc = n;
  dispatch(CblasNoTrans, CblasNoTrans, m, n, k, a, lda, b, ldb, c, ldc, beta, /*split_rows=*/false);
}

template <typename T>
void gemm_nt(int m, int n, int k, const T* a, const T* b, T* c, T beta, int lda, int ldb, int ldc) {
  if (lda < 0) lda = k;
  if (ldb < 0) ldb = k;
  if (ldc < 0) ldc = n;
  // Contraction runs over columns of A; rows of C stay independent.
  dispatch(CblasNoTrans, CblasTrans, m, n, k, a, lda, b, ldb, c, ldc, beta, /*split_rows=*/true);
}

template <typename T>
void gemm_tn(int m, int n, int k, const T* a, const T* b, T* c, T beta, int lda, int ldb, int ldc) {
  if (lda < 0) lda = m;
  if (ldb < 0) ldb = n;
  if (ldc < 0) ldc = n;
  dispatch(CblasTrans, CblasNoTrans, m, n, k, a, lda, b, ldb, c, ldc, beta, /*split_rows=*/false);
}

template void gemm_nn<float>(int, int, int, const float*, const float*, float*, float, int, int, int);
template void gemm_nn<double>(int, int, int, const double*, const double*, double*, double, int, int, int);
template void gemm_nt<float>(int, int, int, const float*, const float*, float*, float, int, int, int);
template void gemm_nt<double>(int, int, int, const double*, const double*, double*, double, int, int, int);
template void gemm_tn<float>(int, int, int, const float*, const float*, float*, float, int, int, int);
template void gemm_tn<double>(int, int, int, const double*, const double*, double*, double, int, int, int);

const char* backend_name() {
#if TSR_WITH_CBLAS
  return "openblas";
#else
  return "builtin";
#endif
}

}  // namespace tsr::blasx
