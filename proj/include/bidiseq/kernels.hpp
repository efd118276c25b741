#pragma once

// Dense row-major kernels. Every kernel has a serial reference (`*_serial`)
// and an OpenMP version that splits output rows across threads. Each output
// element is accumulated over the inner dimension in the same order in both
// versions, so results are bitwise identical for any thread count, and a row's
// result does not depend on how many other rows are computed with it.

#include <cstddef>

namespace bidiseq::kernels {

// C[m x n] (+)= A[m x k] * B[k x n]
template <class Real>
void gemm_serial(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n,
                 bool accumulate);
template <class Real>
void gemm(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);

// C[k x n] += A[m x k]^T * D[m x n]
template <class Real>
void gemm_tn_serial(const Real* a, const Real* d, Real* c, std::size_t m, std::size_t k, std::size_t n);
template <class Real>
void gemm_tn(const Real* a, const Real* d, Real* c, std::size_t m, std::size_t k, std::size_t n);

// B[n x m] = A[m x n]^T
template <class Real>
void transpose(const Real* a, Real* b, std::size_t m, std::size_t n);

// Worker threads used by the parallel kernels and by batch-level loops.
// Initialized from BIDISEQ_THREADS when set.
int thread_count();
void set_thread_count(int threads);

// Keeps large tensor buffers on the heap between training steps instead of
// mapping and unmapping them on every allocation (glibc only; a no-op
// elsewhere). Idempotent.
void tune_allocator();

}  // namespace bidiseq::kernels
