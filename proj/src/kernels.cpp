#include "bidiseq/kernels.hpp"

#include <algorithm>
#include <cstdlib>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif
#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace bidiseq::kernels {
namespace {

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = 1u << 16;

int initial_threads() {
    if (const char* env = std::getenv("BIDISEQ_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

int& threads_setting() {
    static int threads = initial_threads();
    return threads;
}

template <class Real>
inline void gemm_row(const Real* __restrict a_row, const Real* __restrict b, Real* __restrict c_row, std::size_t k,
                     std::size_t n, bool accumulate) {
    if (!accumulate) std::memset(c_row, 0, n * sizeof(Real));
    for (std::size_t p = 0; p < k; ++p) {
        const Real av = a_row[p];
        const Real* __restrict b_row = b + p * n;
        for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
}

// Tile width in cache lines: enough accumulators to hide FMA latency without
// spilling the register file.
#ifdef __AVX512F__
constexpr std::size_t kTileLines = 4;
#else
constexpr std::size_t kTileLines = 2;
#endif

template <class Real>
constexpr std::size_t kTileCols = 64 / sizeof(Real) * kTileLines;

// Rows x kTileCols block of C held in registers while streaming over k. Every
// element still accumulates over p in increasing order starting from C (or
// zero), exactly like gemm_row.
template <class Real, std::size_t Rows>
inline void gemm_tile(const Real* __restrict a, const Real* __restrict b, Real* __restrict c, std::size_t k,
                      std::size_t n, bool accumulate) {
    constexpr std::size_t cols = kTileCols<Real>;
    Real acc[Rows][cols];
    for (std::size_t r = 0; r < Rows; ++r) {
#pragma omp simd
        for (std::size_t j = 0; j < cols; ++j) acc[r][j] = accumulate ? c[r * n + j] : Real(0);
    }
    for (std::size_t p = 0; p < k; ++p) {
        const Real* __restrict b_row = b + p * n;
        for (std::size_t r = 0; r < Rows; ++r) {
            const Real av = a[r * k + p];
#pragma omp simd
            for (std::size_t j = 0; j < cols; ++j) acc[r][j] += av * b_row[j];
        }
    }
    for (std::size_t r = 0; r < Rows; ++r) {
#pragma omp simd
        for (std::size_t j = 0; j < cols; ++j) c[r * n + j] = acc[r][j];
    }
}

template <class Real>
inline void gemm_rows(const Real* a, const Real* b, Real* c, std::size_t rows, std::size_t k, std::size_t n,
                      bool accumulate) {
    constexpr std::size_t kRows = 4;
    constexpr std::size_t cols = kTileCols<Real>;
    const std::size_t full = n - n % cols;
    const std::size_t blocked = rows - rows % kRows;
    // Column panels outer so each panel of b stays in L1 across row blocks.
    for (std::size_t j0 = 0; j0 < full; j0 += cols) {
        for (std::size_t i = 0; i < blocked; i += kRows) {
            gemm_tile<Real, kRows>(a + i * k, b + j0, c + i * n + j0, k, n, accumulate);
        }
        const std::size_t i = blocked;
        switch (rows - blocked) {
            case 3: gemm_tile<Real, 3>(a + i * k, b + j0, c + i * n + j0, k, n, accumulate); break;
            case 2: gemm_tile<Real, 2>(a + i * k, b + j0, c + i * n + j0, k, n, accumulate); break;
            case 1: gemm_tile<Real, 1>(a + i * k, b + j0, c + i * n + j0, k, n, accumulate); break;
            default: break;
        }
    }
    if (full == n) return;
    // Ragged right edge, row by row.
    for (std::size_t r = 0; r < rows; ++r) {
        Real* __restrict c_row = c + r * n;
        if (!accumulate) {
            for (std::size_t j = full; j < n; ++j) c_row[j] = Real(0);
        }
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = a[r * k + p];
            const Real* __restrict b_row = b + p * n;
            for (std::size_t j = full; j < n; ++j) c_row[j] += av * b_row[j];
        }
    }
}

// Rows x kTileCols block of C[k x n] (rows p0.., columns j0..) accumulated
// over the sample rows [i0, i1) of A and D in increasing order, as in the
// serial reference. C holds the running sum between calls, so splitting the
// sample range changes nothing.
template <class Real, std::size_t Rows>
inline void gemm_tn_tile(const Real* __restrict a, const Real* __restrict d, Real* __restrict c, std::size_t i0,
                         std::size_t i1, std::size_t k, std::size_t n) {
    constexpr std::size_t cols = kTileCols<Real>;
    Real acc[Rows][cols];
    for (std::size_t r = 0; r < Rows; ++r) {
#pragma omp simd
        for (std::size_t j = 0; j < cols; ++j) acc[r][j] = c[r * n + j];
    }
    for (std::size_t i = i0; i < i1; ++i) {
        const Real* __restrict d_row = d + i * n;
        for (std::size_t r = 0; r < Rows; ++r) {
            const Real av = a[i * k + r];
#pragma omp simd
            for (std::size_t j = 0; j < cols; ++j) acc[r][j] += av * d_row[j];
        }
    }
    for (std::size_t r = 0; r < Rows; ++r) {
#pragma omp simd
        for (std::size_t j = 0; j < cols; ++j) c[r * n + j] = acc[r][j];
    }
}

// Output rows [p_begin, p_end) of C += A^T D.
template <class Real>
void gemm_tn_rows(const Real* a, const Real* d, Real* c, std::size_t m, std::size_t k, std::size_t n,
                  std::size_t p_begin, std::size_t p_end) {
    constexpr std::size_t kRows = 4;
    // Sample rows per pass: keeps the D panel resident in L2.
    constexpr std::size_t kChunk = 256;
    constexpr std::size_t cols = kTileCols<Real>;
    const std::size_t full = n - n % cols;
    const std::size_t span = p_end - p_begin;
    const std::size_t blocked = p_begin + (span - span % kRows);
    for (std::size_t i0 = 0; i0 < m; i0 += kChunk) {
        const std::size_t i1 = std::min(m, i0 + kChunk);
        for (std::size_t j0 = 0; j0 < full; j0 += cols) {
            for (std::size_t p = p_begin; p < blocked; p += kRows) {
                gemm_tn_tile<Real, kRows>(a + p, d + j0, c + p * n + j0, i0, i1, k, n);
            }
            const std::size_t p = blocked;
            switch (p_end - blocked) {
                case 3: gemm_tn_tile<Real, 3>(a + p, d + j0, c + p * n + j0, i0, i1, k, n); break;
                case 2: gemm_tn_tile<Real, 2>(a + p, d + j0, c + p * n + j0, i0, i1, k, n); break;
                case 1: gemm_tn_tile<Real, 1>(a + p, d + j0, c + p * n + j0, i0, i1, k, n); break;
                default: break;
            }
        }
        if (full == n) continue;
        for (std::size_t i = i0; i < i1; ++i) {
            const Real* __restrict d_row = d + i * n;
            for (std::size_t p = p_begin; p < p_end; ++p) {
                const Real av = a[i * k + p];
                Real* __restrict c_row = c + p * n;
                for (std::size_t j = full; j < n; ++j) c_row[j] += av * d_row[j];
            }
        }
    }
}

}  // namespace

int thread_count() { return threads_setting(); }

void set_thread_count(int threads) { threads_setting() = std::max(1, threads); }

void tune_allocator() {
#ifdef __GLIBC__
    static const bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 32 << 20);
        mallopt(M_TRIM_THRESHOLD, 512 << 20);
        mallopt(M_TOP_PAD, 64 << 20);
        return true;
    }();
    (void)done;
#endif
}

template <class Real>
void gemm_serial(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n,
                 bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) gemm_row(a + i * k, b, c + i * n, k, n, accumulate);
}

template <class Real>
void gemm(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
#ifdef _OPENMP
    const int threads = thread_count();
    if (threads > 1 && m > 8 && m * k * n >= kParallelWork && !omp_in_parallel()) {
        constexpr std::size_t kBlock = 8;
        const auto blocks = static_cast<std::ptrdiff_t>((m + kBlock - 1) / kBlock);
#pragma omp parallel for schedule(static) num_threads(threads)
        for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
            const auto r = static_cast<std::size_t>(blk) * kBlock;
            gemm_rows(a + r * k, b, c + r * n, std::min(kBlock, m - r), k, n, accumulate);
        }
        return;
    }
#endif
    gemm_rows(a, b, c, m, k, n, accumulate);
}

template <class Real>
void gemm_tn_serial(const Real* a, const Real* d, Real* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* __restrict a_row = a + i * k;
        const Real* __restrict d_row = d + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = a_row[p];
            Real* __restrict c_row = c + p * n;
            for (std::size_t j = 0; j < n; ++j) c_row[j] += av * d_row[j];
        }
    }
}

template <class Real>
void gemm_tn(const Real* a, const Real* d, Real* c, std::size_t m, std::size_t k, std::size_t n) {
#ifdef _OPENMP
    const int threads = thread_count();
    if (threads > 1 && k > 4 && m * k * n >= kParallelWork && !omp_in_parallel()) {
        constexpr std::size_t kBlock = 4;
        const auto blocks = static_cast<std::ptrdiff_t>((k + kBlock - 1) / kBlock);
#pragma omp parallel for schedule(static) num_threads(threads)
        for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
            const auto p = static_cast<std::size_t>(blk) * kBlock;
            gemm_tn_rows(a, d, c, m, k, n, p, std::min(k, p + kBlock));
        }
        return;
    }
#endif
    gemm_tn_rows(a, d, c, m, k, n, 0, k);
}

template <class Real>
void transpose(const Real* a, Real* b, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) b[j * m + i] = a[i * n + j];
    }
}

#define BIDISEQ_INSTANTIATE(Real)                                                                              \
    template void gemm_serial<Real>(const Real*, const Real*, Real*, std::size_t, std::size_t, std::size_t,     \
                                    bool);                                                                     \
    template void gemm<Real>(const Real*, const Real*, Real*, std::size_t, std::size_t, std::size_t, bool);     \
    template void gemm_tn_serial<Real>(const Real*, const Real*, Real*, std::size_t, std::size_t, std::size_t); \
    template void gemm_tn<Real>(const Real*, const Real*, Real*, std::size_t, std::size_t, std::size_t);        \
    template void transpose<Real>(const Real*, Real*, std::size_t, std::size_t);

BIDISEQ_INSTANTIATE(float)
BIDISEQ_INSTANTIATE(double)
#undef BIDISEQ_INSTANTIATE

}  // namespace bidiseq::kernels
