#pragma once

// Dense numeric kernels behind the tape ops. Every kernel has two
// implementations selected by Backend:
//
//   serial    plain reference loops, kept for testing and for the
//             enumeration oracle, which must be single-threaded
//   parallel  OpenMP over independent output rows, with SIMD inner loops
//
// Parallel kernels never split a single output element across threads, so
// their results do not depend on the thread count. They may differ from the
// serial reference in the last bits because inner sums are reassociated.

#include <cstddef>
#include <span>

namespace twopass::kernels {

enum class Backend { serial, parallel };

/// Which operands are transposed: C = A·B, A·Bᵀ or Aᵀ·B.
enum class GemmOp { nn, nt, tn };

/// Batched C[b] (+)= op(A[b], B[b]) with C of shape m×n and inner size k.
/// A is m×k (nn, nt) or k×m (tn); B is k×n (nn, tn) or n×k (nt).
/// An operand span holding exactly one matrix is broadcast over the batch.
template <typename T>
void gemm(Backend backend, GemmOp op, std::size_t batch, std::size_t m, std::size_t n,
          std::size_t k, std::span<const T> a, std::span<const T> b, std::span<T> c,
          bool accumulate);

template <typename T>
void softmax_rows(Backend backend, std::size_t rows, std::size_t cols, std::span<const T> x,
                  std::span<T> y);

template <typename T>
void log_softmax_rows(Backend backend, std::size_t rows, std::size_t cols, std::span<const T> x,
                      std::span<T> y);

/// gx += y ⊙ (gy − Σ y·gy), row-wise.
template <typename T>
void softmax_rows_backward(Backend backend, std::size_t rows, std::size_t cols,
                           std::span<const T> y, std::span<const T> gy, std::span<T> gx);

/// gx += gy − exp(y)·Σ gy, row-wise, where y = log_softmax(x).
template <typename T>
void log_softmax_rows_backward(Backend backend, std::size_t rows, std::size_t cols,
                               std::span<const T> y, std::span<const T> gy, std::span<T> gx);

/// y = (x − mean)·rstd·gain + bias per row. Saves mean and rstd for backward.
template <typename T>
void layer_norm_rows(Backend backend, std::size_t rows, std::size_t cols, std::span<const T> x,
                     std::span<const T> gain, std::span<const T> bias, T eps, std::span<T> y,
                     std::span<T> mean, std::span<T> rstd);

/// Accumulates input, gain and bias gradients. Any output span may be empty
/// to skip that gradient.
template <typename T>
void layer_norm_rows_backward(Backend backend, std::size_t rows, std::size_t cols,
                              std::span<const T> x, std::span<const T> gain,
                              std::span<const T> mean, std::span<const T> rstd,
                              std::span<const T> gy, std::span<T> gx, std::span<T> ggain,
                              std::span<T> gbias);

}  // namespace twopass::kernels
