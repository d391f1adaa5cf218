#include "twopass/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "twopass/error.hpp"

namespace twopass::kernels {
namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

template <typename T>
std::size_t operand_stride(std::span<const T> s, std::size_t batch, std::size_t one,
                           const char* name) {
  if (s.size() == one) return 0;
  if (s.size() == one * batch) return one;
  throw ShapeError(std::string("gemm: operand ") + name + " has " + std::to_string(s.size()) +
                   " values, expected " + std::to_string(one) + " or " +
                   std::to_string(one * batch));
}

// ------------------------------------------------------------ serial reference

template <typename T>
void gemm_serial(GemmOp op, std::size_t batch, std::size_t m, std::size_t n, std::size_t k,
                 const T* a, std::size_t as, const T* b, std::size_t bs, T* c, std::size_t cs,
                 bool accumulate) {
  for (std::size_t z = 0; z < batch; ++z) {
    const T* A = a + z * as;
    const T* B = b + z * bs;
    T* C = c + z * cs;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        T s = 0;
        for (std::size_t p = 0; p < k; ++p) {
          const T av = op == GemmOp::tn ? A[p * m + i] : A[i * k + p];
          const T bv = op == GemmOp::nt ? B[j * k + p] : B[p * n + j];
          s += av * bv;
        }
        C[i * n + j] = accumulate ? C[i * n + j] + s : s;
      }
    }
  }
}

// ------------------------------------------------------------ parallel

constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kColBlock = 32;

// C[i0:i0+mr, j0:j0+nr] for a row-major k×n B. Each element is one sequential
// sum over p, exactly as in the reference loop.
template <typename T, std::size_t MR, std::size_t NR>
void gemm_tile(GemmOp op, std::size_t m, std::size_t n, std::size_t k, const T* A, const T* B,
               T* C, std::size_t i0, std::size_t mr, std::size_t j0, std::size_t nr,
               bool accumulate) {
  T acc[kRowBlock][NR] = {};
  const std::size_t rows = MR == kRowBlock ? MR : mr;
  const std::size_t cols = NR == kColBlock ? NR : nr;
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = B + p * n + j0;
    for (std::size_t r = 0; r < rows; ++r) {
      const T av = op == GemmOp::tn ? A[p * m + i0 + r] : A[(i0 + r) * k + p];
#pragma omp simd
      for (std::size_t c = 0; c < cols; ++c) acc[r][c] += av * brow[c];
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    T* crow = C + (i0 + r) * n + j0;
    for (std::size_t c = 0; c < cols; ++c) crow[c] = accumulate ? crow[c] + acc[r][c] : acc[r][c];
  }
}

template <typename T>
void gemm_parallel(GemmOp op, std::size_t batch, std::size_t m, std::size_t n, std::size_t k,
                   const T* a, std::size_t as, const T* b, std::size_t bs, T* c, std::size_t cs,
                   bool accumulate) {
  // A·Bᵀ runs as A·B' on a packed copy B' = Bᵀ.
  std::vector<T> packed;
  if (op == GemmOp::nt) {
    const std::size_t copies = bs == 0 ? 1 : batch;
    packed.resize(copies * k * n);
    for (std::size_t z = 0; z < copies; ++z) {
      const T* src = b + z * bs;
      T* dst = packed.data() + z * k * n;
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t p = 0; p < k; ++p) dst[p * n + j] = src[j * k + p];
      }
    }
    b = packed.data();
    bs = bs == 0 ? 0 : k * n;
    op = GemmOp::nn;
  }
  const std::size_t work = batch * m * n * k;
  const std::size_t row_blocks = (m + kRowBlock - 1) / kRowBlock;
  const auto tasks = static_cast<std::ptrdiff_t>(batch * row_blocks);
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (std::ptrdiff_t t = 0; t < tasks; ++t) {
    const std::size_t z = static_cast<std::size_t>(t) / row_blocks;
    const std::size_t i0 = (static_cast<std::size_t>(t) % row_blocks) * kRowBlock;
    const std::size_t mr = std::min(kRowBlock, m - i0);
    const T* A = a + z * as;
    const T* B = b + z * bs;
    T* C = c + z * cs;
    std::size_t j0 = 0;
    if (mr == kRowBlock) {
      for (; j0 + kColBlock <= n; j0 += kColBlock) {
        gemm_tile<T, kRowBlock, kColBlock>(op, m, n, k, A, B, C, i0, mr, j0, kColBlock,
                                           accumulate);
      }
    }
    for (; j0 < n; j0 += kColBlock) {
      gemm_tile<T, 0, kColBlock + 1>(op, m, n, k, A, B, C, i0, mr, j0,
                                     std::min(kColBlock, n - j0), accumulate);
    }
  }
}

template <typename T>
void softmax_row(std::size_t cols, const T* x, T* y) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, x[j]);
  if (mx == -std::numeric_limits<T>::infinity()) {
    std::fill(y, y + cols, T(0));
    return;
  }
  T sum = 0;
  for (std::size_t j = 0; j < cols; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < cols; ++j) y[j] *= inv;
}

template <typename T>
void log_softmax_row(std::size_t cols, const T* x, T* y) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, x[j]);
  if (mx == -std::numeric_limits<T>::infinity()) {
    std::fill(y, y + cols, -std::numeric_limits<T>::infinity());
    return;
  }
  T sum = 0;
  for (std::size_t j = 0; j < cols; ++j) sum += std::exp(x[j] - mx);
  const T lse = mx + std::log(sum);
  for (std::size_t j = 0; j < cols; ++j) y[j] = x[j] - lse;
}

template <typename T>
void check(std::span<const T> s, std::size_t n, const char* what) {
  if (s.size() != n) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(n) + " values, got " +
                     std::to_string(s.size()));
  }
}

}  // namespace

template <typename T>
void gemm(Backend backend, GemmOp op, std::size_t batch, std::size_t m, std::size_t n,
          std::size_t k, std::span<const T> a, std::span<const T> b, std::span<T> c,
          bool accumulate) {
  const std::size_t as = operand_stride(a, batch, m * k, "A");
  const std::size_t bs = operand_stride(b, batch, k * n, "B");
  const std::size_t cs = operand_stride(std::span<const T>(c), batch, m * n, "C");
  if (batch > 1 && cs == 0) {
    throw ShapeError("gemm: output cannot be broadcast over a batch");
  }
  if (backend == Backend::serial) {
    gemm_serial(op, batch, m, n, k, a.data(), as, b.data(), bs, c.data(), cs, accumulate);
  } else {
    gemm_parallel(op, batch, m, n, k, a.data(), as, b.data(), bs, c.data(), cs, accumulate);
  }
}

template <typename T>
void softmax_rows(Backend backend, std::size_t rows, std::size_t cols, std::span<const T> x,
                  std::span<T> y) {
  check(x, rows * cols, "softmax");
  check(std::span<const T>(y), rows * cols, "softmax");
  const auto n = static_cast<std::ptrdiff_t>(rows);
  if (backend == Backend::serial) {
    for (std::ptrdiff_t r = 0; r < n; ++r) softmax_row(cols, x.data() + r * cols, y.data() + r * cols);
    return;
  }
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (std::ptrdiff_t r = 0; r < n; ++r) softmax_row(cols, x.data() + r * cols, y.data() + r * cols);
}

template <typename T>
void log_softmax_rows(Backend backend, std::size_t rows, std::size_t cols, std::span<const T> x,
                      std::span<T> y) {
  check(x, rows * cols, "log_softmax");
  check(std::span<const T>(y), rows * cols, "log_softmax");
  const auto n = static_cast<std::ptrdiff_t>(rows);
  if (backend == Backend::serial) {
    for (std::ptrdiff_t r = 0; r < n; ++r) {
      log_softmax_row(cols, x.data() + r * cols, y.data() + r * cols);
    }
    return;
  }
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    log_softmax_row(cols, x.data() + r * cols, y.data() + r * cols);
  }
}

template <typename T>
void softmax_rows_backward(Backend backend, std::size_t rows, std::size_t cols,
                           std::span<const T> y, std::span<const T> gy, std::span<T> gx) {
  check(y, rows * cols, "softmax_backward");
  check(gy, rows * cols, "softmax_backward");
  check(std::span<const T>(gx), rows * cols, "softmax_backward");
  auto row = [&](std::size_t r) {
    const T* yr = y.data() + r * cols;
    const T* gr = gy.data() + r * cols;
    T* out = gx.data() + r * cols;
    T dot = 0;
    for (std::size_t j = 0; j < cols; ++j) dot += yr[j] * gr[j];
    for (std::size_t j = 0; j < cols; ++j) out[j] += yr[j] * (gr[j] - dot);
  };
  const auto n = static_cast<std::ptrdiff_t>(rows);
  if (backend == Backend::serial) {
    for (std::ptrdiff_t r = 0; r < n; ++r) row(r);
    return;
  }
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (std::ptrdiff_t r = 0; r < n; ++r) row(r);
}

template <typename T>
void log_softmax_rows_backward(Backend backend, std::size_t rows, std::size_t cols,
                               std::span<const T> y, std::span<const T> gy, std::span<T> gx) {
  check(y, rows * cols, "log_softmax_backward");
  check(gy, rows * cols, "log_softmax_backward");
  check(std::span<const T>(gx), rows * cols, "log_softmax_backward");
  auto row = [&](std::size_t r) {
    const T* yr = y.data() + r * cols;
    const T* gr = gy.data() + r * cols;
    T* out = gx.data() + r * cols;
    T total = 0;
    for (std::size_t j = 0; j < cols; ++j) total += gr[j];
    for (std::size_t j = 0; j < cols; ++j) out[j] += gr[j] - std::exp(yr[j]) * total;
  };
  const auto n = static_cast<std::ptrdiff_t>(rows);
  if (backend == Backend::serial) {
    for (std::ptrdiff_t r = 0; r < n; ++r) row(r);
    return;
  }
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (std::ptrdiff_t r = 0; r < n; ++r) row(r);
}

template <typename T>
void layer_norm_rows(Backend backend, std::size_t rows, std::size_t cols, std::span<const T> x,
                     std::span<const T> gain, std::span<const T> bias, T eps, std::span<T> y,
                     std::span<T> mean, std::span<T> rstd) {
  check(x, rows * cols, "layer_norm");
  check(gain, cols, "layer_norm gain");
  check(bias, cols, "layer_norm bias");
  check(std::span<const T>(mean), rows, "layer_norm mean");
  check(std::span<const T>(rstd), rows, "layer_norm rstd");
  auto row = [&](std::size_t r) {
    const T* xr = x.data() + r * cols;
    T* yr = y.data() + r * cols;
    T mu = 0;
    for (std::size_t j = 0; j < cols; ++j) mu += xr[j];
    mu /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(cols);
    const T rs = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j) yr[j] = (xr[j] - mu) * rs * gain[j] + bias[j];
    mean[r] = mu;
    rstd[r] = rs;
  };
  const auto n = static_cast<std::ptrdiff_t>(rows);
  if (backend == Backend::serial) {
    for (std::ptrdiff_t r = 0; r < n; ++r) row(r);
    return;
  }
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (std::ptrdiff_t r = 0; r < n; ++r) row(r);
}

template <typename T>
void layer_norm_rows_backward(Backend backend, std::size_t rows, std::size_t cols,
                              std::span<const T> x, std::span<const T> gain,
                              std::span<const T> mean, std::span<const T> rstd,
                              std::span<const T> gy, std::span<T> gx, std::span<T> ggain,
                              std::span<T> gbias) {
  check(x, rows * cols, "layer_norm_backward");
  check(gy, rows * cols, "layer_norm_backward");
  const bool parallel = backend == Backend::parallel && rows * cols > kParallelWork;
  const auto n = static_cast<std::ptrdiff_t>(rows);
  if (!gx.empty()) {
    check(std::span<const T>(gx), rows * cols, "layer_norm_backward gx");
    auto row = [&](std::size_t r) {
      const T* xr = x.data() + r * cols;
      const T* gr = gy.data() + r * cols;
      T* out = gx.data() + r * cols;
      const T mu = mean[r];
      const T rs = rstd[r];
      T mean_g = 0;
      T mean_gx = 0;
      for (std::size_t j = 0; j < cols; ++j) {
        const T g = gr[j] * gain[j];
        mean_g += g;
        mean_gx += g * (xr[j] - mu) * rs;
      }
      mean_g /= static_cast<T>(cols);
      mean_gx /= static_cast<T>(cols);
      for (std::size_t j = 0; j < cols; ++j) {
        const T xhat = (xr[j] - mu) * rs;
        out[j] += rs * (gr[j] * gain[j] - mean_g - xhat * mean_gx);
      }
    };
    if (parallel) {
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t r = 0; r < n; ++r) row(r);
    } else {
      for (std::ptrdiff_t r = 0; r < n; ++r) row(r);
    }
  }
  // Column reductions: each column is owned by one thread, rows summed in order.
  auto column = [&](std::size_t j) {
    T sg = 0;
    T sb = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      const T g = gy[r * cols + j];
      sg += g * (x[r * cols + j] - mean[r]) * rstd[r];
      sb += g;
    }
    if (!ggain.empty()) ggain[j] += sg;
    if (!gbias.empty()) gbias[j] += sb;
  };
  if (ggain.empty() && gbias.empty()) return;
  const auto nc = static_cast<std::ptrdiff_t>(cols);
  if (parallel) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t j = 0; j < nc; ++j) column(j);
  } else {
    for (std::ptrdiff_t j = 0; j < nc; ++j) column(j);
  }
}

#define TWOPASS_INSTANTIATE_KERNELS(T)                                                          \
  template void gemm<T>(Backend, GemmOp, std::size_t, std::size_t, std::size_t, std::size_t,   \
                        std::span<const T>, std::span<const T>, std::span<T>, bool);            \
  template void softmax_rows<T>(Backend, std::size_t, std::size_t, std::span<const T>,         \
                                std::span<T>);                                                  \
  template void log_softmax_rows<T>(Backend, std::size_t, std::size_t, std::span<const T>,     \
                                    std::span<T>);                                              \
  template void softmax_rows_backward<T>(Backend, std::size_t, std::size_t, std::span<const T>, \
                                         std::span<const T>, std::span<T>);                     \
  template void log_softmax_rows_backward<T>(Backend, std::size_t, std::size_t,                \
                                             std::span<const T>, std::span<const T>,            \
                                             std::span<T>);                                     \
  template void layer_norm_rows<T>(Backend, std::size_t, std::size_t, std::span<const T>,      \
                                   std::span<const T>, std::span<const T>, T, std::span<T>,     \
                                   std::span<T>, std::span<T>);                                 \
  template void layer_norm_rows_backward<T>(                                                    \
      Backend, std::size_t, std::size_t, std::span<const T>, std::span<const T>,               \
      std::span<const T>, std::span<const T>, std::span<const T>, std::span<T>, std::span<T>,   \
      std::span<T>);

TWOPASS_INSTANTIATE_KERNELS(float)
TWOPASS_INSTANTIATE_KERNELS(double)

}  // namespace twopass::kernels
