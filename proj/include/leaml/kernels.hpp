#pragma once

// Dense kernels shared by the taped forward pass and the cached decoder.
//
// Every output element of gemm_acc is accumulated over the inner dimension in
// ascending order, independent of how many rows are processed together. The
// incremental decoder relies on this to reproduce full-forward logits exactly.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>

namespace leaml::kernels {

namespace detail {

// Register tile: acc[r][j] starts at zero, sums over p in ascending order, and
// is added to C once. Every tile shape below uses this same per-element recipe.
template <typename T, std::size_t MR, std::size_t NR>
inline void gemm_tile(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
                      std::size_t k) {
  T acc[MR][NR] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const T* br = b + p * ldb;
    for (std::size_t r = 0; r < MR; ++r) {
      const T av = a[r * lda + p];
      for (std::size_t j = 0; j < NR; ++j) acc[r][j] += av * br[j];
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < NR; ++j) c[r * ldc + j] += acc[r][j];
}

template <typename T, std::size_t NR>
inline void gemm_panel(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
                       std::size_t j) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_tile<T, 4, NR>(a + i * k, k, b + j, n, c + i * n + j, n, k);
  for (; i < m; ++i) gemm_tile<T, 1, NR>(a + i * k, k, b + j, n, c + i * n + j, n, k);
}

}  // namespace detail

/// C[m x n] += A[m x k] * B[k x n], all row-major.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t kWide = 256 / sizeof(T);
  constexpr std::size_t kNarrow = 64 / sizeof(T);
  std::size_t j = 0;
  for (; j + kWide <= n; j += kWide) detail::gemm_panel<T, kWide>(a, b, c, m, k, n, j);
  for (; j + kNarrow <= n; j += kNarrow) detail::gemm_panel<T, kNarrow>(a, b, c, m, k, n, j);
  for (; j < n; ++j) detail::gemm_panel<T, 1>(a, b, c, m, k, n, j);
}

template <typename T>
void transpose(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

inline constexpr double kLayerNormEps = 1e-5;

/// y = (x - mean) / sqrt(var + eps) * gain + bias over one row of width n.
/// Writes the normalized row (before gain/bias) to xhat when non-null.
template <typename T>
void layernorm_row(const T* x, const T* gain, const T* bias, std::size_t n, T* y,
                   T* xhat, T* rstd_out) {
  T mean = 0;
  for (std::size_t j = 0; j < n; ++j) mean += x[j];
  mean /= static_cast<T>(n);
  T var = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const T d = x[j] - mean;
    var += d * d;
  }
  var /= static_cast<T>(n);
  const T rstd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
  for (std::size_t j = 0; j < n; ++j) {
    const T h = (x[j] - mean) * rstd;
    if (xhat) xhat[j] = h;
    y[j] = h * gain[j] + bias[j];
  }
  if (rstd_out) *rstd_out = rstd;
}

/// tanh-approximated GELU. Optionally reports the inner tanh for reuse.
template <typename T>
T gelu(T x, T* tanh_out = nullptr) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T inner = c * (x + static_cast<T>(0.044715) * x * x * x);
  const T t = std::tanh(inner);
  if (tanh_out) *tanh_out = t;
  return static_cast<T>(0.5) * x * (T(1) + t);
}

/// d gelu / dx given the tanh term from the forward pass.
template <typename T>
T gelu_grad(T x, T t) {
  const T c = static_cast<T>(0.7978845608028654);
  const T dinner = c * (T(1) + static_cast<T>(3) * static_cast<T>(0.044715) * x * x);
  return static_cast<T>(0.5) * (T(1) + t) + static_cast<T>(0.5) * x * (T(1) - t * t) * dinner;
}

template <typename T>
T gelu_grad(T x) {
  T t;
  gelu(x, &t);
  return gelu_grad(x, t);
}

/// Single-query scaled dot-product attention over n_keys keys/values laid out
/// with the given row stride. probs receives the n_keys attention weights.
template <typename T>
void attend_row(const T* q, const T* keys, const T* values, std::size_t stride,
                std::size_t n_keys, std::size_t head_dim, T scale, T* out, T* probs) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n_keys; ++j) {
    const T* kr = keys + j * stride;
    T s = 0;
    for (std::size_t t = 0; t < head_dim; ++t) s += q[t] * kr[t];
    s *= scale;
    probs[j] = s;
    mx = std::max(mx, s);
  }
  T sum = 0;
  for (std::size_t j = 0; j < n_keys; ++j) {
    probs[j] = std::exp(probs[j] - mx);
    sum += probs[j];
  }
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < n_keys; ++j) probs[j] *= inv;
  std::fill(out, out + head_dim, T(0));
  for (std::size_t j = 0; j < n_keys; ++j) {
    const T p = probs[j];
    const T* vr = values + j * stride;
    for (std::size_t t = 0; t < head_dim; ++t) out[t] += p * vr[t];
  }
}

/// Numerically stable log-sum-exp of a row.
template <typename T>
T log_sum_exp(const T* x, std::size_t n) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
  T sum = 0;
  for (std::size_t j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
  return mx + std::log(sum);
}

}  // namespace leaml::kernels
