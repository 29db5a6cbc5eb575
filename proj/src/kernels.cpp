// SPDX-License-Identifier: Apache-2.0
#include "moelab/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace moelab::kernels {

namespace {

using v8 = double __attribute__((vector_size(64)));
constexpr std::size_t kLanes = 8;
constexpr std::size_t kTileCols = 2 * kLanes;
constexpr std::size_t kTileRows = 4;

inline v8 load(const double* p) {
  v8 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store(double* p, v8 v) { std::memcpy(p, &v, sizeof v); }

template <std::size_t R>
inline void tile(const double* __restrict a, const double* __restrict b, double* __restrict out, std::size_t row,
                 std::size_t col, std::size_t k, std::size_t n) {
  v8 acc[R][2];
  for (std::size_t r = 0; r < R; ++r) {
    acc[r][0] = v8{};
    acc[r][1] = v8{};
  }
  for (std::size_t p = 0; p < k; ++p) {
    const v8 b0 = load(b + p * n + col);
    const v8 b1 = load(b + p * n + col + kLanes);
    for (std::size_t r = 0; r < R; ++r) {
      const double x = a[(row + r) * k + p];
      acc[r][0] += x * b0;
      acc[r][1] += x * b1;
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    store(out + (row + r) * n + col, acc[r][0]);
    store(out + (row + r) * n + col + kLanes, acc[r][1]);
  }
}

}  // namespace

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t m,
          std::size_t k, std::size_t n) {
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  std::size_t col = 0;
  for (; col + kTileCols <= n; col += kTileCols) {
    std::size_t row = 0;
    for (; row + kTileRows <= m; row += kTileRows) tile<kTileRows>(pa, pb, po, row, col, k, n);
    for (; row < m; ++row) tile<1>(pa, pb, po, row, col, k, n);
  }
  // Column tail: scalar fused multiply-add, same order for every row.
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = col; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s = std::fma(pa[i * k + p], pb[p * n + j], s);
      po[i * n + j] = s;
    }
  }
}

void transpose(std::span<const double> in, std::span<double> out, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
    for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
      const std::size_t r1 = std::min(rows, r0 + kBlock);
      const std::size_t c1 = std::min(cols, c0 + kBlock);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) out[c * rows + r] = in[r * cols + c];
    }
  }
}

}  // namespace moelab::kernels
