// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>

namespace moelab::kernels {

/// out[m×n] = a[m×k] · b[k×n], all row-major.
///
/// Every output element is accumulated over k in index order with the same
/// instruction sequence regardless of m, so a row of the result is bitwise
/// independent of the other rows of `a`.
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t m,
          std::size_t k, std::size_t n);

/// out[cols×rows] = transpose of in[rows×cols].
void transpose(std::span<const double> in, std::span<double> out, std::size_t rows, std::size_t cols);

}  // namespace moelab::kernels
