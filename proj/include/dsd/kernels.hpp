#pragma once

// Knowledge-extraction inner loops, templated on the scalar type so that the
// cost model can run the exact same arithmetic with an operation-counting
// scalar. Each dot product of length n performs n multiplies and n - 1 adds.

#include <cstddef>

namespace dsd::kernels {

template <typename T>
T dot(const T* x, std::size_t x_stride, const T* y, std::size_t y_stride,
      std::size_t n) {
  T acc = x[0] * y[0];
  for (std::size_t i = 1; i < n; ++i) {
    acc = acc + x[i * x_stride] * y[i * y_stride];
  }
  return acc;
}

// out[s] = sum_c a[c, s]^2 for a channels x sites block.
template <typename T>
void attention_sum_sq(const T* a, std::size_t channels, std::size_t sites,
                      T* out) {
  for (std::size_t s = 0; s < sites; ++s) {
    out[s] = dot(a + s, sites, a + s, sites, channels);
  }
}

// out[i, j] = <row_i, row_j> for a count x len row-major block.
template <typename T>
void gram_rows(const T* rows, std::size_t count, std::size_t len, T* out) {
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < count; ++j) {
      out[i * count + j] = dot(rows + i * len, 1, rows + j * len, 1, len);
    }
  }
}

// out[i, j] = <col_i, col_j> for a len x count row-major block (columns are
// the vectors), e.g. per-pixel channel vectors of an N x Z feature map.
template <typename T>
void gram_cols(const T* cols, std::size_t len, std::size_t count, T* out) {
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < count; ++j) {
      out[i * count + j] = dot(cols + i, count, cols + j, count, len);
    }
  }
}

template <typename T>
void subtract(const T* a, const T* b, std::size_t n, T* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

}  // namespace dsd::kernels
