#pragma once

#include <complex>
#include <vector>

#include "leuq/common.hpp"

namespace leuq {

// Iterative radix-2 Cooley-Tukey, unnormalized forward transform; the
// inverse divides by n. Grid sizes are powers of two by configuration.
inline void fft_inplace(std::complex<double>* a, std::size_t n, bool inverse) {
  if (!is_pow2(n)) throw ConfigError("fft length must be a power of two, got " + std::to_string(n));
  // bit reversal
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  const double dir = inverse ? 1.0 : -1.0;
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = dir * 2.0 * 3.14159265358979323846 / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const std::complex<double> u = a[i + j];
        const std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse) {
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) a[i] *= inv;
  }
}

// 2D transform of an n*n row-major grid: rows, then columns.
inline void fft2d_inplace(std::vector<std::complex<double>>& a, std::size_t n, bool inverse) {
  if (a.size() != n * n) throw ShapeError("fft2d: buffer size does not match grid");
  for (std::size_t r = 0; r < n; ++r) fft_inplace(a.data() + r * n, n, inverse);
  std::vector<std::complex<double>> col(n);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t r = 0; r < n; ++r) col[r] = a[r * n + c];
    fft_inplace(col.data(), n, inverse);
    for (std::size_t r = 0; r < n; ++r) a[r * n + c] = col[r];
  }
}

}  // namespace leuq
