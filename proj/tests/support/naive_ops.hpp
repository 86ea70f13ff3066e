#pragma once

#include <vector>

namespace dkd::testing {

/// Direct-summation references for the GEMM-backed kernels. Deliberately
/// written as plain loops so they share nothing with the production im2col /
/// Eigen path.

inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                        int n, int k, int m) {
  std::vector<double> c(static_cast<std::size_t>(n) * m, 0.0);
  for (int i = 0; i < n; ++i)
    for (int l = 0; l < k; ++l) {
      const double av = a[static_cast<std::size_t>(i) * k + l];
      for (int j = 0; j < m; ++j) c[static_cast<std::size_t>(i) * m + j] += av * b[static_cast<std::size_t>(l) * m + j];
    }
  return c;
}

/// Stride-1 "same" convolution with zero padding and per-filter bias,
/// NCHW / [F,C,kh,kw] layouts.
inline std::vector<double> naive_conv2d(const std::vector<double>& x, const std::vector<double>& w,
                                        const std::vector<double>& bias, int n, int c, int h,
                                        int wd, int f, int kh, int kw) {
  const int ph = kh / 2, pw = kw / 2;
  std::vector<double> y(static_cast<std::size_t>(n) * f * h * wd, 0.0);
  for (int s = 0; s < n; ++s)
    for (int of = 0; of < f; ++of)
      for (int oh = 0; oh < h; ++oh)
        for (int ow = 0; ow < wd; ++ow) {
          double acc = bias[of];
          for (int ic = 0; ic < c; ++ic)
            for (int ki = 0; ki < kh; ++ki)
              for (int kj = 0; kj < kw; ++kj) {
                const int ih = oh + ki - ph, iw = ow + kj - pw;
                if (ih < 0 || ih >= h || iw < 0 || iw >= wd) continue;
                acc += x[((static_cast<std::size_t>(s) * c + ic) * h + ih) * wd + iw] *
                       w[((static_cast<std::size_t>(of) * c + ic) * kh + ki) * kw + kj];
              }
          y[((static_cast<std::size_t>(s) * f + of) * h + oh) * wd + ow] = acc;
        }
  return y;
}

}  // namespace dkd::testing
