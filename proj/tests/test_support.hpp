// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared test oracles. Everything here is deliberately written as direct,
// loop-based reference code, independent of the library's compute paths.

#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

#include "mmnas/tensor.hpp"

namespace testsup {

template <typename S>
double max_abs_diff(const mmnas::Tensor<S>& a, const mmnas::Tensor<S>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

template <typename S>
double max_rel_diff(const mmnas::Tensor<S>& a, const mmnas::Tensor<S>& b, double floor = 1e-9) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double x = static_cast<double>(a.data()[i]);
    const double y = static_cast<double>(b.data()[i]);
    m = std::max(m, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
  }
  return m;
}

// Nested-loop cross-correlation reference, double accumulation.
template <typename S>
mmnas::Tensor<S> conv2d_reference(const mmnas::Tensor<S>& x, const mmnas::Tensor<S>& w,
                                  const mmnas::Conv2dOpts& o = {}) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int G = o.groups, Cg = C / G, Fg = F / G;
  const int Ho = (H + 2 * o.padding - o.dilation * (kh - 1) - 1) / o.stride + 1;
  const int Wo = (W + 2 * o.padding - o.dilation * (kw - 1) - 1) / o.stride + 1;
  mmnas::Tensor<S> y(mmnas::Shape{N, F, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int f = 0; f < F; ++f) {
      const int g = f / Fg;
      for (int oi = 0; oi < Ho; ++oi)
        for (int oj = 0; oj < Wo; ++oj) {
          double acc = 0.0;
          for (int c = 0; c < Cg; ++c)
            for (int ki = 0; ki < kh; ++ki)
              for (int kj = 0; kj < kw; ++kj) {
                const int ii = oi * o.stride - o.padding + ki * o.dilation;
                const int jj = oj * o.stride - o.padding + kj * o.dilation;
                if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                const double xv = x.at({n, g * Cg + c, ii, jj});
                const double wv = w.at({f, c, ki, kj});
                acc += xv * wv;
              }
          y.data()[((static_cast<std::int64_t>(n) * F + f) * Ho + oi) * Wo + oj] = static_cast<S>(acc);
        }
    }
  return y;
}

// Brute-force window scan reference for pooling.
template <typename S>
mmnas::Tensor<S> pool2d_reference(const mmnas::Tensor<S>& x, mmnas::PoolKind kind, int k, int stride,
                                  int padding) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = (H + 2 * padding - k) / stride + 1;
  const int Wo = (W + 2 * padding - k) / stride + 1;
  mmnas::Tensor<S> y(mmnas::Shape{N, C, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oi = 0; oi < Ho; ++oi)
        for (int oj = 0; oj < Wo; ++oj) {
          double best = -std::numeric_limits<double>::infinity();
          double acc = 0.0;
          for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
              const int ii = oi * stride - padding + ki;
              const int jj = oj * stride - padding + kj;
              if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
              const double v = x.at({n, c, ii, jj});
              best = std::max(best, v);
              acc += v;
            }
          const double out = kind == mmnas::PoolKind::Max ? best : acc / (k * k);
          y.data()[((static_cast<std::int64_t>(n) * C + c) * Ho + oi) * Wo + oj] = static_cast<S>(out);
        }
  return y;
}

// O(n^2) DFT of a real frame, for STFT cross-checks.
inline std::vector<std::complex<double>> dft_reference(const std::vector<double>& frame) {
  const std::size_t n = frame.size();
  std::vector<std::complex<double>> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
      const double ang = -2.0 * M_PI * static_cast<double>(k) * static_cast<double>(t) / static_cast<double>(n);
      acc += frame[t] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}

// Explicit least-squares slope of f over a centered window, replicated
// edges; the regression oracle for delta features.
inline std::vector<double> delta_regression_reference(const std::vector<double>& row, int width) {
  const int half = (width - 1) / 2;
  const int n = static_cast<int>(row.size());
  double denom = 0.0;
  for (int d = 1; d <= half; ++d) denom += 2.0 * d * d;
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) {
    double acc = 0.0;
    for (int d = -half; d <= half; ++d) {
      const int idx = std::clamp(t + d, 0, n - 1);
      acc += static_cast<double>(d) * row[static_cast<std::size_t>(idx)];
    }
    out[static_cast<std::size_t>(t)] = acc / denom;
  }
  return out;
}

}  // namespace testsup
