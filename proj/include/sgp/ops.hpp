#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "sgp/tensor.hpp"

namespace sgp {

// ---------------------------------------------------------------------------
// Bilinear resize, half-pixel centres (align_corners = false), edge clamp.

namespace detail {

struct LinearTaps {
  std::vector<std::size_t> i0, i1;
  std::vector<double> frac;
};

inline LinearTaps linear_taps(std::size_t in, std::size_t out) {
  LinearTaps t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    t.i0[o] = lo;
    t.i1[o] = std::min(lo + 1, in - 1);
    t.frac[o] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace detail

/// Resizes every [H, W] plane of a rank-3 [N, H, W] or rank-4 [B, C, H, W] tensor.
inline Tensor resize_bilinear(const Tensor& m, std::size_t h, std::size_t w) {
  if (m.rank() < 3) throw ShapeError("resize_bilinear: need rank >= 3, got " + to_string(m.shape()));
  const std::size_t H = m.dim(m.rank() - 2), W = m.dim(m.rank() - 1);
  if (H == 0 || W == 0 || h == 0 || w == 0) throw ShapeError("resize_bilinear: zero-sized map");
  Shape out_shape = m.shape();
  out_shape[out_shape.size() - 2] = h;
  out_shape[out_shape.size() - 1] = w;
  if (H == h && W == w) return m;
  const std::size_t planes = m.size() / (H * W);
  const auto ty = detail::linear_taps(H, h), tx = detail::linear_taps(W, w);
  Tensor out(out_shape);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = m.data().data() + p * H * W;
    double* dst = out.data().data() + p * h * w;
    for (std::size_t i = 0; i < h; ++i) {
      const double fy = ty.frac[i];
      const double* r0 = src + ty.i0[i] * W;
      const double* r1 = src + ty.i1[i] * W;
      for (std::size_t j = 0; j < w; ++j) {
        const double fx = tx.frac[j];
        const double top = r0[tx.i0[j]] * (1 - fx) + r0[tx.i1[j]] * fx;
        const double bot = r1[tx.i0[j]] * (1 - fx) + r1[tx.i1[j]] * fx;
        dst[i * w + j] = top * (1 - fy) + bot * fy;
      }
    }
  }
  return out;
}

/// Transpose of resize_bilinear: maps a gradient at the output size back to [.., H, W].
inline Tensor resize_bilinear_adjoint(const Tensor& g, std::size_t H, std::size_t W) {
  const std::size_t h = g.dim(g.rank() - 2), w = g.dim(g.rank() - 1);
  Shape in_shape = g.shape();
  in_shape[in_shape.size() - 2] = H;
  in_shape[in_shape.size() - 1] = W;
  if (H == h && W == w) return g;
  const std::size_t planes = g.size() / (h * w);
  const auto ty = detail::linear_taps(H, h), tx = detail::linear_taps(W, w);
  Tensor out(in_shape);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = g.data().data() + p * h * w;
    double* dst = out.data().data() + p * H * W;
    for (std::size_t i = 0; i < h; ++i) {
      const double fy = ty.frac[i];
      for (std::size_t j = 0; j < w; ++j) {
        const double fx = tx.frac[j];
        const double v = src[i * w + j];
        dst[ty.i0[i] * W + tx.i0[j]] += v * (1 - fy) * (1 - fx);
        dst[ty.i0[i] * W + tx.i1[j]] += v * (1 - fy) * fx;
        dst[ty.i1[i] * W + tx.i0[j]] += v * fy * (1 - fx);
        dst[ty.i1[i] * W + tx.i1[j]] += v * fy * fx;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Empirical quantile with linear interpolation between order statistics.
inline double quantile(std::span<const double> x, double q) {
  if (x.empty()) throw Error("quantile: empty input");
  if (!(q >= 0.0 && q <= 1.0)) throw Error("quantile: q must lie in [0, 1]");
  std::vector<double> s(x.begin(), x.end());
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  std::nth_element(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(lo), s.end());
  const double a = s[lo];
  if (hi == lo) return a;
  const double b = *std::min_element(s.begin() + static_cast<std::ptrdiff_t>(lo) + 1, s.end());
  return a + (pos - static_cast<double>(lo)) * (b - a);
}

/// softmax(v ⊙ scale), stabilised by max subtraction.
inline std::vector<double> softmax_scaled(std::span<const double> v, std::span<const double> scale) {
  if (v.empty() || v.size() != scale.size()) throw ShapeError("softmax_scaled: size mismatch");
  std::vector<double> z(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) z[k] = v[k] * scale[k];
  const double mx = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double& e : z) total += (e = std::exp(e - mx));
  for (double& e : z) e /= total;
  return z;
}

// ---------------------------------------------------------------------------
// Channel mixing and small convolutions.

/// Per-pixel affine channel map: y[:, o] = Σ_i W[o, i] x[:, i] + b[o].
inline Tensor conv1x1(const Tensor& x, const Tensor& W, const Tensor& b) {
  require_rank(x, 4, "conv1x1");
  require_rank(W, 2, "conv1x1 weight");
  const std::size_t B = x.dim(0), Cin = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::size_t Cout = W.dim(0);
  if (W.dim(1) != Cin || b.size() != Cout)
    throw ShapeError("conv1x1: weight " + to_string(W.shape()) + " / bias " + to_string(b.shape()) +
                     " incompatible with input " + to_string(x.shape()));
  Tensor y(Shape{B, Cout, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < Cout; ++o) {
      double* dst = y.data().data() + (n * Cout + o) * hw;
      std::fill(dst, dst + hw, b[o]);
      for (std::size_t i = 0; i < Cin; ++i) {
        const double wgt = W[o * Cin + i];
        const double* src = x.data().data() + (n * Cin + i) * hw;
        for (std::size_t p = 0; p < hw; ++p) dst[p] += wgt * src[p];
      }
    }
  return y;
}

struct Conv1x1Grads {
  Tensor dx, dW, db;
};

inline Conv1x1Grads conv1x1_backward(const Tensor& x, const Tensor& W, const Tensor& dy) {
  const std::size_t B = x.dim(0), Cin = x.dim(1), hw = x.dim(2) * x.dim(3), Cout = W.dim(0);
  Conv1x1Grads g{Tensor(x.shape()), Tensor(W.shape()), Tensor(Shape{Cout})};
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < Cout; ++o) {
      const double* gy = dy.data().data() + (n * Cout + o) * hw;
      for (std::size_t p = 0; p < hw; ++p) g.db[o] += gy[p];
      for (std::size_t i = 0; i < Cin; ++i) {
        const double* src = x.data().data() + (n * Cin + i) * hw;
        double* gx = g.dx.data().data() + (n * Cin + i) * hw;
        const double wgt = W[o * Cin + i];
        double acc = 0.0;
        for (std::size_t p = 0; p < hw; ++p) {
          acc += gy[p] * src[p];
          gx[p] += wgt * gy[p];
        }
        g.dW[o * Cin + i] += acc;
      }
    }
  return g;
}

/// Square-kernel 2-D convolution with zero padding. W: [Cout, Cin, k, k].
inline Tensor conv2d(const Tensor& x, const Tensor& W, const Tensor& b, std::size_t stride,
                     std::size_t pad) {
  require_rank(x, 4, "conv2d");
  require_rank(W, 4, "conv2d weight");
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), Wd = x.dim(3);
  const std::size_t Cout = W.dim(0), k = W.dim(2);
  if (W.dim(1) != Cin || W.dim(3) != k || b.size() != Cout)
    throw ShapeError("conv2d: weight " + to_string(W.shape()) + " incompatible with input " +
                     to_string(x.shape()));
  if (H + 2 * pad < k || Wd + 2 * pad < k) throw ShapeError("conv2d: input smaller than kernel");
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (Wd + 2 * pad - k) / stride + 1;
  Tensor y(Shape{B, Cout, Ho, Wo});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < Cout; ++o) {
      double* dst = y.data().data() + (n * Cout + o) * Ho * Wo;
      std::fill(dst, dst + Ho * Wo, b[o]);
      for (std::size_t i = 0; i < Cin; ++i) {
        const double* src = x.data().data() + (n * Cin + i) * H * Wd;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double wgt = W[((o * Cin + i) * k + ky) * k + kx];
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              const double* srow = src + static_cast<std::size_t>(iy) * Wd;
              double* drow = dst + oy * Wo;
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (ix < 0 || ix >= static_cast<long>(Wd)) continue;
                drow[ox] += wgt * srow[ix];
              }
            }
          }
      }
    }
  return y;
}

struct Conv2dGrads {
  Tensor dx, dW, db;
};

inline Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& W, const Tensor& dy, std::size_t stride,
                                   std::size_t pad) {
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), Wd = x.dim(3);
  const std::size_t Cout = W.dim(0), k = W.dim(2), Ho = dy.dim(2), Wo = dy.dim(3);
  Conv2dGrads g{Tensor(x.shape()), Tensor(W.shape()), Tensor(Shape{Cout})};
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < Cout; ++o) {
      const double* gy = dy.data().data() + (n * Cout + o) * Ho * Wo;
      for (std::size_t p = 0; p < Ho * Wo; ++p) g.db[o] += gy[p];
      for (std::size_t i = 0; i < Cin; ++i) {
        const double* src = x.data().data() + (n * Cin + i) * H * Wd;
        double* gx = g.dx.data().data() + (n * Cin + i) * H * Wd;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t widx = ((o * Cin + i) * k + ky) * k + kx;
            const double wgt = W[widx];
            double acc = 0.0;
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              const std::size_t row = static_cast<std::size_t>(iy) * Wd;
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (ix < 0 || ix >= static_cast<long>(Wd)) continue;
                const double gv = gy[oy * Wo + ox];
                acc += gv * src[row + static_cast<std::size_t>(ix)];
                gx[row + static_cast<std::size_t>(ix)] += wgt * gv;
              }
            }
            g.dW[widx] += acc;
          }
      }
    }
  return g;
}

}  // namespace sgp
