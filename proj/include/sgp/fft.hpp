#pragma once

#include <complex>
#include <numbers>
#include <vector>

#include "sgp/tensor.hpp"

namespace sgp {

using cplx = std::complex<double>;

namespace detail {

inline cplx unit_root(long long num, long long den, int sign) {
  num %= den;
  if (num < 0) num += den;
  const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>(num) / static_cast<double>(den);
  return {std::cos(ang), std::sin(ang)};
}

inline std::size_t smallest_factor(std::size_t n) {
  for (std::size_t p = 2; p * p <= n; ++p)
    if (n % p == 0) return p;
  return n;
}

struct Twiddles {
  std::size_t n;
  std::vector<cplx> w;  // w[j] = exp(sign * 2 pi i j / n)
  Twiddles(std::size_t len, int sign) : n(len), w(len) {
    for (std::size_t j = 0; j < len; ++j) w[j] = unit_root(static_cast<long long>(j), static_cast<long long>(len), sign);
  }
};

inline void fft_any(const cplx* in, std::size_t stride, std::size_t n, cplx* out, int sign,
                    const Twiddles& tw);

// Chirp-z transform for prime lengths where the generic butterfly would be O(n^2).
inline void bluestein(const cplx* in, std::size_t stride, std::size_t n, cplx* out, int sign) {
  std::size_t m = 1;
  while (m < 2 * n - 1) m <<= 1;
  std::vector<cplx> chirp(n);
  for (std::size_t j = 0; j < n; ++j) {
    // j^2 mod 2n keeps the angle argument small
    const auto jj = static_cast<long long>((j * j) % (2 * n));
    chirp[j] = unit_root(jj, static_cast<long long>(2 * n), sign);
  }
  std::vector<cplx> a(m, 0.0), b(m, 0.0), fa(m), fb(m);
  for (std::size_t j = 0; j < n; ++j) a[j] = in[j * stride] * chirp[j];
  b[0] = std::conj(chirp[0]);
  for (std::size_t j = 1; j < n; ++j) b[j] = b[m - j] = std::conj(chirp[j]);
  const Twiddles fwd(m, -1), inv(m, +1);
  fft_any(a.data(), 1, m, fa.data(), -1, fwd);
  fft_any(b.data(), 1, m, fb.data(), -1, fwd);
  for (std::size_t i = 0; i < m; ++i) fa[i] *= fb[i];
  fft_any(fa.data(), 1, m, a.data(), +1, inv);
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t k = 0; k < n; ++k) out[k] = a[k] * inv_m * chirp[k];
}

// Recursive mixed-radix decimation in time. Unnormalised; sign = -1 forward, +1 inverse.
// `tw` holds the roots of the top-level length, which every sub-length divides.
inline void fft_any(const cplx* in, std::size_t stride, std::size_t n, cplx* out, int sign,
                    const Twiddles& tw) {
  if (n == 1) {
    out[0] = in[0];
    return;
  }
  const std::size_t p = smallest_factor(n);
  if (p == n && n > 16) {
    bluestein(in, stride, n, out, sign);
    return;
  }
  const std::size_t m = n / p;
  for (std::size_t r = 0; r < p; ++r) fft_any(in + r * stride, stride * p, m, out + r * m, sign, tw);
  const std::size_t step = tw.n / n;
  cplx tmp[64];
  std::vector<cplx> big;
  cplx* t = tmp;
  if (p > 64) {
    big.resize(p);
    t = big.data();
  }
  for (std::size_t k = 0; k < m; ++k) {
    for (std::size_t r = 0; r < p; ++r) t[r] = out[r * m + k];
    for (std::size_t q = 0; q < p; ++q) {
      const std::size_t idx = k + q * m;
      cplx acc = t[0];
      for (std::size_t r = 1; r < p; ++r) acc += t[r] * tw.w[((r * idx) % n) * step];
      out[idx] = acc;
    }
  }
}

}  // namespace detail

/// In-place unnormalised 1-D DFT of arbitrary length. `inverse` flips the exponent sign only.
inline void fft1d(std::vector<cplx>& a, bool inverse = false) {
  if (a.empty()) return;
  const int sign = inverse ? +1 : -1;
  const detail::Twiddles tw(a.size(), sign);
  std::vector<cplx> out(a.size());
  detail::fft_any(a.data(), 1, a.size(), out.data(), sign, tw);
  a.swap(out);
}

/// Non-redundant half of the 2-D spectrum of a real [B, C, h, w] tensor: [B, C, h, w/2+1].
struct HalfSpectrum {
  Tensor re;
  Tensor im;

  HalfSpectrum() = default;
  explicit HalfSpectrum(const Shape& s) : re(s), im(s) {}
  const Shape& shape() const { return re.shape(); }
};

inline std::size_t half_width(std::size_t w) { return w / 2 + 1; }

/// Multiplicity of half-spectrum column v inside the full spectrum of width w:
/// the DC column and (for even w) the Nyquist column are self-conjugate.
inline double half_column_weight(std::size_t v, std::size_t w) {
  if (v == 0) return 1.0;
  if (w % 2 == 0 && v == w / 2) return 1.0;
  return 2.0;
}

/// Orthonormal 2-D real-input FFT over the last two axes of a rank-4 tensor.
inline HalfSpectrum rfft2(const Tensor& x) {
  require_rank(x, 4, "rfft2");
  const std::size_t B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h == 0 || w == 0) throw ShapeError("rfft2: zero-sized spatial dimension " + to_string(x.shape()));
  const std::size_t wr = half_width(w);
  HalfSpectrum out(Shape{B, C, h, wr});
  const double scale = 1.0 / std::sqrt(static_cast<double>(h * w));
  std::vector<cplx> row(w), col(h), plane(h * wr);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* src = x.data().data() + bc * h * w;
    for (std::size_t u = 0; u < h; ++u) {
      for (std::size_t v = 0; v < w; ++v) row[v] = src[u * w + v];
      fft1d(row);
      for (std::size_t v = 0; v < wr; ++v) plane[u * wr + v] = row[v];
    }
    for (std::size_t v = 0; v < wr; ++v) {
      for (std::size_t u = 0; u < h; ++u) col[u] = plane[u * wr + v];
      fft1d(col);
      for (std::size_t u = 0; u < h; ++u) {
        out.re[bc * h * wr + u * wr + v] = col[u].real() * scale;
        out.im[bc * h * wr + u * wr + v] = col[u].imag() * scale;
      }
    }
  }
  return out;
}

/// Orthonormal inverse of rfft2. Self-conjugate columns contribute their real part only,
/// so the result is real even for spectra that are not exactly Hermitian-consistent.
inline Tensor irfft2(const HalfSpectrum& X, std::size_t w) {
  require_rank(X.re, 4, "irfft2");
  if (X.im.shape() != X.re.shape()) throw ShapeError("irfft2: re/im shape mismatch");
  const std::size_t B = X.re.dim(0), C = X.re.dim(1), h = X.re.dim(2), wr = X.re.dim(3);
  if (w == 0 || half_width(w) != wr)
    throw ShapeError("irfft2: width " + std::to_string(w) + " inconsistent with half-spectrum width " +
                     std::to_string(wr));
  Tensor out(Shape{B, C, h, w});
  const double scale = 1.0 / std::sqrt(static_cast<double>(h * w));
  std::vector<cplx> col(h), row(w), plane(h * wr);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    for (std::size_t v = 0; v < wr; ++v) {
      for (std::size_t u = 0; u < h; ++u)
        col[u] = {X.re[bc * h * wr + u * wr + v], X.im[bc * h * wr + u * wr + v]};
      fft1d(col, true);
      for (std::size_t u = 0; u < h; ++u) plane[u * wr + v] = col[u];
    }
    double* dst = out.data().data() + bc * h * w;
    for (std::size_t n = 0; n < h; ++n) {
      std::fill(row.begin(), row.end(), cplx{});
      for (std::size_t v = 0; v < wr; ++v) row[v] = plane[n * wr + v];
      for (std::size_t v = 1; v < wr; ++v)
        if (half_column_weight(v, w) == 2.0) row[w - v] = std::conj(plane[n * wr + v]);
      fft1d(row, true);
      for (std::size_t m = 0; m < w; ++m) dst[n * w + m] = row[m].real() * scale;
    }
  }
  return out;
}

/// Adjoint of rfft2 viewed as a real-linear map R^{hw} -> R^{2 h wr}.
inline Tensor rfft2_adjoint(const HalfSpectrum& G, std::size_t w) {
  HalfSpectrum g = G;
  const std::size_t wr = G.re.dim(3);
  for (std::size_t i = 0; i < g.re.size(); ++i) {
    const double c = half_column_weight(i % wr, w);
    g.re[i] /= c;
    g.im[i] /= c;
  }
  return irfft2(g, w);
}

/// Adjoint of irfft2 (real output) with respect to the (re, im) half-spectrum entries.
inline HalfSpectrum irfft2_adjoint(const Tensor& g) {
  HalfSpectrum G = rfft2(g);
  const std::size_t w = g.dim(3), wr = G.re.dim(3);
  for (std::size_t i = 0; i < G.re.size(); ++i) {
    const double c = half_column_weight(i % wr, w);
    G.re[i] *= c;
    G.im[i] *= c;
  }
  return G;
}

/// Discrete normalised frequencies of the half-spectrum grid.
struct FreqGrid {
  std::size_t h = 0, w = 0;
  std::vector<double> nu_y;  // h entries, fftfreq convention
  std::vector<double> nu_x;  // w/2+1 entries, rfftfreq convention
  std::vector<double> rho;   // h * (w/2+1), row-major

  std::size_t wr() const { return nu_x.size(); }
  double radius(std::size_t u, std::size_t v) const { return rho[u * wr() + v]; }
};

inline FreqGrid freq_grid(std::size_t h, std::size_t w) {
  if (h < 2 || w < 2) throw ShapeError("freq_grid: spatial dims must be >= 2");
  FreqGrid g;
  g.h = h;
  g.w = w;
  g.nu_y.resize(h);
  const std::size_t pos = (h + 1) / 2;
  for (std::size_t k = 0; k < h; ++k) {
    const double kk = k < pos ? static_cast<double>(k) : static_cast<double>(k) - static_cast<double>(h);
    g.nu_y[k] = kk / static_cast<double>(h);
  }
  const std::size_t wr = half_width(w);
  g.nu_x.resize(wr);
  for (std::size_t v = 0; v < wr; ++v) g.nu_x[v] = static_cast<double>(v) / static_cast<double>(w);
  g.rho.resize(h * wr);
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < wr; ++v) g.rho[u * wr + v] = std::hypot(g.nu_y[u], g.nu_x[v]);
  return g;
}

}  // namespace sgp
