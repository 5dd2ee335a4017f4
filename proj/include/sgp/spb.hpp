#pragma once

// Spectral prototype bank: learnable radial band masks over the half
// spectrum, band-restricted feature maps, and one masked-average prototype
// per band.

#include <vector>

#include "sgp/autograd.hpp"
#include "sgp/fft.hpp"
#include "sgp/ops.hpp"
#include "sgp/tensor.hpp"

namespace sgp::spb {

using ag::Var;

inline constexpr std::size_t kDefaultBands = 3;
inline constexpr std::size_t kMaxBands = 5;
inline constexpr double kPrototypeEps = 1e-5;
// Constant floor on every radius gap so r_{j+1} > r_j survives rounding even
// when softplus of the gap logit underflows relative to r_j.
inline constexpr double kMinGap = 1e-9;

/// Unconstrained parameters of the band partition. Radii are built from
/// softplus gaps, so r_1 > 0 and r_{j+1} > r_j for any finite values; the
/// sharpness is softplus(beta_raw) + 1.
struct SpectralParams {
  std::vector<double> radius_raw;  // K-1 entries: r̃1, then the gap logits
  double beta_raw = 0.0;

  std::size_t bands() const { return radius_raw.size() + 1; }

  std::vector<double> radii() const {
    std::vector<double> r(radius_raw.size());
    double acc = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = acc += softplus(radius_raw[j]) + kMinGap;
    return r;
  }
  double beta() const { return softplus(beta_raw) + 1.0; }
};

/// Picks raw values so that the derived radii hit the targets. For K != 3 the
/// K-1 radii are spread evenly over [r1_target, r2_target].
inline SpectralParams init_spectral_params(double r1_target = 0.25, double r2_target = 0.55,
                                           double beta_target = 10.0, std::size_t bands = kDefaultBands) {
  if (!(r1_target > 0.0 && r2_target > r1_target))
    throw Error("init_spectral_params: need 0 < r1_target < r2_target");
  if (!(beta_target > 1.0)) throw Error("init_spectral_params: beta_target must exceed 1");
  if (bands < 1 || bands > kMaxBands) throw Error("init_spectral_params: band count must be in 1..5");
  std::vector<double> targets;
  if (bands == 2) targets = {r1_target};
  for (std::size_t j = 0; bands > 2 && j + 1 < bands; ++j)
    targets.push_back(r1_target + (r2_target - r1_target) * static_cast<double>(j) / static_cast<double>(bands - 2));
  SpectralParams sp;
  double prev = 0.0;
  for (double t : targets) {
    sp.radius_raw.push_back(softplus_inv(t - prev - kMinGap));
    prev = t;
  }
  sp.beta_raw = softplus_inv(beta_target - 1.0);
  return sp;
}

/// K smooth radial masks over the half-spectrum grid, [K, h, w/2+1].
struct BandMasks {
  Tensor masks;
  std::size_t bands() const { return masks.dim(0); }
};

namespace detail {

// z_j(ρ) = σ(β (r_j − ρ)); masks are the telescoping differences of z.
inline BandMasks masks_from(const std::vector<double>& radii, double beta, const FreqGrid& grid) {
  const std::size_t K = radii.size() + 1, n = grid.rho.size();
  BandMasks bm{Tensor(Shape{K, grid.h, grid.wr()})};
  for (std::size_t p = 0; p < n; ++p) {
    double prev = 0.0;  // z_0 ≡ 0 in the recursion M_k = z_{k+1} − z_k, with z_K ≡ 1
    for (std::size_t k = 0; k < K; ++k) {
      const double z = k + 1 < K ? sigmoid(beta * (radii[k] - grid.rho[p])) : 1.0;
      bm.masks[k * n + p] = z - prev;
      prev = z;
    }
  }
  return bm;
}

}  // namespace detail

inline BandMasks band_masks(const SpectralParams& sp, const FreqGrid& grid) {
  return detail::masks_from(sp.radii(), sp.beta(), grid);
}

struct SpectralGrads {
  std::vector<double> radius_raw;
  double beta_raw = 0.0;
};

/// Pulls a gradient on the [K, h, wr] masks back to the raw spectral parameters.
inline SpectralGrads band_masks_backward(const SpectralParams& sp, const FreqGrid& grid, const Tensor& gmask) {
  const std::size_t K = sp.bands(), n = grid.rho.size();
  const auto r = sp.radii();
  const double beta = sp.beta();
  std::vector<double> g_radius(K - 1, 0.0);
  double g_beta = 0.0;
  for (std::size_t j = 0; j + 1 < K; ++j)
    for (std::size_t p = 0; p < n; ++p) {
      // z_{j+1} enters mask j with +1 and mask j+1 with −1
      const double gz = gmask[j * n + p] - gmask[(j + 1) * n + p];
      const double z = sigmoid(beta * (r[j] - grid.rho[p]));
      const double dz = gz * z * (1.0 - z);
      g_radius[j] += dz * beta;
      g_beta += dz * (r[j] - grid.rho[p]);
    }
  SpectralGrads g;
  g.radius_raw.assign(K - 1, 0.0);
  // r_j = Σ_{i<=j} softplus(raw_i)
  double suffix = 0.0;
  for (std::size_t i = K - 1; i-- > 0;) {
    suffix += g_radius[i];
    g.radius_raw[i] = suffix * sigmoid(sp.radius_raw[i]);
  }
  g.beta_raw = g_beta * sigmoid(sp.beta_raw);
  return g;
}

/// Band-restricted maps of a [B, C, h, w] tensor, stacked as [B, C, K, h, w].
inline Tensor decompose(const Tensor& x, const BandMasks& bm) {
  require_rank(x, 4, "decompose");
  const std::size_t B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3), K = bm.bands();
  const std::size_t wr = half_width(w);
  if (bm.masks.dim(1) != h || bm.masks.dim(2) != wr)
    throw ShapeError("decompose: masks " + to_string(bm.masks.shape()) + " do not match feature map " +
                     to_string(x.shape()));
  const HalfSpectrum X = rfft2(x);
  const std::size_t plane = h * wr;
  HalfSpectrum Y(Shape{B * C * K, 1, h, wr});
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t p = 0; p < plane; ++p) {
        const double m = bm.masks[k * plane + p];
        Y.re[(bc * K + k) * plane + p] = m * X.re[bc * plane + p];
        Y.im[(bc * K + k) * plane + p] = m * X.im[bc * plane + p];
      }
  return irfft2(Y, w).reshaped(Shape{B, C, K, h, w});
}

struct DecomposeGrads {
  Tensor dx;     // [B, C, h, w]
  Tensor dmask;  // [K, h, wr]
};

inline DecomposeGrads decompose_backward(const Tensor& x, const BandMasks& bm, const Tensor& gbands) {
  const std::size_t B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3), K = bm.bands();
  const std::size_t wr = half_width(w), plane = h * wr;
  const HalfSpectrum X = rfft2(x);
  const HalfSpectrum G = irfft2_adjoint(gbands.reshaped(Shape{B * C * K, 1, h, w}));
  HalfSpectrum GX(Shape{B, C, h, wr});
  DecomposeGrads out{Tensor(), Tensor(bm.masks.shape())};
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t p = 0; p < plane; ++p) {
        const double gre = G.re[(bc * K + k) * plane + p], gim = G.im[(bc * K + k) * plane + p];
        const double m = bm.masks[k * plane + p];
        GX.re[bc * plane + p] += m * gre;
        GX.im[bc * plane + p] += m * gim;
        out.dmask[k * plane + p] += gre * X.re[bc * plane + p] + gim * X.im[bc * plane + p];
      }
  out.dx = rfft2_adjoint(GX, w);
  return out;
}

/// Masked average of one band [B, C, h, w] under a soft mask [B, h, w] -> [B, C].
inline Tensor map_prototype(const Tensor& band, const Tensor& mask_ds) {
  require_rank(band, 4, "map_prototype");
  const std::size_t B = band.dim(0), C = band.dim(1), hw = band.dim(2) * band.dim(3);
  if (mask_ds.size() != B * hw) throw ShapeError("map_prototype: mask does not match band");
  Tensor p(Shape{B, C});
  for (std::size_t b = 0; b < B; ++b) {
    const double* m = mask_ds.data().data() + b * hw;
    double den = 0.0;
    for (std::size_t i = 0; i < hw; ++i) den += m[i];
    den = std::max(den, kPrototypeEps);
    for (std::size_t c = 0; c < C; ++c) {
      const double* f = band.data().data() + (b * C + c) * hw;
      double num = 0.0;
      for (std::size_t i = 0; i < hw; ++i) num += f[i] * m[i];
      p.at(b, c) = num / den;
    }
  }
  return p;
}

/// Per-band prototypes of stacked bands [B, C, K, h, w] -> [B, C, K].
inline Tensor band_prototypes(const Tensor& bands, const Tensor& mask_ds) {
  require_rank(bands, 5, "band_prototypes");
  const std::size_t B = bands.dim(0), C = bands.dim(1), K = bands.dim(2), h = bands.dim(3), w = bands.dim(4);
  const Tensor flat = map_prototype(bands.reshaped(Shape{B, C * K, h, w}), mask_ds);
  return flat.reshaped(Shape{B, C, K});
}

inline Tensor band_prototypes_backward(const Tensor& bands, const Tensor& mask_ds, const Tensor& gproto) {
  const std::size_t B = bands.dim(0), CK = bands.dim(1) * bands.dim(2), hw = bands.dim(3) * bands.dim(4);
  Tensor g(bands.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const double* m = mask_ds.data().data() + b * hw;
    double den = 0.0;
    for (std::size_t i = 0; i < hw; ++i) den += m[i];
    den = std::max(den, kPrototypeEps);
    for (std::size_t ck = 0; ck < CK; ++ck) {
      const double s = gproto[b * CK + ck] / den;
      double* dst = g.data().data() + (b * CK + ck) * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] = s * m[i];
    }
  }
  return g;
}

/// Support mask [B, H, W] brought to the feature resolution.
inline Tensor downsample_mask(const Tensor& mask, std::size_t h, std::size_t w) {
  require_rank(mask, 3, "downsample_mask");
  return resize_bilinear(mask, h, w);
}

struct SpbOutput {
  BandMasks masks;
  Tensor bands_s;     // [B, C, K, h, w]
  Tensor bands_q;     // [B, C, K, h, w]
  Tensor prototypes;  // [B, C, K]
};

/// One invocation of the bank. Callers run it once with M_s and once with 1 − M_s.
inline SpbOutput spb_forward(const Tensor& f_s, const Tensor& f_q, const Tensor& m_s, const SpectralParams& sp) {
  require_rank(f_s, 4, "spb_forward");
  if (f_s.shape() != f_q.shape()) throw ShapeError("spb_forward: support/query features differ in shape");
  require_rank(m_s, 3, "spb_forward mask");
  if (m_s.dim(0) != f_s.dim(0)) throw ShapeError("spb_forward: mask batch does not match features");
  const std::size_t h = f_s.dim(2), w = f_s.dim(3);
  SpbOutput out;
  out.masks = band_masks(sp, freq_grid(h, w));
  out.bands_s = decompose(f_s, out.masks);
  out.bands_q = decompose(f_q, out.masks);
  out.prototypes = band_prototypes(out.bands_s, downsample_mask(m_s, h, w));
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable versions. Raw spectral parameters live in the tape as a
// [K-1] radius vector and a [1] sharpness scalar.

inline Var band_masks(Var radius_raw, Var beta_raw, const FreqGrid& grid) {
  SpectralParams sp{radius_raw.value().vec(), beta_raw.value().item()};
  BandMasks bm = band_masks(sp, grid);
  return radius_raw.tape->record(std::move(bm.masks), {radius_raw, beta_raw},
                                 [radius_raw, beta_raw, sp, grid](ag::Tape& t, const Tensor& g) {
                                   const SpectralGrads sg = band_masks_backward(sp, grid, g);
                                   t.accumulate(radius_raw, Tensor(Shape{sg.radius_raw.size()}, sg.radius_raw));
                                   t.accumulate(beta_raw, Tensor::scalar(sg.beta_raw));
                                 });
}

inline Var decompose(Var x, Var masks) {
  const BandMasks bm{masks.value()};
  return x.tape->record(decompose(x.value(), bm), {x, masks}, [x, masks](ag::Tape& t, const Tensor& g) {
    const DecomposeGrads dg = decompose_backward(x.value(), BandMasks{masks.value()}, g);
    t.accumulate(x, dg.dx);
    t.accumulate(masks, dg.dmask);
  });
}

inline Var band_prototypes(Var bands, const Tensor& mask_ds) {
  return bands.tape->record(band_prototypes(bands.value(), mask_ds), {bands},
                            [bands, mask_ds](ag::Tape& t, const Tensor& g) {
                              t.accumulate(bands, band_prototypes_backward(bands.value(), mask_ds, g));
                            });
}

}  // namespace sgp::spb
