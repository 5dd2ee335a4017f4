#pragma once

// Geodesic matcher. Per band: cosine map against the band prototype, soft
// seeds above a quantile threshold, T Jacobi heat steps over an 8-neighbour
// feature affinity, gated cosine/heat fusion; then a per-pixel softmax over
// bands blends the prototypes into a dense map.
//
// Bulk kernels work on stacked bands [B, C, K, h, w]; maps are [B, K, h, w];
// affinities are [B, K, 8, h, w] in the neighbour order below.

#include <vector>

#include "sgp/autograd.hpp"
#include "sgp/nn.hpp"
#include "sgp/ops.hpp"
#include "sgp/tensor.hpp"

namespace sgp::gm {

using ag::Var;

inline constexpr int kNeighbours = 8;
inline constexpr int kDy[kNeighbours] = {-1, -1, -1, 0, 0, 1, 1, 1};
inline constexpr int kDx[kNeighbours] = {-1, 0, 1, -1, 1, -1, 0, 1};
inline constexpr double kNormEps = 1e-8;

/// Index of the shift opposite to n (kDy/kDx negated).
inline constexpr int opposite(int n) { return kNeighbours - 1 - n; }

struct GMConfig {
  double sigma_a = 0.5;
  double s = 20.0;
  double q = 0.85;
  std::size_t T = 5;
  bool cosine_only = false;  // baseline: score = cos, no seeding or diffusion

  void validate() const {
    if (!(sigma_a > 0)) throw Error("GMConfig: sigma_a must be positive");
    if (!(s > 0)) throw Error("GMConfig: s must be positive");
    if (!(q > 0 && q < 1)) throw Error("GMConfig: q must lie in (0, 1)");
  }
};

/// Learnable matcher state plus the fixed scalars.
struct GMParams {
  std::vector<double> alpha_raw;    // K gates, σ(0) = 0.5 at init
  std::vector<double> band_logits;  // K logits, 1 at init
  Tensor blend_W;                   // [C, C]
  Tensor blend_b;                   // [C]
  GMConfig config;

  static GMParams init(std::size_t channels, std::size_t bands = 3) {
    GMParams p;
    p.alpha_raw.assign(bands, 0.0);
    p.band_logits.assign(bands, 1.0);
    p.blend_W = Tensor(Shape{channels, channels});
    for (std::size_t c = 0; c < channels; ++c) p.blend_W.at(c, c) = 1.0;
    p.blend_b = Tensor(Shape{channels});
    return p;
  }
};

namespace detail {

struct Dims {
  std::size_t B, C, K, h, w;
  std::size_t hw() const { return h * w; }
  std::size_t feat(std::size_t b, std::size_t c, std::size_t k) const { return ((b * C + c) * K + k) * hw(); }
  std::size_t map(std::size_t b, std::size_t k) const { return (b * K + k) * hw(); }
  std::size_t aff(std::size_t b, std::size_t k, int n) const {
    return ((b * K + k) * kNeighbours + static_cast<std::size_t>(n)) * hw();
  }
};

inline Dims band_dims(const Tensor& bands) {
  require_rank(bands, 5, "stacked bands");
  return {bands.dim(0), bands.dim(1), bands.dim(2), bands.dim(3), bands.dim(4)};
}

inline bool in_bounds(const Dims& d, std::size_t i, std::size_t j, int n) {
  const long y = static_cast<long>(i) + kDy[n], x = static_cast<long>(j) + kDx[n];
  return y >= 0 && x >= 0 && y < static_cast<long>(d.h) && x < static_cast<long>(d.w);
}

inline std::size_t shifted(const Dims& d, std::size_t i, std::size_t j, int n) {
  return static_cast<std::size_t>(static_cast<long>(i) + kDy[n]) * d.w +
         static_cast<std::size_t>(static_cast<long>(j) + kDx[n]);
}

// Per-pixel feature norms [B, K, h, w].
inline Tensor pixel_norms(const Tensor& bands, const Dims& d) {
  Tensor n(Shape{d.B, d.K, d.h, d.w});
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t k = 0; k < d.K; ++k)
      for (std::size_t c = 0; c < d.C; ++c) {
        const double* f = bands.data().data() + d.feat(b, c, k);
        double* dst = n.data().data() + d.map(b, k);
        for (std::size_t p = 0; p < d.hw(); ++p) dst[p] += f[p] * f[p];
      }
  for (double& v : n.vec()) v = std::sqrt(v);
  return n;
}

// Gradient of f/(‖f‖+ε) pulled back to f, given g on the normalised vector.
inline void normalise_backward(const double* f, const double* g, double* out, std::size_t C, std::size_t stride,
                               double norm) {
  const double den = norm + kNormEps;
  double fg = 0.0;
  for (std::size_t c = 0; c < C; ++c) fg += f[c * stride] * g[c * stride];
  const double corr = norm > 0 ? fg / (norm * den * den) : 0.0;
  for (std::size_t c = 0; c < C; ++c) out[c * stride] += g[c * stride] / den - corr * f[c * stride];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage 1: cosine maps.

/// cos[b,k] = <F(b,:,k), P(b,:,k)> / ((‖F‖+ε)(‖P‖+ε)) for stacked bands and protos [B, C, K].
inline Tensor cosine_maps(const Tensor& bands, const Tensor& protos) {
  const auto d = detail::band_dims(bands);
  if (protos.shape() != Shape{d.B, d.C, d.K})
    throw ShapeError("cosine_maps: prototypes " + to_string(protos.shape()) + " do not match bands " +
                     to_string(bands.shape()));
  const Tensor fn = detail::pixel_norms(bands, d);
  Tensor out(Shape{d.B, d.K, d.h, d.w});
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t k = 0; k < d.K; ++k) {
      double pn = 0.0;
      for (std::size_t c = 0; c < d.C; ++c) pn += protos.at(b, c, k) * protos.at(b, c, k);
      pn = std::sqrt(pn) + kNormEps;
      double* dst = out.data().data() + d.map(b, k);
      for (std::size_t c = 0; c < d.C; ++c) {
        const double pc = protos.at(b, c, k);
        const double* f = bands.data().data() + d.feat(b, c, k);
        for (std::size_t p = 0; p < d.hw(); ++p) dst[p] += f[p] * pc;
      }
      const double* nrm = fn.data().data() + d.map(b, k);
      for (std::size_t p = 0; p < d.hw(); ++p) dst[p] /= (nrm[p] + kNormEps) * pn;
    }
  return out;
}

struct CosineGrads {
  Tensor dbands, dprotos;
};

inline CosineGrads cosine_maps_backward(const Tensor& bands, const Tensor& protos, const Tensor& g) {
  const auto d = detail::band_dims(bands);
  const Tensor fn = detail::pixel_norms(bands, d);
  CosineGrads out{Tensor(bands.shape()), Tensor(protos.shape())};
  std::vector<double> fv(d.C), gv(d.C), pv(d.C), gp(d.C);
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t k = 0; k < d.K; ++k) {
      double pn = 0.0;
      for (std::size_t c = 0; c < d.C; ++c) pv[c] = protos.at(b, c, k), pn += pv[c] * pv[c];
      pn = std::sqrt(pn);
      const double pden = pn + kNormEps;
      std::fill(gp.begin(), gp.end(), 0.0);
      for (std::size_t p = 0; p < d.hw(); ++p) {
        const double gc = g[d.map(b, k) + p];
        if (gc == 0.0) continue;
        const double nf = fn[d.map(b, k) + p], fden = nf + kNormEps;
        double dot = 0.0;
        for (std::size_t c = 0; c < d.C; ++c) {
          fv[c] = bands[d.feat(b, c, k) + p];
          dot += fv[c] * pv[c];
        }
        // cos = dot / (fden * pden)
        const double inv = 1.0 / (fden * pden);
        const double cf = nf > 0 ? dot / (nf * fden * fden * pden) : 0.0;
        const double cp = pn > 0 ? dot / (pn * fden * pden * pden) : 0.0;
        for (std::size_t c = 0; c < d.C; ++c) {
          out.dbands[d.feat(b, c, k) + p] += gc * (pv[c] * inv - cf * fv[c]);
          gp[c] += gc * (fv[c] * inv - cp * pv[c]);
        }
      }
      for (std::size_t c = 0; c < d.C; ++c) out.dprotos.at(b, c, k) += gp[c];
    }
  return out;
}

/// Single-band form: band [B, C, h, w], proto [B, C] -> [B, 1, h, w].
inline Tensor cosine_map(const Tensor& band, const Tensor& proto) {
  require_rank(band, 4, "cosine_map");
  if (proto.shape() != Shape{band.dim(0), band.dim(1)}) throw ShapeError("cosine_map: channel mismatch");
  const Shape s5{band.dim(0), band.dim(1), 1, band.dim(2), band.dim(3)};
  return cosine_maps(band.reshaped(s5), proto.reshaped(Shape{band.dim(0), band.dim(1), 1}));
}

// ---------------------------------------------------------------------------
// Stage 2: soft seeding.

/// Per-sample, per-band q-quantile of the cosine maps [B, K, h, w] -> [B, K].
inline Tensor seed_thresholds(const Tensor& cos, double q) {
  require_rank(cos, 4, "seed_thresholds");
  const std::size_t B = cos.dim(0), K = cos.dim(1), hw = cos.dim(2) * cos.dim(3);
  Tensor tau(Shape{B, K});
  for (std::size_t bk = 0; bk < B * K; ++bk)
    tau[bk] = quantile(std::span<const double>(cos.data().data() + bk * hw, hw), q);
  return tau;
}

inline Tensor soft_seed_with(const Tensor& cos, const Tensor& tau, double s) {
  const std::size_t hw = cos.dim(2) * cos.dim(3);
  Tensor seed(cos.shape());
  for (std::size_t i = 0; i < cos.size(); ++i) seed[i] = sigmoid(s * (cos[i] - tau[i / hw]));
  return seed;
}

/// σ(s (cos − τ)) with τ the q-quantile of each [h, w] map.
inline Tensor soft_seed(const Tensor& cos, double q, double s) {
  if (!(q > 0 && q < 1)) throw Error("soft_seed: q must lie in (0, 1)");
  return soft_seed_with(cos, seed_thresholds(cos, q), s);
}

// ---------------------------------------------------------------------------
// Stage 3: affinity and heat diffusion.

/// A_n = exp(−(1 − c_n)/σ_a) between ε-normalised features at a pixel and its
/// n-th neighbour; exactly 0 where the neighbour falls off the grid.
inline Tensor affinity8(const Tensor& bands, double sigma_a) {
  if (!(sigma_a > 0)) throw Error("affinity8: sigma_a must be positive");
  const auto d = detail::band_dims(bands);
  const Tensor fn = detail::pixel_norms(bands, d);
  Tensor A(Shape{d.B, d.K, static_cast<std::size_t>(kNeighbours), d.h, d.w});
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t k = 0; k < d.K; ++k) {
      const double* nrm = fn.data().data() + d.map(b, k);
      for (std::size_t i = 0; i < d.h; ++i)
        for (std::size_t j = 0; j < d.w; ++j) {
          const std::size_t p = i * d.w + j;
          for (int n = 0; n < kNeighbours; ++n) {
            if (!detail::in_bounds(d, i, j, n)) continue;
            const std::size_t q = detail::shifted(d, i, j, n);
            double dot = 0.0;
            for (std::size_t c = 0; c < d.C; ++c) {
              const double* f = bands.data().data() + d.feat(b, c, k);
              dot += f[p] * f[q];
            }
            const double cn = dot / ((nrm[p] + kNormEps) * (nrm[q] + kNormEps));
            A[d.aff(b, k, n) + p] = std::exp(-(1.0 - cn) / sigma_a);
          }
        }
    }
  return A;
}

inline Tensor affinity8_backward(const Tensor& bands, const Tensor& A, double sigma_a, const Tensor& gA) {
  const auto d = detail::band_dims(bands);
  const Tensor fn = detail::pixel_norms(bands, d);
  // gradient with respect to the normalised features first
  Tensor ghat(bands.shape());
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t k = 0; k < d.K; ++k) {
      const double* nrm = fn.data().data() + d.map(b, k);
      for (std::size_t i = 0; i < d.h; ++i)
        for (std::size_t j = 0; j < d.w; ++j) {
          const std::size_t p = i * d.w + j;
          for (int n = 0; n < kNeighbours; ++n) {
            if (!detail::in_bounds(d, i, j, n)) continue;
            const std::size_t off = d.aff(b, k, n) + p;
            const double gc = gA[off] * A[off] / sigma_a;
            if (gc == 0.0) continue;
            const std::size_t q = detail::shifted(d, i, j, n);
            const double ip = 1.0 / (nrm[p] + kNormEps), iq = 1.0 / (nrm[q] + kNormEps);
            for (std::size_t c = 0; c < d.C; ++c) {
              const std::size_t base = d.feat(b, c, k);
              ghat[base + p] += gc * bands[base + q] * iq;
              ghat[base + q] += gc * bands[base + p] * ip;
            }
          }
        }
    }
  Tensor g(bands.shape());
  const std::size_t stride = d.K * d.hw();
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t k = 0; k < d.K; ++k)
      for (std::size_t p = 0; p < d.hw(); ++p) {
        const std::size_t base = d.feat(b, 0, k) + p;
        detail::normalise_backward(bands.data().data() + base, ghat.data().data() + base, g.data().data() + base,
                                   d.C, stride, fn[d.map(b, k) + p]);
      }
  return g;
}

/// Single-band form: band [B, C, h, w] -> [B, 8, h, w].
inline Tensor affinity8_single(const Tensor& band, double sigma_a) {
  require_rank(band, 4, "affinity8");
  const Tensor A = affinity8(band.reshaped(Shape{band.dim(0), band.dim(1), 1, band.dim(2), band.dim(3)}), sigma_a);
  return A.reshaped(Shape{band.dim(0), static_cast<std::size_t>(kNeighbours), band.dim(2), band.dim(3)});
}

/// u'(i,j) = (u(i,j) + Σ_n A_n(i,j) u(p_n(i,j))) / (1 + Σ_n A_n(i,j)) on maps [B, K, h, w].
inline Tensor diffuse_step(const Tensor& u, const Tensor& A) {
  require_rank(u, 4, "diffuse_step");
  const detail::Dims d{u.dim(0), 1, u.dim(1), u.dim(2), u.dim(3)};
  if (A.size() != u.size() * kNeighbours) throw ShapeError("diffuse_step: affinity does not match heat map");
  Tensor out(u.shape());
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t k = 0; k < d.K; ++k) {
      const double* src = u.data().data() + d.map(b, k);
      double* dst = out.data().data() + d.map(b, k);
      for (std::size_t i = 0; i < d.h; ++i)
        for (std::size_t j = 0; j < d.w; ++j) {
          const std::size_t p = i * d.w + j;
          double num = src[p], den = 1.0;
          for (int n = 0; n < kNeighbours; ++n) {
            if (!detail::in_bounds(d, i, j, n)) continue;
            const double a = A[d.aff(b, k, n) + p];
            num += a * src[detail::shifted(d, i, j, n)];
            den += a;
          }
          dst[p] = num / den;
        }
    }
  return out;
}

struct DiffuseGrads {
  Tensor du, dA;
};

inline DiffuseGrads diffuse_step_backward(const Tensor& u, const Tensor& A, const Tensor& out, const Tensor& g) {
  const detail::Dims d{u.dim(0), 1, u.dim(1), u.dim(2), u.dim(3)};
  DiffuseGrads r{Tensor(u.shape()), Tensor(A.shape())};
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t k = 0; k < d.K; ++k) {
      const std::size_t m = d.map(b, k);
      for (std::size_t i = 0; i < d.h; ++i)
        for (std::size_t j = 0; j < d.w; ++j) {
          const std::size_t p = i * d.w + j;
          double den = 1.0;
          for (int n = 0; n < kNeighbours; ++n)
            if (detail::in_bounds(d, i, j, n)) den += A[d.aff(b, k, n) + p];
          const double gs = g[m + p] / den;
          r.du[m + p] += gs;
          for (int n = 0; n < kNeighbours; ++n) {
            if (!detail::in_bounds(d, i, j, n)) continue;
            const std::size_t q = detail::shifted(d, i, j, n);
            r.du[m + q] += gs * A[d.aff(b, k, n) + p];
            r.dA[d.aff(b, k, n) + p] = gs * (u[m + q] - out[m + p]);
          }
        }
    }
  return r;
}

/// T Jacobi steps starting from the seed; T = 0 returns the seed.
inline Tensor heat_diffuse(const Tensor& seed, const Tensor& A, std::size_t T) {
  Tensor u = seed;
  for (std::size_t t = 0; t < T; ++t) u = diffuse_step(u, A);
  return u;
}

// ---------------------------------------------------------------------------
// Stages 4-5: fusion, blending, output assembly.

/// score = (1 − α) cos + α geo with α = σ(alpha_raw[k]) per band.
inline Tensor fuse(const Tensor& cos, const Tensor& geo, std::span<const double> alpha_raw) {
  if (cos.shape() != geo.shape()) throw ShapeError("fuse: cos/geo shape mismatch");
  const std::size_t K = cos.dim(1), hw = cos.dim(2) * cos.dim(3);
  if (alpha_raw.size() != K) throw ShapeError("fuse: one gate per band required");
  Tensor score(cos.shape());
  for (std::size_t i = 0; i < cos.size(); ++i) {
    const double a = sigmoid(alpha_raw[(i / hw) % K]);
    score[i] = (1.0 - a) * cos[i] + a * geo[i];
  }
  return score;
}

/// w_k(i,j) = softmax_k(s ℓ_k score_k(i,j)), [B, K, h, w].
inline Tensor blend_weights(const Tensor& score, std::span<const double> logits, double s) {
  const std::size_t B = score.dim(0), K = score.dim(1), hw = score.dim(2) * score.dim(3);
  if (logits.size() != K) throw ShapeError("blend_weights: one logit per band required");
  Tensor w(score.shape());
  std::vector<double> v(K), sc(K);
  for (std::size_t k = 0; k < K; ++k) sc[k] = s * logits[k];
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t k = 0; k < K; ++k) v[k] = score[(b * K + k) * hw + p];
      const auto sm = softmax_scaled(v, sc);
      for (std::size_t k = 0; k < K; ++k) w[(b * K + k) * hw + p] = sm[k];
    }
  return w;
}

/// Σ_k w_k(i,j) P(:, k) -> [B, C, h, w].
inline Tensor mix_prototypes(const Tensor& weights, const Tensor& protos) {
  const std::size_t B = weights.dim(0), K = weights.dim(1), hw = weights.dim(2) * weights.dim(3);
  const std::size_t C = protos.dim(1);
  if (protos.shape() != Shape{B, C, K}) throw ShapeError("mix_prototypes: prototype/weight mismatch");
  Tensor out(Shape{B, C, weights.dim(2), weights.dim(3)});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      double* dst = out.data().data() + (b * C + c) * hw;
      for (std::size_t k = 0; k < K; ++k) {
        const double pc = protos.at(b, c, k);
        const double* wk = weights.data().data() + (b * K + k) * hw;
        for (std::size_t p = 0; p < hw; ++p) dst[p] += wk[p] * pc;
      }
    }
  return out;
}

inline Tensor blend(const Tensor& protos, const Tensor& score, std::span<const double> logits, double s,
                    const Tensor& W, const Tensor& b) {
  return conv1x1(mix_prototypes(blend_weights(score, logits, s), protos), W, b);
}

struct MatchedOutput {
  Tensor matched;  // [B, 2C+K, h, w] = [F_q_raw | F_blended | S]
  Tensor cos, seed, geo, score, weights;
};

/// One forward pass of the matcher with plain tensors.
inline MatchedOutput gm_forward(const Tensor& f_q_raw, const Tensor& bands_q, const Tensor& protos, const GMParams& gp) {
  gp.config.validate();
  const auto d = detail::band_dims(bands_q);
  if (f_q_raw.shape() != Shape{d.B, d.C, d.h, d.w}) throw ShapeError("gm_forward: raw query does not match bands");
  if (protos.shape() != Shape{d.B, d.C, d.K}) throw ShapeError("gm_forward: prototypes and bands disagree on K");
  MatchedOutput out;
  out.cos = cosine_maps(bands_q, protos);
  if (gp.config.cosine_only) {
    out.seed = out.geo = Tensor(out.cos.shape());
    out.score = out.cos;
  } else {
    out.seed = soft_seed(out.cos, gp.config.q, gp.config.s);
    out.geo = heat_diffuse(out.seed, affinity8(bands_q, gp.config.sigma_a), gp.config.T);
    out.score = fuse(out.cos, out.geo, gp.alpha_raw);
  }
  out.weights = blend_weights(out.score, gp.band_logits, gp.config.s);
  const Tensor blended = conv1x1(mix_prototypes(out.weights, protos), gp.blend_W, gp.blend_b);
  ag::Tape tape;
  out.matched = ag::concat_channels({tape.constant(f_q_raw), tape.constant(blended), tape.constant(out.score)}).value();
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable versions.

inline Var cosine_maps(Var bands, Var protos) {
  return bands.tape->record(cosine_maps(bands.value(), protos.value()), {bands, protos},
                            [bands, protos](ag::Tape& t, const Tensor& g) {
                              auto cg = cosine_maps_backward(bands.value(), protos.value(), g);
                              t.accumulate(bands, cg.dbands);
                              t.accumulate(protos, cg.dprotos);
                            });
}

/// τ is a stop-gradient node: its value routes through the tape's pin store
/// and nothing flows back through it.
inline Var soft_seed(Var cos, double q, double s) {
  const Tensor tau = cos.tape->stop_gradient(seed_thresholds(cos.value(), q));
  Tensor seed = soft_seed_with(cos.value(), tau, s);
  Tensor saved = seed;
  return cos.tape->record(std::move(seed), {cos}, [cos, saved, s](ag::Tape& t, const Tensor& g) {
    Tensor gc(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) gc[i] = g[i] * s * saved[i] * (1.0 - saved[i]);
    t.accumulate(cos, gc);
  });
}

inline Var affinity8(Var bands, double sigma_a) {
  Tensor A = affinity8(bands.value(), sigma_a);
  Tensor saved = A;
  return bands.tape->record(std::move(A), {bands}, [bands, saved, sigma_a](ag::Tape& t, const Tensor& g) {
    t.accumulate(bands, affinity8_backward(bands.value(), saved, sigma_a, g));
  });
}

inline Var diffuse_step(Var u, Var A) {
  Tensor out = diffuse_step(u.value(), A.value());
  Tensor saved = out;
  return u.tape->record(std::move(out), {u, A}, [u, A, saved](ag::Tape& t, const Tensor& g) {
    auto dg = diffuse_step_backward(u.value(), A.value(), saved, g);
    t.accumulate(u, dg.du);
    t.accumulate(A, dg.dA);
  });
}

inline Var heat_diffuse(Var seed, Var A, std::size_t T) {
  Var u = seed;
  for (std::size_t t = 0; t < T; ++t) u = diffuse_step(u, A);
  return u;
}

inline Var fuse(Var cos, Var geo, Var alpha_raw) {
  return cos.tape->record(fuse(cos.value(), geo.value(), alpha_raw.value().vec()), {cos, geo, alpha_raw},
                          [cos, geo, alpha_raw](ag::Tape& t, const Tensor& g) {
                            const std::size_t K = cos.shape()[1], hw = cos.shape()[2] * cos.shape()[3];
                            Tensor gc(g.shape()), gg(g.shape()), ga(Shape{K});
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              const std::size_t k = (i / hw) % K;
                              const double a = sigmoid(alpha_raw.value()[k]);
                              gc[i] = g[i] * (1.0 - a);
                              gg[i] = g[i] * a;
                              ga[k] += g[i] * (geo.value()[i] - cos.value()[i]) * a * (1.0 - a);
                            }
                            t.accumulate(cos, gc);
                            t.accumulate(geo, gg);
                            t.accumulate(alpha_raw, ga);
                          });
}

inline Var blend_weights(Var score, Var logits, double s) {
  Tensor w = blend_weights(score.value(), logits.value().vec(), s);
  Tensor saved = w;
  return score.tape->record(std::move(w), {score, logits}, [score, logits, saved, s](ag::Tape& t, const Tensor& g) {
    const std::size_t B = saved.dim(0), K = saved.dim(1), hw = saved.dim(2) * saved.dim(3);
    Tensor gs(saved.shape()), gl(Shape{K});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t p = 0; p < hw; ++p) {
        double dot = 0.0;
        for (std::size_t k = 0; k < K; ++k) dot += saved[(b * K + k) * hw + p] * g[(b * K + k) * hw + p];
        for (std::size_t k = 0; k < K; ++k) {
          const std::size_t i = (b * K + k) * hw + p;
          const double gz = saved[i] * (g[i] - dot);
          gs[i] = gz * s * logits.value()[k];
          gl[k] += gz * s * score.value()[i];
        }
      }
    t.accumulate(score, gs);
    t.accumulate(logits, gl);
  });
}

inline Var mix_prototypes(Var weights, Var protos) {
  return weights.tape->record(mix_prototypes(weights.value(), protos.value()), {weights, protos},
                              [weights, protos](ag::Tape& t, const Tensor& g) {
                                const Tensor& w = weights.value();
                                const Tensor& P = protos.value();
                                const std::size_t B = w.dim(0), K = w.dim(1), hw = w.dim(2) * w.dim(3), C = P.dim(1);
                                Tensor gw(w.shape()), gp(P.shape());
                                for (std::size_t b = 0; b < B; ++b)
                                  for (std::size_t c = 0; c < C; ++c) {
                                    const double* gc = g.data().data() + (b * C + c) * hw;
                                    for (std::size_t k = 0; k < K; ++k) {
                                      const double pc = P.at(b, c, k);
                                      const double* wk = w.data().data() + (b * K + k) * hw;
                                      double* gwk = gw.data().data() + (b * K + k) * hw;
                                      double acc = 0.0;
                                      for (std::size_t p = 0; p < hw; ++p) {
                                        gwk[p] += gc[p] * pc;
                                        acc += gc[p] * wk[p];
                                      }
                                      gp.at(b, c, k) += acc;
                                    }
                                  }
                                t.accumulate(weights, gw);
                                t.accumulate(protos, gp);
                              });
}

/// Tape variables for the matcher's learnable state.
struct GMVars {
  Var alpha_raw, band_logits, blend_W, blend_b;
};

struct MatchedVars {
  Var matched;
  Var cos, seed, geo, score, weights;
};

inline MatchedVars gm_forward(Var f_q_raw, Var bands_q, Var protos, const GMVars& p, const GMConfig& cfg) {
  cfg.validate();
  ag::Tape& t = *f_q_raw.tape;
  MatchedVars out;
  out.cos = cosine_maps(bands_q, protos);
  if (cfg.cosine_only) {
    out.seed = out.geo = t.constant(Tensor(out.cos.shape()));
    out.score = out.cos;
  } else {
    out.seed = soft_seed(out.cos, cfg.q, cfg.s);
    out.geo = heat_diffuse(out.seed, affinity8(bands_q, cfg.sigma_a), cfg.T);
    out.score = fuse(out.cos, out.geo, p.alpha_raw);
  }
  out.weights = blend_weights(out.score, p.band_logits, cfg.s);
  Var blended = ag::conv1x1(mix_prototypes(out.weights, protos), p.blend_W, p.blend_b);
  out.matched = ag::concat_channels({f_q_raw, blended, out.score});
  return out;
}

}  // namespace sgp::gm
