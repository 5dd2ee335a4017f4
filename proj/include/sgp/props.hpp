#pragma once

// Property suite over the library invariants. Each check runs a seeded
// randomized protocol and reports the measured quantity next to its bound;
// the CLI `props` subcommand and the acceptance binary both call these.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sgp/fft.hpp"
#include "sgp/gm.hpp"
#include "sgp/losses.hpp"
#include "sgp/oracle.hpp"
#include "sgp/spb.hpp"

namespace sgp::props {

struct PropResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  const int n = std::snprintf(nullptr, 0, f, args...);
  std::string out(static_cast<std::size_t>(std::max(n, 0)) + 1, '\0');
  std::snprintf(out.data(), out.size(), f, args...);
  out.pop_back();
  return out;
}

inline Tensor random_normal(Shape s, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(s));
  for (double& v : t.vec()) v = n(rng);
  return t;
}

inline Tensor random_uniform(Shape s, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(s));
  for (double& v : t.vec()) v = u(rng);
  return t;
}

// ---------------------------------------------------------------------------
// Spectral transform and bank.

inline PropResult fft_correctness() {
  std::mt19937_64 rng(101);
  const std::size_t sizes[] = {2, 3, 4, 5, 8};
  double round_trip = 0.0, naive = 0.0;
  for (std::size_t h : sizes)
    for (std::size_t w : sizes) {
      const Tensor x = random_normal(Shape{2, 3, h, w}, rng);
      const auto X = rfft2(x);
      round_trip = std::max(round_trip, max_abs_diff(irfft2(X, w), x));
      // the oracle works on one [h, w] plane at a time
      for (std::size_t p = 0; p < 6; ++p) {
        Tensor plane(Shape{1, 1, h, w});
        std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(p * h * w), h * w, plane.data().begin());
        const auto N = oracle::naive_dft2(plane);
        const auto F = rfft2(plane);
        double scale = 0.0, err = 0.0;
        for (std::size_t i = 0; i < N.re.size(); ++i) {
          scale = std::max({scale, std::abs(N.re[i]), std::abs(N.im[i])});
          err = std::max({err, std::abs(F.re[i] - N.re[i]), std::abs(F.im[i] - N.im[i])});
        }
        naive = std::max(naive, err / std::max(scale, 1e-300));
      }
    }
  return {"fft_round_trip_and_naive_dft", round_trip <= 1e-10 && naive <= 1e-9,
          fmt("round_trip=%.3e (<=1e-10) naive_rel=%.3e (<=1e-9)", round_trip, naive)};
}

inline PropResult partition_of_unity() {
  std::mt19937_64 rng(102);
  std::uniform_real_distribution<double> u(-8.0, 8.0);
  const auto grid = freq_grid(32, 32);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const spb::SpectralParams sp{{u(rng), u(rng)}, u(rng)};
    const Tensor m = spb::band_masks(sp, grid).masks;
    const std::size_t n = grid.rho.size();
    for (std::size_t p = 0; p < n; ++p) worst = std::max(worst, std::abs(m[p] + m[n + p] + m[2 * n + p] - 1.0));
  }
  return {"partition_of_unity", worst <= 1e-9, fmt("max|sum-1|=%.3e (<=1e-9) over 100 params", worst)};
}

inline PropResult band_reconstruction() {
  std::mt19937_64 rng(103);
  std::uniform_real_distribution<double> u(-4.0, 4.0);
  double worst = 0.0;
  for (int i = 0; i < 5; ++i) {
    const Tensor x = random_normal(Shape{1, 2, 64, 64}, rng);
    const spb::SpectralParams sp{{u(rng), u(rng)}, u(rng)};
    const Tensor bands = spb::decompose(x, spb::band_masks(sp, freq_grid(64, 64)));
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t p = 0; p < 4096; ++p) {
        double s = 0.0;
        for (std::size_t k = 0; k < 3; ++k) s += bands[(c * 3 + k) * 4096 + p];
        worst = std::max(worst, std::abs(s - x[c * 4096 + p]));
      }
  }
  return {"band_reconstruction", worst <= 1e-6, fmt("max|sum_k F_k - F|=%.3e (<=1e-6) on 64x64", worst)};
}

inline PropResult radii_ordering() {
  std::mt19937_64 rng(104);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  const double ends[] = {-50.0, 50.0};
  std::size_t bad = 0;
  for (int i = 0; i < 10000; ++i) {
    spb::SpectralParams sp{{u(rng), u(rng)}, u(rng)};
    if (i < 4) sp.radius_raw = {ends[i & 1], ends[(i >> 1) & 1]};
    const auto r = sp.radii();
    if (!(r[0] > 0.0 && r[1] > r[0] && sp.beta() >= 1.0)) ++bad;
  }
  return {"radii_ordering", bad == 0, fmt("violations=%zu of 10000 draws (incl. +-50)", bad)};
}

inline PropResult band_monotonicity() {
  const auto grid = freq_grid(24, 24);
  const Tensor m = spb::band_masks(spb::init_spectral_params(), grid).masks;
  const std::size_t n = grid.rho.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return grid.rho[a] < grid.rho[b]; });
  std::size_t bad = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (m[order[i]] > m[order[i - 1]] + 1e-15) ++bad;
    if (m[2 * n + order[i]] + 1e-15 < m[2 * n + order[i - 1]]) ++bad;
  }
  return {"band_monotonicity", bad == 0, fmt("violations=%zu", bad)};
}

// ---------------------------------------------------------------------------
// Matcher.

/// Range, constant fixed point, seed monotonicity and T = 0 identity.
inline PropResult diffusion_contracts() {
  std::mt19937_64 rng(105);
  std::uniform_int_distribution<std::size_t> side(3, 12);
  std::size_t range_bad = 0, fixed_bad = 0, mono_bad = 0, ident_bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = side(rng), w = side(rng), K = 2;
    const Tensor feat = random_normal(Shape{1, 4, K, h, w}, rng);
    const Tensor A = gm::affinity8(feat, 0.5);
    const Tensor seed = random_uniform(Shape{1, K, h, w}, rng);
    const Tensor geo = gm::heat_diffuse(seed, A, 5);
    for (std::size_t k = 0; k < K; ++k) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t p = 0; p < h * w; ++p) lo = std::min(lo, seed[k * h * w + p]), hi = std::max(hi, seed[k * h * w + p]);
      for (std::size_t p = 0; p < h * w; ++p)
        if (geo[k * h * w + p] < lo - 1e-12 || geo[k * h * w + p] > hi + 1e-12) ++range_bad;
    }
    Tensor c(seed.shape());
    c.fill(0.37);
    if (max_abs_diff(gm::heat_diffuse(c, A, 5), c) > 1e-12) ++fixed_bad;
    Tensor lower = seed - random_uniform(seed.shape(), rng, 0.0, 0.3);
    const Tensor geo_low = gm::heat_diffuse(lower, A, 5);
    for (std::size_t p = 0; p < geo.size(); ++p)
      if (geo_low[p] > geo[p] + 1e-12) ++mono_bad;
    if (!(gm::heat_diffuse(seed, A, 0) == seed)) ++ident_bad;
  }
  const bool ok = !range_bad && !fixed_bad && !mono_bad && !ident_bad;
  return {"diffusion_contracts", ok,
          fmt("100 pairs: range_viol=%zu fixed_point_viol=%zu monotone_viol=%zu T0_identity_viol=%zu", range_bad,
              fixed_bad, mono_bad, ident_bad)};
}

inline PropResult affinity_symmetry() {
  std::mt19937_64 rng(106);
  std::size_t bad = 0, oob_bad = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 5 + trial % 4, w = 6 + trial % 3;
    const Tensor f = random_normal(Shape{1, 3, 1, h, w}, rng);
    const Tensor A = gm::affinity8(f, 0.5);
    const std::size_t hw = h * w;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (int n = 0; n < gm::kNeighbours; ++n) {
          const long y = static_cast<long>(i) + gm::kDy[n], x = static_cast<long>(j) + gm::kDx[n];
          const double a = A[static_cast<std::size_t>(n) * hw + i * w + j];
          if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) {
            if (a != 0.0) ++oob_bad;
            continue;
          }
          const double back = A[static_cast<std::size_t>(gm::opposite(n)) * hw + static_cast<std::size_t>(y) * w +
                                static_cast<std::size_t>(x)];
          if (std::abs(a - back) > 1e-14 || !(a > 0.0 && a <= 1.0)) ++bad;
        }
  }
  return {"affinity_symmetry", bad == 0 && oob_bad == 0, fmt("asymmetric=%zu out_of_bounds_nonzero=%zu", bad, oob_bad)};
}

inline PropResult blend_weights_simplex() {
  std::mt19937_64 rng(107);
  const Tensor score = random_uniform(Shape{2, 3, 9, 7}, rng, -1.0, 1.0);
  const std::vector<double> logits{1.0, 0.7, 1.3};
  const Tensor wts = gm::blend_weights(score, logits, 20.0);
  double worst = 0.0;
  bool positive = true;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < 63; ++p) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        s += wts[(b * 3 + k) * 63 + p];
        positive = positive && wts[(b * 3 + k) * 63 + p] > 0.0;
      }
      worst = std::max(worst, std::abs(s - 1.0));
    }
  return {"blend_weights_simplex", positive && worst <= 1e-9, fmt("max|sum w - 1|=%.3e positive=%d", worst, positive)};
}

/// Per-map cosine/seed/heat of a single [C, h, w] band against one prototype.
struct SingleBandMaps {
  Tensor cos, seed, geo;
};

inline SingleBandMaps single_band_maps(const Tensor& feature, const std::vector<double>& proto,
                                       const gm::GMConfig& cfg = {}) {
  const std::size_t C = feature.dim(0), h = feature.dim(1), w = feature.dim(2);
  const Tensor band = feature.reshaped(Shape{1, C, 1, h, w});
  SingleBandMaps m;
  m.cos = gm::cosine_maps(band, Tensor(Shape{1, C, 1}, proto));
  m.seed = gm::soft_seed(m.cos, cfg.q, cfg.s);
  m.geo = gm::heat_diffuse(m.seed, gm::affinity8(band, cfg.sigma_a), cfg.T);
  return m;
}

struct FixtureTally {
  int cos_prefers_b = 0, heat_prefers_a = 0, dijkstra_agrees = 0, cases = 0;
};

inline FixtureTally fixture_tally(int n = 20, std::size_t side = 24, std::size_t gap = 2) {
  FixtureTally t;
  for (int s = 0; s < n; ++s) {
    const auto fx = oracle::two_cluster_fixture(side, side, gap, static_cast<std::uint64_t>(s));
    const auto maps = single_band_maps(fx.feature, fx.prototype);
    const std::size_t ia = fx.a.i * side + fx.a.j, ib = fx.b.i * side + fx.b.j;
    const Tensor d = oracle::dijkstra_geo(fx.feature, fx.core);
    ++t.cases;
    t.cos_prefers_b += maps.cos[ib] > maps.cos[ia];
    const bool heat = maps.geo[ia] > maps.geo[ib];
    t.heat_prefers_a += heat;
    t.dijkstra_agrees += heat && d[ia] < d[ib];
  }
  return t;
}

inline PropResult fixture_ranking() {
  const auto t = fixture_tally();
  const bool ok = t.cos_prefers_b == t.cases && t.heat_prefers_a >= 18 && t.dijkstra_agrees == t.heat_prefers_a;
  return {"fixture_ranking", ok,
          fmt("cos(B)>cos(A) %d/%d; heat(A)>heat(B) %d/%d (>=18); dijkstra agrees in %d of %d heat successes",
              t.cos_prefers_b, t.cases, t.heat_prefers_a, t.cases, t.dijkstra_agrees, t.heat_prefers_a)};
}

inline constexpr double kSpearmanThreshold = 0.8;
inline constexpr std::size_t kFieldSide = 32, kFieldChannels = 8;

/// Spearman(heat, −dist) per field: prototype = feature at the centre pixel,
/// GM soft seeds and T = 5 heat, Dijkstra from every pixel with seed >= 0.5.
inline std::vector<double> heat_geodesic_correlations(int n = 20) {
  std::vector<double> rho;
  const std::size_t h = kFieldSide, w = kFieldSide, C = kFieldChannels;
  for (int s = 0; s < n; ++s) {
    const Tensor f = oracle::smooth_field(C, h, w, static_cast<std::uint64_t>(1000 + s));
    std::vector<double> proto(C);
    for (std::size_t c = 0; c < C; ++c) proto[c] = f[(c * h + h / 2) * w + w / 2];
    const auto maps = single_band_maps(f, proto);
    std::vector<oracle::Pixel> sources, region;
    for (std::size_t p = 0; p < h * w; ++p) {
      if (maps.seed[p] >= 0.5) sources.push_back({p / w, p % w});
      region.push_back({p / w, p % w});
    }
    rho.push_back(oracle::rank_correlation(maps.geo, oracle::dijkstra_geo(f, sources), region));
  }
  return rho;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline PropResult heat_geodesic_consistency() {
  const auto rho = heat_geodesic_correlations();
  const double med = median(rho);
  return {"heat_geodesic_spearman", med >= kSpearmanThreshold,
          fmt("median rho=%.4f (>=%.2f) min=%.4f max=%.4f over %zu fields", med, kSpearmanThreshold,
              *std::min_element(rho.begin(), rho.end()), *std::max_element(rho.begin(), rho.end()), rho.size())};
}

/// Unit heat at the field centre; counts shortest-path-tree edges where the
/// child ends up hotter than its parent, pooled over all fields. Edges with
/// both ends outside the T-step reach (heat exactly 0) are skipped.
inline double path_violation_rate(int n = 20) {
  std::size_t viol = 0, edges = 0;
  const std::size_t h = kFieldSide, w = kFieldSide, C = kFieldChannels, top = (h / 2) * w + w / 2;
  for (int s = 0; s < n; ++s) {
    const Tensor f = oracle::smooth_field(C, h, w, static_cast<std::uint64_t>(1000 + s));
    Tensor seed(Shape{1, 1, h, w});
    seed[top] = 1.0;
    const Tensor geo = gm::heat_diffuse(seed, gm::affinity8(f.reshaped(Shape{1, C, 1, h, w}), 0.5), 5);
    const auto tree = oracle::dijkstra_tree(f, {{h / 2, w / 2}});
    for (std::size_t p = 0; p < h * w; ++p) {
      const std::size_t q = tree.parent[p];
      if (q == p || (geo[p] == 0.0 && geo[q] == 0.0)) continue;
      ++edges;
      viol += geo[p] > geo[q];
    }
  }
  return static_cast<double>(viol) / static_cast<double>(std::max<std::size_t>(edges, 1));
}

inline PropResult heat_path_monotonicity() {
  const double rate = path_violation_rate();
  return {"heat_path_monotonicity", rate <= 0.05, fmt("pooled violation rate=%.4f (<=0.05)", rate)};
}

inline PropResult dijkstra_triangle() {
  const Tensor f = oracle::smooth_field(4, 12, 12, 7, 0.2);
  std::vector<Tensor> d;
  for (std::size_t p = 0; p < 144; ++p) d.push_back(oracle::dijkstra_geo(f, {{p / 12, p % 12}}));
  std::mt19937_64 rng(108);
  std::uniform_int_distribution<std::size_t> pick(0, 143);
  std::size_t bad = 0;
  for (int t = 0; t < 2000; ++t) {
    const std::size_t a = pick(rng), b = pick(rng), c = pick(rng);
    if (d[a][c] > d[a][b] + d[b][c] + 1e-12) ++bad;
  }
  return {"dijkstra_triangle_inequality", bad == 0, fmt("violations=%zu of 2000 triples", bad)};
}

inline PropResult fixture_determinism() {
  const auto a = oracle::two_cluster_fixture(24, 24, 2, 17), b = oracle::two_cluster_fixture(24, 24, 2, 17);
  const bool ok = a.feature == b.feature && a.a.i == b.a.i && a.a.j == b.a.j && a.b.i == b.b.i && a.b.j == b.b.j;
  return {"fixture_determinism", ok, ok ? "identical features and pixels" : "fixture differs between runs"};
}

/// MatchedOutput has 2C+K channels with the first C byte-equal to F_q_raw.
inline PropResult output_shape_contract() {
  std::mt19937_64 rng(109);
  std::uniform_int_distribution<std::size_t> dim(2, 9);
  std::size_t bad = 0;
  for (int t = 0; t < 25; ++t) {
    const std::size_t B = 1 + t % 2, C = dim(rng), h = dim(rng), w = dim(rng), K = 3;
    const Tensor fq = random_normal(Shape{B, C, h, w}, rng);
    const Tensor bands = spb::decompose(fq, spb::band_masks(spb::init_spectral_params(), freq_grid(h, w)));
    const Tensor protos = random_normal(Shape{B, C, K}, rng);
    auto gp = gm::GMParams::init(C, K);
    gp.blend_W = random_normal(Shape{C, C}, rng);
    const auto out = gm::gm_forward(fq, bands, protos, gp);
    if (out.matched.shape() != Shape{B, 2 * C + K, h, w}) {
      ++bad;
      continue;
    }
    for (std::size_t b = 0; b < B; ++b)
      if (std::memcmp(out.matched.data().data() + b * (2 * C + K) * h * w, fq.data().data() + b * C * h * w,
                      C * h * w * sizeof(double)) != 0)
        ++bad;
  }
  return {"output_shape_contract", bad == 0, fmt("violations=%zu of 25 random shapes", bad)};
}

// ---------------------------------------------------------------------------
// Losses.

inline PropResult boundary_translation_equivariance() {
  Tensor m(Shape{1, 1, 32, 32}), shifted(Shape{1, 1, 32, 32});
  for (std::size_t i = 10; i < 17; ++i)
    for (std::size_t j = 9; j < 15; ++j) m.at(0, 0, i, j) = 0.2 + 0.1 * static_cast<double>((i + j) % 5);
  for (std::size_t i = 0; i + 3 < 32; ++i)
    for (std::size_t j = 0; j + 5 < 32; ++j) shifted.at(0, 0, i + 3, j + 5) = m.at(0, 0, i, j);
  const Tensor a = loss::soft_boundary(m, 2), b = loss::soft_boundary(shifted, 2);
  double worst = 0.0;
  for (std::size_t i = 0; i + 3 < 32; ++i)
    for (std::size_t j = 0; j + 5 < 32; ++j) worst = std::max(worst, std::abs(a.at(0, 0, i, j) - b.at(0, 0, i + 3, j + 5)));
  return {"boundary_translation_equivariance", worst == 0.0, fmt("max diff=%.3e", worst)};
}

inline PropResult nll_nonnegative() {
  std::mt19937_64 rng(110);
  std::size_t bad = 0;
  for (int t = 0; t < 50; ++t) {
    Tensor p = random_uniform(Shape{1, 2, 6, 6}, rng);
    for (std::size_t i = 0; i < 36; ++i) p[36 + i] = 1.0 - p[i];
    std::vector<std::uint8_t> lab(36);
    for (auto& v : lab) v = static_cast<std::uint8_t>(rng() % 3 == 2 ? loss::kIgnore : rng() % 2);
    const loss::LabelMap y(Shape{1, 6, 6}, lab);
    if (loss::nll_weighted(p, y, loss::class_weights(y)) < 0.0) ++bad;
  }
  return {"nll_nonnegative", bad == 0, fmt("negative=%zu of 50", bad)};
}

// ---------------------------------------------------------------------------

using Check = std::function<PropResult()>;

inline std::vector<Check> all_checks() {
  return {fft_correctness,     partition_of_unity,   band_reconstruction,   radii_ordering,
          band_monotonicity,   diffusion_contracts,  affinity_symmetry,     blend_weights_simplex,
          fixture_ranking,     fixture_determinism,  heat_geodesic_consistency, heat_path_monotonicity,
          dijkstra_triangle,   output_shape_contract, boundary_translation_equivariance, nll_nonnegative};
}

inline PropResult timed(const Check& c) {
  const auto t0 = std::chrono::steady_clock::now();
  PropResult r = c();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace sgp::props
