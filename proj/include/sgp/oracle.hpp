#pragma once

// Slow reference implementations used to check the fast paths: direct DFT,
// sort-based quantile, exact graph geodesics, and the two-cluster ranking
// fixture where cosine matching picks the wrong pixel.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <queue>
#include <random>
#include <utility>
#include <vector>

#include "sgp/fft.hpp"
#include "sgp/tensor.hpp"

namespace sgp::oracle {

/// O((hw)^2) orthonormal DFT returning the same half-spectrum layout as rfft2.
inline HalfSpectrum naive_dft2(const Tensor& x) {
  require_rank(x, 4, "naive_dft2");
  const std::size_t B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3), wr = w / 2 + 1;
  HalfSpectrum out(Shape{B, C, h, wr});
  const double scale = 1.0 / std::sqrt(static_cast<double>(h * w));
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t u = 0; u < h; ++u)
      for (std::size_t v = 0; v < wr; ++v) {
        double re = 0.0, im = 0.0;
        for (std::size_t n = 0; n < h; ++n)
          for (std::size_t m = 0; m < w; ++m) {
            const double ang = -2.0 * std::numbers::pi *
                               (static_cast<double>((u * n) % h) / static_cast<double>(h) +
                                static_cast<double>((v * m) % w) / static_cast<double>(w));
            const double val = x[bc * h * w + n * w + m];
            re += val * std::cos(ang);
            im += val * std::sin(ang);
          }
        out.re[bc * h * wr + u * wr + v] = re * scale;
        out.im[bc * h * wr + u * wr + v] = im * scale;
      }
  return out;
}

/// Full sort then linear interpolation between order statistics.
inline double quantile_by_sort(std::vector<double> x, double q) {
  if (x.empty()) throw Error("quantile_by_sort: empty input");
  std::sort(x.begin(), x.end());
  const double pos = q * static_cast<double>(x.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, x.size() - 1);
  return x[lo] + (pos - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

struct Pixel {
  std::size_t i = 0, j = 0;
  bool operator==(const Pixel&) const = default;
};

// 8-neighbour shifts in the fixed serialisation order used by the matcher.
inline constexpr int kShiftY[8] = {-1, -1, -1, 0, 0, 1, 1, 1};
inline constexpr int kShiftX[8] = {-1, 0, 1, -1, 1, -1, 0, 1};

/// Exact cosine between the feature vectors at two pixels of a [C, h, w] map;
/// 0 when either vector is zero.
inline double pixel_cosine(const Tensor& f, Pixel p, Pixel q) {
  const std::size_t C = f.dim(0), h = f.dim(1), w = f.dim(2);
  double dot = 0.0, np = 0.0, nq = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    const double a = f[(c * h + p.i) * w + p.j], b = f[(c * h + q.i) * w + q.j];
    dot += a * b;
    np += a * a;
    nq += b * b;
  }
  if (np == 0.0 || nq == 0.0) return 0.0;
  return std::clamp(dot / std::sqrt(np * nq), -1.0, 1.0);
}

/// Pixel grid with 8-neighbour edges weighted 1 - cos + len_weight * {1, sqrt 2}.
struct GridGraph {
  const Tensor* feature = nullptr;  // [C, h, w]
  double len_weight = 0.0;

  std::size_t h() const { return feature->dim(1); }
  std::size_t w() const { return feature->dim(2); }

  double weight(Pixel p, int n) const {
    const Pixel q{p.i + static_cast<std::size_t>(kShiftY[n]), p.j + static_cast<std::size_t>(kShiftX[n])};
    const double geom = (kShiftY[n] != 0 && kShiftX[n] != 0) ? std::numbers::sqrt2 : 1.0;
    return std::max(0.0, 1.0 - pixel_cosine(*feature, p, q)) + len_weight * geom;
  }

  bool has_neighbour(Pixel p, int n) const {
    const long i = static_cast<long>(p.i) + kShiftY[n], j = static_cast<long>(p.j) + kShiftX[n];
    return i >= 0 && j >= 0 && i < static_cast<long>(h()) && j < static_cast<long>(w());
  }
};

/// Shortest-path distances plus the predecessor of every reached pixel
/// (sources and unreached pixels point at themselves).
struct GeodesicTree {
  Tensor dist;                      // [h, w]
  std::vector<std::size_t> parent;  // flat pixel index
};

inline GeodesicTree dijkstra_tree(const Tensor& band, const std::vector<Pixel>& sources, double len_weight = 0.0) {
  require_rank(band, 3, "dijkstra_geo");
  if (sources.empty()) throw Error("dijkstra_geo: empty source set");
  const GridGraph g{&band, len_weight};
  const std::size_t h = g.h(), w = g.w();
  GeodesicTree tree{Tensor(Shape{h, w}, std::numeric_limits<double>::infinity()), std::vector<std::size_t>(h * w)};
  for (std::size_t i = 0; i < h * w; ++i) tree.parent[i] = i;
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  for (const Pixel& s : sources) {
    if (s.i >= h || s.j >= w) throw Error("dijkstra_geo: source outside the grid");
    tree.dist[s.i * w + s.j] = 0.0;
    pq.emplace(0.0, s.i * w + s.j);
  }
  while (!pq.empty()) {
    const auto [d, idx] = pq.top();
    pq.pop();
    if (d > tree.dist[idx]) continue;
    const Pixel p{idx / w, idx % w};
    for (int n = 0; n < 8; ++n) {
      if (!g.has_neighbour(p, n)) continue;
      const std::size_t q = (p.i + static_cast<std::size_t>(kShiftY[n])) * w + p.j + static_cast<std::size_t>(kShiftX[n]);
      const double nd = d + g.weight(p, n);
      if (nd < tree.dist[q]) {
        tree.dist[q] = nd;
        tree.parent[q] = idx;
        pq.emplace(nd, q);
      }
    }
  }
  return tree;
}

/// Exact multi-source shortest-path distance over the feature graph of a [C, h, w] band.
inline Tensor dijkstra_geo(const Tensor& band, const std::vector<Pixel>& sources, double len_weight = 0.0) {
  return dijkstra_tree(band, sources, len_weight).dist;
}

/// Random smooth [C, h, w] field: each channel sums a few random plane waves
/// with spatial frequency below `max_freq` cycles per pixel.
inline Tensor smooth_field(std::size_t C, std::size_t h, std::size_t w, std::uint64_t seed, double max_freq = 0.05,
                           int waves = 4) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor f(Shape{C, h, w});
  const double tau = 2.0 * std::numbers::pi;
  for (std::size_t c = 0; c < C; ++c)
    for (int m = 0; m < waves; ++m) {
      const double fy = u(rng) * max_freq, fx = u(rng) * max_freq;
      const double phase = (u(rng) + 1.0) * std::numbers::pi, amp = u(rng);
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
          f[(c * h + i) * w + j] +=
              amp * std::cos(tau * (fy * static_cast<double>(i) + fx * static_cast<double>(j)) + phase);
    }
  return f;
}

/// Ranks with ties given their average position (1-based).
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

/// Spearman correlation between a heat score and the negated geodesic distance over `region`.
inline double rank_correlation(const Tensor& heat, const Tensor& dist, const std::vector<Pixel>& region) {
  if (region.size() < 10) throw Error("rank_correlation: region needs at least 10 pixels");
  if (heat.size() != dist.size()) throw ShapeError("rank_correlation: map sizes differ");
  const std::size_t w = heat.dim(heat.rank() - 1);
  std::vector<double> a, b;
  for (const Pixel& p : region) {
    a.push_back(heat[p.i * w + p.j]);
    b.push_back(-dist[p.i * w + p.j]);
  }
  const auto constant = [](const std::vector<double>& v) {
    return std::adjacent_find(v.begin(), v.end(), std::not_equal_to<>()) == v.end();
  };
  if (constant(a) || constant(b)) throw Error("rank_correlation: constant input, correlation undefined");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  // average ranks of n items always have mean (n + 1) / 2
  const double ma = 0.5 * (static_cast<double>(ra.size()) + 1.0), mb = ma;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------
// Two-cluster ranking fixture.
//
// Columns, left to right: a ramp whose features rotate away from the prototype
// with distance to the core, the core (features ≈ prototype), a gap of
// anti-aligned features, and a uniform second cluster with moderate cosine to
// the prototype. A is the far end of the ramp, B the second-cluster pixel
// just across the gap: spatially close, feature-disconnected, higher cosine.

struct TwoClusterFixture {
  Tensor feature;  // [C, h, w]
  Pixel a, b;
  std::vector<double> prototype;  // C entries
  std::vector<Pixel> core;        // prototype-cluster pixels, used as geodesic sources
  std::uint64_t seed = 0;
};

inline std::vector<double> cosine_to(const Tensor& f, const std::vector<double>& proto, double eps = 1e-8) {
  const std::size_t C = f.dim(0), hw = f.dim(1) * f.dim(2);
  double pn = 0.0;
  for (double v : proto) pn += v * v;
  pn = std::sqrt(pn);
  std::vector<double> out(hw);
  for (std::size_t p = 0; p < hw; ++p) {
    double dot = 0.0, nn = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      dot += f[c * hw + p] * proto[c];
      nn += f[c * hw + p] * f[c * hw + p];
    }
    out[p] = dot / ((std::sqrt(nn) + eps) * (pn + eps));
  }
  return out;
}

/// True when a chain of high-affinity edges (cosine >= threshold) joins `from` to any `targets` pixel.
inline bool high_affinity_connected(const Tensor& f, Pixel from, const std::vector<Pixel>& targets,
                                    double threshold = 0.5) {
  const std::size_t h = f.dim(1), w = f.dim(2);
  std::vector<char> seen(h * w, 0), goal(h * w, 0);
  for (const Pixel& t : targets) goal[t.i * w + t.j] = 1;
  std::vector<Pixel> stack{from};
  seen[from.i * w + from.j] = 1;
  const GridGraph g{&f, 0.0};
  while (!stack.empty()) {
    const Pixel p = stack.back();
    stack.pop_back();
    if (goal[p.i * w + p.j]) return true;
    for (int n = 0; n < 8; ++n) {
      if (!g.has_neighbour(p, n)) continue;
      const Pixel q{p.i + static_cast<std::size_t>(kShiftY[n]), p.j + static_cast<std::size_t>(kShiftX[n])};
      if (seen[q.i * w + q.j] || pixel_cosine(f, p, q) < threshold) continue;
      seen[q.i * w + q.j] = 1;
      stack.push_back(q);
    }
  }
  return false;
}

inline TwoClusterFixture two_cluster_fixture(std::size_t h, std::size_t w, std::size_t gap_width,
                                             std::uint64_t seed, std::size_t channels = 8) {
  if (h < 16 || w < 16) throw Error("two_cluster_fixture: h and w must be >= 16");
  if (gap_width < 1) throw Error("two_cluster_fixture: gap_width must be >= 1");
  if (channels < 4) throw Error("two_cluster_fixture: need at least 4 channels");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  const std::size_t ramp = 3 + static_cast<std::size_t>(unif(rng) * 2.0);  // 3 or 4 columns
  const std::size_t core_w = std::max<std::size_t>(4, (w * 3 + 9) / 16);
  if (ramp + core_w + gap_width + 3 > w) throw Error("two_cluster_fixture: grid too narrow for gap");
  const std::size_t core0 = ramp, gap0 = core0 + core_w, c2_0 = gap0 + gap_width;

  const double cos_b = 0.45 + 0.15 * unif(rng);
  const double cos_a = 0.25 + (cos_b - 0.35) * unif(rng);  // strictly below cos_b - 0.1
  const double angle_a = std::acos(cos_a);
  const double sigma = 0.02;

  TwoClusterFixture fx;
  fx.seed = seed;
  fx.feature = Tensor(Shape{channels, h, w});
  fx.prototype.assign(channels, 0.0);
  fx.prototype[0] = 1.0;
  const std::size_t hw = h * w;
  auto set = [&](std::size_t i, std::size_t j, std::vector<double> v) {
    for (std::size_t c = 0; c < channels; ++c) fx.feature[c * hw + i * w + j] = v[c] + sigma * noise(rng);
  };
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      std::vector<double> v(channels, 0.0);
      if (j < core0) {
        const double t = angle_a * static_cast<double>(core0 - j) / static_cast<double>(ramp);
        v[0] = std::cos(t);
        v[2] = std::sin(t);
      } else if (j < gap0) {
        v[0] = 1.0;
        fx.core.push_back({i, j});
      } else if (j < c2_0) {
        v[0] = -1.0;
      } else {
        v[0] = cos_b;
        v[1] = std::sqrt(1.0 - cos_b * cos_b);
      }
      set(i, j, std::move(v));
    }

  const std::size_t row = h / 4 + static_cast<std::size_t>(unif(rng) * static_cast<double>(h / 2));
  fx.a = {row, 0};
  fx.b = {h - 1 - row, c2_0};

  const auto cosv = cosine_to(fx.feature, fx.prototype);
  if (!(cosv[fx.b.i * w + fx.b.j] > cosv[fx.a.i * w + fx.a.j]))
    throw Error("two_cluster_fixture: certificate failed, cos(A) >= cos(B); regenerate with a new seed");
  if (high_affinity_connected(fx.feature, fx.b, fx.core))
    throw Error("two_cluster_fixture: certificate failed, clusters connected; regenerate with a new seed");
  if (!high_affinity_connected(fx.feature, fx.a, fx.core))
    throw Error("two_cluster_fixture: certificate failed, A detached from the core");
  return fx;
}

}  // namespace sgp::oracle
