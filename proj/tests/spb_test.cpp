#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "sgp/spb.hpp"

using sgp::Shape;
using sgp::Tensor;
namespace spb = sgp::spb;
namespace ag = sgp::ag;

namespace {

Tensor random_tensor(Shape s, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(s));
  for (double& v : t.vec()) v = n(rng);
  return t;
}

double plain_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Inverse of log(1 + e^x) by bisection, independent of the library's closed form.
double softplus_inv_bisect(double y) {
  double lo = -60.0, hi = 60.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (std::log1p(std::exp(mid)) < y ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

TEST(SpectralParams, InitRoundTrip) {
  const auto sp = spb::init_spectral_params();
  const auto r = sp.radii();
  ASSERT_EQ(r.size(), 2u);
  EXPECT_NEAR(r[0], 0.25, 1e-9);
  EXPECT_NEAR(r[1], 0.55, 1e-9);
  EXPECT_NEAR(sp.beta(), 10.0, 1e-9);
  EXPECT_NEAR(sp.radius_raw[0], softplus_inv_bisect(0.25), 1e-6);
}

TEST(SpectralParams, InitRejectsBadTargets) {
  EXPECT_THROW(spb::init_spectral_params(0.3, 0.3), sgp::Error);
  EXPECT_THROW(spb::init_spectral_params(0.5, 0.2), sgp::Error);
  EXPECT_THROW(spb::init_spectral_params(0.0, 0.2), sgp::Error);
  EXPECT_THROW(spb::init_spectral_params(0.25, 0.55, 10.0, 6), sgp::Error);
}

TEST(SpectralParams, OtherBandCounts) {
  EXPECT_EQ(spb::init_spectral_params(0.25, 0.55, 10.0, 1).radii().size(), 0u);
  const auto r2 = spb::init_spectral_params(0.25, 0.55, 10.0, 2).radii();
  ASSERT_EQ(r2.size(), 1u);
  EXPECT_NEAR(r2[0], 0.25, 1e-9);
  const auto r5 = spb::init_spectral_params(0.25, 0.55, 10.0, 5).radii();
  ASSERT_EQ(r5.size(), 4u);
  EXPECT_NEAR(r5[0], 0.25, 1e-9);
  EXPECT_NEAR(r5[1], 0.35, 1e-9);
  EXPECT_NEAR(r5[3], 0.55, 1e-9);
}

TEST(SpectralParams, OrderingHoldsAtExtremes) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  const double extremes[] = {-50.0, 50.0};
  for (int i = 0; i < 10000; ++i) {
    spb::SpectralParams sp{{u(rng), u(rng)}, u(rng)};
    if (i < 4) sp.radius_raw = {extremes[i & 1], extremes[i >> 1]};
    const auto r = sp.radii();
    ASSERT_GT(r[0], 0.0);
    ASSERT_GT(r[1], r[0]) << sp.radius_raw[0] << " " << sp.radius_raw[1];
    ASSERT_GE(sp.beta(), 1.0);
  }
}

TEST(BandMasks, ValuesAtOrigin) {
  const auto grid = sgp::freq_grid(8, 8);
  const auto bm = spb::band_masks(spb::init_spectral_params(), grid);
  const double low = plain_sigmoid(10.0 * 0.25), high = 1.0 - plain_sigmoid(10.0 * 0.55);
  EXPECT_NEAR(bm.masks.at(0, 0, 0), low, 1e-9);
  EXPECT_NEAR(bm.masks.at(2, 0, 0), high, 1e-9);
  EXPECT_NEAR(bm.masks.at(1, 0, 0), 1.0 - low - high, 1e-9);
  EXPECT_NEAR(low, 0.9241, 1e-4);
  EXPECT_NEAR(high, 0.0041, 1e-4);
}

TEST(BandMasks, HalfAtFirstRadius) {
  // 0.25 lies on the grid of a 4×4 map (ν = 1/4, 0)
  const auto grid = sgp::freq_grid(4, 4);
  const auto bm = spb::band_masks(spb::init_spectral_params(), grid);
  EXPECT_NEAR(bm.masks.at(0, 1, 0), 0.5, 1e-9);
}

TEST(BandMasks, PartitionOfUnity) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-6.0, 6.0);
  const auto grid = sgp::freq_grid(16, 12);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const spb::SpectralParams sp{{u(rng), u(rng)}, u(rng)};
    const auto bm = spb::band_masks(sp, grid);
    const std::size_t n = grid.rho.size();
    for (std::size_t p = 0; p < n; ++p) {
      const double s = bm.masks[p] + bm.masks[n + p] + bm.masks[2 * n + p];
      worst = std::max(worst, std::abs(s - 1.0));
    }
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(BandMasks, MonotoneInRadius) {
  const auto grid = sgp::freq_grid(16, 16);
  const auto bm = spb::band_masks(spb::init_spectral_params(), grid);
  const std::size_t n = grid.rho.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return grid.rho[a] < grid.rho[b]; });
  for (std::size_t i = 1; i < n; ++i) {
    EXPECT_LE(bm.masks[order[i]], bm.masks[order[i - 1]] + 1e-15);
    EXPECT_GE(bm.masks[2 * n + order[i]], bm.masks[2 * n + order[i - 1]] - 1e-15);
  }
}

TEST(Decompose, ReconstructsInput) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor(Shape{1, 2, 64, 64}, rng);
  const auto bm = spb::band_masks(spb::init_spectral_params(), sgp::freq_grid(64, 64));
  const Tensor bands = spb::decompose(x, bm);
  ASSERT_EQ(bands.shape(), (Shape{1, 2, 3, 64, 64}));
  double worst = 0.0;
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t p = 0; p < 64 * 64; ++p) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += bands[((c * 3) + k) * 4096 + p];
      worst = std::max(worst, std::abs(s - x[c * 4096 + p]));
    }
  EXPECT_LE(worst, 1e-6);
}

TEST(Decompose, ConstantMapSplitsByMaskAtOrigin) {
  Tensor x(Shape{1, 1, 8, 8});
  x.fill(2.0);
  const auto sp = spb::init_spectral_params();
  const auto bm = spb::band_masks(sp, sgp::freq_grid(8, 8));
  const Tensor bands = spb::decompose(x, bm);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t p = 0; p < 64; ++p) EXPECT_NEAR(bands[k * 64 + p], 2.0 * bm.masks.at(k, 0, 0), 1e-12);
}

TEST(Decompose, NyquistCheckerboardHighBandShare) {
  Tensor x(Shape{1, 1, 8, 8});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) x.at(0, 0, i, j) = (i + j) % 2 ? -1.0 : 1.0;
  const Tensor bands = spb::decompose(x, spb::band_masks(spb::init_spectral_params(), sgp::freq_grid(8, 8)));
  double total = 0.0, high = 0.0;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t p = 0; p < 64; ++p) {
      const double e = bands[k * 64 + p] * bands[k * 64 + p];
      (k == 2 ? high : total) += e;
    }
  total += high;
  // single bin at ρ = √0.5, so the high band carries M_high(ρ)² of the energy
  const double m_high = 1.0 - plain_sigmoid(10.0 * (0.55 - std::sqrt(0.5)));
  const double m_low = plain_sigmoid(10.0 * (0.25 - std::sqrt(0.5)));
  const double m_mid = 1.0 - m_low - m_high;
  EXPECT_NEAR(high / total, m_high * m_high / (m_low * m_low + m_mid * m_mid + m_high * m_high), 1e-12);
  EXPECT_GE(high / total, 0.95);
}

TEST(Decompose, ShapeMismatchThrows) {
  const auto bm = spb::band_masks(spb::init_spectral_params(), sgp::freq_grid(8, 8));
  EXPECT_THROW(spb::decompose(Tensor(Shape{1, 1, 8, 6}), bm), sgp::ShapeError);
}

TEST(Prototype, MaskedAverage) {
  Tensor band(Shape{1, 1, 4, 4});
  Tensor mask(Shape{1, 4, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      band.at(0, 0, i, j) = j < 2 ? 1.0 : 3.0;
      mask.at(0, i, j) = j < 2 ? 1.0 : 0.0;
    }
  EXPECT_NEAR(spb::map_prototype(band, mask).item(), 1.0, 1e-12);
  mask.fill(0.0);
  EXPECT_NEAR(spb::map_prototype(band, mask).item(), 0.0, 1e-12);
  band.fill(-2.5);
  mask.at(0, 1, 2) = 0.3;
  EXPECT_NEAR(spb::map_prototype(band, mask).item(), -2.5, 1e-12);
}

TEST(SpbForward, SharedMasksAndShapes) {
  std::mt19937_64 rng(5);
  const Tensor fs = random_tensor(Shape{1, 4, 8, 8}, rng), fq = random_tensor(Shape{1, 4, 8, 8}, rng);
  Tensor m(Shape{1, 32, 32});
  for (std::size_t i = 8; i < 20; ++i)
    for (std::size_t j = 10; j < 24; ++j) m.at(0, i, j) = 1.0;
  Tensor inv = m * -1.0;
  for (double& v : inv.vec()) v += 1.0;
  const auto sp = spb::init_spectral_params();
  const auto fg = spb::spb_forward(fs, fq, m, sp), bg = spb::spb_forward(fs, fq, inv, sp);
  EXPECT_EQ(fg.masks.masks, bg.masks.masks);
  EXPECT_EQ(fg.prototypes.shape(), (Shape{1, 4, 3}));
  EXPECT_EQ(fg.bands_q.shape(), (Shape{1, 4, 3, 8, 8}));
  EXPECT_NE(fg.prototypes, bg.prototypes);
}

TEST(SpbForward, ConstantFeaturesGiveDcResponse) {
  Tensor f(Shape{1, 2, 8, 8});
  for (std::size_t p = 0; p < 64; ++p) f[p] = 1.5, f[64 + p] = -0.5;
  Tensor m(Shape{1, 16, 16});
  m.fill(1.0);
  const auto out = spb::spb_forward(f, f, m, spb::init_spectral_params());
  for (std::size_t k = 0; k < 3; ++k) {
    const double mk = out.masks.masks.at(k, 0, 0);
    EXPECT_NEAR(out.prototypes.at(0, 0, k), 1.5 * mk, 1e-4);
    EXPECT_NEAR(out.prototypes.at(0, 1, k), -0.5 * mk, 1e-4);
  }
}

TEST(SpbGradients, RadiiAndSharpnessThroughLowBand) {
  ag::ParamStore ps;
  const auto sp = spb::init_spectral_params();
  ps.add("spb.radius_raw", Tensor(Shape{2}, sp.radius_raw));
  ps.add("spb.beta_raw", Tensor(Shape{1}, {sp.beta_raw}));
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor(Shape{1, 3, 8, 10}, rng);
  const auto grid = sgp::freq_grid(8, 10);
  auto f = [&](ag::Tape& t) {
    auto masks = spb::band_masks(t.param(ps.get("spb.radius_raw")), t.param(ps.get("spb.beta_raw")), grid);
    auto bands = spb::decompose(t.constant(x), masks);
    return ag::sum(ag::square(ag::slice_channels(ag::reshape(bands, Shape{1, 9, 8, 10}), 0, 1)));
  };
  const auto rep = ag::gradcheck(f, ps);
  for (const auto& e : rep.entries) EXPECT_LE(e.max_rel_error, 1e-4) << e.name;
}

TEST(SpbGradients, FeaturesThroughPrototypes) {
  ag::ParamStore ps;
  std::mt19937_64 rng(13);
  ps.add("x", random_tensor(Shape{1, 2, 6, 6}, rng));
  const auto sp = spb::init_spectral_params();
  ps.add("spb.radius_raw", Tensor(Shape{2}, sp.radius_raw));
  ps.add("spb.beta_raw", Tensor(Shape{1}, {sp.beta_raw}));
  Tensor mask(Shape{1, 6, 6});
  for (std::size_t p = 0; p < 36; ++p) mask[p] = (p % 7) / 6.0;
  const Tensor w = random_tensor(Shape{1, 2, 3}, rng);
  auto f = [&](ag::Tape& t) {
    auto masks =
        spb::band_masks(t.param(ps.get("spb.radius_raw")), t.param(ps.get("spb.beta_raw")), sgp::freq_grid(6, 6));
    auto protos = spb::band_prototypes(spb::decompose(t.param(ps.get("x")), masks), mask);
    return ag::sum(ag::mul(ag::sin(protos), t.constant(w)));
  };
  const auto rep = ag::gradcheck(f, ps);
  for (const auto& e : rep.entries) EXPECT_LE(e.max_rel_error, 1e-4) << e.name;
}
