#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "sgp/checkpoint.hpp"
#include "sgp/episodes.hpp"

using sgp::Shape;
using sgp::Tensor;
namespace ep = sgp::ep;
namespace ag = sgp::ag;

namespace {

ep::ModelConfig small_model() {
  ep::ModelConfig c;
  c.channels = 8;
  c.enc1 = 4, c.enc2 = 6, c.dec_hidden = 6;
  return c;
}

ep::TrainConfig short_run(std::size_t iters) {
  ep::TrainConfig t;
  t.iters = iters;
  t.phantom = ep::PhantomSpec::tiny();
  t.eval_episodes = 2;
  return t;
}

Tensor to_tensor(const std::vector<std::uint8_t>& v) {
  Tensor t(Shape{v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i];
  return t;
}

}  // namespace

TEST(Phantom, DeterministicPerSeed) {
  const ep::PhantomSpec spec;
  const auto a = ep::gen_phantom(spec, 7), b = ep::gen_phantom(spec, 7), c = ep::gen_phantom(spec, 8);
  EXPECT_EQ(a.I_s, b.I_s);
  EXPECT_EQ(a.I_q, b.I_q);
  EXPECT_EQ(a.M_q.labels, b.M_q.labels);
  EXPECT_NE(a.I_s, c.I_s);
  EXPECT_EQ(a.I_s.shape(), (Shape{1, 1, 64, 64}));
}

TEST(Phantom, MasksAndClutter) {
  const ep::PhantomSpec spec;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto e = ep::gen_phantom(spec, s);
    for (const auto* m : {&e.M_s, &e.M_q}) {
      std::size_t fg = 0;
      for (auto v : m->labels) {
        ASSERT_LE(v, 1);  // no ignore labels
        fg += v;
      }
      EXPECT_GE(fg, 16u);
      EXPECT_EQ(ep::detail::count_components(m->labels, 64, 64), 1u);
    }
    // distractors never overlap or touch the organ
    double blob = 0.0;
    for (std::size_t p = 0; p < 64 * 64; ++p) {
      blob += e.clutter_q[p];
      if (e.clutter_q[p] > 0) {
        const long i = static_cast<long>(p / 64), j = static_cast<long>(p % 64);
        for (long di = -1; di <= 1; ++di)
          for (long dj = -1; dj <= 1; ++dj) {
            const long y = std::clamp(i + di, 0L, 63L), x = std::clamp(j + dj, 0L, 63L);
            EXPECT_EQ(e.M_q.labels[static_cast<std::size_t>(y * 64 + x)], 0);
          }
      }
    }
    EXPECT_GT(blob, 0.0);
  }
}

TEST(Phantom, OrganBrighterThanBackground) {
  const auto e = ep::gen_phantom(ep::PhantomSpec{}, 3);
  double in = 0, out = 0, nin = 0, nout = 0;
  for (std::size_t p = 0; p < 64 * 64; ++p) {
    if (e.M_s.labels[p]) in += e.I_s[p], ++nin;
    else if (e.clutter_s[p] == 0) out += e.I_s[p], ++nout;
  }
  EXPECT_GT(in / nin - out / nout, 0.4);
}

TEST(Phantom, DegenerateSpecs) {
  ep::PhantomSpec tiny_organ;
  tiny_organ.axis_min = tiny_organ.axis_max = 1.5;
  EXPECT_THROW(ep::gen_phantom(tiny_organ, 0), sgp::Error);
  ep::PhantomSpec far;
  far.max_shift = 9;
  EXPECT_THROW(ep::gen_phantom(far, 0), sgp::Error);
  ep::PhantomSpec loud;
  loud.jitter = 0.2;
  EXPECT_THROW(ep::gen_phantom(loud, 0), sgp::Error);
  EXPECT_NO_THROW(ep::gen_phantom(ep::PhantomSpec::tiny(), 0));
}

TEST(Dice, Examples) {
  Tensor a(Shape{20, 10}), b(Shape{20, 10});
  for (std::size_t i = 0; i < 100; ++i) a[i] = 1.0;
  EXPECT_EQ(ep::dice(a, a), 100.0);
  for (std::size_t i = 100; i < 200; ++i) b[i] = 1.0;
  EXPECT_EQ(ep::dice(a, b), 0.0);
  b.fill(0.0);
  for (std::size_t i = 50; i < 150; ++i) b[i] = 1.0;
  EXPECT_DOUBLE_EQ(ep::dice(a, b), 50.0);
  const Tensor z(Shape{20, 10});
  EXPECT_EQ(ep::dice(z, z), 100.0);
  EXPECT_THROW(ep::dice(a, Tensor(Shape{10, 20})), sgp::ShapeError);
}

TEST(Dice, MatchesSetCountOracle) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a(Shape{9, 13}), b(Shape{9, 13});
    std::set<std::size_t> sa, sb;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (rng() % 3 == 0) a[i] = 1.0, sa.insert(i);
      if (rng() % 4 == 0) b[i] = 1.0, sb.insert(i);
    }
    std::size_t both = 0;
    for (auto i : sa) both += sb.count(i);
    const double expect = 200.0 * static_cast<double>(both) / static_cast<double>(sa.size() + sb.size());
    EXPECT_EQ(ep::dice(a, b), expect);
  }
}

TEST(ToyModel, ParameterLayout) {
  const auto m = ep::ToyModel::init(ep::ModelConfig{}, 0);
  const auto& p = m.params;
  EXPECT_EQ(p.get("enc.conv1.W").value.shape(), (Shape{8, 1, 3, 3}));
  EXPECT_EQ(p.get("enc.conv3.W").value.shape(), (Shape{32, 16, 3, 3}));
  EXPECT_EQ(p.get("dec_fg.conv1.W").value.shape(), (Shape{16, 67, 3, 3}));
  EXPECT_EQ(p.get("dec_bg.conv2.W").value.shape(), (Shape{1, 16, 3, 3}));
  EXPECT_EQ(p.get("spb.radius_raw").value.size(), 2u);
  const auto [r1, r2] = ep::current_radii(m);
  EXPECT_NEAR(r1, 0.25, 1e-12);
  EXPECT_NEAR(r2, 0.55, 1e-12);
  EXPECT_NEAR(m.spectral().beta(), 10.0, 1e-12);
  // decoders are separate, the spectral/matching parameters exist once
  EXPECT_NE(p.get("dec_fg.conv1.W").value, p.get("dec_bg.conv1.W").value);
  for (const auto& q : p.all()) {
    EXPECT_EQ(q.name.find("fg.spb"), std::string::npos);
    EXPECT_EQ(q.name.find("bg.gm"), std::string::npos);
  }
  auto tied = ep::ModelConfig{};
  tied.tied_decoders = true;
  EXPECT_FALSE(ep::ToyModel::init(tied, 0).params.contains("dec_bg.conv1.W"));
}

TEST(EpisodeForward, SoftmaxAndDiagnostics) {
  auto m = ep::ToyModel::init(ep::ModelConfig{}, 1);
  const auto e = ep::gen_phantom(ep::PhantomSpec{}, 11);
  ag::Tape t;
  const auto out = ep::episode_forward(t, m, e.I_s, e.M_s.foreground(), e.I_q);
  const Tensor& p = out.pred.value();
  ASSERT_EQ(p.shape(), (Shape{1, 2, 64, 64}));
  for (std::size_t i = 0; i < 64 * 64; ++i) EXPECT_NEAR(p[i] + p[64 * 64 + i], 1.0, 1e-12);
  EXPECT_EQ(out.masks.shape(), (Shape{3, 16, 9}));
  for (const auto* b : {&out.fg, &out.bg})
    for (const Tensor* d : {&b->gm.cos.value(), &b->gm.seed.value(), &b->gm.geo.value(), &b->gm.score.value(),
                            &b->gm.weights.value(), &b->gm.matched.value(), &b->protos.value()})
      for (double v : d->vec()) ASSERT_TRUE(std::isfinite(v));
  EXPECT_EQ(out.fg.gm.matched.shape(), (Shape{1, 67, 16, 16}));
}

TEST(EpisodeForward, TiedDecodersSwapUnderSwappedMasks) {
  auto cfg = small_model();
  cfg.tied_decoders = true;
  auto m = ep::ToyModel::init(cfg, 2);
  const auto e = ep::gen_phantom(ep::PhantomSpec{}, 5);
  const Tensor ms = e.M_s.foreground();
  Tensor inv = ms * -1.0;
  for (double& v : inv.vec()) v += 1.0;
  ag::Tape t1, t2;
  const auto a = ep::episode_forward(t1, m, e.I_s, ms, e.I_q);
  const auto b = ep::episode_forward(t2, m, e.I_s, inv, e.I_q);
  EXPECT_LE(sgp::max_abs_diff(a.fg.logits.value(), b.bg.logits.value()), 1e-12);
  EXPECT_LE(sgp::max_abs_diff(a.bg.logits.value(), b.fg.logits.value()), 1e-12);
  for (std::size_t i = 0; i < 64 * 64; ++i)
    EXPECT_NEAR(a.pred.value()[i], b.pred.value()[64 * 64 + i], 1e-12);
}

TEST(EpisodeForward, SharedParametersReceiveBothBranchGradients) {
  auto m = ep::ToyModel::init(small_model(), 3);
  const auto e = ep::gen_phantom(ep::PhantomSpec::tiny(), 1);
  auto grads = [&](bool fg, bool bg) {
    m.params.zero_grads();
    ag::Tape t;
    const auto out = ep::episode_forward(t, m, e.I_s, e.M_s.foreground(), e.I_q);
    std::vector<ag::Var> parts;
    if (fg) parts.push_back(ag::sum(out.fg.logits));
    if (bg) parts.push_back(ag::sum(out.bg.logits));
    t.backward(ag::add_scalars(parts));
    std::vector<Tensor> g;
    for (const char* n : {"spb.radius_raw", "spb.beta_raw", "gm.alpha_raw", "gm.band_logits", "gm.blend_W"})
      g.push_back(m.params.get(n).grad);
    return g;
  };
  const auto gf = grads(true, false), gb = grads(false, true), both = grads(true, true);
  for (std::size_t k = 0; k < both.size(); ++k) {
    EXPECT_GT(gf[k].max() - gf[k].min() + std::abs(gf[k].sum()), 0.0) << k;
    EXPECT_GT(gb[k].max() - gb[k].min() + std::abs(gb[k].sum()), 0.0) << k;
    EXPECT_LE(sgp::max_abs_diff(both[k], gf[k] + gb[k]), 1e-10 * (1.0 + both[k].max() - both[k].min())) << k;
  }
}

TEST(EpisodeLoss, TermsFiniteAndSummed) {
  auto m = ep::ToyModel::init(small_model(), 4);
  const auto e = ep::gen_phantom(ep::PhantomSpec{}, 9);
  ag::Tape t;
  const auto L = ep::episode_loss(t, m, e);
  const double p = L.prim.value().item(), b = L.b.value().item(), a = L.align.value().item();
  EXPECT_GT(p, 0.0);
  EXPECT_GE(b, 0.0);
  EXPECT_GT(a, 0.0);
  EXPECT_NEAR(L.total.value().item(), p + b + a, 1e-12);
}

TEST(Train, ZeroLearningRateKeepsEverything) {
  auto m = ep::ToyModel::init(small_model(), 5);
  const auto init = ep::ToyModel::init(small_model(), 5);
  auto cfg = short_run(3);
  cfg.lr = 0.0;
  cfg.eval_every = 1;
  const auto r = ep::train(m, cfg);
  ASSERT_EQ(r.evals.size(), 3u);
  for (const auto& [it, ev] : r.evals) {
    EXPECT_EQ(ev.dice, r.evals[0].second.dice);
    EXPECT_EQ(ev.fp_mass, r.evals[0].second.fp_mass);
  }
  for (const auto& l : r.log) {
    EXPECT_EQ(l.r1, r.log[0].r1);
    EXPECT_EQ(l.r2, r.log[0].r2);
  }
  for (std::size_t i = 0; i < m.params.all().size(); ++i)
    EXPECT_EQ(m.params.all()[i].value, init.params.all()[i].value) << m.params.all()[i].name;
}

TEST(Train, DeterministicUnderSeed) {
  auto run = [] {
    auto m = ep::ToyModel::init(small_model(), 6);
    auto cfg = short_run(4);
    cfg.seed = 6;
    return ep::train(m, cfg);
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].total, b.log[i].total);
    EXPECT_EQ(a.log[i].r1, b.log[i].r1);
  }
  EXPECT_EQ(a.evals.back().second.dice, b.evals.back().second.dice);
}

TEST(Train, ParametersMoveAndRadiiStayOrdered) {
  auto m = ep::ToyModel::init(small_model(), 7);
  auto cfg = short_run(5);
  cfg.lr = 1e-2;
  const auto r = ep::train(m, cfg);
  EXPECT_NE(m.params.get("spb.radius_raw").value, ep::ToyModel::init(small_model(), 7).params.get("spb.radius_raw").value);
  for (const auto& l : r.log) {
    EXPECT_GT(l.r1, 0.0);
    EXPECT_LT(l.r1, l.r2);
  }
}

TEST(Train, NonFiniteLossAborts) {
  auto m = ep::ToyModel::init(small_model(), 8);
  m.params.get("dec_fg.conv2.b").value[0] = NAN;
  EXPECT_THROW(ep::train(m, short_run(2)), ep::TrainingAborted);
}

TEST(Train, ScheduleAndSmoothing) {
  ep::TrainConfig cfg;
  cfg.lr = 1.0, cfg.gamma = 0.5, cfg.step = 10;
  EXPECT_EQ(ep::learning_rate(cfg, 1), 1.0);
  EXPECT_EQ(ep::learning_rate(cfg, 10), 1.0);
  EXPECT_EQ(ep::learning_rate(cfg, 11), 0.5);
  EXPECT_EQ(ep::learning_rate(cfg, 25), 0.25);
  std::vector<ep::IterLog> log;
  for (std::size_t i = 1; i <= 20; ++i) log.push_back({.iter = i, .total = static_cast<double>(i)});
  EXPECT_DOUBLE_EQ(ep::smoothed_total(log, 10), 5.5);
  EXPECT_DOUBLE_EQ(ep::smoothed_total(log, 3, 10), 2.0);
  EXPECT_DOUBLE_EQ(ep::smoothed_total(log, 20, 4), 18.5);
}

TEST(Ablation, Jobs) {
  const ep::ModelConfig base;
  const auto t = ep::ablation_jobs("T", {0, 5}, base);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[0].model.gm.T, 0u);
  EXPECT_EQ(t[1].label, "T=5");
  EXPECT_EQ(ep::ablation_jobs("K", {1}, base)[0].model.bands, 1u);
  const auto c = ep::ablation_jobs("cosine", {}, base);
  EXPECT_TRUE(c[0].model.gm.cosine_only);
  EXPECT_FALSE(c[1].model.gm.cosine_only);
  EXPECT_THROW(ep::ablation_jobs("K", {6}, base), sgp::Error);
  EXPECT_THROW(ep::ablation_jobs("K", {}, base), sgp::Error);
  EXPECT_THROW(ep::ablation_jobs("q", {1}, base), sgp::Error);
  EXPECT_THROW(ep::ablation_jobs("T", {1.5}, base), sgp::Error);
}

TEST(Ablation, SingleBandUsesOneFullSpectrumPrototype) {
  auto cfg = small_model();
  cfg.bands = 1;
  auto m = ep::ToyModel::init(cfg, 9);
  const auto e = ep::gen_phantom(ep::PhantomSpec::tiny(), 2);
  ag::Tape t;
  const auto out = ep::episode_forward(t, m, e.I_s, e.M_s.foreground(), e.I_q);
  for (double v : out.masks.value().vec()) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(out.fg.protos.shape(), (Shape{1, 8, 1}));
}

TEST(Ablation, ThreadCountDoesNotChangeResults) {
  const auto jobs = ep::ablation_jobs("T", {0, 2}, small_model());
  const auto a = ep::run_ablation(jobs, short_run(2), 2, 1);
  const auto b = ep::run_ablation(jobs, short_run(2), 2, 3);
  ASSERT_EQ(a.size(), 2u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].dice, b[i].dice);
    EXPECT_EQ(a[i].fp_mass, b[i].fp_mass);
    EXPECT_EQ(a[i].dice.size(), 2u);
  }
}

TEST(Checkpoint, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "sgp_ckpt_test";
  std::filesystem::remove_all(dir);
  auto a = ep::ToyModel::init(small_model(), 10);
  a.params.get("gm.alpha_raw").frozen = true;
  sgp::ckpt::save(a.params, dir);
  auto b = ep::ToyModel::init(small_model(), 11);
  sgp::ckpt::load(b.params, dir);
  for (std::size_t i = 0; i < a.params.all().size(); ++i) {
    EXPECT_EQ(a.params.all()[i].value, b.params.all()[i].value);
    EXPECT_EQ(a.params.all()[i].frozen, b.params.all()[i].frozen);
  }
  auto wide = small_model();
  wide.channels = 9;
  auto c = ep::ToyModel::init(wide, 0);
  EXPECT_THROW(sgp::ckpt::load(c.params, dir), sgp::ShapeError);
  EXPECT_THROW(sgp::ckpt::load(c.params, dir / "missing"), sgp::Error);
  std::filesystem::remove_all(dir);
}

TEST(EpisodeForward, MaskTensorHelper) {
  const sgp::loss::LabelMap y(Shape{1, 2, 2}, {0, 1, 1, 0});
  EXPECT_EQ(ep::mask_tensor(y).vec(), to_tensor({0, 1, 1, 0}).vec());
}
