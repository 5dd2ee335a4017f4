#pragma once

// Desk-scale harness: synthetic organ phantoms, the toy encoder/decoder
// model around SPB + GM, the symmetric fg/bg episode forward, Dice, the
// training loop and the ablation driver.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <numbers>
#include <random>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "sgp/autograd.hpp"
#include "sgp/gm.hpp"
#include "sgp/losses.hpp"
#include "sgp/nn.hpp"
#include "sgp/spb.hpp"

namespace sgp::ep {

using ag::Var;

// ---------------------------------------------------------------------------
// Phantoms.

struct PhantomSpec {
  std::size_t size = 64;
  double axis_min = 9.0, axis_max = 15.0;  // organ ellipse semi-axes, px
  double organ = 0.8, background = 0.25;   // intensities; contrast is the gap
  double texture_freq = 0.18, texture_amp = 0.08;
  std::size_t clutter = 2;
  double clutter_radius_min = 3.5, clutter_radius_max = 5.5;
  std::size_t clutter_gap = 3;  // min px between a blob and the organ
  double noise = 0.03;
  int max_shift = 8;
  double jitter = 0.10;

  void validate() const {
    if (size < 16) throw Error("PhantomSpec: size must be >= 16");
    if (!(axis_min > 0 && axis_max >= axis_min)) throw Error("PhantomSpec: bad axis range");
    if (!(clutter_radius_min > 0 && clutter_radius_max >= clutter_radius_min))
      throw Error("PhantomSpec: bad clutter radius range");
    if (max_shift < 0 || max_shift > 8) throw Error("PhantomSpec: translation limited to 8 px");
    if (!(jitter >= 0 && jitter <= 0.1)) throw Error("PhantomSpec: intensity jitter limited to 10%");
    if (!(noise >= 0)) throw Error("PhantomSpec: noise must be non-negative");
  }

  /// Small phantom used for end-to-end gradient checks.
  static PhantomSpec tiny() {
    PhantomSpec s;
    s.size = 16;
    s.axis_min = 3.0, s.axis_max = 4.5;
    s.clutter = 1;
    s.clutter_radius_min = 1.2, s.clutter_radius_max = 1.8;
    s.clutter_gap = 1;
    s.max_shift = 1;
    return s;
  }
};

struct Episode {
  Tensor I_s, I_q;              // [1, 1, H, W]
  loss::LabelMap M_s, M_q;      // [1, H, W]
  Tensor clutter_s, clutter_q;  // [1, H, W] indicator of distractor blobs
  std::uint64_t seed = 0;
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace detail {

inline std::size_t count_components(const std::vector<std::uint8_t>& m, std::size_t H, std::size_t W) {
  std::vector<std::uint8_t> seen(m.size(), 0);
  std::size_t comps = 0;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < m.size(); ++s) {
    if (!m[s] || seen[s]) continue;
    ++comps;
    seen[s] = 1;
    stack.push_back(s);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const long i = static_cast<long>(p / W), j = static_cast<long>(p % W);
      for (long di = -1; di <= 1; ++di)
        for (long dj = -1; dj <= 1; ++dj) {
          const long y = i + di, x = j + dj;
          if (y < 0 || x < 0 || y >= static_cast<long>(H) || x >= static_cast<long>(W)) continue;
          const auto q = static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x);
          if (m[q] && !seen[q]) seen[q] = 1, stack.push_back(q);
        }
    }
  }
  return comps;
}

struct OrganFamily {
  double cy, cx, a, b, angle, tex_dir, tex_phase;
};

struct Blob {
  double cy, cx, r;
};

struct RenderedImage {
  Tensor image, clutter;
  std::vector<std::uint8_t> mask;
};

inline RenderedImage render(const PhantomSpec& spec, const OrganFamily& o, std::mt19937_64& rng) {
  const std::size_t N = spec.size;
  std::uniform_int_distribution<int> shift(-spec.max_shift, spec.max_shift);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, spec.noise);
  const double cy = o.cy + shift(rng), cx = o.cx + shift(rng);
  const double gain = 1.0 + spec.jitter * (2.0 * u(rng) - 1.0);
  const double ca = std::cos(o.angle), sa = std::sin(o.angle);
  RenderedImage r{Tensor(Shape{1, 1, N, N}), Tensor(Shape{1, N, N}), std::vector<std::uint8_t>(N * N, 0)};
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      const double y = static_cast<double>(i) - cy, x = static_cast<double>(j) - cx;
      const double p = (x * ca + y * sa) / o.a, q = (-x * sa + y * ca) / o.b;
      r.mask[i * N + j] = p * p + q * q <= 1.0;
    }
  // distractors: disks away from the organ and from each other
  std::vector<std::uint8_t> taken = r.mask;
  const double gap = static_cast<double>(spec.clutter_gap);
  for (std::size_t k = 0; k < spec.clutter; ++k) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double rad = spec.clutter_radius_min + (spec.clutter_radius_max - spec.clutter_radius_min) * u(rng);
      const double by = rad + 1 + u(rng) * (static_cast<double>(N) - 2 * rad - 2);
      const double bx = rad + 1 + u(rng) * (static_cast<double>(N) - 2 * rad - 2);
      bool clear = true;
      for (std::size_t i = 0; i < N && clear; ++i)
        for (std::size_t j = 0; j < N && clear; ++j)
          if (taken[i * N + j] && std::hypot(static_cast<double>(i) - by, static_cast<double>(j) - bx) <= rad + gap)
            clear = false;
      if (!clear) continue;
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j)
          if (std::hypot(static_cast<double>(i) - by, static_cast<double>(j) - bx) <= rad) {
            r.clutter[i * N + j] = 1.0;
            taken[i * N + j] = 1;
          }
      break;
    }
  }
  const double kx = std::cos(o.tex_dir), ky = std::sin(o.tex_dir), tau = 2.0 * std::numbers::pi;
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      double v = spec.background;
      if (r.mask[i * N + j] || r.clutter[i * N + j] > 0)
        v = spec.organ *
            (1.0 + spec.texture_amp * std::sin(tau * spec.texture_freq * (kx * static_cast<double>(j) +
                                                                           ky * static_cast<double>(i)) +
                                               o.tex_phase));
      r.image[i * N + j] = gain * v + noise(rng);
    }
  return r;
}

}  // namespace detail

/// Support and query share one organ; each gets its own translation, gain,
/// noise and distractor blobs of organ intensity that never touch the organ.
inline Episode gen_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(mix_seed(seed, 0x5047));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double N = static_cast<double>(spec.size), mid = 0.5 * (N - 1.0), wiggle = N / 10.0;
  detail::OrganFamily o;
  o.cy = mid + wiggle * (2 * u(rng) - 1);
  o.cx = mid + wiggle * (2 * u(rng) - 1);
  o.a = spec.axis_min + (spec.axis_max - spec.axis_min) * u(rng);
  o.b = spec.axis_min + (spec.axis_max - spec.axis_min) * u(rng);
  o.angle = std::numbers::pi * u(rng);
  o.tex_dir = std::numbers::pi * u(rng);
  o.tex_phase = 2.0 * std::numbers::pi * u(rng);
  auto s = detail::render(spec, o, rng);
  auto q = detail::render(spec, o, rng);
  const Shape ms{1, spec.size, spec.size};
  for (const auto* m : {&s.mask, &q.mask}) {
    std::size_t fg = 0;
    for (auto v : *m) fg += v;
    if (fg < 16) throw Error("gen_phantom: foreground smaller than 16 px; spec is degenerate");
    if (detail::count_components(*m, spec.size, spec.size) != 1) throw Error("gen_phantom: organ is not connected");
  }
  Episode e;
  e.I_s = std::move(s.image);
  e.I_q = std::move(q.image);
  e.M_s = loss::LabelMap(ms, std::move(s.mask));
  e.M_q = loss::LabelMap(ms, std::move(q.mask));
  e.clutter_s = std::move(s.clutter);
  e.clutter_q = std::move(q.clutter);
  e.seed = seed;
  return e;
}

// ---------------------------------------------------------------------------
// Model.

struct ModelConfig {
  std::size_t channels = 32, bands = spb::kDefaultBands;
  std::size_t enc1 = 8, enc2 = 16, dec_hidden = 16;
  double r1 = 0.25, r2 = 0.55, beta = 10.0;
  gm::GMConfig gm;
  bool tied_decoders = false;  // bg branch reuses the fg decoder weights
};

struct ToyModel {
  ModelConfig cfg;
  ag::ParamStore params;

  static ToyModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.gm.validate();
    ToyModel m;
    m.cfg = cfg;
    std::mt19937_64 rng(mix_seed(seed, 0x4D4F));
    auto conv = [&](const std::string& name, std::size_t cout, std::size_t cin, std::size_t k) {
      const double fan_in = static_cast<double>(cin * k * k), fan_out = static_cast<double>(cout * k * k);
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      const double a = std::sqrt(6.0 / (fan_in + fan_out));
      Tensor W(Shape{cout, cin, k, k});
      for (double& v : W.vec()) v = a * u(rng);
      m.params.add(name + ".W", std::move(W));
      m.params.add(name + ".b", Tensor(Shape{cout}));
    };
    const std::size_t C = cfg.channels, K = cfg.bands;
    conv("enc.conv1", cfg.enc1, 1, 3);
    conv("enc.conv2", cfg.enc2, cfg.enc1, 3);
    conv("enc.conv3", C, cfg.enc2, 3);
    const auto sp = spb::init_spectral_params(cfg.r1, cfg.r2, cfg.beta, K);
    m.params.add("spb.radius_raw", Tensor(Shape{K - 1}, sp.radius_raw));
    m.params.add("spb.beta_raw", Tensor(Shape{1}, {sp.beta_raw}));
    const auto gp = gm::GMParams::init(C, K);
    m.params.add("gm.alpha_raw", Tensor(Shape{K}, gp.alpha_raw));
    m.params.add("gm.band_logits", Tensor(Shape{K}, gp.band_logits));
    m.params.add("gm.blend_W", gp.blend_W);
    m.params.add("gm.blend_b", gp.blend_b);
    for (const char* dec : {"dec_fg", "dec_bg"}) {
      if (cfg.tied_decoders && std::string(dec) == "dec_bg") break;
      conv(std::string(dec) + ".conv1", cfg.dec_hidden, 2 * C + K, 3);
      conv(std::string(dec) + ".conv2", 1, cfg.dec_hidden, 3);
    }
    return m;
  }

  spb::SpectralParams spectral() const {
    auto lock = params.read_lock();
    return {params.get("spb.radius_raw").value.vec(), params.get("spb.beta_raw").value.item()};
  }
};

struct BranchVars {
  Var protos;
  gm::MatchedVars gm;
  Var logits;
};

struct ForwardVars {
  Var pred;  // [1, 2, H, W], channel 0 background
  Var masks, bands_q;
  BranchVars fg, bg;
};

namespace detail {

inline Var conv_layer(ag::Tape& t, ag::ParamStore& ps, const std::string& name, Var x, std::size_t stride) {
  return ag::conv2d(x, t.param(ps.get(name + ".W")), t.param(ps.get(name + ".b")), stride, 1);
}

inline Var encode(ag::Tape& t, ag::ParamStore& ps, const Tensor& image) {
  Var x = t.constant(image);
  x = ag::tanh(conv_layer(t, ps, "enc.conv1", x, 2));
  x = ag::tanh(conv_layer(t, ps, "enc.conv2", x, 2));
  return ag::tanh(conv_layer(t, ps, "enc.conv3", x, 1));
}

inline Var decode(ag::Tape& t, ag::ParamStore& ps, const std::string& prefix, Var matched, std::size_t H,
                  std::size_t W) {
  Var x = ag::tanh(conv_layer(t, ps, prefix + ".conv1", matched, 1));
  return ag::resize_bilinear(conv_layer(t, ps, prefix + ".conv2", x, 1), H, W);
}

}  // namespace detail

/// Encoder, shared SPB masks, then SPB + GM once with M_s and once with
/// 1 − M_s into the fg and bg decoders; softmax over [bg, fg].
inline ForwardVars episode_forward(ag::Tape& t, ToyModel& model, const Tensor& image_s, const Tensor& mask_s,
                                   const Tensor& image_q) {
  require_rank(image_s, 4, "episode_forward");
  require_rank(mask_s, 3, "episode_forward mask");
  const std::size_t H = image_q.dim(2), W = image_q.dim(3);
  auto& ps = model.params;
  auto lock = ps.read_lock();
  Var fs = detail::encode(t, ps, image_s), fq = detail::encode(t, ps, image_q);
  const std::size_t h = fq.shape()[2], w = fq.shape()[3];
  ForwardVars out;
  out.masks = spb::band_masks(t.param(ps.get("spb.radius_raw")), t.param(ps.get("spb.beta_raw")), freq_grid(h, w));
  Var bands_s = spb::decompose(fs, out.masks);
  out.bands_q = spb::decompose(fq, out.masks);
  const gm::GMVars gv{t.param(ps.get("gm.alpha_raw")), t.param(ps.get("gm.band_logits")),
                      t.param(ps.get("gm.blend_W")), t.param(ps.get("gm.blend_b"))};
  Tensor inv = mask_s * -1.0;
  for (double& v : inv.vec()) v += 1.0;
  const std::string bg_dec = model.cfg.tied_decoders ? "dec_fg" : "dec_bg";
  auto branch = [&](const Tensor& m, const std::string& dec) {
    BranchVars b;
    b.protos = spb::band_prototypes(bands_s, spb::downsample_mask(m, h, w));
    b.gm = gm::gm_forward(fq, out.bands_q, b.protos, gv, model.cfg.gm);
    b.logits = detail::decode(t, ps, dec, b.gm.matched, H, W);
    return b;
  };
  out.fg = branch(mask_s, "dec_fg");
  out.bg = branch(inv, bg_dec);
  out.pred = ag::softmax_channels(ag::concat_channels({out.bg.logits, out.fg.logits}));
  return out;
}

inline Tensor mask_tensor(const loss::LabelMap& y) { return y.foreground(); }

struct LossVars {
  Var prim, b, align, total;
  ForwardVars forward;
};

/// Total objective of one episode. The alignment term re-runs the model with
/// roles swapped and the binarised query prediction (stop-gradient) as mask.
inline LossVars episode_loss(ag::Tape& t, ToyModel& model, const Episode& e) {
  LossVars L;
  L.forward = episode_forward(t, model, e.I_s, mask_tensor(e.M_s), e.I_q);
  const std::size_t H = e.I_q.dim(2), W = e.I_q.dim(3);
  auto terms = [&](Var pred, const loss::LabelMap& y) {
    Var fg = ag::reshape(loss::foreground(pred), Shape{1, 1, H, W});
    return std::pair{loss::nll_weighted(pred, y, loss::class_weights(y)),
                     loss::boundary_loss(fg, y.foreground().reshaped(Shape{1, 1, H, W}))};
  };
  auto [prim, b] = terms(L.forward.pred, e.M_q);
  L.prim = prim;
  L.b = b;
  const Tensor pseudo = t.stop_gradient(loss::pseudo_mask(L.forward.pred.value()));
  const ForwardVars swapped = episode_forward(t, model, e.I_q, pseudo, e.I_s);
  auto [aprim, ab] = terms(swapped.pred, e.M_s);
  L.align = ag::add_scalars({aprim, ab});
  L.total = loss::total_loss(L.prim, L.b, L.align);
  return L;
}

// ---------------------------------------------------------------------------
// Metrics.

/// 2|a ∩ b| / (|a| + |b|) · 100 on masks thresholded at 0.5; both empty -> 100.
inline double dice(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("dice: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] > 0.5, y = b[i] > 0.5;
    na += x, nb += y, both += x && y;
  }
  if (na + nb == 0) return 100.0;
  return 200.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

struct EvalResult {
  double dice = 0.0;     // mean over episodes
  double fp_mass = 0.0;  // mean foreground probability over distractor pixels
  std::size_t episodes = 0;
};

inline Tensor predict(ToyModel& model, const Episode& e) {
  ag::Tape t;
  return loss::foreground(episode_forward(t, model, e.I_s, mask_tensor(e.M_s), e.I_q).pred.value());
}

inline EvalResult evaluate(ToyModel& model, const std::vector<Episode>& eps) {
  EvalResult r;
  for (const Episode& e : eps) {
    const Tensor fg = predict(model, e);
    Tensor hard(fg.shape());
    for (std::size_t i = 0; i < fg.size(); ++i) hard[i] = fg[i] > 0.5 ? 1.0 : 0.0;
    r.dice += dice(hard, e.M_q.foreground());
    double mass = 0.0, n = 0.0;
    for (std::size_t i = 0; i < fg.size(); ++i)
      if (e.clutter_q[i] > 0) mass += fg[i], n += 1.0;
    r.fp_mass += n > 0 ? mass / n : 0.0;
  }
  r.episodes = eps.size();
  if (!eps.empty()) r.dice /= static_cast<double>(eps.size()), r.fp_mass /= static_cast<double>(eps.size());
  return r;
}

inline constexpr std::uint64_t kHeldOutBase = 1'000'000'007ull;

inline std::vector<Episode> held_out(const PhantomSpec& spec, std::size_t n) {
  std::vector<Episode> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(gen_phantom(spec, kHeldOutBase + i));
  return v;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
  std::size_t iters = 500;
  double lr = 1e-3, momentum = 0.9, weight_decay = 5e-4;
  double gamma = 0.9;
  std::size_t step = 1000;  // iterations between learning-rate decays
  std::uint64_t seed = 0;
  PhantomSpec phantom;
  std::size_t eval_every = 0;  // 0: evaluate only after the last iteration
  std::size_t eval_episodes = 8;
};

struct IterLog {
  std::size_t iter = 0;
  double prim = 0, b = 0, align = 0, total = 0, lr = 0, r1 = 0, r2 = 0;
};

struct TrainResult {
  std::vector<IterLog> log;
  std::vector<std::pair<std::size_t, EvalResult>> evals;
};

struct TrainingAborted : Error {
  IterLog last;
  TrainingAborted(const std::string& what, IterLog l) : Error(what), last(l) {}
};

inline double learning_rate(const TrainConfig& cfg, std::size_t iter) {
  return cfg.lr * std::pow(cfg.gamma, static_cast<double>((iter - 1) / std::max<std::size_t>(cfg.step, 1)));
}

/// Radii of the current model; for a single band r1 = r2 = 0 is reported.
inline std::pair<double, double> current_radii(const ToyModel& m) {
  const auto r = m.spectral().radii();
  if (r.empty()) return {0.0, 0.0};
  return {r.front(), r.size() > 1 ? r[1] : r.front()};
}

using IterCallback = std::function<void(const IterLog&)>;
using EvalCallback = std::function<void(std::size_t, const EvalResult&)>;

/// Iterations are 1-based; episode i is gen_phantom(mix_seed(seed, i)).
inline TrainResult train(ToyModel& model, const TrainConfig& cfg, const IterCallback& on_iter = {},
                         const EvalCallback& on_eval = {}) {
  if (cfg.iters < 1) throw Error("train: need at least one iteration");
  TrainResult res;
  const auto eval_set = held_out(cfg.phantom, cfg.eval_episodes);
  for (std::size_t it = 1; it <= cfg.iters; ++it) {
    const Episode e = gen_phantom(cfg.phantom, mix_seed(cfg.seed, it));
    model.params.zero_grads();
    IterLog log;
    log.iter = it;
    log.lr = learning_rate(cfg, it);
    {
      ag::Tape t;
      const LossVars L = episode_loss(t, model, e);
      log.prim = L.prim.value().item();
      log.b = L.b.value().item();
      log.align = L.align.value().item();
      log.total = L.total.value().item();
      std::tie(log.r1, log.r2) = current_radii(model);
      if (!std::isfinite(log.total))
        throw TrainingAborted("train: non-finite loss at iteration " + std::to_string(it), log);
      t.backward(L.total);
    }
    ag::sgd_step(model.params, log.lr, cfg.momentum, cfg.weight_decay);
    res.log.push_back(log);
    if (on_iter) on_iter(log);
    if ((cfg.eval_every && it % cfg.eval_every == 0) || it == cfg.iters) {
      res.evals.emplace_back(it, evaluate(model, eval_set));
      if (on_eval) on_eval(it, res.evals.back().second);
    }
  }
  return res;
}

/// Trailing mean of the total loss over iterations (iter − window, iter].
inline double smoothed_total(const std::vector<IterLog>& log, std::size_t iter, std::size_t window = 10) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& l : log)
    if (l.iter <= iter && l.iter + window > iter) s += l.total, ++n;
  if (!n) throw Error("smoothed_total: no iterations in window");
  return s / static_cast<double>(n);
}

// Many decoder entries have gradients near 1e-7 against a loss of O(1); at a
// 1e-5 step their central differences are dominated by rounding.
inline constexpr double kEndToEndEps = 1e-4;

/// Central-difference check of every parameter of a freshly initialised model
/// on one fixed episode; stop-gradient values are pinned across probes.
inline ag::GradcheckReport episode_gradcheck(const ModelConfig& cfg, std::uint64_t seed,
                                             const ag::GradcheckOptions& opt = {.eps = kEndToEndEps},
                                             const PhantomSpec& spec = PhantomSpec::tiny()) {
  ToyModel m = ToyModel::init(cfg, seed);
  const Episode e = gen_phantom(spec, seed);
  return ag::gradcheck([&](ag::Tape& t) { return episode_loss(t, m, e).total; }, m.params, opt);
}

// ---------------------------------------------------------------------------
// Ablation.

/// Worker cap from SGP_THREADS (default 1).
inline std::size_t worker_count() {
  if (const char* env = std::getenv("SGP_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<std::size_t>(n);
  }
  return 1;
}

/// Runs jobs 0..n-1 over at most `workers` threads; results are stored by
/// index, so the outcome does not depend on scheduling.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& job) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard g(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

struct AblationRow {
  std::string label;
  std::vector<double> dice, fp_mass;  // one entry per seed
  double dice_mean = 0, dice_std = 0, fp_mean = 0;
};

inline void summarise(AblationRow& row) {
  const double n = static_cast<double>(row.dice.size());
  for (std::size_t i = 0; i < row.dice.size(); ++i) row.dice_mean += row.dice[i] / n, row.fp_mean += row.fp_mass[i] / n;
  double var = 0.0;
  for (double d : row.dice) var += (d - row.dice_mean) * (d - row.dice_mean);
  row.dice_std = row.dice.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
}

struct AblationJob {
  std::string label;
  ModelConfig model;
};

/// Trains one model per (job, seed) and evaluates on the shared held-out set.
inline std::vector<AblationRow> run_ablation(const std::vector<AblationJob>& jobs, const TrainConfig& base,
                                             std::size_t seeds, std::size_t workers = worker_count()) {
  if (jobs.empty()) throw Error("ablate: no values given");
  std::vector<EvalResult> out(jobs.size() * seeds);
  parallel_for(out.size(), workers, [&](std::size_t idx) {
    const auto& job = jobs[idx / seeds];
    TrainConfig cfg = base;
    cfg.seed = base.seed + idx % seeds;
    cfg.eval_every = 0;
    ToyModel m = ToyModel::init(job.model, cfg.seed);
    out[idx] = train(m, cfg).evals.back().second;
  });
  std::vector<AblationRow> rows;
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    AblationRow r;
    r.label = jobs[j].label;
    for (std::size_t s = 0; s < seeds; ++s) {
      r.dice.push_back(out[j * seeds + s].dice);
      r.fp_mass.push_back(out[j * seeds + s].fp_mass);
    }
    summarise(r);
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Jobs for one ablation axis: "K" varies the band count, "T" the diffusion
/// steps, "cosine" compares the cosine-only matcher against the full one.
inline std::vector<AblationJob> ablation_jobs(const std::string& axis, const std::vector<double>& values,
                                              const ModelConfig& base) {
  std::vector<AblationJob> jobs;
  if (axis == "cosine") {
    ModelConfig c = base;
    c.gm.cosine_only = true;
    return {{"cosine_only", c}, {"full", base}};
  }
  if (values.empty()) throw Error("ablate: no values given");
  for (double v : values) {
    ModelConfig c = base;
    if (v < 0 || v != std::floor(v)) throw Error("ablate: values must be non-negative integers");
    const auto n = static_cast<std::size_t>(v);
    if (axis == "K") {
      if (n < 1 || n > spb::kMaxBands) throw Error("ablate: K must lie in 1..5");
      c.bands = n;
    } else if (axis == "T") {
      c.gm.T = n;
    } else {
      throw Error("ablate: unknown axis '" + axis + "' (expected K, T or cosine)");
    }
    jobs.push_back({axis + "=" + std::to_string(n), c});
  }
  return jobs;
}

}  // namespace sgp::ep
