// sgp: command-line front end over the library.
//
// Errors are reported on stderr as one JSON line {"error": ..., "command": ...}.
// Unknown flags print usage and exit with status 2.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sgp/checkpoint.hpp"
#include "sgp/episodes.hpp"
#include "sgp/gm.hpp"
#include "sgp/io.hpp"
#include "sgp/oracle.hpp"
#include "sgp/props.hpp"
#include "sgp/spb.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace sgp;

namespace {

struct GmFlags {
  std::size_t t = 5;
  double sigma_a = 0.5, s = 20.0, q = 0.85;
  bool cosine_only = false;

  void add(CLI::App* app) {
    app->add_option("--t", t, "diffusion steps")->capture_default_str();
    app->add_option("--sigma-a", sigma_a, "affinity temperature")->capture_default_str();
    app->add_option("--s", s, "seed and blend sharpness")->capture_default_str();
    app->add_option("--q", q, "seeding quantile")->capture_default_str();
    app->add_flag("--cosine-only", cosine_only, "score = cosine (no seeding or diffusion)");
  }
  gm::GMConfig config() const { return {sigma_a, s, q, t, cosine_only}; }
};

struct SpectralFlags {
  std::size_t k = spb::kDefaultBands;
  double r1 = 0.25, r2 = 0.55, beta = 10.0;

  void add(CLI::App* app) {
    app->add_option("--k", k, "number of radial bands (1-5)")->capture_default_str();
    app->add_option("--r1", r1, "initial first radius")->capture_default_str();
    app->add_option("--r2", r2, "initial second radius")->capture_default_str();
    app->add_option("--beta", beta, "initial mask sharpness")->capture_default_str();
  }
};

struct ModelFlags {
  SpectralFlags spectral;
  GmFlags gm;
  std::size_t channels = 32;

  void add(CLI::App* app) {
    spectral.add(app);
    gm.add(app);
    app->add_option("--channels", channels, "encoder output channels")->capture_default_str();
  }
  ep::ModelConfig config() const {
    ep::ModelConfig c;
    c.channels = channels;
    c.bands = spectral.k;
    c.r1 = spectral.r1, c.r2 = spectral.r2, c.beta = spectral.beta;
    c.gm = gm.config();
    return c;
  }
};

// [.., h, w] slice `index` of a tensor as an [h, w] map
std::vector<double> plane(const Tensor& t, std::size_t index) {
  const std::size_t h = t.dim(t.rank() - 2), w = t.dim(t.rank() - 1);
  const auto d = t.data();
  return {d.begin() + static_cast<std::ptrdiff_t>(index * h * w),
          d.begin() + static_cast<std::ptrdiff_t>((index + 1) * h * w)};
}

void write_map(const fs::path& p, const std::vector<double>& m, std::size_t h, std::size_t w) {
  io::write_pgm(p, m, h, w);
}

// channel-norm magnitude of band k for batch item 0 of [B, C, K, h, w]
std::vector<double> band_magnitude(const Tensor& bands, std::size_t k) {
  const std::size_t C = bands.dim(1), K = bands.dim(2), hw = bands.dim(3) * bands.dim(4);
  std::vector<double> m(hw, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < hw; ++p) {
      const double v = bands[(c * K + k) * hw + p];
      m[p] += v * v;
    }
  for (double& v : m) v = std::sqrt(v);
  return m;
}

// ---------------------------------------------------------------------------

struct SpbDecompose {
  std::string in, mask, out, proto, query, pgm_dir;
  SpectralFlags spectral;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("spb-decompose", "split features into radial bands and band prototypes");
    c->add_option("--in", in, "support features [B,C,h,w] (SGT)")->required();
    c->add_option("--mask", mask, "support mask [B,H,W] (SGT)")->required();
    c->add_option("--out", out, "bands output [B,C,K,h,w]")->required();
    c->add_option("--proto", proto, "prototypes output [B,C,K]")->required();
    c->add_option("--query", query, "optional query features; their bands are written instead");
    c->add_option("--export-pgm", pgm_dir, "directory for per-band magnitude maps");
    spectral.add(c);
    c->callback([this] { run(); });
  }

  void run() const {
    const Tensor f_s = io::read_sgt(in), m = io::read_sgt(mask);
    const Tensor f_q = query.empty() ? f_s : io::read_sgt(query);
    const auto sp = spb::init_spectral_params(spectral.r1, spectral.r2, spectral.beta, spectral.k);
    const auto o = spb::spb_forward(f_s, f_q, m, sp);
    io::write_sgt(out, o.bands_q);
    io::write_sgt(proto, o.prototypes);
    if (!pgm_dir.empty()) {
      fs::create_directories(pgm_dir);
      for (std::size_t k = 0; k < spectral.k; ++k)
        write_map(fs::path(pgm_dir) / ("band" + std::to_string(k) + ".pgm"), band_magnitude(o.bands_q, k),
                  o.bands_q.dim(3), o.bands_q.dim(4));
    }
    std::cout << json{{"bands", o.bands_q.shape()}, {"prototypes", o.prototypes.shape()}}.dump() << '\n';
  }
};

struct GmMatch {
  std::string bands, protos, fq, out, dump_dir;
  GmFlags gm;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("gm-match", "geodesic matching of query bands against band prototypes");
    c->add_option("--bands", bands, "query bands [B,C,K,h,w]")->required();
    c->add_option("--protos", protos, "prototypes [B,C,K]")->required();
    c->add_option("--fq", fq, "raw query features [B,C,h,w]")->required();
    c->add_option("--out", out, "matched features [B,2C+K,h,w]")->required();
    c->add_option("--dump-maps", dump_dir, "directory for cos/seed/geo/score/weight maps");
    gm.add(c);
    c->callback([this] { run(); });
  }

  void run() const {
    const Tensor b = io::read_sgt(bands), p = io::read_sgt(protos), f = io::read_sgt(fq);
    require_rank(b, 5, "gm-match --bands");
    auto gp = gm::GMParams::init(b.dim(1), b.dim(2));
    gp.config = gm.config();
    const auto o = gm::gm_forward(f, b, p, gp);
    io::write_sgt(out, o.matched);
    if (!dump_dir.empty()) {
      fs::create_directories(dump_dir);
      const std::size_t K = b.dim(2), h = b.dim(3), w = b.dim(4);
      for (std::size_t k = 0; k < K; ++k) {
        const std::string sfx = "_k" + std::to_string(k) + ".pgm";
        write_map(fs::path(dump_dir) / ("cos" + sfx), plane(o.cos, k), h, w);
        write_map(fs::path(dump_dir) / ("seed" + sfx), plane(o.seed, k), h, w);
        write_map(fs::path(dump_dir) / ("geo" + sfx), plane(o.geo, k), h, w);
        write_map(fs::path(dump_dir) / ("score" + sfx), plane(o.score, k), h, w);
        write_map(fs::path(dump_dir) / ("weight" + sfx), plane(o.weights, k), h, w);
      }
    }
    std::cout << json{{"matched", o.matched.shape()}}.dump() << '\n';
  }
};

struct OracleFixture {
  std::uint64_t seed = 0;
  std::size_t h = 24, w = 24, gap = 2;
  std::string out;
  GmFlags gm;

  void add(CLI::App& app) {
    auto* o = app.add_subcommand("oracle", "reference computations");
    o->require_subcommand(1);
    auto* c = o->add_subcommand("fixture", "two-cluster fixture with cosine, heat and Dijkstra maps");
    c->add_option("--seed", seed, "fixture seed")->capture_default_str();
    c->add_option("--out", out, "output directory")->required();
    c->add_option("--height", h, "height")->capture_default_str();
    c->add_option("--width", w, "width")->capture_default_str();
    c->add_option("--gap", gap, "width of the low-affinity gap")->capture_default_str();
    gm.add(c);
    c->callback([this] { run(); });
  }

  void run() const {
    const auto fx = oracle::two_cluster_fixture(h, w, gap, seed);
    const auto maps = props::single_band_maps(fx.feature, fx.prototype, gm.config());
    const Tensor dist = oracle::dijkstra_geo(fx.feature, fx.core);
    Tensor neg = dist * -1.0;
    const fs::path dir(out);
    fs::create_directories(dir);
    io::write_sgt(dir / "feature.sgt", fx.feature);
    io::write_sgt(dir / "cos.sgt", maps.cos.reshaped(Shape{h, w}));
    io::write_sgt(dir / "heat.sgt", maps.geo.reshaped(Shape{h, w}));
    io::write_sgt(dir / "dijkstra.sgt", dist);
    write_map(dir / "cos.pgm", maps.cos.vec(), h, w);
    write_map(dir / "heat.pgm", maps.geo.vec(), h, w);
    write_map(dir / "dijkstra.pgm", neg.vec(), h, w);
    auto at = [&](const Tensor& m, oracle::Pixel p) { return m[p.i * w + p.j]; };
    json j{{"seed", seed},
           {"a", {fx.a.i, fx.a.j}},
           {"b", {fx.b.i, fx.b.j}},
           {"cos", {{"a", at(maps.cos, fx.a)}, {"b", at(maps.cos, fx.b)}}},
           {"heat", {{"a", at(maps.geo, fx.a)}, {"b", at(maps.geo, fx.b)}}},
           {"dijkstra", {{"a", dist.at(fx.a.i, fx.a.j)}, {"b", dist.at(fx.b.i, fx.b.j)}}}};
    j["cos_prefers_b"] = at(maps.cos, fx.b) > at(maps.cos, fx.a);
    j["heat_prefers_a"] = at(maps.geo, fx.a) > at(maps.geo, fx.b);
    std::ofstream(dir / "fixture.json") << j.dump(2) << '\n';
    std::cout << j.dump() << '\n';
  }
};

json iter_json(const ep::IterLog& l) {
  return {{"iter", l.iter}, {"L_prim", l.prim}, {"L_b", l.b},   {"L_align", l.align},
          {"L_total", l.total}, {"lr", l.lr},   {"r1", l.r1}, {"r2", l.r2}};
}

struct TrainToy {
  ep::TrainConfig train;
  ModelFlags model;
  std::uint64_t seed = 0;
  std::string out = "ckpt";
  bool quiet = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("train-toy", "train the toy model on synthetic phantoms");
    c->add_option("--iters", train.iters, "iterations")->capture_default_str();
    c->add_option("--seed", seed, "master seed")->capture_default_str();
    c->add_option("--lr", train.lr, "learning rate")->capture_default_str();
    c->add_option("--momentum", train.momentum, "SGD momentum")->capture_default_str();
    c->add_option("--wd", train.weight_decay, "weight decay")->capture_default_str();
    c->add_option("--gamma", train.gamma, "learning-rate decay factor")->capture_default_str();
    c->add_option("--step", train.step, "iterations between decays")->capture_default_str();
    c->add_option("--eval-every", train.eval_every, "held-out Dice interval (0: end only)")->capture_default_str();
    c->add_option("--eval-episodes", train.eval_episodes, "held-out phantoms")->capture_default_str();
    c->add_option("--out", out, "checkpoint directory")->capture_default_str();
    c->add_flag("--quiet", quiet, "do not echo metrics to stdout");
    model.add(c);
    c->callback([this] { run(); });
  }

  void run() {
    train.seed = seed;
    ep::ToyModel m = ep::ToyModel::init(model.config(), seed);
    const fs::path dir(out);
    fs::create_directories(dir);
    std::ofstream metrics(dir / "metrics.jsonl"), radii(dir / "radii.csv");
    if (!metrics || !radii) throw io::IoError("cannot write logs under " + dir.string());
    radii << "iter,r1,r2\n";
    {
      const auto [r1, r2] = ep::current_radii(m);
      radii << 0 << ',' << json(r1).dump() << ',' << json(r2).dump() << '\n';
    }
    auto on_iter = [&](const ep::IterLog& l) {
      const std::string line = iter_json(l).dump();
      metrics << line << '\n';
      radii << l.iter << ',' << json(l.r1).dump() << ',' << json(l.r2).dump() << '\n';
      if (!quiet) std::cout << line << '\n';
    };
    auto on_eval = [&](std::size_t it, const ep::EvalResult& e) {
      const std::string line = json{{"iter", it}, {"dice", e.dice}, {"fp_mass", e.fp_mass}}.dump();
      metrics << line << '\n';
      if (!quiet) std::cout << line << '\n';
    };
    try {
      ep::train(m, train, on_iter, on_eval);
    } catch (const ep::TrainingAborted& a) {
      ckpt::save(m.params, dir / "abort");
      metrics << json{{"abort", a.what()}, {"last", iter_json(a.last)}}.dump() << '\n';
      throw;
    }
    ckpt::save(m.params, dir);
  }
};

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> v;
  std::stringstream ss(csv);
  for (std::string item; std::getline(ss, item, ',');) {
    std::size_t used = 0;
    double x = 0.0;
    try {
      x = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw Error("ablate: cannot parse value '" + item + "'");
    v.push_back(x);
  }
  return v;
}

struct Ablate {
  std::string axis = "T", values = "0,1,3,5,7";
  std::size_t seeds = 3;
  std::uint64_t seed = 0;
  ep::TrainConfig train;
  ModelFlags model;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("ablate", "train one model per (value, seed) and report held-out Dice");
    c->add_option("--axis", axis, "K, T or cosine")->capture_default_str();
    c->add_option("--values", values, "comma-separated values (ignored for cosine)")->capture_default_str();
    c->add_option("--seeds", seeds, "seeds per value")->capture_default_str();
    c->add_option("--seed", seed, "first seed")->capture_default_str();
    c->add_option("--iters", train.iters, "iterations per run")->capture_default_str();
    c->add_option("--lr", train.lr, "learning rate")->capture_default_str();
    c->add_option("--eval-episodes", train.eval_episodes, "held-out phantoms")->capture_default_str();
    model.add(c);
    c->callback([this] { run(); });
  }

  void run() {
    if (seeds < 1) throw Error("ablate: need at least one seed");
    train.seed = seed;
    const auto jobs = ep::ablation_jobs(axis, axis == "cosine" ? std::vector<double>{} : parse_values(values),
                                        model.config());
    for (const auto& r : ep::run_ablation(jobs, train, seeds))
      std::cout << json{{"label", r.label},       {"dice_mean", r.dice_mean}, {"dice_std", r.dice_std},
                        {"fp_mass_mean", r.fp_mean}, {"dice", r.dice},         {"fp_mass", r.fp_mass}}
                       .dump()
                << '\n';
  }
};

struct Props {
  bool timing = false;
  int failures = 0;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("props", "run the invariant suite");
    c->add_flag("--timing", timing, "append wall-clock seconds (output no longer reproducible)");
    c->callback([this] { run(); });
  }

  void run() {
    for (const auto& check : props::all_checks()) {
      const auto r = props::timed(check);
      std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << "  " << r.detail;
      if (timing) std::printf("  (%.2fs)", r.seconds), std::fflush(stdout);
      std::cout << '\n';
      failures += !r.passed;
    }
  }
};

struct Gradcheck {
  ModelFlags model;
  std::uint64_t seed = 0;
  ag::GradcheckOptions opt{.eps = ep::kEndToEndEps};
  double tol = 1e-4;
  bool failed = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("gradcheck", "finite-difference check of the full model on a 16x16 episode");
    c->add_option("--seed", seed, "model and episode seed")->capture_default_str();
    c->add_option("--eps", opt.eps, "central-difference step")->capture_default_str();
    c->add_option("--max-entries", opt.max_entries_per_param, "entries per parameter (0: all)")->capture_default_str();
    c->add_option("--tol", tol, "relative error tolerance")->capture_default_str();
    model.add(c);
    c->callback([this] { run(); });
  }

  void run() {
    const auto rep = ep::episode_gradcheck(model.config(), seed, opt);
    for (const auto& e : rep.entries)
      std::cout << json{{"param", e.name},
                        {"checked", e.checked},
                        {"max_rel_error", e.max_rel_error},
                        {"max_abs_grad", e.max_abs_grad},
                        {"pass", e.max_rel_error <= tol}}
                       .dump()
                << '\n';
    failed = !rep.passed(tol);
  }
};

struct ExportMaps {
  std::uint64_t seed = 0;
  std::string out, ckpt_dir;
  ModelFlags model;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("export-maps", "per-band cosine activations overlaid on a phantom query");
    c->add_option("--seed", seed, "phantom seed (also the init seed without --ckpt)")->capture_default_str();
    c->add_option("--out", out, "output directory")->required();
    c->add_option("--ckpt", ckpt_dir, "checkpoint to load");
    model.add(c);
    c->callback([this] { run(); });
  }

  void run() const {
    ep::ToyModel m = ep::ToyModel::init(model.config(), seed);
    if (!ckpt_dir.empty()) ckpt::load(m.params, ckpt_dir);
    const auto e = ep::gen_phantom(ep::PhantomSpec{}, seed);
    ag::Tape t;
    const auto f = ep::episode_forward(t, m, e.I_s, e.M_s.foreground(), e.I_q);
    const Tensor& cos = f.fg.gm.cos.value();  // [1, K, h, w]
    const std::size_t K = cos.dim(1), H = e.I_q.dim(2), W = e.I_q.dim(3);
    const Tensor up = resize_bilinear(cos, H, W);
    const fs::path dir(out);
    fs::create_directories(dir);
    auto norm = [](std::vector<double> v) {
      const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
      const double a = *lo, r = *hi - *lo;
      for (double& x : v) x = r > 0 ? (x - a) / r : 0.0;
      return v;
    };
    const auto query = norm(e.I_q.vec());
    write_map(dir / "support.pgm", e.I_s.vec(), H, W);
    write_map(dir / "query.pgm", e.I_q.vec(), H, W);
    write_map(dir / "support_mask.pgm", e.M_s.foreground().vec(), H, W);
    const std::vector<std::string> names =
        K == 3 ? std::vector<std::string>{"low", "mid", "high"} : std::vector<std::string>{};
    json files = json::array();
    for (std::size_t k = 0; k < K; ++k) {
      auto act = norm(plane(up, k));
      for (std::size_t p = 0; p < act.size(); ++p) act[p] = 0.4 * query[p] + 0.6 * act[p];
      const std::string name = "band_" + (names.empty() ? "k" + std::to_string(k) : names[k]) + ".pgm";
      write_map(dir / name, act, H, W);
      files.push_back(name);
    }
    std::cout << json{{"maps", files}}.dump() << '\n';
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spectral bands and geodesic matching for few-shot segmentation prototypes"};
  app.require_subcommand(1);
  SpbDecompose spb_cmd;
  GmMatch gm_cmd;
  OracleFixture oracle_cmd;
  TrainToy train_cmd;
  Ablate ablate_cmd;
  Props props_cmd;
  Gradcheck grad_cmd;
  ExportMaps export_cmd;
  spb_cmd.add(app);
  gm_cmd.add(app);
  oracle_cmd.add(app);
  train_cmd.add(app);
  ablate_cmd.add(app);
  props_cmd.add(app);
  grad_cmd.add(app);
  export_cmd.add(app);

  const std::string command = argc > 1 ? argv[1] : "";
  auto fail = [&](const std::string& msg) {
    std::cerr << json{{"error", msg}, {"command", command}}.dump() << '\n';
  };
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help();
    fail(e.what());
    return 2;
  } catch (const std::exception& e) {
    fail(e.what());
    return 1;
  }
  if (props_cmd.failures || grad_cmd.failed) return 1;
  return 0;
}
