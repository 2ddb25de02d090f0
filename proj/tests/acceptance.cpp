// Acceptance suite: runs the nine criteria at their stated tolerances and
// prints one PASS/FAIL line per criterion. Arguments select a subset, e.g.
// `acceptance 1 4 5`. Artifacts of the long runs land in ACCEPTANCE_WORKDIR.

#include <boost/math/distributions/students_t.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "synstitch/baselines.hpp"
#include "synstitch/diffusion.hpp"
#include "synstitch/ism.hpp"
#include "synstitch/metrics.hpp"
#include "synstitch/phantom.hpp"
#include "synstitch/pipeline.hpp"
#include "synstitch/sspgm.hpp"
#include "synstitch/torch_utils.hpp"

using namespace synstitch;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), format, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const fs::path workdir = ACCEPTANCE_WORKDIR;

// ---------------------------------------------------------------------------
// 1. Diffusion algebra

Outcome diffusion_algebra() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto s = make_schedule(200, 5e-4, 0.1);
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uniform;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    auto img = torch::empty({1, 1, 16, 16}, torch::kFloat64);
    auto eps = torch::empty({1, 1, 16, 16}, torch::kFloat64);
    auto ia = img.accessor<double, 4>();
    auto ea = eps.accessor<double, 4>();
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        ia[0][0][y][x] = uniform(rng);
        ea[0][0][y][x] = normal(rng);
      }
    const int t = static_cast<int>(rng() % 200);
    const auto xt = forward_diffuse(img, t, eps, s);
    // Inversion with alpha_bar recomputed as the running product of (1 - beta).
    double ab = 1.0;
    for (int k = 0; k <= t; ++k) ab *= 1.0 - s.beta[k];
    const auto back = (xt - std::sqrt(1 - ab) * eps) / std::sqrt(ab);
    worst = std::max(worst, (back - img).abs().max().item<double>());
  }
  bool invariants = true;
  for (int steps : {1, 10, 200, 1000}) {
    const auto sc = make_schedule(steps, 1e-4, 0.02);
    invariants &= sc.steps() == steps;
    double ab = 1.0;
    for (int t = 0; t < steps; ++t) {
      const double expected_beta = steps == 1 ? 1e-4 : 1e-4 + (0.02 - 1e-4) * t / (steps - 1.0);
      ab *= 1.0 - expected_beta;
      invariants &= std::abs(sc.beta[t] - expected_beta) < 1e-15 && std::abs(sc.alpha[t] - (1 - expected_beta)) < 1e-15 &&
                    std::abs(sc.alpha_bar[t] - ab) < 1e-12 && sc.alpha_bar[t] > 0 && sc.alpha_bar[t] < 1 &&
                    (t == 0 || sc.alpha_bar[t] < sc.alpha_bar[t - 1]);
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-6 && invariants && secs < 5, fmt("max inversion error %.3g, schedule invariants %s, %.1f s", worst,
                                                       invariants ? "hold" : "VIOLATED", secs)};
}

// ---------------------------------------------------------------------------
// 2. Gradient check

Outcome gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  torch::manual_seed(21);
  UNetConfig cfg;
  cfg.channels = {4, 8};
  cfg.groups = 2;
  cfg.embedding_multiplier = 2;
  UNet net(cfg);
  net->to(torch::kFloat64);
  {
    torch::NoGradGuard ng;
    for (auto& p : net->parameters()) p.normal_(0.0, 0.3);
  }
  const auto s = make_schedule(20, 1e-4, 0.02);
  const auto batch = torch::rand({2, 1, 8, 8}, torch::kFloat64);
  NoisePredictor pred = [&](const torch::Tensor& x, const torch::Tensor& t) { return net->forward(x, t); };
  auto loss_at = [&] {
    auto gen = make_generator(22);
    return dm_loss(pred, batch, s, gen);
  };
  net->zero_grad();
  loss_at().backward();
  auto params = net->parameters();
  std::mt19937_64 rng(23);
  double worst = 0.0;
  const double h = 1e-3;
  for (int i = 0; i < 50; ++i) {
    const std::size_t pi = rng() % params.size();
    const long idx = static_cast<long>(rng() % params[pi].numel());
    auto flat = params[pi].view(-1);
    const double analytic = params[pi].grad().view(-1)[idx].item<double>();
    torch::NoGradGuard ng;
    const double orig = flat[idx].item<double>();
    flat[idx] = orig + h;
    const double up = loss_at().item<double>();
    flat[idx] = orig - h;
    const double down = loss_at().item<double>();
    flat[idx] = orig;
    const double numeric = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6}));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-3 && secs < 60, fmt("max relative error %.3g over 50 parameters, %.1f s", worst, secs)};
}

// ---------------------------------------------------------------------------
// 3. Zero-conv identity and frozen base

Outcome zero_conv_identity() {
  const auto t0 = std::chrono::steady_clock::now();
  torch::manual_seed(31);
  UNet base(UNetConfig{});
  {
    torch::NoGradGuard ng;
    for (auto& p : base->parameters()) p.add_(torch::randn_like(p) * 0.05);
  }
  ControlNet cn(base);
  auto gen = make_generator(32);
  double worst = 0.0;
  {
    torch::NoGradGuard ng;
    for (int i = 0; i < 20; ++i) {
      const auto x = torch::randn({1, 1, 32, 32}, gen);
      const auto t = torch::randint(0, 200, {1}, gen, torch::kLong);
      const auto c = torch::rand({1, 1, 32, 32}, gen);
      worst = std::max(worst, (cn->forward(x, t, c) - base->forward(x, t)).abs().max().item<double>());
    }
  }
  const auto before = parameter_hash(*base);
  std::vector<Image2D> frames;
  for (int s = 0; s < 2; ++s) {
    for (auto& f : gen_subject(33 + s, 8, 32).frames) frames.push_back(f);
  }
  ControlNetTrainConfig cfg;
  cfg.steps = 100;
  cfg.batch = 8;
  cfg.train_ranges = {{-16, 16}, {-std::numbers::pi / 12, std::numbers::pi / 12}, {0.9, 1.1}};
  auto state = make_train_state(cn->parameters(), 1e-3, 34);
  train_controlnet(cn, to_tensor(frames), make_schedule(200, 5e-4, 0.1), cfg, state);
  const bool frozen = parameter_hash(*base) == before;
  const double secs = seconds_since(t0);
  return {worst <= 1e-5 && frozen && secs < 120,
          fmt("max |ControlNet - base| %.3g over 20 inputs, base hash %s after %ld steps, %.1f s", worst,
              frozen ? "unchanged" : "CHANGED", state.step, secs)};
}

// ---------------------------------------------------------------------------
// 4. Geometry

Outcome geometry() {
  const auto t0 = std::chrono::steady_clock::now();
  const int size = 64;
  const Point2 c = image_center(size, size);
  const AffineRanges ranges{{-8, 8}, {-std::numbers::pi / 24, std::numbers::pi / 24}, {0.9, 1.1}};
  std::mt19937_64 rng(41);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const auto img = oracle::blur(gen_subject(42 + i, 1, size).frames.front(), 2.0);
    const auto a = sample_affine(ranges, rng, c);
    const auto b = sample_affine(ranges, rng, c);
    const auto two_step = warp(warp(img, a), b);
    const auto one_step = warp(img, compose(b, a));
    const auto round_trip = warp(warp(img, a), a.inverse());
    auto inside = [&](Point2 q) { return q.x >= 1 && q.y >= 1 && q.x <= size - 2 && q.y <= size - 2; };
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const Point2 p{double(x), double(y)};
        // Compare only where every intermediate sample stays 1 px inside the grid (no zero-fill involved).
        const Point2 q1 = b.inverse().apply(p);
        if (inside(q1) && inside(a.inverse().apply(q1))) {
          worst = std::max(worst, double(std::abs(two_step(y, x) - one_step(y, x))));
        }
        if (inside(a.apply(p))) worst = std::max(worst, double(std::abs(round_trip(y, x) - img(y, x))));
      }
  }

  bool masks = true;
  const auto fov = gen_fov_mask(size, size, FovSpec::for_size(size));
  const auto img = gen_subject(60, 1, size).frames.front();
  for (int i = 0; i < 20; ++i) {
    const auto a = sample_affine(ranges, rng, c);
    const auto wa = warp(fov, a);
    for (auto v : wa.pixels()) masks &= v == 0 || v == 1;
    masks &= mask_and(fov, wa) == mask_and(wa, fov);
    masks &= mask_and(fov, mask_and(fov, wa)) == mask_and(fov, wa);
    masks &= mask_or(fov, mask_and(fov, wa)) == fov;
    const auto cond = condition_train(img, a);
    masks &= cond.mask == mask_and(threshold_mask(img), wa);
    masks &= cond.image == multiply(img, cond.mask);
    const auto inf = condition_infer(img, a);
    masks &= inf.image == multiply(warp(img, a), inf.mask);
  }
  masks &= warp(fov, AffineTransform::identity(c)) == fov;
  masks &= threshold_mask(multiply(img, fov)) == mask_and(threshold_mask(img), fov);
  // Integer translation of a mask is an array shift.
  const auto shifted = warp(fov, params_to_matrix({3, -2}, c));
  bool shift_ok = true;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const int sx = x - 3, sy = y + 2;
      const std::uint8_t expected = (sx >= 0 && sy >= 0 && sx < size && sy < size) ? fov(sy, sx) : 0;
      shift_ok &= shifted(y, x) == expected;
    }
  masks &= shift_ok;
  const double secs = seconds_since(t0);
  return {worst <= 0.05 && masks && secs < 10,
          fmt("max composition/inverse error %.4f on 20 transform pairs, mask algebra %s, %.1f s", worst,
              masks ? "exact" : "VIOLATED", secs)};
}

// ---------------------------------------------------------------------------
// 5. Metric oracles

Outcome metric_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(51);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const int h = 7 + static_cast<int>(rng() % 3), w = 7 + static_cast<int>(rng() % 3);
    const auto a = oracle::random_image(h, w, rng), b = oracle::random_image(h, w, rng);
    worst = std::max(worst, std::abs(mse(a, b) - oracle::mse(a, b)));
    worst = std::max(worst, std::abs(ssim(a, b) - oracle::ssim(a, b, 7)));
    worst = std::max(worst, std::abs(ncc(a, b) - oracle::ncc(a, b)));
    std::uniform_real_distribution<double> pos(0, 9), par(-1, 1);
    std::vector<Point2> m, f;
    for (int k = 0; k < 5; ++k) {
      m.push_back({pos(rng), pos(rng)});
      f.push_back({pos(rng), pos(rng)});
    }
    const auto est = params_to_matrix({par(rng), par(rng), 0.2 * par(rng), 1 + 0.1 * par(rng), 1 + 0.1 * par(rng), 0},
                                      {4, 4});
    worst = std::max(worst, std::abs(keypoint_rmse(m, f, est) - oracle::kp_rmse(m, f, est.matrix())));
  }
  // d = [1,1,1,1,2]: mean 1.2, sd sqrt(0.2), t = 1.2 / (sqrt(0.2) / sqrt(5)) = 6, dof 4.
  const std::vector<double> x5{2, 3, 4, 5, 7}, y5{1, 2, 3, 4, 5};
  const auto r5 = paired_t_test(x5, y5);
  const boost::math::students_t t4(4);
  const double p5 = 2 * boost::math::cdf(boost::math::complement(t4, 6.0));
  // d = [1,3]: t = 2 at 1 dof, p = 2 (1 - (atan(t) + pi/2) / pi).
  const std::vector<double> x2{1, 3}, y2{0, 0};
  const auto r2 = paired_t_test(x2, y2);
  const double p2 = 2 * (1 - (std::atan(2.0) + std::numbers::pi / 2) / std::numbers::pi);
  const double t_err = std::max({std::abs(r5.t - 6.0), std::abs(r5.p - p5), std::abs(r2.t - 2.0), std::abs(r2.p - p2)});
  const double secs = seconds_since(t0);
  return {worst <= 1e-9 && t_err <= 1e-4 && secs < 10,
          fmt("max metric deviation %.3g over 200 cases, t-test deviation %.3g (p=%.4f, %.4f), %.1f s", worst, t_err,
              r5.p, r2.p, secs)};
}

// ---------------------------------------------------------------------------
// 6. RANSAC recovery

Outcome ransac_recovery() {
  const auto t0 = std::chrono::steady_clock::now();
  int recovered = 0;
  const int outliers = static_cast<int>(std::ceil(0.3 / 0.7 * 20));
  for (int trial = 0; trial < 100; ++trial) {
    std::mt19937_64 rng(6000 + trial);
    std::uniform_real_distribution<double> pos(0, 63), par(-1, 1);
    const Point2 c{31.5, 31.5};
    const AffineParams p{8 * par(rng), 8 * par(rng), 0.26 * par(rng), 1 + 0.1 * par(rng), 1 + 0.1 * par(rng), 0.05 * par(rng)};
    const auto truth = params_to_matrix(p, c);
    std::vector<Correspondence> cs;
    for (int i = 0; i < 20; ++i) {
      const Point2 q{pos(rng), pos(rng)};
      cs.push_back({q, truth.apply(q), 1.0});
    }
    for (int i = 0; i < outliers; ++i) cs.push_back({{pos(rng), pos(rng)}, {pos(rng), pos(rng)}, 1.0});
    std::shuffle(cs.begin(), cs.end(), rng);
    RansacConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(trial);
    const auto est = matrix_to_params(ransac_affine(cs, cfg, c).matrix(), c);
    const double err = std::max({std::abs(est.tx - p.tx), std::abs(est.ty - p.ty), std::abs(est.theta - p.theta),
                                 std::abs(est.sx - p.sx), std::abs(est.sy - p.sy), std::abs(est.shear - p.shear)});
    if (err <= 1e-3) ++recovered;
  }
  const double secs = seconds_since(t0);
  return {recovered >= 99 && secs < 30,
          fmt("%d/100 trials within 1e-3 (20 inliers + %d outliers), %.1f s", recovered, outliers, secs)};
}

// ---------------------------------------------------------------------------
// 7. ISM learning on warp-only pairs

struct KeyedPairs {
  std::vector<StitchSample> samples;
  std::vector<std::vector<Point2>> keypoints;  // landmarks of each sample's moving frame
};

KeyedPairs warp_only_pairs(int first_subject, int n_subjects, int count, int size, std::uint64_t seed) {
  std::vector<Image2D> images;
  std::vector<std::vector<Point2>> kps;
  for (int s = first_subject; s < first_subject + n_subjects; ++s) {
    auto sub = gen_subject(7000 + s, 40, size);
    for (std::size_t f = 0; f < sub.frames.size(); ++f) {
      images.push_back(sub.frames[f]);
      kps.push_back(sub.landmarks[f]);
    }
  }
  images.resize(count);
  kps.resize(count);
  PairGenConfig cfg;
  cfg.warp_only = true;
  KeyedPairs out{gen_stitch_pairs(nullptr, nullptr, images, {}, cfg, seed), kps};
  return out;
}

std::vector<Point2> mapped(const std::vector<Point2>& pts, const AffineTransform& a) {
  std::vector<Point2> out;
  for (auto p : pts) out.push_back(a.apply(p));
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome ism_learning() {
  const auto t0 = std::chrono::steady_clock::now();
  const int size = 64;
  // 500 pairs: 400 train and 50 validation from subjects 0-11, 50 held out from subjects 12-13.
  auto fit = warp_only_pairs(0, 12, 450, size, 71);
  const auto test = warp_only_pairs(12, 2, 50, size, 72);
  const std::vector<StitchSample> train_s(fit.samples.begin(), fit.samples.begin() + 400);
  const std::vector<StitchSample> val_s(fit.samples.begin() + 400, fit.samples.end());
  torch::manual_seed(73);
  IsmConfig icfg;
  icfg.size = size;
  RegressorNet net(icfg);
  IsmTrainConfig tcfg;
  tcfg.epochs = ACCEPTANCE_ISM_EPOCHS;
  tcfg.batch = 16;
  tcfg.lr = 1e-3;
  tcfg.patience = 1000;
  auto state = make_ism_state(net, tcfg.lr, 74);
  train_ism(net, to_pair_tensors(train_s), to_pair_tensors(val_s), tcfg, state);
  restore_best(net, state);

  std::vector<double> rmse, identity;
  for (std::size_t i = 0; i < test.samples.size(); ++i) {
    const auto& s = test.samples[i];
    const auto gt = mapped(test.keypoints[i], s.gt_affine);
    rmse.push_back(keypoint_rmse(test.keypoints[i], gt, ism_forward(net, s.moving, s.fixed).transform));
    identity.push_back(keypoint_rmse(test.keypoints[i], gt, AffineTransform::identity()));
  }
  const double med = median(rmse);
  const double mean_rmse = std::accumulate(rmse.begin(), rmse.end(), 0.0) / rmse.size();
  const double mean_id = std::accumulate(identity.begin(), identity.end(), 0.0) / identity.size();
  const double reduction = 1.0 - mean_rmse / mean_id;
  const double secs = seconds_since(t0);
  return {med <= 1.5 && reduction >= 0.5 && secs <= 15 * 60,
          fmt("median keypoint RMSE %.3f px (identity %.3f), mean reduction %.1f%%, %d epochs, %.0f s", med,
              median(identity), 100 * reduction, state.epoch, secs)};
}

// ---------------------------------------------------------------------------
// 9. End-to-end desk32 pipeline (run before 8, which reuses its ControlNet)

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(SYNSTITCH_CLI) + " " + args + " >> " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> tree_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    const auto name = e.path().filename();
    if (!e.is_regular_file() || name == "run.json" || name == "config.json") continue;
    std::ifstream is(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    out[fs::relative(e.path(), root).string()] = ss.str();
  }
  return out;
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  return json::parse(is);
}

std::string first_lines(const fs::path& csv, int n) {
  std::ifstream is(csv);
  std::string out, line;
  for (int i = 0; i < n && std::getline(is, line); ++i) out += line + "\n";
  return out;
}

const fs::path e2e_dir = workdir / "desk32";

Outcome end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path rerun = workdir / "desk32_rerun";
  fs::remove_all(e2e_dir);
  fs::remove_all(rerun);
  fs::create_directories(workdir);
  const fs::path log = workdir / "desk32.log";
  fs::remove(log);
  const std::string base = " --profile desk32 --seed 1 --out " + e2e_dir.string();
  for (const char* cmd : {"phantom-gen", "train-diffusion", "train-controlnet", "gen-pairs", "train-ism", "eval", "report"}) {
    const int code = cli(std::string(cmd) + base, log);
    if (code != 0) return {false, fmt("`%s` exited with %d (log: %s)", cmd, code, log.c_str())};
  }
  const double main_secs = seconds_since(t0);
  const auto summary_path = e2e_dir / "report" / "summary.md";
  std::ifstream summary(summary_path);
  std::stringstream ss;
  ss << summary.rdbuf();
  const bool summary_ok = ss.str().find("ism-global") != std::string::npos && ss.str().find("| MSE") != std::string::npos;
  const double consistency = read_json(e2e_dir / "pairs" / "train" / "pairs_manifest.json").at("consistency").at("mean_first_32").get<double>();
  const double fov_mass = read_json(e2e_dir / "ckpt" / "diffusion" / "samples.json").at("fov_mass").get<double>();

  // Determinism: a second run with the same seed reproduces the dataset and, from the
  // same checkpoints, the pairs, the ISM weights and the evaluation. The first 50
  // training steps of both generative stages are re-run and their losses compared.
  const std::string again = " --profile desk32 --seed 1 --out " + rerun.string();
  std::string diverged;  // first stage whose rerun differs
  const auto check = [&](bool same, const std::string& stage) {
    if (diverged.empty() && !same) diverged = stage;
    return diverged.empty();
  };
  check(cli("phantom-gen" + again, log) == 0 && tree_contents(e2e_dir / "data") == tree_contents(rerun / "data"),
        "phantom-gen");
  const std::string short_run = " --set diffusion.train_steps=50 --set diffusion.check_samples=0 --set controlnet.train_steps=50";
  // Each stage restarts from the first run's upstream checkpoint so both see the same inputs.
  for (const std::string stage : {"diffusion", "controlnet"}) {
    if (check(true, "") && cli("train-" + stage + again + short_run, log) == 0) {
      const auto a = first_lines(e2e_dir / "ckpt" / stage / "loss.csv", 6), b = first_lines(rerun / "ckpt" / stage / "loss.csv", 6);
      check(!a.empty() && a == b, "train-" + stage);
    } else {
      check(false, "train-" + stage);
    }
    fs::remove_all(rerun / "ckpt" / stage);
    fs::copy(e2e_dir / "ckpt" / stage, rerun / "ckpt" / stage, fs::copy_options::recursive);
  }
  for (const std::string cmd : {"gen-pairs", "train-ism", "eval"}) {
    if (check(true, "")) check(cli(cmd + again, log) == 0, cmd);
  }
  check(tree_contents(e2e_dir / "pairs") == tree_contents(rerun / "pairs"), "gen-pairs");
  for (const std::string b : {"ism-global", "ism-pairenc"}) {
    check(tree_contents(e2e_dir / "ckpt" / b) == tree_contents(rerun / "ckpt" / b), "train-ism " + b);
  }
  check(tree_contents(e2e_dir / "eval") == tree_contents(rerun / "eval"), "eval");
  const bool deterministic = diverged.empty();
  const std::string rerun_note = deterministic ? "identical" : "DIFFERS at " + diverged;
  const double secs = seconds_since(t0);
  return {summary_ok && consistency <= 0.15 && fov_mass >= 0.95 && deterministic && main_secs <= 60 * 60,
          fmt("summary %s, outpaint consistency %.4f (32 samples), diffusion FOV mass %.2f%%, rerun %s, pipeline %.0f s "
              "(%.0f s with rerun)",
              summary_ok ? "emitted" : "MISSING", consistency, 100 * fov_mass,
              rerun_note.c_str(), main_secs, secs)};
}

// ---------------------------------------------------------------------------
// 8. Ordering against the intensity baseline on adversarial pairs

Outcome paper_ordering() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg_path = e2e_dir / "ckpt" / "controlnet" / "meta.json";
  if (!fs::exists(cfg_path)) return {false, "needs the desk32 pipeline artifacts from criterion 9"};
  const auto c = resolve_config(json::object(), {{"profile", "desk32"}, {"seed", 1}, {"paths", {{"out_dir", e2e_dir.string()}}}});
  auto base = load_diffusion(diffusion_dir(c));
  auto cn = load_controlnet(controlnet_dir(c), base.net);

  // Synthetic training pairs from the trained outpainter, sources from the train and val subjects.
  const auto manifest = read_manifest(c.data_dir());
  std::vector<std::string> sources;
  auto images = load_role_images(c, Role::curated, manifest.train, &sources);
  std::vector<std::string> val_sources;
  auto val_images = load_role_images(c, Role::curated, manifest.val, &val_sources);
  auto pcfg = pair_gen_config(c);
  const auto train_s = gen_stitch_pairs(&cn.net, &cn.schedule, images, sources, pcfg, 81);
  const auto val_s = gen_stitch_pairs(&cn.net, &cn.schedule, val_images, val_sources, pcfg, 82);

  torch::manual_seed(83);
  RegressorNet net(ism_config(c, Backbone::global));
  IsmTrainConfig tcfg = ism_train_config(c);
  auto state = make_ism_state(net, tcfg.lr, 84);
  train_ism(net, to_pair_tensors(train_s), to_pair_tensors(val_s), tcfg, state);
  restore_best(net, state);

  // 30 adversarial pairs: same FOV in both frames, content moved by at least 4 px (identity keypoint RMSE).
  const auto subjects = read_subjects(c.data_dir(), manifest, manifest.test);
  std::vector<EvalPairRef> refs;
  for (const auto& [id, s] : subjects) {
    const int nf = static_cast<int>(s.frames.size());
    for (int i = 0; i < nf; ++i)
      for (int j = 0; j < nf; ++j)
        if (i != j && std::abs(i - j) < 20) refs.push_back({id, i, j});
  }
  std::mt19937_64 rng(85);
  std::shuffle(refs.begin(), refs.end(), rng);
  const auto pairs = make_eval_pairs(subjects, refs, 30, 4.0);
  if (pairs.size() < 30) return {false, fmt("only %zu adversarial pairs available", pairs.size())};

  const auto icfg = intensity_config(c);
  std::vector<double> ism_rmse, int_rmse;
  for (const auto& p : pairs) {
    ism_rmse.push_back(keypoint_rmse(p.keypoints_moving, p.keypoints_fixed, ism_forward(net, p.moving, p.fixed).transform));
    int_rmse.push_back(keypoint_rmse(p.keypoints_moving, p.keypoints_fixed, intensity_register(p.moving, p.fixed, icfg)));
  }
  const auto t = paired_t_test(ism_rmse, int_rmse);
  const double mi = std::accumulate(ism_rmse.begin(), ism_rmse.end(), 0.0) / 30;
  const double mb = std::accumulate(int_rmse.begin(), int_rmse.end(), 0.0) / 30;
  const double secs = seconds_since(t0);
  return {mi < mb && t.p < 0.05 && secs <= 20 * 60,
          fmt("keypoint RMSE ism-global %.3f px vs intensity %.3f px on 30 pairs, paired t = %.2f, p = %.2g, "
              "%zu synthetic training pairs, %.0f s",
              mi, mb, t.t, t.p, train_s.size(), secs)};
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  const std::vector<std::pair<int, std::function<Outcome()>>> order{
      {1, diffusion_algebra}, {2, gradient_check}, {3, zero_conv_identity}, {4, geometry}, {5, metric_oracles},
      {6, ransac_recovery},   {9, end_to_end},     {8, paper_ordering},     {7, ism_learning}};
  const std::map<int, std::string> names{{1, "diffusion algebra"}, {2, "gradient check"},   {3, "zero-conv identity"},
                                         {4, "geometry"},          {5, "metric oracles"},   {6, "RANSAC recovery"},
                                         {7, "ISM learning"},      {8, "ordering vs intensity"}, {9, "end-to-end desk32"}};
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  std::map<int, Outcome> results;
  for (const auto& [id, fn] : order) {
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome r;
    try {
      r = fn();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    std::printf("  criterion %d finished: %s\n", id, r.passed ? "pass" : "fail");
    std::fflush(stdout);
    results[id] = r;
  }
  bool all = true;
  std::printf("\n");
  for (const auto& [id, r] : results) {
    std::printf("[%s] %d. %s: %s\n", r.passed ? "PASS" : "FAIL", id, names.at(id).c_str(), r.detail.c_str());
    all &= r.passed;
  }
  return all ? 0 : 1;
}
