#include "synstitch/selftest.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "synstitch/baselines.hpp"
#include "synstitch/diffusion.hpp"
#include "synstitch/metrics.hpp"
#include "synstitch/phantom.hpp"
#include "synstitch/sspgm.hpp"
#include "synstitch/torch_utils.hpp"

namespace synstitch {

namespace {

std::string fmt(const char* label, double v) {
  std::ostringstream os;
  os << label << v;
  return os.str();
}

SelfCheck diffusion_algebra() {
  double worst = 0.0;
  const auto s = make_schedule(200, 5e-4, 0.1);
  auto gen = make_generator(1);
  for (int i = 0; i < 100; ++i) {
    const auto img = torch::rand({1, 1, 16, 16}, gen, torch::kFloat64);
    const auto eps = torch::randn({1, 1, 16, 16}, gen, torch::kFloat64);
    const int t = static_cast<int>(torch::randint(0, s.steps(), {1}, gen).item<long>());
    const auto xt = forward_diffuse(img, t, eps, s);
    const double ab = s.alpha_bar[t];
    const auto back = (xt - std::sqrt(1 - ab) * eps) / std::sqrt(ab);
    worst = std::max(worst, (back - img).abs().max().item<double>());
  }
  bool schedules_ok = true;
  for (int steps : {1, 10, 200, 1000}) {
    const auto sc = make_schedule(steps, 1e-4, 0.02);
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
      prod *= 1 - sc.beta[t];
      schedules_ok &= sc.beta[t] > 0 && sc.beta[t] < 1 && std::abs(sc.alpha[t] - (1 - sc.beta[t])) < 1e-15 &&
                      std::abs(sc.alpha_bar[t] - prod) < 1e-12 && (t == 0 || sc.alpha_bar[t] < sc.alpha_bar[t - 1]);
    }
  }
  return {"diffusion algebra", worst <= 1e-6 && schedules_ok, fmt("max inversion error ", worst)};
}

SelfCheck gradient_check() {
  torch::manual_seed(1);
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
    auto gen = make_generator(9);
    return dm_loss(pred, batch, s, gen);
  };
  net->zero_grad();
  loss_at().backward();
  auto params = net->parameters();
  std::mt19937_64 rng(2);
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    const std::size_t pi = rng() % params.size();
    const long idx = static_cast<long>(rng() % params[pi].numel());
    auto flat = params[pi].view(-1);
    const double analytic = params[pi].grad().view(-1)[idx].item<double>();
    torch::NoGradGuard ng;
    const double orig = flat[idx].item<double>();
    flat[idx] = orig + 1e-3;
    const double up = loss_at().item<double>();
    flat[idx] = orig - 1e-3;
    const double down = loss_at().item<double>();
    flat[idx] = orig;
    const double numeric = (up - down) / 2e-3;
    worst = std::max(worst, std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6}));
  }
  return {"gradient check", worst <= 1e-3, fmt("max relative error ", worst)};
}

SelfCheck zero_conv_identity() {
  torch::manual_seed(3);
  UNetConfig cfg;
  cfg.channels = {8, 16};
  cfg.groups = 4;
  UNet base(cfg);
  {
    torch::NoGradGuard ng;
    for (auto& p : base->parameters()) p.add_(torch::randn_like(p) * 0.05);
  }
  ControlNet cn(base);
  auto gen = make_generator(4);
  double worst = 0.0;
  torch::NoGradGuard ng;
  for (int i = 0; i < 20; ++i) {
    const auto x = torch::randn({1, 1, 16, 16}, gen);
    const auto t = torch::randint(0, 200, {1}, gen, torch::kLong);
    const auto c = torch::rand({1, 1, 16, 16}, gen);
    worst = std::max(worst, (cn->forward(x, t, c) - base->forward(x, t)).abs().max().item<double>());
  }
  return {"zero-conv identity", worst <= 1e-5, fmt("max abs difference ", worst)};
}

// Separable Gaussian blur; keeps the test image band-limited so bilinear resampling errors stay small.
Image2D blur(const Image2D& img, double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  auto pass = [&](const Image2D& in, bool horizontal) {
    Image2D out(in.height(), in.width());
    for (int y = 0; y < in.height(); ++y)
      for (int x = 0; x < in.width(); ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) {
          const int yy = horizontal ? y : std::clamp(y + i, 0, in.height() - 1);
          const int xx = horizontal ? std::clamp(x + i, 0, in.width() - 1) : x;
          acc += k[i + r] * in(yy, xx);
        }
        out(y, x) = static_cast<float>(acc);
      }
    return out;
  };
  return pass(pass(img, true), false);
}

SelfCheck warp_composition() {
  const int size = 64;
  const auto img = blur(gen_subject(5, 1, size).frames.front(), 2.0);
  const Point2 c = image_center(size, size);
  const AffineRanges ranges{{-4, 4}, {-0.1, 0.1}, {0.95, 1.05}};
  std::mt19937_64 rng(6);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const auto a = sample_affine(ranges, rng, c);
    const auto b = sample_affine(ranges, rng, c);
    const auto two_step = warp(warp(img, a), b);
    const auto one_step = warp(img, compose(b, a));
    const auto round_trip = warp(warp(img, a), a.inverse());
    // Compare where every intermediate sample lands at least 1 px inside the grid.
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const Point2 p{double(x), double(y)};
        const Point2 q1 = b.inverse().apply(p), q2 = a.inverse().apply(q1), r1 = a.apply(p);
        auto inside = [&](Point2 q) { return q.x >= 1 && q.y >= 1 && q.x <= size - 2 && q.y <= size - 2; };
        if (inside(q1) && inside(q2)) worst = std::max(worst, double(std::abs(two_step(y, x) - one_step(y, x))));
        if (inside(r1)) worst = std::max(worst, double(std::abs(round_trip(y, x) - img(y, x))));
      }
  }
  const auto fov = gen_fov_mask(size, size, FovSpec::for_size(size));
  const bool masks_ok = mask_and(fov, fov) == fov && warp(fov, AffineTransform::identity(c)) == fov &&
                        threshold_mask(multiply(img, fov)) == mask_and(threshold_mask(img), fov);
  return {"warp composition", worst <= 0.05 && masks_ok, fmt("max abs difference ", worst)};
}

SelfCheck metric_identities() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  Image2D a(9, 9), b(9, 9);
  for (auto& v : a.pixels()) v = u(rng);
  for (auto& v : b.pixels()) v = u(rng);
  bool ok = ssim(a, a) == 1.0 && std::abs(ncc(a, b) - ncc(b, a)) < 1e-12 && std::abs(ssim(a, b) - ssim(b, a)) < 1e-12;
  ok &= std::abs(mse(Image2D(4, 4, 0.f), Image2D(4, 4, 0.1f)) - 0.01) < 1e-9;
  const std::vector<Point2> m{{1, 1}, {5, 2}}, f{{4, 5}, {8, 6}};
  ok &= std::abs(keypoint_rmse(m, f, AffineTransform::identity()) - 5.0) < 1e-12;
  const std::vector<double> x{1, 3}, y{0, 0};
  const auto t = paired_t_test(x, y);
  ok &= std::abs(t.t - 2.0) < 1e-12 && std::abs(t.p - 0.2951672353) < 1e-4;
  return {"metric identities", ok, fmt("t-test p ", t.p)};
}

SelfCheck ransac_recovery() {
  int good = 0;
  const int trials = 20;
  for (int trial = 0; trial < trials; ++trial) {
    std::mt19937_64 rng(100 + trial);
    std::uniform_real_distribution<double> pos(0, 63), par(-1, 1);
    const AffineParams p{par(rng) * 5, par(rng) * 5, par(rng) * 0.2, 1 + par(rng) * 0.1, 1 + par(rng) * 0.1, 0.0};
    const auto truth = params_to_matrix(p, {31.5, 31.5});
    std::vector<Correspondence> cs;
    for (int i = 0; i < 20; ++i) {
      const Point2 q{pos(rng), pos(rng)};
      cs.push_back({q, truth.apply(q), 1.0});
    }
    for (int i = 0; i < 9; ++i) cs.push_back({{pos(rng), pos(rng)}, {pos(rng), pos(rng)}, 1.0});
    std::shuffle(cs.begin(), cs.end(), rng);
    RansacConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(trial);
    const auto est = ransac_affine(cs, cfg);
    if ((est.matrix() - truth.matrix()).cwiseAbs().maxCoeff() <= 1e-3) ++good;
  }
  return {"ransac recovery", good == trials, fmt("recovered trials ", good)};
}

}  // namespace

std::vector<SelfCheck> run_selftest() {
  const std::vector<std::function<SelfCheck()>> checks{diffusion_algebra, gradient_check, zero_conv_identity,
                                                       warp_composition,  metric_identities, ransac_recovery};
  const std::vector<std::string> names{"diffusion algebra", "gradient check",    "zero-conv identity",
                                       "warp composition",  "metric identities", "ransac recovery"};
  std::vector<SelfCheck> out;
  for (std::size_t i = 0; i < checks.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    SelfCheck r;
    try {
      r = checks[i]();
    } catch (const std::exception& e) {
      r = {names[i], false, e.what()};
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace synstitch
