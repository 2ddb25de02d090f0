#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "synstitch/diffusion.hpp"
#include "synstitch/errors.hpp"
#include "synstitch/phantom.hpp"
#include "synstitch/torch_utils.hpp"

using namespace synstitch;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  return dir;
}

torch::Tensor phantom_batch(int n, int size, std::uint64_t seed) {
  PhantomOptions o;
  o.size = size;
  const auto s = gen_subject(seed, n, o);
  return to_tensor(s.frames);
}

UNetConfig micro_config() {
  UNetConfig c;
  c.channels = {4, 8};
  c.groups = 2;
  c.embedding_multiplier = 2;
  return c;
}

double smoothed(const std::vector<std::pair<long, double>>& losses, std::size_t from, std::size_t n) {
  double s = 0;
  for (std::size_t i = from; i < from + n; ++i) s += losses[i].second;
  return s / n;
}

}  // namespace

TEST(Schedule, Invariants) {
  for (int steps : {1, 10, 200, 1000}) {
    const auto s = make_schedule(steps, 1e-4, 0.02);
    ASSERT_EQ(s.steps(), steps);
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
      EXPECT_GT(s.beta[t], 0.0);
      EXPECT_LT(s.beta[t], 1.0);
      if (t > 0) {
        EXPECT_GE(s.beta[t], s.beta[t - 1]);
        EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
      }
      EXPECT_DOUBLE_EQ(s.alpha[t], 1.0 - s.beta[t]);
      prod *= s.alpha[t];
      EXPECT_NEAR(s.alpha_bar[t], prod, 1e-15);
    }
    EXPECT_DOUBLE_EQ(s.beta.front(), 1e-4);
    if (steps > 1) EXPECT_NEAR(s.beta.back(), 0.02, 1e-15);
  }
}

TEST(Schedule, InvalidRanges) {
  EXPECT_THROW(make_schedule(0, 1e-4, 0.02), InvalidRange);
  EXPECT_THROW(make_schedule(10, 0.0, 0.02), InvalidRange);
  EXPECT_THROW(make_schedule(10, 0.03, 0.02), InvalidRange);
  EXPECT_THROW(make_schedule(10, 1e-4, 1.0), InvalidRange);
}

TEST(Schedule, JsonRoundTrip) {
  const auto s = make_schedule(200, 5e-4, 0.1);
  const auto b = schedule_from_json(to_json(s));
  EXPECT_EQ(s.beta, b.beta);
}

TEST(ForwardDiffuse, InversionRecoversImage) {
  const auto s = make_schedule(1000, 1e-4, 0.02);
  auto gen = make_generator(1);
  const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  for (int i = 0; i < 100; ++i) {
    const auto img = torch::rand({1, 1, 8, 8}, gen, opts);
    const auto eps = torch::randn({1, 1, 8, 8}, gen, opts);
    const int t = static_cast<int>(torch::randint(0, 1000, {1}, gen, torch::kLong).item<long>());
    const auto x_t = forward_diffuse(img, t, eps, s);
    const auto back = (x_t - std::sqrt(1 - s.alpha_bar[t]) * eps) / std::sqrt(s.alpha_bar[t]);
    EXPECT_LE((back - img).abs().max().item<double>(), 1e-6);
  }
}

TEST(ForwardDiffuse, LinearInImageAndNoise) {
  const auto s = make_schedule(50, 1e-4, 0.02);
  auto gen = make_generator(2);
  const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  const auto img = torch::rand({3, 1, 4, 4}, gen, opts);
  const auto eps = torch::randn({3, 1, 4, 4}, gen, opts);
  const auto t = torch::tensor({0L, 17L, 49L});
  const double a = 2.5;
  EXPECT_TRUE(torch::allclose(forward_diffuse(a * img, t, a * eps, s), a * forward_diffuse(img, t, eps, s), 0, 1e-14));
}

TEST(ForwardDiffuse, Validation) {
  const auto s = make_schedule(10, 1e-4, 0.02);
  const auto img = torch::zeros({2, 1, 4, 4});
  EXPECT_THROW(forward_diffuse(img, torch::tensor({0L, 10L}), torch::zeros({2, 1, 4, 4}), s), InvalidParameter);
  EXPECT_THROW(forward_diffuse(img, torch::tensor({0L, 1L}), torch::zeros({2, 1, 4, 5}), s), ShapeMismatch);
  EXPECT_THROW(forward_diffuse(img, torch::tensor({0L}), torch::zeros({2, 1, 4, 4}), s), ShapeMismatch);
}

TEST(DmLoss, OracleNetGivesZero) {
  const auto s = make_schedule(100, 1e-4, 0.02);
  const auto batch = torch::rand({4, 1, 8, 8}, torch::kFloat64);
  // The oracle recovers eps from I_t because it knows the clean batch.
  NoisePredictor oracle = [&](const torch::Tensor& x_t, const torch::Tensor& t) {
    std::vector<double> a(s.steps()), b(s.steps());
    for (int i = 0; i < s.steps(); ++i) {
      a[i] = std::sqrt(s.alpha_bar[i]);
      b[i] = std::sqrt(1 - s.alpha_bar[i]);
    }
    const auto ta = torch::tensor(a, torch::kFloat64).index_select(0, t).view({-1, 1, 1, 1});
    const auto tb = torch::tensor(b, torch::kFloat64).index_select(0, t).view({-1, 1, 1, 1});
    return (x_t - ta * batch) / tb;
  };
  auto gen = make_generator(3);
  EXPECT_LT(dm_loss(oracle, batch, s, gen).item<double>(), 1e-20);
}

TEST(DmLoss, ZeroNetGivesNoiseVariance) {
  const auto s = make_schedule(100, 1e-4, 0.02);
  const auto batch = torch::rand({16, 1, 32, 32});
  NoisePredictor zero = [](const torch::Tensor& x, const torch::Tensor&) { return torch::zeros_like(x); };
  auto gen = make_generator(4);
  EXPECT_NEAR(dm_loss(zero, batch, s, gen).item<double>(), 1.0, 0.05);
}

TEST(DmLoss, SeedReproducible) {
  torch::manual_seed(0);
  UNet net(micro_config());
  const auto s = make_schedule(20, 1e-4, 0.02);
  const auto batch = torch::rand({2, 1, 8, 8});
  NoisePredictor p = [&](const torch::Tensor& x, const torch::Tensor& t) { return net->forward(x, t); };
  auto g1 = make_generator(5), g2 = make_generator(5);
  EXPECT_EQ(dm_loss(p, batch, s, g1).item<float>(), dm_loss(p, batch, s, g2).item<float>());
}

TEST(UNet, ZeroInitializedOutputAndShapes) {
  UNet net(UNetConfig{});
  const auto x = torch::rand({3, 1, 32, 32});
  const auto out = net->forward(x, torch::tensor({0L, 5L, 199L}));
  EXPECT_EQ(out.sizes(), x.sizes());
  EXPECT_EQ(out.abs().max().item<float>(), 0.f);
  EXPECT_THROW(net->forward(torch::rand({1, 1, 30, 30}), torch::tensor({0L})), ShapeMismatch);
}

TEST(UNet, GradientMatchesFiniteDifferences) {
  torch::manual_seed(1);
  UNet net(micro_config());
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
  std::vector<std::pair<std::size_t, long>> picks;
  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    const std::size_t pi = rng() % params.size();
    picks.emplace_back(pi, static_cast<long>(rng() % params[pi].numel()));
  }
  const double h = 1e-3;
  for (auto [pi, idx] : picks) {
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
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    EXPECT_LE(std::abs(analytic - numeric) / denom, 1e-3) << "param " << pi << "[" << idx << "]";
  }
}

TEST(TrainDiffusion, ZeroLearningRateLeavesParameters) {
  torch::manual_seed(2);
  UNet net(micro_config());
  const auto before = parameter_hash(*net);
  auto state = make_train_state(net->parameters(), 0.0, 1);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch = 2;
  train_diffusion(net, torch::rand({4, 1, 8, 8}), make_schedule(20, 1e-4, 0.02), cfg, state);
  EXPECT_EQ(parameter_hash(*net), before);
  EXPECT_EQ(state.step, 5);
}

TEST(TrainDiffusion, NonFiniteLossAborts) {
  UNet net(micro_config());
  auto state = make_train_state(net->parameters(), 1e-3, 1);
  auto data = torch::full({4, 1, 8, 8}, std::numeric_limits<float>::quiet_NaN());
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch = 2;
  EXPECT_THROW(train_diffusion(net, data, make_schedule(20, 1e-4, 0.02), cfg, state), TrainingDiverged);
}

TEST(TrainDiffusion, ResumeReproducesNextLoss) {
  const auto schedule = make_schedule(20, 1e-4, 0.02);
  const auto data = phantom_batch(6, 32, 3);
  TrainConfig cfg;
  cfg.batch = 4;
  cfg.lr = 1e-3;

  torch::manual_seed(3);
  UNet a(micro_config());
  auto sa = make_train_state(a->parameters(), cfg.lr, 11);
  cfg.steps = 5;
  train_diffusion(a, data, schedule, cfg, sa);
  const auto dir = temp_dir("synstitch_diffusion_resume");
  save_diffusion(dir, a, schedule, sa);
  cfg.steps = 6;
  train_diffusion(a, data, schedule, cfg, sa);

  TrainState sb;
  auto loaded = load_diffusion(dir, &sb);
  EXPECT_EQ(sb.step, 5);
  train_diffusion(loaded.net, data, schedule, cfg, sb);
  EXPECT_EQ(sa.losses.back().second, sb.losses.back().second);
  EXPECT_EQ(parameter_hash(*a), parameter_hash(*loaded.net));
  std::filesystem::remove_all(dir);
}

TEST(TrainDiffusion, OverfitsSmallDataset) {
  const auto schedule = make_schedule(200, 5e-4, 0.1);
  const auto data = phantom_batch(8, 32, 4);
  torch::manual_seed(4);
  UNet net(UNetConfig{});
  auto state = make_train_state(net->parameters(), 1e-3, 12);
  TrainConfig cfg;
  cfg.steps = 500;
  cfg.batch = 8;
  train_diffusion(net, data, schedule, cfg, state);
  ASSERT_EQ(state.losses.size(), 500u);
  EXPECT_LE(smoothed(state.losses, 450, 50), 0.5 * smoothed(state.losses, 0, 50));
}

TEST(DdpmSample, SingleStepOracleReturnsCleanImage) {
  const auto s = make_schedule(1, 0.3, 0.3);
  const auto clean = torch::rand({1, 1, 8, 8});
  NoisePredictor oracle = [&](const torch::Tensor& x, const torch::Tensor&) {
    return (x - std::sqrt(s.alpha_bar[0]) * clean) / std::sqrt(1 - s.alpha_bar[0]);
  };
  const std::vector<std::uint64_t> seeds{42};
  const auto out = ddpm_sample(oracle, s, 8, 8, seeds);
  EXPECT_LE((out - clean).abs().max().item<float>(), 1e-5);
}

TEST(DdpmSample, SeedDeterminesSample) {
  torch::manual_seed(5);
  UNet net(micro_config());
  {
    torch::NoGradGuard ng;
    for (auto& p : net->parameters()) p.normal_(0.0, 0.1);
  }
  const auto s = make_schedule(10, 1e-4, 0.02);
  NoisePredictor p = [&](const torch::Tensor& x, const torch::Tensor& t) { return net->forward(x, t); };
  const std::vector<std::uint64_t> one{7}, two{7, 8};
  const auto a = ddpm_sample(p, s, 8, 8, one);
  const auto b = ddpm_sample(p, s, 8, 8, one);
  EXPECT_TRUE(torch::equal(a, b));
  EXPECT_GE(a.min().item<float>(), 0.f);
  EXPECT_LE(a.max().item<float>(), 1.f);
  const auto c = ddpm_sample(p, s, 8, 8, two);
  EXPECT_LE((c[0] - a[0]).abs().max().item<float>(), 1e-5);
}

TEST(DdpmSample, NonFiniteDiverges) {
  const auto s = make_schedule(3, 1e-4, 0.02);
  NoisePredictor bad = [](const torch::Tensor& x, const torch::Tensor&) {
    return torch::full_like(x, std::numeric_limits<float>::infinity());
  };
  const std::vector<std::uint64_t> seeds{1};
  EXPECT_THROW(ddpm_sample(bad, s, 4, 4, seeds), SamplingDiverged);
}

TEST(Checkpoint, WeightsRoundTrip) {
  torch::manual_seed(6);
  UNet net(micro_config());
  {
    torch::NoGradGuard ng;
    for (auto& p : net->parameters()) p.normal_(0.0, 0.1);
  }
  auto state = make_train_state(net->parameters(), 1e-4, 1);
  const auto dir = temp_dir("synstitch_diffusion_ckpt");
  const auto schedule = make_schedule(20, 1e-4, 0.02);
  save_diffusion(dir, net, schedule, state, {{"note", "x"}});
  const auto loaded = load_diffusion(dir);
  EXPECT_EQ(parameter_hash(*net), parameter_hash(*loaded.net));
  EXPECT_EQ(loaded.schedule.beta, schedule.beta);
  EXPECT_EQ(loaded.meta.at("note"), "x");
  EXPECT_THROW(load_diffusion(temp_dir("synstitch_no_ckpt")), MissingArtifact);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, OptimizerStateIsByteStable) {
  const auto schedule = make_schedule(20, 1e-4, 0.02);
  const auto data = phantom_batch(4, 32, 8);
  TrainConfig cfg;
  cfg.batch = 2;
  cfg.steps = 3;
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  std::vector<std::string> blobs;
  for (const char* name : {"synstitch_adam_a", "synstitch_adam_b"}) {
    torch::manual_seed(8);
    UNet net(micro_config());
    auto state = make_train_state(net->parameters(), 1e-3, 9);
    train_diffusion(net, data, schedule, cfg, state);
    const auto dir = temp_dir(name);
    save_diffusion(dir, net, schedule, state);
    blobs.push_back(slurp(dir / "optimizer.bin"));

    // Loading and saving again reproduces the same bytes.
    TrainState reloaded;
    auto loaded = load_diffusion(dir, &reloaded);
    const auto again = temp_dir(std::string(name) + "_again");
    save_diffusion(again, loaded.net, loaded.schedule, reloaded);
    blobs.push_back(slurp(again / "optimizer.bin"));
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(again);
  }
  ASSERT_GT(blobs[0].size(), 8u);
  for (const auto& b : blobs) EXPECT_EQ(b, blobs[0]);
}
