#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "synstitch/phantom.hpp"
#include "synstitch/sspgm.hpp"
#include "synstitch/torch_utils.hpp"

using namespace synstitch;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

UNetConfig small_config() {
  UNetConfig c;
  c.channels = {8, 16};
  c.groups = 4;
  return c;
}

UNet random_base(std::uint64_t seed, const UNetConfig& config = small_config()) {
  torch::manual_seed(seed);
  UNet base(config);
  torch::NoGradGuard ng;
  for (auto& p : base->parameters()) p.add_(torch::randn_like(p) * 0.05);
  return base;
}

std::vector<Image2D> frames(int n, int size, std::uint64_t seed) {
  PhantomOptions o;
  o.size = size;
  return gen_subject(seed, n, o).frames;
}

double max_abs(const torch::Tensor& a, const torch::Tensor& b) { return (a - b).abs().max().item<double>(); }

}  // namespace

TEST(ControlNet, FreshNetworkMatchesBase) {
  auto base = random_base(1);
  ControlNet cn(base);
  auto gen = make_generator(2);
  for (int i = 0; i < 20; ++i) {
    const auto x = torch::randn({2, 1, 16, 16}, gen);
    const auto t = torch::randint(0, 50, {2}, gen, torch::kLong);
    const auto c = torch::rand({2, 1, 16, 16}, gen);
    torch::NoGradGuard ng;
    EXPECT_LE(max_abs(cn->forward(x, t, c), base->forward(x, t)), 1e-5);
  }
}

TEST(ControlNet, ZeroConvolutionsOutputZero) {
  ControlNet cn(random_base(3));
  torch::NoGradGuard ng;
  const auto inj = cn->inject(torch::randn({1, 1, 16, 16}), torch::tensor({4L}), torch::rand({1, 1, 16, 16}));
  for (const auto& s : inj.skips) EXPECT_EQ(s.abs().max().item<float>(), 0.f);
  EXPECT_EQ(inj.middle.abs().max().item<float>(), 0.f);
}

TEST(ControlNet, ConditionShapeChecked) {
  ControlNet cn(random_base(4));
  EXPECT_THROW(cn->forward(torch::randn({1, 1, 16, 16}), torch::tensor({0L}), torch::rand({1, 2, 16, 16})),
               ShapeMismatch);
  ControlNet with_mask(random_base(4), true);
  EXPECT_EQ(with_mask->condition_channels(), 2);
  EXPECT_NO_THROW(with_mask->forward(torch::randn({1, 1, 16, 16}), torch::tensor({0L}), torch::rand({1, 2, 16, 16})));
}

TEST(ControlNet, TrainableCopyStartsAsBaseEncoder) {
  auto base = random_base(5);
  ControlNet cn(base);
  auto copy = cn->named_parameters(true);
  for (const auto& item : base->encoder()->named_parameters(true)) {
    EXPECT_TRUE(torch::equal(item.value(), copy["copy." + item.key()])) << item.key();
  }
  for (const auto& p : base->parameters()) EXPECT_FALSE(p.requires_grad());
}

TEST(OpLoss, EqualsBaseLossAtInitialization) {
  auto base = random_base(6);
  ControlNet cn(base);
  const auto schedule = make_schedule(50, 1e-4, 0.02);
  const auto batch = torch::rand({4, 1, 16, 16});
  const auto cond = torch::rand({4, 1, 16, 16});
  auto g1 = make_generator(7), g2 = make_generator(7);
  const double cl = op_loss([&](const auto& x, const auto& t, const auto& c) { return cn->forward(x, t, c); }, batch,
                            cond, schedule, g1)
                        .item<double>();
  const double bl = dm_loss([&](const auto& x, const auto& t) { return base->forward(x, t); }, batch, schedule, g2)
                        .item<double>();
  EXPECT_NEAR(cl, bl, 1e-5);
}

TEST(OpLoss, OracleGivesZero) {
  const auto schedule = make_schedule(30, 1e-4, 0.02);
  const auto batch = torch::rand({3, 1, 8, 8}, torch::kFloat64);
  ConditionedPredictor oracle = [&](const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor&) {
    std::vector<double> a, b;
    for (double ab : schedule.alpha_bar) {
      a.push_back(std::sqrt(ab));
      b.push_back(std::sqrt(1 - ab));
    }
    const auto ta = torch::tensor(a, torch::kFloat64).index_select(0, t).view({-1, 1, 1, 1});
    const auto tb = torch::tensor(b, torch::kFloat64).index_select(0, t).view({-1, 1, 1, 1});
    return (x - ta * batch) / tb;
  };
  auto gen = make_generator(1);
  EXPECT_LT(op_loss(oracle, batch, torch::zeros({3, 1, 8, 8}), schedule, gen).item<double>(), 1e-20);
}

TEST(TrainControlNet, BaseFrozenAndGradientsReachCopy) {
  auto base = random_base(8);
  const auto hash = parameter_hash(*base);
  ControlNet cn(base);
  const auto data = to_tensor(frames(6, 32, 3));
  auto state = make_train_state(cn->parameters(), 1e-3, 9);
  ControlNetTrainConfig cfg;
  cfg.steps = 4;
  cfg.batch = 3;
  train_controlnet(cn, data, make_schedule(50, 1e-4, 0.02), cfg, state);
  EXPECT_EQ(parameter_hash(*base), hash);
  for (const auto& p : base->parameters()) EXPECT_FALSE(p.grad().defined());
  // After a few steps the zero convolutions are live, so the trainable copy influences the output.
  torch::NoGradGuard ng;
  const auto x = torch::randn({1, 1, 32, 32});
  const auto t = torch::tensor({10L});
  const auto c = data.slice(0, 0, 1);
  const auto before = cn->forward(x, t, c);
  auto copy_param = cn->named_parameters(true)["copy.conv_in.weight"];
  copy_param.add_(0.5);
  EXPECT_GT(max_abs(cn->forward(x, t, c), before), 0.0);
}

TEST(TrainControlNet, CheckpointRecordsRangesAndResumes) {
  auto base = random_base(10);
  ControlNet cn(base);
  const auto schedule = make_schedule(50, 1e-4, 0.02);
  const auto data = to_tensor(frames(6, 32, 4));
  ControlNetTrainConfig cfg;
  cfg.steps = 3;
  cfg.batch = 2;
  cfg.train_ranges = {{-5, 5}, {-0.1, 0.1}, {0.95, 1.05}};
  auto state = make_train_state(cn->parameters(), cfg.lr, 11);
  train_controlnet(cn, data, schedule, cfg, state);
  const auto dir = temp_dir("synstitch_cn_ckpt");
  save_controlnet(dir, cn, schedule, state, cfg);
  cfg.steps = 4;
  train_controlnet(cn, data, schedule, cfg, state);

  TrainState resumed;
  auto loaded = load_controlnet(dir, base, &resumed);
  EXPECT_EQ(loaded.meta.at("train_ranges"), to_json(cfg.train_ranges));
  EXPECT_EQ(loaded.meta.at("min_overlap").get<double>(), cfg.min_overlap);
  train_controlnet(loaded.net, data, schedule, cfg, resumed);
  EXPECT_EQ(resumed.losses.back().second, state.losses.back().second);

  auto other = random_base(99);
  EXPECT_THROW(load_controlnet(dir, other), ValidationError);
  std::filesystem::remove_all(dir);
}

TEST(TrainControlNet, OverfitsSmallDataset) {
  torch::manual_seed(12);
  UNet base(UNetConfig{});
  const auto schedule = make_schedule(200, 5e-4, 0.1);
  const auto data = to_tensor(frames(8, 32, 5));
  {
    auto bs = make_train_state(base->parameters(), 1e-3, 1);
    TrainConfig bc;
    bc.steps = 100;
    bc.batch = 8;
    train_diffusion(base, data, schedule, bc, bs);
  }
  ControlNet cn(base);
  auto state = make_train_state(cn->parameters(), 1e-3, 13);
  ControlNetTrainConfig cfg;
  cfg.steps = 500;
  cfg.batch = 8;
  train_controlnet(cn, data, schedule, cfg, state);
  double first = 0, last = 0;
  for (int i = 0; i < 50; ++i) {
    first += state.losses[i].second;
    last += state.losses[450 + i].second;
  }
  EXPECT_LE(last, 0.5 * first);
}

TEST(DrawAffine, RespectsMinimumOverlap) {
  const auto img = frames(1, 32, 6).front();
  const auto fov = threshold_mask(img);
  auto gen = make_generator(3);
  const AffineRanges wide{{-24, 24}, {-0.26, 0.26}, {0.9, 1.1}};
  for (int i = 0; i < 30; ++i) {
    const auto a = draw_condition_affine(fov, wide, 0.3, gen);
    EXPECT_GE(overlap_fraction(mask_and(fov, warp(fov, a)), fov), 0.3);
  }
  EXPECT_THROW(draw_condition_affine(fov, wide, 1.01, gen), NoValidAffine);
  PairGenConfig cfg;
  cfg.min_overlap = 1.01;
  std::mt19937_64 rng(1);
  EXPECT_THROW(draw_generation_affine(img, cfg, rng), NoValidAffine);
}

TEST(Outpaint, DeterministicAndInsideFov) {
  ControlNet cn(random_base(14));
  const auto schedule = make_schedule(5, 1e-4, 0.02);
  const auto img = frames(1, 32, 7).front();
  const auto fov = threshold_mask(img);
  const auto c = condition_train(img, AffineTransform::identity());
  const std::vector<Image2D> conds{c.image};
  const std::vector<BinaryMask> masks{c.mask};
  const std::vector<std::uint64_t> seeds{5};
  const auto a = outpaint(cn, schedule, conds, masks, seeds, &fov);
  const auto b = outpaint(cn, schedule, conds, masks, seeds, &fov);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0], b[0]);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      if (!fov(y, x)) EXPECT_EQ(a[0](y, x), 0.f);
}

TEST(ConditionConsistency, MeanAbsInsideMask) {
  Image2D g(2, 2, std::vector<float>{0.f, 1.f, 0.5f, 0.25f});
  Image2D c(2, 2, std::vector<float>{0.5f, 0.f, 0.5f, 0.f});
  BinaryMask m(2, 2, std::vector<std::uint8_t>{1, 0, 1, 1});
  EXPECT_DOUBLE_EQ(condition_consistency(g, c, m), (0.5 + 0.0 + 0.25) / 3);
  EXPECT_THROW(condition_consistency(g, c, BinaryMask(2, 2, 0)), UndefinedMetric);
}

TEST(GenStitchPair, IdentityRangesWarpOnly) {
  const auto img = frames(1, 32, 8).front();
  PairGenConfig cfg;
  cfg.warp_only = true;
  cfg.gen_ranges = AffineRanges::point({});
  const auto s = gen_stitch_pair(nullptr, nullptr, img, cfg, 1);
  EXPECT_EQ(s.gt_affine.matrix(), Eigen::Matrix3d::Identity());
  EXPECT_EQ(s.fixed, img);
  EXPECT_DOUBLE_EQ(s.overlap, 1.0);
}

TEST(GenStitchPair, ConditionIsMaskedWarp) {
  const auto imgs = frames(4, 32, 9);
  PairGenConfig cfg;
  cfg.warp_only = true;
  const auto samples = gen_stitch_pairs(nullptr, nullptr, imgs, {}, cfg, 3);
  ASSERT_EQ(samples.size(), 4u);
  for (const auto& s : samples) {
    EXPECT_GE(s.overlap, cfg.min_overlap);
    const auto w = warp(s.moving, s.gt_affine);
    EXPECT_EQ(s.fixed, w);
    EXPECT_EQ(s.condition, multiply(w, s.condition_mask));
  }
}

TEST(GenStitchPair, GeneratedPairsKeepSourceFov) {
  ControlNet cn(random_base(15));
  const auto schedule = make_schedule(4, 1e-4, 0.02);
  const auto imgs = frames(3, 32, 10);
  PairGenConfig cfg;
  const auto a = gen_stitch_pairs(&cn, &schedule, imgs, {}, cfg, 4);
  const auto b = gen_stitch_pairs(&cn, &schedule, imgs, {}, cfg, 4);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].fixed, b[k].fixed);
    EXPECT_EQ(a[k].gt_affine.matrix(), b[k].gt_affine.matrix());
    const auto fov = threshold_mask(imgs[k]);
    for (std::size_t i = 0; i < fov.size(); ++i)
      if (!fov.pixels()[i]) EXPECT_EQ(a[k].fixed.pixels()[i], 0.f);
  }
  EXPECT_THROW(gen_stitch_pairs(nullptr, nullptr, imgs, {}, cfg, 4), MissingArtifact);
}

TEST(PairsIo, RoundTripAndByteIdenticalRegeneration) {
  const auto imgs = frames(3, 32, 11);
  const std::vector<std::string> sources{"s00/000", "s00/001", "s00/002"};
  PairGenConfig cfg;
  cfg.warp_only = true;
  const auto a = temp_dir("synstitch_pairs_a"), b = temp_dir("synstitch_pairs_b");
  write_pairs(a, gen_stitch_pairs(nullptr, nullptr, imgs, sources, cfg, 8), {{"mode", "warp_only"}});
  write_pairs(b, gen_stitch_pairs(nullptr, nullptr, imgs, sources, cfg, 8), {{"mode", "warp_only"}});
  for (const auto& e : std::filesystem::directory_iterator(a)) EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename()));
  const auto set = read_pairs(a);
  ASSERT_EQ(set.samples.size(), 3u);
  EXPECT_EQ(set.meta.at("mode"), "warp_only");
  const auto regenerated = gen_stitch_pairs(nullptr, nullptr, imgs, sources, cfg, 8);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(set.samples[k].fixed, regenerated[k].fixed);
    EXPECT_EQ(set.samples[k].condition_mask, regenerated[k].condition_mask);
    EXPECT_EQ(set.samples[k].gt_affine.matrix(), regenerated[k].gt_affine.matrix());
    EXPECT_EQ(set.samples[k].source, sources[k]);
  }
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
  EXPECT_THROW(read_pairs(temp_dir("synstitch_pairs_none")), MissingArtifact);
}

TEST(PairsIo, SingleSample) {
  const auto imgs = frames(1, 32, 12);
  PairGenConfig cfg;
  cfg.warp_only = true;
  const auto dir = temp_dir("synstitch_pairs_one");
  write_pairs(dir, gen_stitch_pairs(nullptr, nullptr, imgs, {}, cfg, 1), {});
  EXPECT_EQ(read_pairs(dir).samples.size(), 1u);
  std::filesystem::remove_all(dir);
}
