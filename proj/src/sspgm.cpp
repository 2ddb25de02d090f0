#include "synstitch/sspgm.hpp"

#include <cstdio>
#include <fstream>

#include "synstitch/checkpoint.hpp"
#include "synstitch/errors.hpp"
#include "synstitch/parallel.hpp"
#include "synstitch/torch_utils.hpp"

namespace synstitch {

namespace {

torch::nn::Conv2d zero_conv(int in, int out) {
  torch::nn::Conv2d conv(torch::nn::Conv2dOptions(in, out, 1));
  torch::NoGradGuard no_grad;
  conv->weight.zero_();
  conv->bias.zero_();
  return conv;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

BinaryMask overlap_mask(const BinaryMask& fov, const AffineTransform& a) { return mask_and(fov, warp(fov, a)); }

}  // namespace

ControlNetImpl::ControlNetImpl(UNet base, bool mask_channel) : base_(std::move(base)), mask_channel_(mask_channel) {
  const auto& config = base_->config();
  for (auto& p : base_->parameters()) p.requires_grad_(false);
  copy_ = register_module("copy", UNetEncoder(config));
  {
    torch::NoGradGuard no_grad;
    auto src = base_->encoder()->named_parameters(true);
    for (auto& item : copy_->named_parameters(true)) item.value().copy_(src[item.key()]);
  }
  zero_in_ = register_module("zero_in", zero_conv(condition_channels(), config.channels.front()));
  zero_skips_ = register_module("zero_skips", torch::nn::ModuleList());
  for (int ch : config.channels) zero_skips_->push_back(zero_conv(ch, ch));
  zero_mid_ = register_module("zero_mid", zero_conv(config.channels.back(), config.channels.back()));
}

Injection ControlNetImpl::inject(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& cond) {
  if (cond.dim() != 4 || cond.size(0) != x_t.size(0) || cond.size(1) != condition_channels() ||
      cond.size(2) != x_t.size(2) || cond.size(3) != x_t.size(3)) {
    throw ShapeMismatch("condition must be (B, " + std::to_string(condition_channels()) + ", H, W) matching the input");
  }
  const auto enc = copy_(x_t, t, zero_in_(cond));
  Injection inj;
  for (std::size_t i = 0; i < enc.skips.size(); ++i) {
    inj.skips.push_back(zero_skips_[i]->as<torch::nn::Conv2d>()->forward(enc.skips[i]));
  }
  inj.middle = zero_mid_(enc.middle);
  return inj;
}

torch::Tensor ControlNetImpl::forward(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& cond) {
  const auto inj = inject(x_t, t, cond);
  return base_->forward(x_t, t, &inj);
}

torch::Tensor condition_tensor(std::span<const Image2D> images, std::span<const BinaryMask> masks, bool mask_channel) {
  auto c = to_tensor(images);
  if (!mask_channel) return c;
  if (masks.size() != images.size()) throw ShapeMismatch("one mask per condition image is required");
  std::vector<Image2D> m;
  m.reserve(masks.size());
  for (const auto& mask : masks) m.push_back(to_image(mask));
  return torch::cat({c, to_tensor(m)}, 1);
}

torch::Tensor op_loss(const ConditionedPredictor& predictor, const torch::Tensor& batch, const torch::Tensor& cond,
                      const NoiseSchedule& schedule, at::Generator& gen) {
  const auto t = torch::randint(0, schedule.steps(), {batch.size(0)}, gen, torch::TensorOptions().dtype(torch::kLong));
  const auto eps = torch::randn(batch.sizes(), gen, batch.options());
  const auto x_t = forward_diffuse(batch, t, eps, schedule);
  return (eps - predictor(x_t, t, cond)).pow(2).mean();
}

AffineTransform draw_condition_affine(const BinaryMask& fov, const AffineRanges& ranges, double min_overlap,
                                      at::Generator& gen) {
  const Point2 center = image_center(fov.height(), fov.width());
  for (int attempt = 0; attempt < 100; ++attempt) {
    const auto u = torch::rand({4}, gen, torch::kFloat64);
    auto lerp = [&](const Range& r, int i) { return r.lo + (r.hi - r.lo) * u[i].item<double>(); };
    AffineParams p;
    p.tx = lerp(ranges.translation, 0);
    p.ty = lerp(ranges.translation, 1);
    p.theta = lerp(ranges.rotation, 2);
    p.sx = p.sy = lerp(ranges.scale, 3);
    const auto a = params_to_matrix(p, center);
    if (overlap_fraction(overlap_mask(fov, a), fov) >= min_overlap) return a;
  }
  throw NoValidAffine("no training affine reached the minimum overlap in 100 draws");
}

void train_controlnet(ControlNet& cn, const torch::Tensor& dataset, const NoiseSchedule& schedule,
                      const ControlNetTrainConfig& config, TrainState& state) {
  if (dataset.size(0) == 0) throw InvalidParameter("ControlNet training needs a nonempty dataset");
  cn->train();
  ConditionedPredictor predictor = [&](const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& c) {
    return cn->forward(x, t, c);
  };
  auto loss_fn = [&](const torch::Tensor& batch, at::Generator& gen) {
    const auto images = images_from_batch(batch);
    std::vector<Image2D> conds;
    std::vector<BinaryMask> masks;
    for (const auto& img : images) {
      const auto a = draw_condition_affine(threshold_mask(img), config.train_ranges, config.min_overlap, gen);
      auto c = condition_train(img, a);
      conds.push_back(std::move(c.image));
      masks.push_back(std::move(c.mask));
    }
    return op_loss(predictor, batch, condition_tensor(conds, masks, cn->mask_channel()), schedule, gen);
  };
  while (state.step < config.steps) train_step(state, dataset, config.batch, loss_fn);
}

void save_controlnet(const std::filesystem::path& dir, ControlNet& cn, const NoiseSchedule& schedule, TrainState& state,
                     const ControlNetTrainConfig& config, const nlohmann::json& extra) {
  Checkpoint ck;
  ck.meta = extra.is_object() ? extra : nlohmann::json::object();
  ck.meta["kind"] = "controlnet";
  ck.meta["arch"] = to_json(cn->base()->config());
  ck.meta["mask_channel"] = cn->mask_channel();
  ck.meta["schedule"] = to_json(schedule);
  ck.meta["step"] = state.step;
  ck.meta["rng_state"] = generator_state(state.gen);
  ck.meta["lr"] = config.lr;
  ck.meta["train_ranges"] = to_json(config.train_ranges);
  ck.meta["min_overlap"] = config.min_overlap;
  ck.meta["base_hash"] = hex64(parameter_hash(*cn->base()));
  ck.losses = state.losses;
  save_checkpoint(dir, *cn, state.optimizer.get(), ck);
}

LoadedControlNet load_controlnet(const std::filesystem::path& dir, UNet base, TrainState* state) {
  const auto meta = read_checkpoint_meta(dir);
  if (meta.value("kind", "") != "controlnet") throw ValidationError(dir.string() + " is not a ControlNet checkpoint");
  if (meta.at("base_hash").get<std::string>() != hex64(parameter_hash(*base))) {
    throw ValidationError("ControlNet checkpoint " + dir.string() + " was trained against a different base denoiser");
  }
  LoadedControlNet out;
  out.net = ControlNet(std::move(base), meta.at("mask_channel").get<bool>());
  out.schedule = schedule_from_json(meta.at("schedule"));
  if (state) {
    *state = make_train_state(out.net->parameters(), meta.value("lr", 1e-4), 0);
    auto ck = load_checkpoint(dir, *out.net, state->optimizer.get());
    set_generator_state(state->gen, meta.at("rng_state").get<std::string>());
    state->step = meta.at("step").get<long>();
    state->losses = ck.losses;
    out.meta = ck.meta;
  } else {
    out.meta = load_checkpoint(dir, *out.net, nullptr).meta;
  }
  return out;
}

std::vector<Image2D> outpaint(ControlNet& cn, const NoiseSchedule& schedule, std::span<const Image2D> conditions,
                              std::span<const BinaryMask> masks, std::span<const std::uint64_t> seeds,
                              const BinaryMask* fov, int batch) {
  if (conditions.size() != seeds.size()) throw ShapeMismatch("outpaint needs one seed per condition");
  if (cn->mask_channel() && masks.size() != conditions.size()) throw ShapeMismatch("outpaint needs one mask per condition");
  cn->eval();
  std::vector<Image2D> out;
  out.reserve(conditions.size());
  const std::size_t step = static_cast<std::size_t>(std::max(batch, 1));
  for (std::size_t lo = 0; lo < conditions.size(); lo += step) {
    const std::size_t n = std::min(step, conditions.size() - lo);
    const auto cond = condition_tensor(conditions.subspan(lo, n), cn->mask_channel() ? masks.subspan(lo, n) : masks,
                                       cn->mask_channel());
    NoisePredictor predictor = [&](const torch::Tensor& x, const torch::Tensor& t) { return cn->forward(x, t, cond); };
    const auto samples = ddpm_sample(predictor, schedule, static_cast<int>(cond.size(2)), static_cast<int>(cond.size(3)),
                                     seeds.subspan(lo, n));
    for (auto& img : images_from_batch(samples)) out.push_back(fov ? multiply(img, *fov) : std::move(img));
  }
  return out;
}

double condition_consistency(const Image2D& generated, const Image2D& condition, const BinaryMask& mask) {
  require_same_shape(generated, condition, "condition_consistency");
  require_same_shape(generated, mask, "condition_consistency");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask.pixels()[i]) continue;
    sum += std::abs(static_cast<double>(generated.pixels()[i]) - condition.pixels()[i]);
    ++n;
  }
  if (n == 0) throw UndefinedMetric("condition mask is empty");
  return sum / static_cast<double>(n);
}

AffineTransform draw_generation_affine(const Image2D& image, const PairGenConfig& config, std::mt19937_64& rng) {
  const auto fov = threshold_mask(image);
  const Point2 center = image_center(image.height(), image.width());
  for (int attempt = 0; attempt < config.max_attempts; ++attempt) {
    const auto a = sample_affine(config.gen_ranges, rng, center);
    if (overlap_fraction(overlap_mask(fov, a), fov) >= config.min_overlap) return a;
  }
  throw NoValidAffine("no affine reached overlap " + std::to_string(config.min_overlap) + " within " +
                      std::to_string(config.max_attempts) + " attempts");
}

std::vector<StitchSample> gen_stitch_pairs(ControlNet* cn, const NoiseSchedule* schedule,
                                           std::span<const Image2D> images, std::span<const std::string> sources,
                                           const PairGenConfig& config, std::uint64_t seed) {
  if (!config.warp_only && (!cn || !schedule)) throw MissingArtifact("pair generation needs a trained ControlNet");
  if (!sources.empty() && sources.size() != images.size()) throw ShapeMismatch("one source label per image");
  std::vector<StitchSample> samples(images.size());
  parallel_for(images.size(), config.jobs, [&](std::size_t k) {
    std::mt19937_64 rng(derive_seed(seed, k));
    auto& s = samples[k];
    s.moving = images[k];
    s.gt_affine = draw_generation_affine(images[k], config, rng);
    auto ci = condition_infer(images[k], s.gt_affine);
    s.overlap = overlap_fraction(ci.mask, threshold_mask(images[k]));
    s.condition = std::move(ci.image);
    s.condition_mask = std::move(ci.mask);
    if (config.warp_only) s.fixed = std::move(ci.warped);
    if (!sources.empty()) s.source = sources[k];
  });
  if (config.warp_only || samples.empty()) return samples;

  // All generated images share the sector FOV of their source.
  std::vector<Image2D> conds;
  std::vector<BinaryMask> masks;
  std::vector<std::uint64_t> seeds;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    conds.push_back(samples[k].condition);
    masks.push_back(samples[k].condition_mask);
    seeds.push_back(derive_seed(seed ^ 0x5eedf00dULL, k));
  }
  std::vector<Image2D> generated;
  generated.reserve(samples.size());
  // Consecutive samples usually share a FOV; outpaint runs of equal FOV together.
  std::size_t lo = 0;
  while (lo < samples.size()) {
    const auto fov = threshold_mask(samples[lo].moving);
    std::size_t hi = lo + 1;
    while (hi < samples.size() && threshold_mask(samples[hi].moving) == fov) ++hi;
    auto part = outpaint(*cn, *schedule, std::span<const Image2D>(conds).subspan(lo, hi - lo),
                         std::span<const BinaryMask>(masks).subspan(lo, hi - lo),
                         std::span<const std::uint64_t>(seeds).subspan(lo, hi - lo), &fov, config.batch);
    for (auto& g : part) generated.push_back(std::move(g));
    lo = hi;
  }
  for (std::size_t k = 0; k < samples.size(); ++k) samples[k].fixed = std::move(generated[k]);
  return samples;
}

StitchSample gen_stitch_pair(ControlNet* cn, const NoiseSchedule* schedule, const Image2D& image,
                             const PairGenConfig& config, std::uint64_t seed) {
  return gen_stitch_pairs(cn, schedule, std::span<const Image2D>(&image, 1), {}, config, seed).front();
}

namespace {

std::string indexed(const char* stem, std::size_t k, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%05zu.%s", stem, k, ext);
  return buf;
}

}  // namespace

void write_pairs(const std::filesystem::path& dir, const std::vector<StitchSample>& samples, const nlohmann::json& meta) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = meta.is_object() ? meta : nlohmann::json::object();
  manifest["count"] = samples.size();
  if (!samples.empty()) {
    manifest["height"] = samples.front().moving.height();
    manifest["width"] = samples.front().moving.width();
  }
  auto list = nlohmann::json::array();
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const auto& s = samples[k];
    write_f32(dir / indexed("moving", k, "f32"), s.moving);
    write_f32(dir / indexed("fixed", k, "f32"), s.fixed);
    write_f32(dir / indexed("cond", k, "f32"), s.condition);
    std::ofstream(dir / indexed("affine", k, "json"), std::ios::trunc) << to_json(s.gt_affine).dump(2) << "\n";
    list.push_back({{"k", k},
                    {"source", s.source},
                    {"overlap", s.overlap},
                    {"moving", indexed("moving", k, "f32")},
                    {"fixed", indexed("fixed", k, "f32")},
                    {"cond", indexed("cond", k, "f32")},
                    {"affine", indexed("affine", k, "json")}});
  }
  manifest["samples"] = std::move(list);
  std::ofstream(dir / "pairs_manifest.json", std::ios::trunc) << manifest.dump(2) << "\n";
}

PairSet read_pairs(const std::filesystem::path& dir) {
  std::ifstream is(dir / "pairs_manifest.json");
  if (!is) throw MissingArtifact("no pairs_manifest.json in " + dir.string() + " (run gen-pairs first)");
  PairSet set;
  try {
    is >> set.meta;
    const int h = set.meta.value("height", 0), w = set.meta.value("width", 0);
    for (const auto& e : set.meta.at("samples")) {
      StitchSample s;
      s.moving = read_f32(dir / e.at("moving").get<std::string>(), h, w);
      s.fixed = read_f32(dir / e.at("fixed").get<std::string>(), h, w);
      s.condition = read_f32(dir / e.at("cond").get<std::string>(), h, w);
      std::ifstream as(dir / e.at("affine").get<std::string>());
      if (!as) throw MissingArtifact("missing " + e.at("affine").get<std::string>());
      nlohmann::json aj;
      as >> aj;
      s.gt_affine = affine_from_json(aj);
      s.condition_mask = overlap_mask(threshold_mask(s.moving), s.gt_affine);
      s.overlap = e.at("overlap").get<double>();
      s.source = e.value("source", "");
      set.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed pairs_manifest.json: ") + e.what());
  }
  set.meta.erase("samples");
  return set;
}

}  // namespace synstitch
