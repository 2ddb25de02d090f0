#include "synstitch/diffusion.hpp"

#include <cmath>
#include <numbers>

#include "synstitch/checkpoint.hpp"
#include "synstitch/errors.hpp"
#include "synstitch/torch_utils.hpp"

namespace synstitch {

namespace {

int group_count(int channels, int groups) {
  int g = std::max(1, std::min(groups, channels));
  while (channels % g != 0) --g;
  return g;
}

torch::Tensor coefficient(const std::vector<double>& values, const torch::Tensor& t, const torch::Tensor& like) {
  auto table = torch::tensor(values, torch::kFloat64);
  return table.index_select(0, t.to(torch::kLong)).to(like.scalar_type()).view({-1, 1, 1, 1});
}

}  // namespace

NoiseSchedule make_schedule(int steps, double beta_lo, double beta_hi) {
  if (steps < 1) throw InvalidRange("schedule needs at least one step");
  if (!(beta_lo > 0.0 && beta_lo <= beta_hi && beta_hi < 1.0)) {
    throw InvalidRange("schedule needs 0 < beta_lo <= beta_hi < 1");
  }
  NoiseSchedule s;
  s.beta_lo = beta_lo;
  s.beta_hi = beta_hi;
  s.beta.resize(steps);
  s.alpha.resize(steps);
  s.alpha_bar.resize(steps);
  double running = 1.0;
  for (int t = 0; t < steps; ++t) {
    s.beta[t] = steps == 1 ? beta_lo : beta_lo + (beta_hi - beta_lo) * t / static_cast<double>(steps - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    running *= s.alpha[t];
    s.alpha_bar[t] = running;
  }
  return s;
}

nlohmann::json to_json(const NoiseSchedule& s) {
  return {{"steps", s.steps()}, {"beta_lo", s.beta_lo}, {"beta_hi", s.beta_hi}, {"kind", "linear"}};
}

NoiseSchedule schedule_from_json(const nlohmann::json& j) {
  return make_schedule(j.at("steps").get<int>(), j.at("beta_lo").get<double>(), j.at("beta_hi").get<double>());
}

torch::Tensor forward_diffuse(const torch::Tensor& image, const torch::Tensor& t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule) {
  if (image.sizes() != eps.sizes()) throw ShapeMismatch("forward_diffuse: image and noise shapes differ");
  if (t.dim() != 1 || t.size(0) != image.size(0)) throw ShapeMismatch("forward_diffuse: need one timestep per item");
  if (t.numel() > 0 && (t.min().item<long>() < 0 || t.max().item<long>() >= schedule.steps())) {
    throw InvalidParameter("forward_diffuse: timestep out of range");
  }
  std::vector<double> sqrt_ab(schedule.steps()), sqrt_1m(schedule.steps());
  for (int i = 0; i < schedule.steps(); ++i) {
    sqrt_ab[i] = std::sqrt(schedule.alpha_bar[i]);
    sqrt_1m[i] = std::sqrt(1.0 - schedule.alpha_bar[i]);
  }
  return coefficient(sqrt_ab, t, image) * image + coefficient(sqrt_1m, t, image) * eps;
}

torch::Tensor forward_diffuse(const torch::Tensor& image, int t, const torch::Tensor& eps, const NoiseSchedule& schedule) {
  return forward_diffuse(image, torch::full({image.size(0)}, t, torch::kLong), eps, schedule);
}

nlohmann::json to_json(const UNetConfig& c) {
  return {{"channels", c.channels},
          {"groups", c.groups},
          {"embedding_multiplier", c.embedding_multiplier},
          {"in_channels", c.in_channels}};
}

UNetConfig unet_config_from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.channels = j.at("channels").get<std::vector<int>>();
  c.groups = j.at("groups").get<int>();
  c.embedding_multiplier = j.at("embedding_multiplier").get<int>();
  c.in_channels = j.value("in_channels", 1);
  if (c.channels.empty()) throw ValidationError("U-Net needs at least one level");
  return c;
}

ResBlockImpl::ResBlockImpl(int in_channels, int out_channels, int embedding_dim, int groups) {
  using namespace torch::nn;
  norm1_ = register_module("norm1", GroupNorm(GroupNormOptions(group_count(in_channels, groups), in_channels)));
  conv1_ = register_module("conv1", Conv2d(Conv2dOptions(in_channels, out_channels, 3).padding(1)));
  time_proj_ = register_module("time_proj", Linear(embedding_dim, out_channels));
  norm2_ = register_module("norm2", GroupNorm(GroupNormOptions(group_count(out_channels, groups), out_channels)));
  conv2_ = register_module("conv2", Conv2d(Conv2dOptions(out_channels, out_channels, 3).padding(1)));
  if (in_channels != out_channels) skip_ = register_module("skip", Conv2d(Conv2dOptions(in_channels, out_channels, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& embedding) {
  auto h = conv1_(torch::silu(norm1_(x)));
  h = h + time_proj_(torch::silu(embedding)).unsqueeze(-1).unsqueeze(-1);
  h = conv2_(torch::silu(norm2_(h)));
  return h + (skip_ ? skip_(x) : x);
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim, torch::ScalarType dtype) {
  const int half = dim / 2;
  auto freqs = torch::exp(torch::arange(half, torch::TensorOptions().dtype(dtype)) *
                          (-std::log(10000.0) / std::max(half, 1)));
  auto args = t.to(dtype).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
  if (dim % 2 == 1) emb = torch::nn::functional::pad(emb, torch::nn::functional::PadFuncOptions({0, 1}));
  return emb;
}

UNetEncoderImpl::UNetEncoderImpl(const UNetConfig& config) : config_(config) {
  using namespace torch::nn;
  if (config.channels.empty()) throw InvalidParameter("U-Net needs at least one level");
  const int emb = config.embedding_multiplier * config.channels.front();
  conv_in_ = register_module("conv_in", Conv2d(Conv2dOptions(config.in_channels, config.channels.front(), 3).padding(1)));
  time_fc1_ = register_module("time_fc1", Linear(emb, emb));
  time_fc2_ = register_module("time_fc2", Linear(emb, emb));
  blocks_ = register_module("blocks", ModuleList());
  downs_ = register_module("downs", ModuleList());
  int prev = config.channels.front();
  for (std::size_t i = 0; i < config.channels.size(); ++i) {
    const int ch = config.channels[i];
    blocks_->push_back(ResBlock(prev, ch, emb, config.groups));
    if (i + 1 < config.channels.size()) downs_->push_back(Conv2d(Conv2dOptions(ch, ch, 3).stride(2).padding(1)));
    prev = ch;
  }
  middle_ = register_module("middle", ResBlock(prev, prev, emb, config.groups));
}

EncoderOutput UNetEncoderImpl::forward(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& input_residual) {
  const long levels = static_cast<long>(config_.channels.size());
  const long factor = 1L << (levels - 1);
  if (x.dim() != 4 || x.size(1) != config_.in_channels || x.size(2) % factor != 0 || x.size(3) % factor != 0) {
    throw ShapeMismatch("U-Net input must be (B, C, H, W) with H, W divisible by " + std::to_string(factor));
  }
  EncoderOutput out;
  const int emb_dim = config_.embedding_multiplier * config_.channels.front();
  out.embedding = time_fc2_(torch::silu(time_fc1_(timestep_embedding(t, emb_dim, x.scalar_type()))));
  auto h = conv_in_(x);
  if (input_residual.defined()) h = h + input_residual;
  for (long i = 0; i < levels; ++i) {
    h = blocks_[i]->as<ResBlock>()->forward(h, out.embedding);
    out.skips.push_back(h);
    if (i + 1 < levels) h = downs_[i]->as<torch::nn::Conv2d>()->forward(h);
  }
  out.middle = middle_(h, out.embedding);
  return out;
}

UNetImpl::UNetImpl(const UNetConfig& config) : config_(config) {
  using namespace torch::nn;
  encoder_ = register_module("encoder", UNetEncoder(config));
  const int emb = config.embedding_multiplier * config.channels.front();
  blocks_ = register_module("dec_blocks", ModuleList());
  ups_ = register_module("ups", ModuleList());
  const long levels = static_cast<long>(config.channels.size());
  // decoder runs from the coarsest level to the finest
  for (long i = levels - 1; i >= 0; --i) {
    const int ch = config.channels[i];
    blocks_->push_back(ResBlock(2 * ch, ch, emb, config.groups));
    if (i > 0) ups_->push_back(Conv2d(Conv2dOptions(ch, config.channels[i - 1], 3).padding(1)));
  }
  norm_out_ = register_module(
      "norm_out", GroupNorm(GroupNormOptions(group_count(config.channels.front(), config.groups), config.channels.front())));
  conv_out_ = register_module("conv_out", Conv2d(Conv2dOptions(config.channels.front(), config.in_channels, 3).padding(1)));
  torch::NoGradGuard no_grad;
  conv_out_->weight.zero_();
  conv_out_->bias.zero_();
}

torch::Tensor UNetImpl::forward(const torch::Tensor& x, const torch::Tensor& t, const Injection* injection) {
  const long levels = static_cast<long>(config_.channels.size());
  auto enc = encoder_(x, t);
  auto h = enc.middle;
  if (injection && injection->middle.defined()) h = h + injection->middle;
  for (long i = levels - 1, j = 0; i >= 0; --i, ++j) {
    auto skip = enc.skips[i];
    if (injection && static_cast<long>(injection->skips.size()) > i && injection->skips[i].defined()) {
      skip = skip + injection->skips[i];
    }
    h = blocks_[j]->as<ResBlock>()->forward(torch::cat({h, skip}, 1), enc.embedding);
    if (i > 0) {
      h = torch::nn::functional::interpolate(
          h, torch::nn::functional::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
      h = ups_[j]->as<torch::nn::Conv2d>()->forward(h);
    }
  }
  return conv_out_(torch::silu(norm_out_(h)));
}

torch::Tensor dm_loss(const NoisePredictor& predictor, const torch::Tensor& batch, const NoiseSchedule& schedule,
                      at::Generator& gen) {
  const auto t = torch::randint(0, schedule.steps(), {batch.size(0)}, gen, torch::TensorOptions().dtype(torch::kLong));
  const auto eps = torch::randn(batch.sizes(), gen, batch.options());
  const auto x_t = forward_diffuse(batch, t, eps, schedule);
  return (eps - predictor(x_t, t)).pow(2).mean();
}

TrainState make_train_state(std::vector<torch::Tensor> parameters, double lr, std::uint64_t seed) {
  TrainState s;
  s.optimizer = std::make_unique<torch::optim::Adam>(std::move(parameters), torch::optim::AdamOptions(lr));
  s.gen = make_generator(seed);
  return s;
}

double train_step(TrainState& state, const torch::Tensor& dataset, int batch,
                  const std::function<torch::Tensor(const torch::Tensor&, at::Generator&)>& loss_fn) {
  const auto idx = torch::randint(0, dataset.size(0), {batch}, state.gen, torch::TensorOptions().dtype(torch::kLong));
  const auto b = dataset.index_select(0, idx);
  state.optimizer->zero_grad();
  auto loss = loss_fn(b, state.gen);
  const double value = loss.item<double>();
  if (!std::isfinite(value)) {
    throw TrainingDiverged("loss became non-finite at step " + std::to_string(state.step));
  }
  loss.backward();
  state.optimizer->step();
  ++state.step;
  state.losses.emplace_back(state.step, value);
  return value;
}

void train_diffusion(UNet& net, const torch::Tensor& dataset, const NoiseSchedule& schedule, const TrainConfig& config,
                     TrainState& state) {
  if (dataset.size(0) == 0) throw InvalidParameter("diffusion training needs a nonempty dataset");
  net->train();
  auto predictor = [&](const torch::Tensor& x, const torch::Tensor& t) { return net->forward(x, t); };
  while (state.step < config.steps) {
    train_step(state, dataset, config.batch,
               [&](const torch::Tensor& b, at::Generator& gen) { return dm_loss(predictor, b, schedule, gen); });
  }
}

void save_diffusion(const std::filesystem::path& dir, UNet& net, const NoiseSchedule& schedule, TrainState& state,
                    const nlohmann::json& extra) {
  Checkpoint ck;
  ck.meta = extra.is_object() ? extra : nlohmann::json::object();
  ck.meta["kind"] = "diffusion";
  ck.meta["arch"] = to_json(net->config());
  ck.meta["schedule"] = to_json(schedule);
  ck.meta["step"] = state.step;
  ck.meta["rng_state"] = generator_state(state.gen);
  ck.meta["lr"] = static_cast<torch::optim::AdamOptions&>(state.optimizer->param_groups().front().options()).lr();
  ck.losses = state.losses;
  save_checkpoint(dir, *net, state.optimizer.get(), ck);
}

LoadedDiffusion load_diffusion(const std::filesystem::path& dir, TrainState* state, double lr) {
  const auto meta = read_checkpoint_meta(dir);
  if (meta.value("kind", "") != "diffusion") throw ValidationError(dir.string() + " is not a diffusion checkpoint");
  LoadedDiffusion out;
  out.net = UNet(unet_config_from_json(meta.at("arch")));
  out.schedule = schedule_from_json(meta.at("schedule"));
  if (state) {
    *state = make_train_state(out.net->parameters(), meta.value("lr", lr), 0);
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

torch::Tensor ddpm_sample(const NoisePredictor& predictor, const NoiseSchedule& schedule, int height, int width,
                          std::span<const std::uint64_t> seeds) {
  torch::NoGradGuard no_grad;
  const long n = static_cast<long>(seeds.size());
  if (n == 0) throw InvalidParameter("ddpm_sample needs at least one seed");
  std::vector<at::Generator> gens;
  gens.reserve(seeds.size());
  for (auto s : seeds) gens.push_back(make_generator(s));
  auto noise = [&] {
    std::vector<torch::Tensor> parts;
    parts.reserve(gens.size());
    for (auto& g : gens) parts.push_back(torch::randn({1, 1, height, width}, g, torch::kFloat32));
    return torch::cat(parts, 0);
  };
  auto x = noise();
  for (int t = schedule.steps() - 1; t >= 0; --t) {
    const auto tt = torch::full({n}, t, torch::kLong);
    const auto eps = predictor(x, tt);
    const double beta = schedule.beta[t];
    const double coef = beta / std::sqrt(1.0 - schedule.alpha_bar[t]);
    x = (x - coef * eps) / std::sqrt(schedule.alpha[t]);
    if (t > 0) x = x + std::sqrt(beta) * noise();
    if (!torch::isfinite(x).all().item<bool>()) {
      throw SamplingDiverged("non-finite activations at sampling step " + std::to_string(t));
    }
  }
  return x.clamp(0.0, 1.0);
}

}  // namespace synstitch
