#include "synstitch/ism.hpp"

#include <algorithm>
#include <cmath>

#include "synstitch/checkpoint.hpp"
#include "synstitch/errors.hpp"
#include "synstitch/torch_utils.hpp"

namespace synstitch {

std::string to_string(Backbone b) { return b == Backbone::global ? "global" : "pairenc"; }

Backbone backbone_from_string(const std::string& s) {
  if (s == "global" || s == "ism-global") return Backbone::global;
  if (s == "pairenc" || s == "ism-pairenc") return Backbone::pairenc;
  throw ValidationError("unknown ISM backbone '" + s + "' (expected global or pairenc)");
}

ParamNormalization ParamNormalization::for_size(int size) {
  ParamNormalization n;
  n.translation = size / 2.0;
  return n;
}

std::array<double, 6> ParamNormalization::normalize(const AffineParams& p) const {
  return {p.tx / translation, p.ty / translation, p.theta / rotation, std::log(p.sx) / log_scale,
          std::log(p.sy) / log_scale, p.shear / shear};
}

AffineParams ParamNormalization::denormalize(const std::array<double, 6>& v) const {
  AffineParams p;
  p.tx = v[0] * translation;
  p.ty = v[1] * translation;
  p.theta = v[2] * rotation;
  p.sx = std::exp(v[3] * log_scale);
  p.sy = std::exp(v[4] * log_scale);
  p.shear = v[5] * shear;
  return p;
}

nlohmann::json to_json(const IsmConfig& c) {
  return {{"backbone", to_string(c.backbone)}, {"size", c.size}, {"channels", c.channels}, {"hidden", c.hidden}};
}

IsmConfig ism_config_from_json(const nlohmann::json& j) {
  IsmConfig c;
  c.backbone = backbone_from_string(j.at("backbone").get<std::string>());
  c.size = j.at("size").get<int>();
  c.channels = j.at("channels").get<int>();
  c.hidden = j.at("hidden").get<int>();
  return c;
}

namespace {

void add_conv(torch::nn::Sequential& seq, int in, int out, int stride) {
  seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1)));
  seq->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
}

// Number of stride-2 stages that bring `size` down to 4.
int downsamplings(int size) {
  int n = 0;
  while (size > 4 && size % 2 == 0) {
    size /= 2;
    ++n;
  }
  if (size != 4) throw InvalidParameter("ISM input size must be 4 times a power of two");
  if (n < 2) throw InvalidParameter("ISM input size must be at least 16");
  return n;
}

}  // namespace

RegressorNetImpl::RegressorNetImpl(const IsmConfig& config) : config_(config), norm_(ParamNormalization::for_size(config.size)) {
  const int stages = downsamplings(config.size);
  const int c = config.channels;
  auto width = [&](int stage) { return c * std::min(1 << stage, 4); };
  encoder_ = torch::nn::Sequential();
  const bool global = config.backbone == Backbone::global;
  add_conv(encoder_, global ? 2 : 1, c, 1);
  // pairenc stops one stage early; the last stage runs on the concatenated features
  const int own = global ? stages : stages - 1;
  for (int s = 1; s <= own; ++s) {
    add_conv(encoder_, width(s - 1), width(s), 2);
    add_conv(encoder_, width(s), width(s), 1);
  }
  register_module("encoder", encoder_);
  if (!global) {
    joint_ = torch::nn::Sequential();
    add_conv(joint_, 2 * width(own), width(stages), 2);
    add_conv(joint_, width(stages), width(stages), 1);
    register_module("joint", joint_);
  }
  fc_ = register_module("fc", torch::nn::Linear(width(stages) * 16, config.hidden));
  head_ = register_module("head", torch::nn::Linear(config.hidden, 6));
  torch::NoGradGuard no_grad;
  head_->weight.zero_();
  head_->bias.zero_();
}

torch::Tensor RegressorNetImpl::forward(const torch::Tensor& moving, const torch::Tensor& fixed) {
  if (moving.sizes() != fixed.sizes() || moving.dim() != 4 || moving.size(1) != 1 || moving.size(2) != config_.size ||
      moving.size(3) != config_.size) {
    throw ShapeMismatch("ISM expects two (B, 1, " + std::to_string(config_.size) + ", " + std::to_string(config_.size) +
                        ") inputs");
  }
  torch::Tensor h;
  if (config_.backbone == Backbone::global) {
    h = encoder_->forward(torch::cat({moving, fixed}, 1));
  } else {
    const long b = moving.size(0);
    const auto both = encoder_->forward(torch::cat({moving, fixed}, 0));
    h = joint_->forward(torch::cat({both.slice(0, 0, b), both.slice(0, b, 2 * b)}, 1));
  }
  h = torch::leaky_relu(fc_(h.flatten(1)), 0.2);
  return head_(h);
}

torch::Tensor params_to_matrices(const torch::Tensor& v, const ParamNormalization& norm, Point2 center) {
  const auto tx = v.select(1, 0) * norm.translation;
  const auto ty = v.select(1, 1) * norm.translation;
  const auto th = v.select(1, 2) * norm.rotation;
  const auto sx = torch::exp(v.select(1, 3) * norm.log_scale);
  const auto sy = torch::exp(v.select(1, 4) * norm.log_scale);
  const auto k = v.select(1, 5) * norm.shear;
  const auto c = torch::cos(th), s = torch::sin(th);
  // R(theta) * [[1, k], [0, 1]] * diag(sx, sy)
  const auto a = c * sx;
  const auto b = (c * k - s) * sy;
  const auto d = s * sx;
  const auto e = (s * k + c) * sy;
  const auto ox = center.x + tx - (a * center.x + b * center.y);
  const auto oy = center.y + ty - (d * center.x + e * center.y);
  const auto zero = torch::zeros_like(a), one = torch::ones_like(a);
  return torch::stack({torch::stack({a, b, ox}, 1), torch::stack({d, e, oy}, 1), torch::stack({zero, zero, one}, 1)}, 1);
}

IsmPrediction ism_forward(RegressorNet& net, const Image2D& moving, const Image2D& fixed) {
  require_same_shape(moving, fixed, "ism_forward");
  torch::NoGradGuard no_grad;
  net->eval();
  const auto out = net->forward(to_tensor(moving), to_tensor(fixed)).to(torch::kFloat64);
  std::array<double, 6> v{};
  for (int i = 0; i < 6; ++i) v[i] = out[0][i].item<double>();
  IsmPrediction p;
  p.transform = params_to_matrix(net->normalization().denormalize(v), image_center(moving.height(), moving.width()));
  p.warped = warp(moving, p.transform);
  return p;
}

torch::Tensor ism_image_loss(const torch::Tensor& moving, const torch::Tensor& pred, const torch::Tensor& gt) {
  return (affine_warp(moving, pred) - affine_warp(moving, gt)).pow(2).mean();
}

torch::Tensor ism_loss(RegressorNet& net, const torch::Tensor& moving, const torch::Tensor& fixed, const torch::Tensor& gt) {
  const Point2 center = image_center(static_cast<int>(moving.size(2)), static_cast<int>(moving.size(3)));
  const auto pred = params_to_matrices(net->forward(moving, fixed), net->normalization(), center);
  return ism_image_loss(moving, pred, gt.to(moving.scalar_type()));
}

PairTensors to_pair_tensors(std::span<const StitchSample> samples) {
  PairTensors t;
  if (samples.empty()) return t;
  std::vector<Image2D> m, f;
  auto gt = torch::empty({static_cast<long>(samples.size()), 3, 3}, torch::kFloat32);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    m.push_back(samples[i].moving);
    f.push_back(samples[i].fixed);
    gt[static_cast<long>(i)] = matrix_tensor(samples[i].gt_affine).to(torch::kFloat32);
  }
  t.moving = to_tensor(m);
  t.fixed = to_tensor(f);
  t.gt = gt;
  return t;
}

IsmTrainState make_ism_state(RegressorNet& net, double lr, std::uint64_t seed) {
  IsmTrainState s;
  s.optimizer = std::make_unique<torch::optim::Adam>(net->parameters(), torch::optim::AdamOptions(lr));
  s.gen = make_generator(seed);
  for (const auto& p : net->parameters()) s.best_params.push_back(p.detach().clone());
  return s;
}

double evaluate_loss(RegressorNet& net, const PairTensors& data, int batch) {
  torch::NoGradGuard no_grad;
  net->eval();
  double total = 0.0;
  for (long lo = 0; lo < data.size(); lo += batch) {
    const long hi = std::min(data.size(), lo + batch);
    total += ism_loss(net, data.moving.slice(0, lo, hi), data.fixed.slice(0, lo, hi), data.gt.slice(0, lo, hi))
                 .item<double>() *
             static_cast<double>(hi - lo);
  }
  return data.size() > 0 ? total / static_cast<double>(data.size()) : 0.0;
}

void train_ism(RegressorNet& net, const PairTensors& train, const PairTensors& val, const IsmTrainConfig& config,
               IsmTrainState& state) {
  if (train.size() == 0) throw InvalidParameter("ISM training needs a nonempty pair set");
  const long n = train.size();
  while (state.epoch < config.epochs && !state.stopped) {
    net->train();
    const auto perm = torch::randperm(n, state.gen, torch::TensorOptions().dtype(torch::kLong));
    double total = 0.0;
    for (long lo = 0; lo < n; lo += config.batch) {
      const auto idx = perm.slice(0, lo, std::min(n, lo + config.batch));
      auto m = train.moving.index_select(0, idx);
      auto f = train.fixed.index_select(0, idx);
      auto g = train.gt.index_select(0, idx);
      if (config.swap_augment) {
        const auto swap = torch::rand({idx.size(0)}, state.gen) < 0.5;
        const auto s4 = swap.view({-1, 1, 1, 1});
        const auto m2 = torch::where(s4, f, m);
        f = torch::where(s4, m, f);
        m = m2;
        g = torch::where(swap.view({-1, 1, 1}), torch::linalg_inv(g), g);
      }
      state.optimizer->zero_grad();
      auto loss = ism_loss(net, m, f, g);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) throw TrainingDiverged("ISM loss became non-finite in epoch " + std::to_string(state.epoch));
      loss.backward();
      state.optimizer->step();
      total += value * static_cast<double>(idx.size(0));
    }
    const double train_loss = total / static_cast<double>(n);
    const double val_loss = val.size() > 0 ? evaluate_loss(net, val) : train_loss;
    ++state.epoch;
    state.curve.push_back({static_cast<double>(state.epoch), train_loss, val_loss});
    if (val_loss < state.best_val) {
      state.best_val = val_loss;
      state.bad_epochs = 0;
      state.best_params.clear();
      for (const auto& p : net->parameters()) state.best_params.push_back(p.detach().clone());
    } else if (++state.bad_epochs >= config.patience) {
      state.stopped = true;
    }
  }
}

void restore_best(RegressorNet& net, const IsmTrainState& state) {
  torch::NoGradGuard no_grad;
  auto params = net->parameters();
  if (params.size() != state.best_params.size()) throw ShapeMismatch("best-parameter snapshot does not fit the network");
  for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(state.best_params[i]);
}

void save_ism(const std::filesystem::path& dir, RegressorNet& net, IsmTrainState& state, const IsmTrainConfig& config,
              const nlohmann::json& extra) {
  Checkpoint ck;
  ck.meta = extra.is_object() ? extra : nlohmann::json::object();
  ck.meta["kind"] = "ism";
  ck.meta["arch"] = to_json(net->config());
  ck.meta["epoch"] = state.epoch;
  ck.meta["bad_epochs"] = state.bad_epochs;
  ck.meta["best_val"] = state.best_val;
  ck.meta["stopped"] = state.stopped;
  ck.meta["rng_state"] = generator_state(state.gen);
  ck.meta["lr"] = config.lr;
  ck.meta["train"] = {{"epochs", config.epochs}, {"batch", config.batch}, {"patience", config.patience},
                      {"swap_augment", config.swap_augment}};
  auto curve = nlohmann::json::array();
  for (const auto& c : state.curve) curve.push_back({c[0], c[1], c[2]});
  ck.meta["curve"] = std::move(curve);
  for (const auto& c : state.curve) ck.losses.emplace_back(static_cast<long>(c[0]), c[2]);
  save_checkpoint(dir, *net, state.optimizer.get(), ck);
  RegressorNet best(net->config());
  restore_best(best, state);
  write_parameter_blob(dir / "best.bin", *best);
}

LoadedIsm load_ism(const std::filesystem::path& dir, IsmTrainState* state) {
  const auto meta = read_checkpoint_meta(dir);
  if (meta.value("kind", "") != "ism") throw ValidationError(dir.string() + " is not an ISM checkpoint");
  LoadedIsm out;
  out.net = RegressorNet(ism_config_from_json(meta.at("arch")));
  out.meta = meta;
  if (!state) {
    read_parameter_blob(dir / "best.bin", *out.net);
    return out;
  }
  *state = make_ism_state(out.net, meta.value("lr", 1e-3), 0);
  load_checkpoint(dir, *out.net, state->optimizer.get());
  RegressorNet best(out.net->config());
  read_parameter_blob(dir / "best.bin", *best);
  state->best_params.clear();
  for (const auto& p : best->parameters()) state->best_params.push_back(p.detach().clone());
  set_generator_state(state->gen, meta.at("rng_state").get<std::string>());
  state->epoch = meta.at("epoch").get<int>();
  state->bad_epochs = meta.at("bad_epochs").get<int>();
  state->best_val = meta.at("best_val").is_null() ? std::numeric_limits<double>::infinity() : meta.at("best_val").get<double>();
  state->stopped = meta.at("stopped").get<bool>();
  for (const auto& c : meta.at("curve")) state->curve.push_back({c[0].get<double>(), c[1].get<double>(), c[2].get<double>()});
  return out;
}

std::string to_string(Blend b) {
  switch (b) {
    case Blend::average: return "average";
    case Blend::feather: return "feather";
    case Blend::max: return "max";
  }
  return "average";
}

Blend blend_from_string(const std::string& s) {
  if (s == "average") return Blend::average;
  if (s == "feather") return Blend::feather;
  if (s == "max") return Blend::max;
  throw ValidationError("unknown blend mode '" + s + "' (expected average, feather or max)");
}

namespace {

// Chamfer (3-4) distance from each set pixel to the nearest unset pixel or the grid border.
Image2D inside_distance(const BinaryMask& mask) {
  const int h = mask.height(), w = mask.width();
  const float big = 1e9f;
  Image2D d(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) d(y, x) = mask(y, x) ? big : 0.f;
  auto at = [&](int y, int x) { return d.contains(y, x) ? d(y, x) : 0.f; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (d(y, x) == 0.f) continue;
      d(y, x) = std::min({d(y, x), at(y, x - 1) + 3, at(y - 1, x) + 3, at(y - 1, x - 1) + 4, at(y - 1, x + 1) + 4});
    }
  for (int y = h - 1; y >= 0; --y)
    for (int x = w - 1; x >= 0; --x) {
      if (d(y, x) == 0.f) continue;
      d(y, x) = std::min({d(y, x), at(y, x + 1) + 3, at(y + 1, x) + 3, at(y + 1, x + 1) + 4, at(y + 1, x - 1) + 4});
    }
  return d;
}

bool on_contour(const BinaryMask& m, int y, int x) {
  if (!m(y, x)) return false;
  constexpr int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
  for (int i = 0; i < 4; ++i) {
    const int yy = y + dy[i], xx = x + dx[i];
    if (!m.contains(yy, xx) || !m(yy, xx)) return true;
  }
  return false;
}

}  // namespace

std::pair<Image2D, Image2D> blend_weights(const BinaryMask& wm, const BinaryMask& fm, Blend blend) {
  require_same_shape(wm, fm, "blend_weights");
  if (blend == Blend::max) throw InvalidParameter("max blending has no per-pixel weights");
  Image2D a(wm.height(), wm.width(), 0.f), b(wm.height(), wm.width(), 0.f);
  Image2D da, db;
  if (blend == Blend::feather) {
    da = inside_distance(wm);
    db = inside_distance(fm);
  }
  for (int y = 0; y < wm.height(); ++y)
    for (int x = 0; x < wm.width(); ++x) {
      const bool in_a = wm(y, x), in_b = fm(y, x);
      if (in_a && in_b) {
        if (blend == Blend::average) {
          a(y, x) = b(y, x) = 0.5f;
        } else {
          a(y, x) = da(y, x) / (da(y, x) + db(y, x));
          b(y, x) = 1.f - a(y, x);
        }
      } else if (in_a) {
        a(y, x) = 1.f;
      } else if (in_b) {
        b(y, x) = 1.f;
      }
    }
  return {a, b};
}

RgbImage contour_overlay(const Image2D& composite, const BinaryMask& moving_mask, const BinaryMask& fixed_mask) {
  require_same_shape(composite, moving_mask, "contour_overlay");
  require_same_shape(composite, fixed_mask, "contour_overlay");
  RgbImage out{composite.height(), composite.width(), {}};
  out.rgb.resize(composite.size() * 3);
  for (int y = 0; y < composite.height(); ++y)
    for (int x = 0; x < composite.width(); ++x) {
      auto* px = &out.rgb[(static_cast<std::size_t>(y) * composite.width() + x) * 3];
      const auto g = static_cast<std::uint8_t>(std::lround(std::clamp(composite(y, x), 0.f, 1.f) * 255.f));
      px[0] = px[1] = px[2] = g;
      if (on_contour(fixed_mask, y, x)) {
        px[0] = 0, px[1] = 0, px[2] = 255;
      }
      if (on_contour(moving_mask, y, x)) {
        px[0] = 255, px[1] = 255, px[2] = 0;
      }
    }
  return out;
}

StitchResult stitch_with(const Image2D& moving, const Image2D& fixed, const AffineTransform& transform, Blend blend) {
  require_same_shape(moving, fixed, "stitch");
  const Image2D warped = warp(moving, transform);
  const BinaryMask wm = warp(threshold_mask(moving), transform);
  const BinaryMask fm = threshold_mask(fixed);
  StitchResult r;
  r.transform = transform;
  r.composite = Image2D(fixed.height(), fixed.width(), 0.f);
  if (blend == Blend::max) {
    for (int y = 0; y < fixed.height(); ++y)
      for (int x = 0; x < fixed.width(); ++x) {
        const float a = wm(y, x) ? warped(y, x) : 0.f;
        const float b = fm(y, x) ? fixed(y, x) : 0.f;
        r.composite(y, x) = std::max(a, b);
      }
  } else {
    const auto [wa, wb] = blend_weights(wm, fm, blend);
    for (std::size_t i = 0; i < r.composite.size(); ++i) {
      r.composite.pixels()[i] = wa.pixels()[i] * warped.pixels()[i] + wb.pixels()[i] * fixed.pixels()[i];
    }
  }
  r.overlay = contour_overlay(r.composite, wm, fm);
  return r;
}

StitchResult stitch(RegressorNet& net, const Image2D& moving, const Image2D& fixed, Blend blend) {
  return stitch_with(moving, fixed, ism_forward(net, moving, fixed).transform, blend);
}

}  // namespace synstitch
