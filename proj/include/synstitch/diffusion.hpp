#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

namespace synstitch {

/// Linear-beta DDPM schedule. Indices are 0-based: alpha_bar[t] = prod_{s <= t} alpha[s].
struct NoiseSchedule {
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  double beta_lo = 0.0;
  double beta_hi = 0.0;

  int steps() const { return static_cast<int>(beta.size()); }
};

NoiseSchedule make_schedule(int steps, double beta_lo, double beta_hi);
nlohmann::json to_json(const NoiseSchedule& schedule);
NoiseSchedule schedule_from_json(const nlohmann::json& j);

/// I_t = sqrt(alpha_bar_t) I + sqrt(1 - alpha_bar_t) eps, with one timestep per batch item.
/// Computed in the dtype of `image` (use float64 for exact algebra checks).
torch::Tensor forward_diffuse(const torch::Tensor& image, const torch::Tensor& t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule);
torch::Tensor forward_diffuse(const torch::Tensor& image, int t, const torch::Tensor& eps, const NoiseSchedule& schedule);

struct UNetConfig {
  std::vector<int> channels{16, 32, 32};  // per resolution level
  int groups = 8;                         // GroupNorm groups (reduced to divide each width)
  int embedding_multiplier = 4;           // time-embedding width = multiplier * channels[0]
  int in_channels = 1;
};

nlohmann::json to_json(const UNetConfig& config);
UNetConfig unet_config_from_json(const nlohmann::json& j);

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int in_channels, int out_channels, int embedding_dim, int groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& embedding);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Linear time_proj_{nullptr};
  torch::nn::Conv2d skip_{nullptr};
};
TORCH_MODULE(ResBlock);

struct EncoderOutput {
  torch::Tensor embedding;
  std::vector<torch::Tensor> skips;  // one per level, finest first
  torch::Tensor middle;
};

/// Input convolution, time embedding, downsampling path and middle block.
/// The ControlNet trainable copy is an instance of this module.
class UNetEncoderImpl : public torch::nn::Module {
 public:
  explicit UNetEncoderImpl(const UNetConfig& config);
  /// `input_residual`, when defined, is added right after the input convolution.
  EncoderOutput forward(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& input_residual = {});

  const UNetConfig& config() const { return config_; }

 private:
  UNetConfig config_;
  torch::nn::Conv2d conv_in_{nullptr};
  torch::nn::Linear time_fc1_{nullptr}, time_fc2_{nullptr};
  torch::nn::ModuleList blocks_{nullptr};
  torch::nn::ModuleList downs_{nullptr};
  ResBlock middle_{nullptr};
};
TORCH_MODULE(UNetEncoder);

/// Additive residuals from a ControlNet: one per skip connection plus the middle block.
struct Injection {
  std::vector<torch::Tensor> skips;
  torch::Tensor middle;
};

/// Noise-prediction U-Net (epsilon_theta).
class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(const UNetConfig& config);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t, const Injection* injection = nullptr);

  UNetEncoder encoder() const { return encoder_; }
  const UNetConfig& config() const { return config_; }

 private:
  UNetConfig config_;
  UNetEncoder encoder_{nullptr};
  torch::nn::ModuleList blocks_{nullptr};
  torch::nn::ModuleList ups_{nullptr};
  torch::nn::GroupNorm norm_out_{nullptr};
  torch::nn::Conv2d conv_out_{nullptr};
};
TORCH_MODULE(UNet);

/// Sinusoidal embedding of integer timesteps, (B) -> (B, dim).
torch::Tensor timestep_embedding(const torch::Tensor& t, int dim, torch::ScalarType dtype);

using NoisePredictor = std::function<torch::Tensor(const torch::Tensor& x_t, const torch::Tensor& t)>;

/// Mean over batch pixels of (eps - predictor(I_t, t))^2 with t ~ U{0..T-1}, eps ~ N(0, 1).
torch::Tensor dm_loss(const NoisePredictor& predictor, const torch::Tensor& batch, const NoiseSchedule& schedule,
                      at::Generator& gen);

struct TrainConfig {
  long steps = 2000;
  int batch = 32;
  double lr = 1e-4;
  long log_every = 10;
};

/// Optimizer, RNG stream and step counter of one training run.
struct TrainState {
  std::unique_ptr<torch::optim::Adam> optimizer;
  at::Generator gen;
  long step = 0;
  std::vector<std::pair<long, double>> losses;
};

TrainState make_train_state(std::vector<torch::Tensor> parameters, double lr, std::uint64_t seed);

/// One optimization step of `loss_fn` on a batch drawn with the state's generator.
/// Throws TrainingDiverged on a non-finite loss.
double train_step(TrainState& state, const torch::Tensor& dataset, int batch,
                  const std::function<torch::Tensor(const torch::Tensor& batch, at::Generator& gen)>& loss_fn);

/// Runs train steps until state.step == config.steps.
void train_diffusion(UNet& net, const torch::Tensor& dataset, const NoiseSchedule& schedule, const TrainConfig& config,
                     TrainState& state);

void save_diffusion(const std::filesystem::path& dir, UNet& net, const NoiseSchedule& schedule, TrainState& state,
                    const nlohmann::json& extra = {});
struct LoadedDiffusion {
  UNet net{nullptr};
  NoiseSchedule schedule;
  nlohmann::json meta;
};
/// Loads architecture + weights. When `state` is given the optimizer, RNG and step are restored into it.
LoadedDiffusion load_diffusion(const std::filesystem::path& dir, TrainState* state = nullptr, double lr = 1e-4);

/// Ancestral DDPM sampling: x_T ~ N(0, 1), then for t = T-1..0
///   x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t) + sqrt(beta_t) z  (z = 0 at t = 0)
/// Sample i draws all of its noise from its own generator seeded with seeds[i], so
/// results do not depend on batch composition. The output is clamped to [0, 1].
torch::Tensor ddpm_sample(const NoisePredictor& predictor, const NoiseSchedule& schedule, int height, int width,
                          std::span<const std::uint64_t> seeds);

}  // namespace synstitch
