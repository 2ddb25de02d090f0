#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "synstitch/diffusion.hpp"
#include "synstitch/geometry.hpp"

namespace synstitch {

/// Trainable copy of the denoiser's encoder and middle block, driven by a
/// condition patch and wired into the frozen base through zero convolutions.
class ControlNetImpl : public torch::nn::Module {
 public:
  /// Copies the base encoder weights and freezes every base parameter.
  /// With `mask_channel` the condition is (C, M_c) stacked as two channels.
  ControlNetImpl(UNet base, bool mask_channel = false);

  /// Residuals for every decoder skip and the middle block.
  Injection inject(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& cond);
  /// Noise prediction of the frozen base with this network's injection.
  torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& cond);

  UNet base() const { return base_; }
  bool mask_channel() const { return mask_channel_; }
  int condition_channels() const { return mask_channel_ ? 2 : 1; }

 private:
  UNet base_{nullptr};  // not registered: its weights live in the base checkpoint
  bool mask_channel_;
  UNetEncoder copy_{nullptr};
  torch::nn::Conv2d zero_in_{nullptr};
  torch::nn::ModuleList zero_skips_{nullptr};
  torch::nn::Conv2d zero_mid_{nullptr};
};
TORCH_MODULE(ControlNet);

/// (B, 1 or 2, H, W) condition tensor from condition images and their masks.
torch::Tensor condition_tensor(std::span<const Image2D> images, std::span<const BinaryMask> masks, bool mask_channel);

using ConditionedPredictor =
    std::function<torch::Tensor(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& cond)>;

/// dm_loss with the condition routed to the predictor; draws t and eps exactly as dm_loss does.
torch::Tensor op_loss(const ConditionedPredictor& predictor, const torch::Tensor& batch, const torch::Tensor& cond,
                      const NoiseSchedule& schedule, at::Generator& gen);

struct ControlNetTrainConfig {
  long steps = 2000;
  int batch = 32;
  double lr = 1e-4;
  AffineRanges train_ranges{{-24, 24}, {-3.14159265358979323846 / 12, 3.14159265358979323846 / 12}, {0.9, 1.1}};
  double min_overlap = 0.3;
};

/// Draws an affine from `ranges` with the torch generator, redrawing (at most
/// 100 times) until the FOV overlap reaches `min_overlap`. Throws NoValidAffine.
AffineTransform draw_condition_affine(const BinaryMask& fov, const AffineRanges& ranges, double min_overlap,
                                      at::Generator& gen);

/// Optimizes the trainable copy and zero convolutions only; conditions are built on the fly.
void train_controlnet(ControlNet& cn, const torch::Tensor& dataset, const NoiseSchedule& schedule,
                      const ControlNetTrainConfig& config, TrainState& state);

void save_controlnet(const std::filesystem::path& dir, ControlNet& cn, const NoiseSchedule& schedule, TrainState& state,
                     const ControlNetTrainConfig& config, const nlohmann::json& extra = {});
struct LoadedControlNet {
  ControlNet net{nullptr};
  NoiseSchedule schedule;
  nlohmann::json meta;
};
/// Loads a ControlNet on top of an already loaded base. The base parameter hash must match the one recorded.
LoadedControlNet load_controlnet(const std::filesystem::path& dir, UNet base, TrainState* state = nullptr);

/// Ancestral sampling with the condition injected at every step; one seed per condition.
/// When `fov` is given the output is multiplied by it (generated images keep the sector FOV).
std::vector<Image2D> outpaint(ControlNet& cn, const NoiseSchedule& schedule, std::span<const Image2D> conditions,
                              std::span<const BinaryMask> masks, std::span<const std::uint64_t> seeds,
                              const BinaryMask* fov = nullptr, int batch = 16);

/// Mean |I_p - C| over the condition mask.
double condition_consistency(const Image2D& generated, const Image2D& condition, const BinaryMask& mask);

struct StitchSample {
  Image2D moving;           // I
  Image2D fixed;            // I_s
  AffineTransform gt_affine;
  Image2D condition;        // C_s
  BinaryMask condition_mask;
  double overlap = 0.0;
  std::string source;       // provenance of I, e.g. "s03/017"
};

struct PairGenConfig {
  AffineRanges gen_ranges{{-8, 8}, {-3.14159265358979323846 / 24, 3.14159265358979323846 / 24}, {0.9, 1.1}};
  double min_overlap = 0.3;
  int max_attempts = 100;
  bool warp_only = false;  // I_s = warp(I, A), bypassing the generative model
  int batch = 16;
  int jobs = 1;
};

/// Rejection-samples A until overlap_fraction >= min_overlap. Throws NoValidAffine when the budget runs out.
AffineTransform draw_generation_affine(const Image2D& image, const PairGenConfig& config, std::mt19937_64& rng);

/// One sample per source image; sample k uses its own RNG stream derived from (seed, k).
/// `cn` may be null only in warp-only mode.
std::vector<StitchSample> gen_stitch_pairs(ControlNet* cn, const NoiseSchedule* schedule,
                                           std::span<const Image2D> images, std::span<const std::string> sources,
                                           const PairGenConfig& config, std::uint64_t seed);
StitchSample gen_stitch_pair(ControlNet* cn, const NoiseSchedule* schedule, const Image2D& image,
                             const PairGenConfig& config, std::uint64_t seed);

/// Pair directory: pairs_manifest.json + moving_<k>.f32, fixed_<k>.f32, cond_<k>.f32, affine_<k>.json.
void write_pairs(const std::filesystem::path& dir, const std::vector<StitchSample>& samples, const nlohmann::json& meta);
struct PairSet {
  nlohmann::json meta;
  std::vector<StitchSample> samples;
};
PairSet read_pairs(const std::filesystem::path& dir);

}  // namespace synstitch
