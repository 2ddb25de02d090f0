#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "synstitch/diffusion.hpp"
#include "synstitch/geometry.hpp"
#include "synstitch/sspgm.hpp"

namespace synstitch {

enum class Backbone {
  global,   // moving and fixed stacked as two channels, strided conv encoder, dense head
  pairenc,  // shared single-image encoder applied to each input, joint conv on concatenated features, dense head
};
std::string to_string(Backbone b);
Backbone backbone_from_string(const std::string& s);

/// Maps physical affine parameters to the network's output space and back.
/// Identity maps to the zero vector exactly.
struct ParamNormalization {
  double translation = 32.0;                            // pixels per unit, the image half-width
  double rotation = 3.14159265358979323846 / 12.0;      // radians per unit
  double log_scale = 0.1;                               // log(s) per unit
  double shear = 0.1;

  static ParamNormalization for_size(int size);
  std::array<double, 6> normalize(const AffineParams& p) const;
  AffineParams denormalize(const std::array<double, 6>& v) const;
};

struct IsmConfig {
  Backbone backbone = Backbone::global;
  int size = 64;
  int channels = 16;
  int hidden = 128;
};
nlohmann::json to_json(const IsmConfig& c);
IsmConfig ism_config_from_json(const nlohmann::json& j);

class RegressorNetImpl : public torch::nn::Module {
 public:
  explicit RegressorNetImpl(const IsmConfig& config);
  /// (B, 1, H, W) x 2 -> (B, 6) normalized parameters. Zero at initialization.
  torch::Tensor forward(const torch::Tensor& moving, const torch::Tensor& fixed);

  const IsmConfig& config() const { return config_; }
  const ParamNormalization& normalization() const { return norm_; }

 private:
  IsmConfig config_;
  ParamNormalization norm_;
  torch::nn::Sequential encoder_{nullptr};  // global: 2-channel input; pairenc: shared 1-channel encoder
  torch::nn::Sequential joint_{nullptr};    // pairenc only
  torch::nn::Linear fc_{nullptr}, head_{nullptr};
};
TORCH_MODULE(RegressorNet);

/// Differentiable (B, 6) normalized parameters -> (B, 3, 3) pixel-space matrices about the image center.
torch::Tensor params_to_matrices(const torch::Tensor& normalized, const ParamNormalization& norm, Point2 center);

struct IsmPrediction {
  AffineTransform transform;  // A_pred
  Image2D warped;             // warp(I, A_pred)
};
IsmPrediction ism_forward(RegressorNet& net, const Image2D& moving, const Image2D& fixed);

/// Image-space loss: mean (warp(I, A_pred) - warp(I, A_gt))^2, both warps differentiable bilinear.
torch::Tensor ism_image_loss(const torch::Tensor& moving, const torch::Tensor& pred_matrices,
                             const torch::Tensor& gt_matrices);
torch::Tensor ism_loss(RegressorNet& net, const torch::Tensor& moving, const torch::Tensor& fixed,
                       const torch::Tensor& gt_matrices);

/// Stacked training tensors: moving/fixed (N, 1, H, W), gt (N, 3, 3) float32.
struct PairTensors {
  torch::Tensor moving, fixed, gt;
  long size() const { return moving.defined() ? moving.size(0) : 0; }
};
PairTensors to_pair_tensors(std::span<const StitchSample> samples);

struct IsmTrainConfig {
  int epochs = 200;
  int batch = 32;
  double lr = 1e-3;
  int patience = 30;  // epochs without validation improvement before stopping
  bool swap_augment = false;  // also train on swapped pairs (I_s, I, A^-1), chosen per item with probability 1/2
};

struct IsmTrainState {
  std::unique_ptr<torch::optim::Adam> optimizer;
  at::Generator gen;
  int epoch = 0;
  int bad_epochs = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<torch::Tensor> best_params;
  std::vector<std::array<double, 3>> curve;  // epoch, train loss, val loss
  bool stopped = false;
};
IsmTrainState make_ism_state(RegressorNet& net, double lr, std::uint64_t seed);

/// Runs epochs until config.epochs or early stop; the best-validation weights are kept in state.best_params.
void train_ism(RegressorNet& net, const PairTensors& train, const PairTensors& val, const IsmTrainConfig& config,
               IsmTrainState& state);
/// Copies state.best_params into the network.
void restore_best(RegressorNet& net, const IsmTrainState& state);
double evaluate_loss(RegressorNet& net, const PairTensors& data, int batch = 64);

/// Checkpoint with current weights (params.bin), best weights (best.bin), optimizer and curves.
void save_ism(const std::filesystem::path& dir, RegressorNet& net, IsmTrainState& state, const IsmTrainConfig& config,
              const nlohmann::json& extra = {});
struct LoadedIsm {
  RegressorNet net{nullptr};
  nlohmann::json meta;
};
/// Without `state` the best weights are loaded for inference; with it, the resumable training state.
LoadedIsm load_ism(const std::filesystem::path& dir, IsmTrainState* state = nullptr);

enum class Blend { average, feather, max };
std::string to_string(Blend b);
Blend blend_from_string(const std::string& s);

struct StitchResult {
  Image2D composite;
  AffineTransform transform;
  RgbImage overlay;  // composite with registered-moving contour (yellow) and fixed contour (blue)
};

/// Blends warp(moving, A) with fixed over the union of their FOVs.
StitchResult stitch_with(const Image2D& moving, const Image2D& fixed, const AffineTransform& transform, Blend blend);
StitchResult stitch(RegressorNet& net, const Image2D& moving, const Image2D& fixed, Blend blend);

/// Per-pixel weights of (warped moving, fixed) for the average and feather modes;
/// they sum to 1 wherever either FOV is present and are 0 elsewhere.
std::pair<Image2D, Image2D> blend_weights(const BinaryMask& warped_mask, const BinaryMask& fixed_mask, Blend blend);

RgbImage contour_overlay(const Image2D& composite, const BinaryMask& moving_mask, const BinaryMask& fixed_mask);

}  // namespace synstitch
