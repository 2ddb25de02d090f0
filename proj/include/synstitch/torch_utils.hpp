#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "synstitch/geometry.hpp"
#include "synstitch/image.hpp"

namespace synstitch {

/// (N, 1, H, W) float32 batch.
torch::Tensor to_tensor(std::span<const Image2D> images);
torch::Tensor to_tensor(const Image2D& image);
/// Accepts (H, W), (1, H, W) or (1, 1, H, W).
Image2D image_from_tensor(const torch::Tensor& t);
std::vector<Image2D> images_from_batch(const torch::Tensor& batch);

at::Generator make_generator(std::uint64_t seed);
std::string generator_state(const at::Generator& gen);
void set_generator_state(at::Generator& gen, const std::string& hex);

/// Differentiable inverse-mapping warp matching synstitch::warp (bilinear,
/// zero fill, pixel-centre coordinates). `matrices` is (B, 3, 3) forward
/// transforms in pixel coordinates; out(p) = in(A^-1 p).
torch::Tensor affine_warp(const torch::Tensor& images, const torch::Tensor& matrices);

torch::Tensor matrix_tensor(const AffineTransform& transform);

/// FNV-1a over every parameter's raw bytes, in registration order.
std::uint64_t parameter_hash(const torch::nn::Module& module);

}  // namespace synstitch
