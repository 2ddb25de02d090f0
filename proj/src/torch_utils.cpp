#include "synstitch/torch_utils.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cstring>

namespace synstitch {

torch::Tensor to_tensor(std::span<const Image2D> images) {
  if (images.empty()) throw ShapeMismatch("cannot batch zero images");
  const int h = images.front().height();
  const int w = images.front().width();
  auto out = torch::empty({static_cast<long>(images.size()), 1, h, w}, torch::kFloat32);
  auto* dst = out.data_ptr<float>();
  for (const auto& img : images) {
    if (img.height() != h || img.width() != w) throw ShapeMismatch("images in a batch must share a shape");
    std::memcpy(dst, img.pixels().data(), img.size() * sizeof(float));
    dst += img.size();
  }
  return out;
}

torch::Tensor to_tensor(const Image2D& image) { return to_tensor(std::span<const Image2D>(&image, 1)); }

Image2D image_from_tensor(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
  while (c.dim() > 2) {
    if (c.size(0) != 1) throw ShapeMismatch("expected a single image tensor");
    c = c.squeeze(0);
  }
  if (c.dim() != 2) throw ShapeMismatch("expected a 2D image tensor");
  Image2D img(static_cast<int>(c.size(0)), static_cast<int>(c.size(1)));
  std::memcpy(img.pixels().data(), c.data_ptr<float>(), img.size() * sizeof(float));
  return img;
}

std::vector<Image2D> images_from_batch(const torch::Tensor& batch) {
  std::vector<Image2D> out;
  for (long i = 0; i < batch.size(0); ++i) out.push_back(image_from_tensor(batch[i]));
  return out;
}

at::Generator make_generator(std::uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

std::string generator_state(const at::Generator& gen) {
  const auto state = gen.get_state().contiguous();
  const auto* bytes = state.data_ptr<std::uint8_t>();
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(static_cast<std::size_t>(state.numel()) * 2);
  for (long i = 0; i < state.numel(); ++i) {
    out += kHex[bytes[i] >> 4];
    out += kHex[bytes[i] & 0xF];
  }
  return out;
}

void set_generator_state(at::Generator& gen, const std::string& hex) {
  if (hex.size() % 2 != 0) throw ValidationError("generator state has odd length");
  auto state = torch::empty({static_cast<long>(hex.size() / 2)}, torch::kUInt8);
  auto* bytes = state.data_ptr<std::uint8_t>();
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw ValidationError("generator state is not hex");
  };
  for (std::size_t i = 0; i < hex.size() / 2; ++i) bytes[i] = static_cast<std::uint8_t>(nibble(hex[2 * i]) << 4 | nibble(hex[2 * i + 1]));
  gen.set_state(state);
}

torch::Tensor affine_warp(const torch::Tensor& images, const torch::Tensor& matrices) {
  const long b = images.size(0);
  const long h = images.size(2);
  const long w = images.size(3);
  if (matrices.size(0) != b || matrices.size(1) != 3 || matrices.size(2) != 3) {
    throw ShapeMismatch("affine_warp expects (B, 3, 3) matrices");
  }
  const auto lin = matrices.index({torch::indexing::Slice(), torch::indexing::Slice(0, 2), torch::indexing::Slice(0, 2)});
  const auto trans = matrices.index({torch::indexing::Slice(), torch::indexing::Slice(0, 2), 2});
  // closed-form 2x2 inverse keeps the graph simple
  const auto a = lin.select(1, 0).select(1, 0);
  const auto bb = lin.select(1, 0).select(1, 1);
  const auto c = lin.select(1, 1).select(1, 0);
  const auto d = lin.select(1, 1).select(1, 1);
  const auto det = a * d - bb * c;
  const auto ia = d / det, ib = -bb / det, ic = -c / det, id = a / det;
  const auto tx = trans.select(1, 0);
  const auto ty = trans.select(1, 1);
  const auto opts = images.options();
  const auto ys = torch::arange(h, opts).view({1, h, 1});
  const auto xs = torch::arange(w, opts).view({1, 1, w});
  auto v = [](const torch::Tensor& s) { return s.view({-1, 1, 1}); };
  const auto dx = xs - v(tx);
  const auto dy = ys - v(ty);
  const auto src_x = v(ia) * dx + v(ib) * dy;
  const auto src_y = v(ic) * dx + v(id) * dy;
  const auto gx = src_x * (2.0 / static_cast<double>(w - 1)) - 1.0;
  const auto gy = src_y * (2.0 / static_cast<double>(h - 1)) - 1.0;
  const auto grid = torch::stack({gx, gy}, -1);
  namespace F = torch::nn::functional;
  return F::grid_sample(images, grid,
                        F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kZeros).align_corners(true));
}

torch::Tensor matrix_tensor(const AffineTransform& transform) {
  auto t = torch::empty({3, 3}, torch::kFloat64);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t.index_put_({r, c}, transform.matrix()(r, c));
  return t;
}

std::uint64_t parameter_hash(const torch::nn::Module& module) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : module.parameters()) {
    const auto c = p.detach().contiguous();
    const auto* bytes = static_cast<const std::uint8_t*>(c.data_ptr());
    const auto n = static_cast<std::size_t>(c.numel()) * c.element_size();
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace synstitch
