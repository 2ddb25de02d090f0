#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "synstitch/errors.hpp"

namespace synstitch {

/// Dense row-major H x W grid. Image2D holds intensities, BinaryMask holds {0,1}.
template <class T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  Grid(int height, int width, T fill = T{})
      : height_(height), width_(width), pixels_(static_cast<std::size_t>(checked(height, width)), fill) {}
  Grid(int height, int width, std::vector<T> pixels) : height_(height), width_(width), pixels_(std::move(pixels)) {
    if (pixels_.size() != static_cast<std::size_t>(checked(height, width))) {
      throw ShapeMismatch("pixel buffer size does not match " + std::to_string(height) + "x" + std::to_string(width));
    }
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return pixels_.size(); }
  bool empty() const { return pixels_.empty(); }

  T& operator()(int y, int x) { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }
  const T& operator()(int y, int x) const { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }

  bool contains(int y, int x) const { return y >= 0 && y < height_ && x >= 0 && x < width_; }

  std::span<T> pixels() { return pixels_; }
  std::span<const T> pixels() const { return pixels_; }
  const std::vector<T>& data() const { return pixels_; }

  bool same_shape(const Grid& other) const { return height_ == other.height_ && width_ == other.width_; }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  static long checked(int height, int width) {
    if (height < 0 || width < 0) throw ShapeMismatch("negative grid dimensions");
    return static_cast<long>(height) * width;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<T> pixels_;
};

using Image2D = Grid<float>;
using BinaryMask = Grid<std::uint8_t>;

template <class A, class B>
void require_same_shape(const Grid<A>& a, const Grid<B>& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ShapeMismatch(std::string(what) + ": shape mismatch (" + std::to_string(a.height()) + "x" +
                        std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                        std::to_string(b.width()) + ")");
  }
}

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;
};

std::size_t count_set(const BinaryMask& mask);

// Elementwise helpers used by the condition constructions.
Image2D multiply(const Image2D& image, const BinaryMask& mask);
BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b);
BinaryMask mask_or(const BinaryMask& a, const BinaryMask& b);
Image2D to_image(const BinaryMask& mask);

// Raw little-endian float32, row-major. The dimensions live in the manifest.
void write_f32(const std::filesystem::path& path, const Image2D& image);
Image2D read_f32(const std::filesystem::path& path, int height, int width);
void write_mask_f32(const std::filesystem::path& path, const BinaryMask& mask);
BinaryMask read_mask_f32(const std::filesystem::path& path, int height, int width);

// 8-bit PNG. Intensities are clamped to [0, 1] before quantization.
void write_png(const std::filesystem::path& path, const Image2D& image);
void write_png(const std::filesystem::path& path, const RgbImage& image);

}  // namespace synstitch
