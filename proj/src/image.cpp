#include "synstitch/image.hpp"

#include <algorithm>
#include <bit>
#include <fstream>

namespace synstitch {

static_assert(std::endian::native == std::endian::little, "f32 storage assumes a little-endian host");

std::size_t count_set(const BinaryMask& mask) {
  return static_cast<std::size_t>(std::count(mask.pixels().begin(), mask.pixels().end(), std::uint8_t{1}));
}

Image2D multiply(const Image2D& image, const BinaryMask& mask) {
  require_same_shape(image, mask, "multiply");
  Image2D out(image.height(), image.width());
  auto src = image.pixels();
  auto m = mask.pixels();
  auto dst = out.pixels();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = m[i] ? src[i] : 0.0f;
  return out;
}

BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b) {
  require_same_shape(a, b, "mask_and");
  BinaryMask out(a.height(), a.width());
  for (std::size_t i = 0; i < out.size(); ++i) out.pixels()[i] = (a.pixels()[i] && b.pixels()[i]) ? 1 : 0;
  return out;
}

BinaryMask mask_or(const BinaryMask& a, const BinaryMask& b) {
  require_same_shape(a, b, "mask_or");
  BinaryMask out(a.height(), a.width());
  for (std::size_t i = 0; i < out.size(); ++i) out.pixels()[i] = (a.pixels()[i] || b.pixels()[i]) ? 1 : 0;
  return out;
}

Image2D to_image(const BinaryMask& mask) {
  Image2D out(mask.height(), mask.width());
  for (std::size_t i = 0; i < out.size(); ++i) out.pixels()[i] = mask.pixels()[i] ? 1.0f : 0.0f;
  return out;
}

void write_f32(const std::filesystem::path& path, const Image2D& image) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open for writing: " + path.string());
  os.write(reinterpret_cast<const char*>(image.pixels().data()),
           static_cast<std::streamsize>(image.size() * sizeof(float)));
  if (!os) throw Error("write failed: " + path.string());
}

Image2D read_f32(const std::filesystem::path& path, int height, int width) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifact("cannot open image: " + path.string());
  Image2D image(height, width);
  const auto bytes = static_cast<std::streamsize>(image.size() * sizeof(float));
  is.read(reinterpret_cast<char*>(image.pixels().data()), bytes);
  if (is.gcount() != bytes || is.peek() != std::char_traits<char>::eof()) {
    throw ShapeMismatch("image file " + path.string() + " does not hold " + std::to_string(height) + "x" +
                        std::to_string(width) + " float32 pixels");
  }
  return image;
}

void write_mask_f32(const std::filesystem::path& path, const BinaryMask& mask) { write_f32(path, to_image(mask)); }

BinaryMask read_mask_f32(const std::filesystem::path& path, int height, int width) {
  const Image2D image = read_f32(path, height, width);
  BinaryMask mask(height, width);
  for (std::size_t i = 0; i < mask.size(); ++i) mask.pixels()[i] = image.pixels()[i] > 0.5f ? 1 : 0;
  return mask;
}

}  // namespace synstitch
