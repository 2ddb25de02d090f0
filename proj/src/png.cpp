#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "synstitch/image.hpp"

namespace synstitch {

namespace {

void write_rows(const std::filesystem::path& path, int height, int width, int color_type,
                const std::vector<std::uint8_t>& data, int channels) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw Error("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(data.data() + static_cast<std::size_t>(y) * width * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image2D& image) {
  std::vector<std::uint8_t> bytes(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.pixels()[i], 0.f, 1.f) * 255.f));
  }
  write_rows(path, image.height(), image.width(), PNG_COLOR_TYPE_GRAY, bytes, 1);
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  if (image.rgb.size() != static_cast<std::size_t>(image.height) * image.width * 3) {
    throw ShapeMismatch("RGB buffer does not match its dimensions");
  }
  write_rows(path, image.height, image.width, PNG_COLOR_TYPE_RGB, image.rgb, 3);
}

}  // namespace synstitch
