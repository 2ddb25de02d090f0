#pragma once

// Literal-formula reference implementations shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "synstitch/geometry.hpp"
#include "synstitch/image.hpp"

namespace oracle {

using synstitch::Image2D;
using synstitch::Point2;

inline Image2D random_image(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.f, 1.f);
  Image2D img(h, w);
  for (auto& v : img.pixels()) v = u(rng);
  return img;
}

inline double mse(const Image2D& a, const Image2D& b) {
  double s = 0;
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x) {
      const double d = static_cast<double>(a(y, x)) - b(y, x);
      s += d * d;
    }
  return s / (a.height() * a.width());
}

// Literal per-window SSIM with population statistics.
inline double ssim(const Image2D& a, const Image2D& b, int win) {
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  int windows = 0;
  for (int y0 = 0; y0 + win <= a.height(); ++y0)
    for (int x0 = 0; x0 + win <= a.width(); ++x0) {
      double ma = 0, mb = 0;
      for (int y = y0; y < y0 + win; ++y)
        for (int x = x0; x < x0 + win; ++x) {
          ma += a(y, x);
          mb += b(y, x);
        }
      const double n = win * win;
      ma /= n;
      mb /= n;
      double va = 0, vb = 0, cov = 0;
      for (int y = y0; y < y0 + win; ++y)
        for (int x = x0; x < x0 + win; ++x) {
          va += (a(y, x) - ma) * (a(y, x) - ma);
          vb += (b(y, x) - mb) * (b(y, x) - mb);
          cov += (a(y, x) - ma) * (b(y, x) - mb);
        }
      va /= n;
      vb /= n;
      cov /= n;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++windows;
    }
  return total / windows;
}

inline double ncc(const Image2D& a, const Image2D& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a.pixels()[i];
    mb += b.pixels()[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a.pixels()[i] - ma) * (b.pixels()[i] - mb);
    va += (a.pixels()[i] - ma) * (a.pixels()[i] - ma);
    vb += (b.pixels()[i] - mb) * (b.pixels()[i] - mb);
  }
  return cov / std::sqrt(va * vb);
}


// Direct per-point loop: sqrt(mean |A p - q|^2).
inline double kp_rmse(std::span<const Point2> moving, std::span<const Point2> fixed, const Eigen::Matrix3d& a) {
  double s = 0;
  for (std::size_t i = 0; i < moving.size(); ++i) {
    const double x = a(0, 0) * moving[i].x + a(0, 1) * moving[i].y + a(0, 2);
    const double y = a(1, 0) * moving[i].x + a(1, 1) * moving[i].y + a(1, 2);
    s += (x - fixed[i].x) * (x - fixed[i].x) + (y - fixed[i].y) * (y - fixed[i].y);
  }
  return std::sqrt(s / static_cast<double>(moving.size()));
}

// Separable Gaussian blur with clamped borders.
inline Image2D blur(const Image2D& img, double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  auto pass = [&](const Image2D& in, bool horizontal) {
    Image2D out(in.height(), in.width());
    for (int y = 0; y < in.height(); ++y)
      for (int x = 0; x < in.width(); ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) {
          const int yy = horizontal ? y : std::clamp(y + i, 0, in.height() - 1);
          const int xx = horizontal ? std::clamp(x + i, 0, in.width() - 1) : x;
          acc += k[i + r] * in(yy, xx);
        }
        out(y, x) = static_cast<float>(acc);
      }
    return out;
  };
  return pass(pass(img, true), false);
}

}  // namespace oracle
