#include "synstitch/baselines.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>

#include "synstitch/metrics.hpp"

namespace synstitch {

namespace {

using Params6 = std::array<double, 6>;  // tx, ty, theta, sx, sy, shear

AffineTransform transform_of(const Params6& q, Point2 center) {
  AffineParams p;
  p.tx = q[0];
  p.ty = q[1];
  p.theta = q[2];
  p.sx = q[3];
  p.sy = q[4];
  p.shear = q[5];
  return params_to_matrix(p, center);
}

}  // namespace

double registration_cost(const Image2D& moving, const Image2D& fixed, const AffineTransform& transform,
                         const IntensityRegisterConfig& config) {
  const Image2D warped = warp(moving, transform, Interp::bilinear);
  BinaryMask region(fixed.height(), fixed.width(), 1);
  if (config.fov_union) region = mask_or(threshold_mask(warped), threshold_mask(fixed));
  if (config.metric == SimilarityMetric::mse) {
    try {
      return mse(warped, fixed, region);
    } catch (const UndefinedMetric&) {
      return std::numeric_limits<double>::max();
    }
  }
  try {
    return 1.0 - ncc(warped, fixed, region);
  } catch (const UndefinedMetric&) {
    return 2.0;
  }
}

AffineTransform intensity_register(const Image2D& moving, const Image2D& fixed, const IntensityRegisterConfig& config) {
  require_same_shape(moving, fixed, "intensity_register");
  const Point2 center = image_center(fixed.height(), fixed.width());
  const Params6 steps{config.step_translation, config.step_translation, config.step_rotation,
                      config.step_scale,       config.step_scale,       config.step_scale};
  auto cost = [&](const Params6& q) { return registration_cost(moving, fixed, transform_of(q, center), config); };
  auto valid = [](Params6& q) {
    q[3] = std::max(q[3], 0.2);
    q[4] = std::max(q[4], 0.2);
  };

  std::mt19937_64 rng(config.seed);
  auto uni = [&](double half) { return half * (2.0 * std::generate_canonical<double, 53>(rng) - 1.0); };

  Params6 best{0, 0, 0, 1, 1, 0};
  double best_cost = std::numeric_limits<double>::infinity();
  for (int start = 0; start < std::max(config.starts, 1); ++start) {
    Params6 q{0, 0, 0, 1, 1, 0};
    if (start > 0) {
      q[0] = uni(config.start_translation);
      q[1] = uni(config.start_translation);
      q[2] = uni(config.start_rotation);
      q[3] = q[4] = 1.0 + uni(config.start_scale);
    }
    double c = cost(q);
    double eta = 1.0;  // step length in units of the finite-difference steps
    for (int it = 0; it < config.iterations && eta > 1e-3; ++it) {
      Params6 g{};
      double norm = 0.0;
      for (int i = 0; i < 6; ++i) {
        Params6 plus = q, minus = q;
        plus[i] += steps[i];
        minus[i] -= steps[i];
        valid(plus);
        valid(minus);
        // derivative with respect to the step-scaled coordinate
        g[i] = (cost(plus) - cost(minus)) / 2.0;
        norm += g[i] * g[i];
      }
      norm = std::sqrt(norm);
      if (!(norm > 0.0) || !std::isfinite(norm)) break;
      Params6 trial = q;
      for (int i = 0; i < 6; ++i) trial[i] -= eta * steps[i] * g[i] / norm;
      valid(trial);
      const double tc = cost(trial);
      if (tc < c) {
        q = trial;
        c = tc;
        eta = std::min(eta * 1.5, 8.0);
      } else {
        eta *= 0.5;
      }
    }
    if (c < best_cost) {
      best_cost = c;
      best = q;
    }
  }
  return transform_of(best, center);
}

namespace {

std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-(i * i) / (2.0 * sigma * sigma));
  for (auto& v : k) v /= sum;
  return k;
}

std::vector<double> separable_blur(const std::vector<double>& src, int h, int w, const std::vector<double>& k) {
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(src.size(), 0.0), out(src.size(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * src[y * w + std::clamp(x + i, 0, w - 1)];
      tmp[y * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp[std::clamp(y + i, 0, h - 1) * w + x];
      out[y * w + x] = acc;
    }
  return out;
}

}  // namespace

std::vector<Point2> detect_corners(const Image2D& image, int k, const CornerConfig& config) {
  if (k < 4) throw InvalidParameter("detect_corners needs k >= 4");
  const int h = image.height();
  const int w = image.width();
  auto at = [&](int y, int x) { return static_cast<double>(image(std::clamp(y, 0, h - 1), std::clamp(x, 0, w - 1))); };
  std::vector<double> ixx(h * w), iyy(h * w), ixy(h * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
      const double gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
      ixx[y * w + x] = gx * gx / 64.0;
      iyy[y * w + x] = gy * gy / 64.0;
      ixy[y * w + x] = gx * gy / 64.0;
    }
  }
  const auto kernel = gaussian_kernel(config.window_sigma);
  const auto sxx = separable_blur(ixx, h, w, kernel);
  const auto syy = separable_blur(iyy, h, w, kernel);
  const auto sxy = separable_blur(ixy, h, w, kernel);
  std::vector<double> response(h * w);
  double max_r = 0.0;
  for (int i = 0; i < h * w; ++i) {
    const double det = sxx[i] * syy[i] - sxy[i] * sxy[i];
    const double tr = sxx[i] + syy[i];
    response[i] = det - config.harris_k * tr * tr;
    max_r = std::max(max_r, response[i]);
  }
  if (!(max_r > 1e-12)) throw InsufficientFeatures("no corner response (flat image)");

  BinaryMask fov;
  if (config.mask_edges) fov = threshold_mask(image, config.fov_tau);
  auto near_fov_edge = [&](int y, int x) {
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx)
        if (!fov.contains(y + dy, x + dx) || !fov(y + dy, x + dx)) return true;
    return false;
  };

  struct Candidate {
    double r;
    int y, x;
  };
  std::vector<Candidate> cands;
  const int rad = config.nms_radius;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double r = response[y * w + x];
      if (r <= 0.0 || r < config.min_relative_response * max_r) continue;
      bool is_max = true;
      for (int dy = -rad; dy <= rad && is_max; ++dy) {
        for (int dx = -rad; dx <= rad; ++dx) {
          if ((dx == 0 && dy == 0) || y + dy < 0 || y + dy >= h || x + dx < 0 || x + dx >= w) continue;
          const double o = response[(y + dy) * w + (x + dx)];
          // ties resolved in favour of the earlier pixel in raster order
          const bool earlier = dy < 0 || (dy == 0 && dx < 0);
          if (o > r || (o == r && earlier)) {
            is_max = false;
            break;
          }
        }
      }
      if (!is_max) continue;
      if (config.mask_edges && near_fov_edge(y, x)) continue;
      cands.push_back({r, y, x});
    }
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.r > b.r; });
  if (cands.size() < 4) throw InsufficientFeatures("fewer than 4 corners detected");
  if (static_cast<int>(cands.size()) > k) cands.resize(k);
  std::vector<Point2> out;
  out.reserve(cands.size());
  for (const auto& c : cands) out.push_back({static_cast<double>(c.x), static_cast<double>(c.y)});
  return out;
}

namespace {

// Zero-mean, unit-norm patch; empty when the patch is flat.
std::vector<double> describe(const Image2D& image, Point2 p, int radius) {
  const int cx = static_cast<int>(std::floor(p.x + 0.5));
  const int cy = static_cast<int>(std::floor(p.y + 0.5));
  std::vector<double> d;
  d.reserve((2 * radius + 1) * (2 * radius + 1));
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      d.push_back(image.contains(cy + dy, cx + dx) ? image(cy + dy, cx + dx) : 0.0);
  double mean = 0.0;
  for (double v : d) mean += v;
  mean /= static_cast<double>(d.size());
  double norm = 0.0;
  for (auto& v : d) {
    v -= mean;
    norm += v * v;
  }
  norm = std::sqrt(norm);
  if (norm < 1e-6) return {};
  for (auto& v : d) v /= norm;
  return d;
}

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

}  // namespace

std::vector<Correspondence> match_descriptors(std::span<const Point2> kps_a, std::span<const Point2> kps_b,
                                              const Image2D& image_a, const Image2D& image_b,
                                              const MatchConfig& config) {
  const int side = 2 * config.patch_radius + 1;
  if (image_a.height() < side || image_a.width() < side || image_b.height() < side || image_b.width() < side) {
    throw InvalidParameter("descriptor patch does not fit the images");
  }
  std::vector<std::vector<double>> da, db;
  for (Point2 p : kps_a) da.push_back(describe(image_a, p, config.patch_radius));
  for (Point2 p : kps_b) db.push_back(describe(image_b, p, config.patch_radius));

  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(da.size() * db.size(), kInf);
  for (std::size_t i = 0; i < da.size(); ++i)
    for (std::size_t j = 0; j < db.size(); ++j)
      if (!da[i].empty() && !db[j].empty()) dist[i * db.size() + j] = distance(da[i], db[j]);

  std::vector<Correspondence> out;
  for (std::size_t i = 0; i < da.size(); ++i) {
    if (da[i].empty()) continue;
    double d1 = kInf, d2 = kInf;
    std::size_t best = db.size();
    for (std::size_t j = 0; j < db.size(); ++j) {
      const double d = dist[i * db.size() + j];
      if (d < d1) {
        d2 = d1;
        d1 = d;
        best = j;
      } else if (d < d2) {
        d2 = d;
      }
    }
    if (best == db.size() || !std::isfinite(d1)) continue;
    // mutual check: i must be the nearest neighbour of `best` as well
    std::size_t back = da.size();
    double back_d = kInf;
    for (std::size_t a = 0; a < da.size(); ++a) {
      const double d = dist[a * db.size() + best];
      if (d < back_d) {
        back_d = d;
        back = a;
      }
    }
    if (back != i) continue;
    if (std::isfinite(d2) && !(d1 < config.ratio * d2)) continue;
    out.push_back({kps_a[i], kps_b[best], 1.0 - 0.5 * d1 * d1});
  }
  return out;
}

namespace {

double cross(Point2 a, Point2 b, Point2 c) { return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x); }

bool collinear(Point2 a, Point2 b, Point2 c) { return std::abs(cross(a, b, c)) < 1e-6; }

struct Score {
  int inliers = -1;
  double mean_residual = std::numeric_limits<double>::infinity();

  bool better_than(const Score& o) const {
    return inliers > o.inliers || (inliers == o.inliers && mean_residual < o.mean_residual);
  }
};

Score score_model(const AffineTransform& a, std::span<const Correspondence> cs, double inlier_px,
                  std::vector<std::size_t>* inliers = nullptr) {
  Score s{0, 0.0};
  for (std::size_t i = 0; i < cs.size(); ++i) {
    const Point2 q = a.apply(cs[i].p_moving);
    const double r = std::hypot(q.x - cs[i].p_fixed.x, q.y - cs[i].p_fixed.y);
    if (r <= inlier_px) {
      ++s.inliers;
      s.mean_residual += r;
      if (inliers) inliers->push_back(i);
    }
  }
  s.mean_residual = s.inliers > 0 ? s.mean_residual / s.inliers : std::numeric_limits<double>::infinity();
  return s;
}

}  // namespace

AffineTransform affine_from_three(const Correspondence& a, const Correspondence& b, const Correspondence& c,
                                  Point2 center) {
  if (collinear(a.p_moving, b.p_moving, c.p_moving) || collinear(a.p_fixed, b.p_fixed, c.p_fixed)) {
    throw EstimationFailed("collinear correspondences");
  }
  Eigen::Matrix3d src;
  src << a.p_moving.x, b.p_moving.x, c.p_moving.x, a.p_moving.y, b.p_moving.y, c.p_moving.y, 1, 1, 1;
  Eigen::Matrix3d dst;
  dst << a.p_fixed.x, b.p_fixed.x, c.p_fixed.x, a.p_fixed.y, b.p_fixed.y, c.p_fixed.y, 1, 1, 1;
  Eigen::Matrix3d m = dst * src.inverse();
  m.row(2) << 0, 0, 1;
  return AffineTransform::from_matrix(m, center);
}

AffineTransform lstsq_affine(std::span<const Correspondence> cs, Point2 center) {
  if (cs.size() < 3) throw EstimationFailed("least squares needs at least three correspondences");
  Eigen::MatrixXd x(cs.size(), 3);
  Eigen::VectorXd bx(cs.size()), by(cs.size());
  for (std::size_t i = 0; i < cs.size(); ++i) {
    x(i, 0) = cs[i].p_moving.x;
    x(i, 1) = cs[i].p_moving.y;
    x(i, 2) = 1.0;
    bx(i) = cs[i].p_fixed.x;
    by(i) = cs[i].p_fixed.y;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  qr.setThreshold(1e-10);
  if (qr.rank() < 3) throw EstimationFailed("rank-deficient correspondence system (collinear points)");
  const Eigen::Vector3d rx = qr.solve(bx);
  const Eigen::Vector3d ry = qr.solve(by);
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  m.row(0) = rx.transpose();
  m.row(1) = ry.transpose();
  try {
    return AffineTransform::from_matrix(m, center);
  } catch (const InvalidTransform& e) {
    throw EstimationFailed(std::string("least-squares affine is singular: ") + e.what());
  }
}

AffineTransform ransac_affine(std::span<const Correspondence> cs, const RansacConfig& config, Point2 center) {
  const std::size_t n = cs.size();
  if (n < 3) throw EstimationFailed("RANSAC needs at least three correspondences");
  std::mt19937_64 rng(config.seed);
  auto pick = [&](std::size_t bound) {
    return std::min(static_cast<std::size_t>(std::generate_canonical<double, 53>(rng) * static_cast<double>(bound)),
                    bound - 1);
  };
  std::optional<AffineTransform> best;
  Score best_score;
  for (int it = 0; it < config.iterations; ++it) {
    const std::size_t i = pick(n);
    std::size_t j = pick(n - 1);
    if (j >= i) ++j;
    std::size_t k = pick(n - 2);
    for (std::size_t lo : {std::min(i, j), std::max(i, j)}) {
      if (k >= lo) ++k;
    }
    AffineTransform model;
    try {
      model = affine_from_three(cs[i], cs[j], cs[k], center);
    } catch (const Error&) {
      continue;
    }
    const Score s = score_model(model, cs, config.inlier_px);
    if (s.better_than(best_score)) {
      best_score = s;
      best = model;
    }
  }
  if (!best) throw EstimationFailed("every RANSAC sample was degenerate");

  std::vector<std::size_t> idx;
  score_model(*best, cs, config.inlier_px, &idx);
  if (idx.size() >= 3) {
    std::vector<Correspondence> inl;
    for (auto i : idx) inl.push_back(cs[i]);
    try {
      const AffineTransform refit = lstsq_affine(inl, center);
      // Keep the refit only when it scores at least as well as the best sample.
      if (!best_score.better_than(score_model(refit, cs, config.inlier_px))) return refit;
    } catch (const Error&) {
    }
  }
  return *best;
}

AffineTransform feature_register(const Image2D& moving, const Image2D& fixed, const FeatureRegisterConfig& config) {
  require_same_shape(moving, fixed, "feature_register");
  const auto ka = detect_corners(moving, config.max_corners, config.corners);
  const auto kb = detect_corners(fixed, config.max_corners, config.corners);
  const auto matches = match_descriptors(ka, kb, moving, fixed, config.match);
  return ransac_affine(matches, config.ransac, image_center(fixed.height(), fixed.width()));
}

}  // namespace synstitch
