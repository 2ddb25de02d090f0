#include "synstitch/geometry.hpp"

#include <cmath>

namespace synstitch {

namespace {

constexpr double kSingularDet = 1e-9;

Eigen::Matrix3d translation(double tx, double ty) {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  m(0, 2) = tx;
  m(1, 2) = ty;
  return m;
}

double uniform(const Range& r, std::mt19937_64& rng) {
  const double u = std::generate_canonical<double, 53>(rng);
  return r.lo + (r.hi - r.lo) * u;
}

void check_range(const Range& r, const char* name) {
  if (!(r.lo <= r.hi)) throw InvalidRange(std::string(name) + " range has lo > hi");
}

}  // namespace

AffineTransform AffineTransform::identity(Point2 center) { return {Eigen::Matrix3d::Identity(), center}; }

AffineTransform AffineTransform::from_matrix(const Eigen::Matrix3d& matrix, Point2 center) {
  if (!matrix.allFinite()) throw InvalidTransform("affine matrix has non-finite entries");
  if (matrix(2, 0) != 0.0 || matrix(2, 1) != 0.0 || matrix(2, 2) != 1.0) {
    throw InvalidTransform("affine matrix last row must be (0, 0, 1)");
  }
  if (std::abs(matrix.topLeftCorner<2, 2>().determinant()) <= kSingularDet) {
    throw InvalidTransform("affine matrix is singular");
  }
  return {matrix, center};
}

AffineParams AffineTransform::params() const { return matrix_to_params(matrix_, center_); }

AffineTransform AffineTransform::inverse() const {
  const Eigen::Matrix2d lin_inv = matrix_.topLeftCorner<2, 2>().inverse();
  Eigen::Matrix3d inv = Eigen::Matrix3d::Identity();
  inv.topLeftCorner<2, 2>() = lin_inv;
  inv.topRightCorner<2, 1>() = -lin_inv * matrix_.topRightCorner<2, 1>();
  return {inv, center_};
}

Point2 AffineTransform::apply(Point2 p) const {
  return {matrix_(0, 0) * p.x + matrix_(0, 1) * p.y + matrix_(0, 2),
          matrix_(1, 0) * p.x + matrix_(1, 1) * p.y + matrix_(1, 2)};
}

Point2 image_center(int height, int width) { return {(width - 1) / 2.0, (height - 1) / 2.0}; }

AffineTransform params_to_matrix(const AffineParams& p, Point2 center) {
  if (!(p.sx > 0.0) || !(p.sy > 0.0)) throw InvalidParameter("affine scale must be positive");
  const double c = std::cos(p.theta);
  const double s = std::sin(p.theta);
  Eigen::Matrix3d rot = Eigen::Matrix3d::Identity();
  rot(0, 0) = c;
  rot(0, 1) = -s;
  rot(1, 0) = s;
  rot(1, 1) = c;
  Eigen::Matrix3d shear_scale = Eigen::Matrix3d::Identity();
  shear_scale(0, 0) = p.sx;
  shear_scale(0, 1) = p.shear * p.sy;
  shear_scale(1, 1) = p.sy;
  Eigen::Matrix3d m = translation(center.x, center.y) * translation(p.tx, p.ty) * rot * shear_scale *
                      translation(-center.x, -center.y);
  m.row(2) << 0.0, 0.0, 1.0;
  return AffineTransform::from_matrix(m, center);
}

AffineParams matrix_to_params(const Eigen::Matrix3d& m, Point2 center) {
  const Eigen::Matrix2d lin = m.topLeftCorner<2, 2>();
  if (!(lin.determinant() > kSingularDet)) {
    throw InvalidTransform("matrix is singular or reflecting; no (t, R, shear, S) decomposition");
  }
  // lin = R(theta) * [[sx, shear*sy], [0, sy]]
  AffineParams p;
  p.sx = std::hypot(lin(0, 0), lin(1, 0));
  p.theta = std::atan2(lin(1, 0), lin(0, 0));
  const double c = std::cos(p.theta);
  const double s = std::sin(p.theta);
  const double u01 = c * lin(0, 1) + s * lin(1, 1);
  const double u11 = -s * lin(0, 1) + c * lin(1, 1);
  p.sy = u11;
  p.shear = u01 / u11;
  // m p = lin (p - c) + c + t  =>  t = b - c + lin c
  const Eigen::Vector2d cvec(center.x, center.y);
  const Eigen::Vector2d t = m.topRightCorner<2, 1>() - cvec + lin * cvec;
  p.tx = t.x();
  p.ty = t.y();
  return p;
}

AffineTransform compose(const AffineTransform& a, const AffineTransform& b) {
  Eigen::Matrix3d m = a.matrix() * b.matrix();
  m.row(2) << 0.0, 0.0, 1.0;
  return AffineTransform::from_matrix(m, a.center());
}

Image2D warp(const Image2D& image, const AffineTransform& transform, Interp interp) {
  if (!(std::abs(transform.determinant()) > kSingularDet)) throw InvalidTransform("cannot warp with singular transform");
  const Eigen::Matrix3d inv = transform.inverse().matrix();
  const int h = image.height();
  const int w = image.width();
  Image2D out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double sx = inv(0, 0) * x + inv(0, 1) * y + inv(0, 2);
      const double sy = inv(1, 0) * x + inv(1, 1) * y + inv(1, 2);
      if (interp == Interp::nearest) {
        const int nx = static_cast<int>(std::floor(sx + 0.5));
        const int ny = static_cast<int>(std::floor(sy + 0.5));
        out(y, x) = image.contains(ny, nx) ? image(ny, nx) : 0.0f;
        continue;
      }
      const double fx = std::floor(sx);
      const double fy = std::floor(sy);
      if (fx < -1.0 || fy < -1.0 || fx > w || fy > h) continue;
      const int x0 = static_cast<int>(fx);
      const int y0 = static_cast<int>(fy);
      const double ax = sx - fx;
      const double ay = sy - fy;
      double v = 0.0;
      auto tap = [&](int yy, int xx, double weight) {
        if (image.contains(yy, xx)) v += weight * image(yy, xx);
      };
      tap(y0, x0, (1.0 - ax) * (1.0 - ay));
      tap(y0, x0 + 1, ax * (1.0 - ay));
      tap(y0 + 1, x0, (1.0 - ax) * ay);
      tap(y0 + 1, x0 + 1, ax * ay);
      out(y, x) = static_cast<float>(v);
    }
  }
  return out;
}

BinaryMask warp(const BinaryMask& mask, const AffineTransform& transform) {
  const Image2D warped = warp(to_image(mask), transform, Interp::nearest);
  BinaryMask out(mask.height(), mask.width());
  for (std::size_t i = 0; i < out.size(); ++i) out.pixels()[i] = warped.pixels()[i] > 0.5f ? 1 : 0;
  return out;
}

BinaryMask threshold_mask(const Image2D& image, double tau) {
  if (!(tau >= 0.0)) throw InvalidParameter("threshold must be non-negative");
  BinaryMask mask(image.height(), image.width());
  for (std::size_t i = 0; i < mask.size(); ++i) mask.pixels()[i] = image.pixels()[i] > tau ? 1 : 0;
  return mask;
}

TrainCondition condition_train(const Image2D& image, const AffineTransform& transform, double tau) {
  const BinaryMask m = threshold_mask(image, tau);
  BinaryMask overlap = mask_and(m, warp(m, transform));
  if (count_set(overlap) == 0) throw NoOverlap("condition mask is empty: transform moves the FOV off itself");
  Image2D c = multiply(image, overlap);
  return {std::move(c), std::move(overlap)};
}

InferenceCondition condition_infer(const Image2D& image, const AffineTransform& transform, double tau) {
  const BinaryMask m = threshold_mask(image, tau);
  BinaryMask overlap = mask_and(m, warp(m, transform));
  if (count_set(overlap) == 0) throw NoOverlap("condition mask is empty: transform moves the FOV off itself");
  Image2D warped = warp(image, transform, Interp::bilinear);
  Image2D c = multiply(warped, overlap);
  return {std::move(c), std::move(overlap), std::move(warped)};
}

double overlap_fraction(const BinaryMask& overlap, const BinaryMask& mask) {
  require_same_shape(overlap, mask, "overlap_fraction");
  const auto denom = std::max<std::size_t>(count_set(mask), 1);
  return static_cast<double>(count_set(overlap)) / static_cast<double>(denom);
}

AffineRanges AffineRanges::point(const AffineParams& p) {
  if (p.tx != p.ty || p.sx != p.sy || p.shear != 0.0) {
    throw InvalidParameter("degenerate ranges need tx == ty, sx == sy and no shear");
  }
  return {{p.tx, p.tx}, {p.theta, p.theta}, {p.sx, p.sx}};
}

AffineTransform sample_affine(const AffineRanges& ranges, std::mt19937_64& rng, Point2 center) {
  check_range(ranges.translation, "translation");
  check_range(ranges.rotation, "rotation");
  check_range(ranges.scale, "scale");
  AffineParams p;
  p.tx = uniform(ranges.translation, rng);
  p.ty = uniform(ranges.translation, rng);
  p.theta = uniform(ranges.rotation, rng);
  p.sx = p.sy = uniform(ranges.scale, rng);
  return params_to_matrix(p, center);
}

nlohmann::json to_json(const AffineTransform& transform) {
  nlohmann::json j;
  const auto& m = transform.matrix();
  j["matrix"] = {{m(0, 0), m(0, 1), m(0, 2)}, {m(1, 0), m(1, 1), m(1, 2)}, {m(2, 0), m(2, 1), m(2, 2)}};
  if (transform.determinant() > kSingularDet) {
    const AffineParams p = transform.params();
    j["params"] = {{"tx", p.tx}, {"ty", p.ty}, {"theta", p.theta}, {"sx", p.sx}, {"sy", p.sy}, {"shear", p.shear}};
  } else {
    j["params"] = nullptr;
  }
  j["center"] = {transform.center().x, transform.center().y};
  return j;
}

AffineTransform affine_from_json(const nlohmann::json& j) {
  try {
    Eigen::Matrix3d m;
    const auto& rows = j.at("matrix");
    if (rows.size() != 3) throw InvalidTransform("matrix must have 3 rows");
    for (int r = 0; r < 3; ++r) {
      if (rows[r].size() != 3) throw InvalidTransform("matrix rows must have 3 entries");
      for (int c = 0; c < 3; ++c) m(r, c) = rows[r][c].get<double>();
    }
    const auto& c = j.at("center");
    return AffineTransform::from_matrix(m, {c.at(0).get<double>(), c.at(1).get<double>()});
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed transform JSON: ") + e.what());
  }
}

nlohmann::json to_json(const AffineRanges& r) {
  return {{"translation", {r.translation.lo, r.translation.hi}},
          {"rotation", {r.rotation.lo, r.rotation.hi}},
          {"scale", {r.scale.lo, r.scale.hi}}};
}

AffineRanges ranges_from_json(const nlohmann::json& j) {
  auto range = [&](const char* key) {
    const auto& v = j.at(key);
    if (!v.is_array() || v.size() != 2) throw ValidationError(std::string("range '") + key + "' must be [lo, hi]");
    Range r{v[0].get<double>(), v[1].get<double>()};
    check_range(r, key);
    return r;
  };
  for (const auto& [key, _] : j.items()) {
    if (key != "translation" && key != "rotation" && key != "scale") {
      throw ValidationError("unknown affine range key: " + key);
    }
  }
  return {range("translation"), range("rotation"), range("scale")};
}

}  // namespace synstitch
