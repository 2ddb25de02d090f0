#pragma once

#include <Eigen/Dense>
#include <random>

#include "json.hpp"
#include "synstitch/image.hpp"

namespace synstitch {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

/// Physical affine parameterization about a pivot. Generation only draws
/// (tx, ty, theta, sx = sy); shear exists so any orientation-preserving
/// affine, including network predictions, round-trips through params.
struct AffineParams {
  double tx = 0.0;
  double ty = 0.0;
  double theta = 0.0;
  double sx = 1.0;
  double sy = 1.0;
  double shear = 0.0;
};

/// Homogeneous 3x3 affine acting on pixel coordinates (x = column, y = row).
/// The composition order used by params_to_matrix is
///   Translate(center) * Translate(tx, ty) * Rotate(theta) * Shear(shear) * Scale(sx, sy) * Translate(-center)
/// with Shear = [[1, shear], [0, 1]].
class AffineTransform {
 public:
  AffineTransform() = default;

  static AffineTransform identity(Point2 center = {});
  /// Throws InvalidTransform unless the last row is (0, 0, 1) and |det| > 1e-9.
  static AffineTransform from_matrix(const Eigen::Matrix3d& matrix, Point2 center = {});

  const Eigen::Matrix3d& matrix() const { return matrix_; }
  Point2 center() const { return center_; }
  double determinant() const { return matrix_.topLeftCorner<2, 2>().determinant(); }

  AffineParams params() const;
  AffineTransform inverse() const;
  Point2 apply(Point2 p) const;

 private:
  AffineTransform(const Eigen::Matrix3d& m, Point2 c) : matrix_(m), center_(c) {}

  Eigen::Matrix3d matrix_ = Eigen::Matrix3d::Identity();
  Point2 center_{};
};

/// Pivot used everywhere an image is transformed: the center of the pixel grid.
Point2 image_center(int height, int width);

AffineTransform params_to_matrix(const AffineParams& params, Point2 center);
/// Inverse of params_to_matrix. Requires det > 0 (no reflections).
AffineParams matrix_to_params(const Eigen::Matrix3d& matrix, Point2 center);
/// Apply b first, then a.
AffineTransform compose(const AffineTransform& a, const AffineTransform& b);

enum class Interp { bilinear, nearest };

/// Inverse mapping: out(p) = in(A^-1 p). Bilinear taps that fall outside the
/// grid contribute zero; nearest samples outside the grid are zero.
Image2D warp(const Image2D& image, const AffineTransform& transform, Interp interp = Interp::bilinear);
/// Nearest-neighbour warp followed by re-binarization at 0.5.
BinaryMask warp(const BinaryMask& mask, const AffineTransform& transform);

/// mask = 1 where intensity > tau.
BinaryMask threshold_mask(const Image2D& image, double tau = 0.0);

struct TrainCondition {
  Image2D image;     // C = M_c * I
  BinaryMask mask;   // M_c = M & warp(M, A)
};

struct InferenceCondition {
  Image2D image;     // C_s = M_c * I_aff
  BinaryMask mask;   // M_c
  Image2D warped;    // I_aff = warp(I, A)
};

TrainCondition condition_train(const Image2D& image, const AffineTransform& transform, double tau = 0.0);
InferenceCondition condition_infer(const Image2D& image, const AffineTransform& transform, double tau = 0.0);

/// |M_c| / max(|M|, 1).
double overlap_fraction(const BinaryMask& overlap, const BinaryMask& mask);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct AffineRanges {
  Range translation;  // pixels, per axis
  Range rotation;     // radians
  Range scale;        // isotropic

  /// Degenerate ranges that always draw `p`; the translation range is shared by both axes, so tx must equal ty.
  static AffineRanges point(const AffineParams& p);
};

/// Draws tx, ty, theta, s in that order from uniform distributions; sx = sy = s.
AffineTransform sample_affine(const AffineRanges& ranges, std::mt19937_64& rng, Point2 center);

nlohmann::json to_json(const AffineTransform& transform);
AffineTransform affine_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AffineRanges& ranges);
AffineRanges ranges_from_json(const nlohmann::json& j);

}  // namespace synstitch
