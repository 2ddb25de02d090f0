#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "synstitch/geometry.hpp"
#include "synstitch/image.hpp"

namespace synstitch {

struct Correspondence {
  Point2 p_moving;
  Point2 p_fixed;
  double score = 0.0;
};

enum class SimilarityMetric { mse, ncc };

struct IntensityRegisterConfig {
  SimilarityMetric metric = SimilarityMetric::mse;
  int starts = 8;  // the first start is always the identity
  int iterations = 200;
  // Central-difference steps for (tx, ty, theta, sx, sy, shear).
  double step_translation = 0.5;
  double step_rotation = 0.01;
  double step_scale = 0.01;
  // Spread of the random starts.
  double start_translation = 6.0;
  double start_rotation = 0.1;
  double start_scale = 0.05;
  std::uint64_t seed = 0;
  // When false the metric covers the whole canvas instead of the FOV union.
  bool fov_union = true;
};

/// Multi-start finite-difference descent on the similarity between
/// warp(moving, A) and fixed. Returns A such that warp(moving, A) ~ fixed.
AffineTransform intensity_register(const Image2D& moving, const Image2D& fixed, const IntensityRegisterConfig& config = {});

/// Value minimized by intensity_register (MSE, or 1 - NCC), exposed for tests.
double registration_cost(const Image2D& moving, const Image2D& fixed, const AffineTransform& transform,
                         const IntensityRegisterConfig& config);

struct CornerConfig {
  int nms_radius = 3;
  double harris_k = 0.04;
  double window_sigma = 1.0;
  double min_relative_response = 0.01;
  bool mask_edges = false;  // drop responses within 2 px of the FOV boundary
  double fov_tau = 0.0;
};

/// Harris corners, strongest first, at most k.
std::vector<Point2> detect_corners(const Image2D& image, int k, const CornerConfig& config = {});

struct MatchConfig {
  int patch_radius = 4;  // 9x9 patches
  double ratio = 0.9;
};

/// Normalized-patch descriptors, mutual nearest neighbours, ratio test.
std::vector<Correspondence> match_descriptors(std::span<const Point2> kps_a, std::span<const Point2> kps_b,
                                              const Image2D& image_a, const Image2D& image_b,
                                              const MatchConfig& config = {});

struct RansacConfig {
  int iterations = 1000;
  double inlier_px = 2.0;
  std::uint64_t seed = 0;
};

/// Exact affine through three non-collinear correspondences.
AffineTransform affine_from_three(const Correspondence& a, const Correspondence& b, const Correspondence& c,
                                  Point2 center = {});

AffineTransform ransac_affine(std::span<const Correspondence> correspondences, const RansacConfig& config = {},
                              Point2 center = {});

AffineTransform lstsq_affine(std::span<const Correspondence> correspondences, Point2 center = {});

struct FeatureRegisterConfig {
  int max_corners = 120;
  CornerConfig corners;
  MatchConfig match;
  RansacConfig ransac;
};

/// Corner detection + matching + RANSAC, as one registration method.
AffineTransform feature_register(const Image2D& moving, const Image2D& fixed, const FeatureRegisterConfig& config = {});

}  // namespace synstitch
