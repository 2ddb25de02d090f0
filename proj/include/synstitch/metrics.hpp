#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "synstitch/geometry.hpp"
#include "synstitch/image.hpp"

namespace synstitch {

/// Mean squared difference over all pixels. Reports multiply by 100.
double mse(const Image2D& a, const Image2D& b);

struct SsimOptions {
  int window = 7;  // odd, uniform weights
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
};

/// Mean local SSIM over every fully contained window (no padding).
double ssim(const Image2D& a, const Image2D& b, const SsimOptions& options = {});

/// Pearson correlation of the flattened pixels. Throws UndefinedMetric on zero variance.
double ncc(const Image2D& a, const Image2D& b);

/// Optional restriction of the pixel metrics to a mask (masked-overlap variant).
double mse(const Image2D& a, const Image2D& b, const BinaryMask& mask);
double ncc(const Image2D& a, const Image2D& b, const BinaryMask& mask);

/// RMS over i of |A p_moving[i] - p_fixed[i]|.
double keypoint_rmse(std::span<const Point2> moving, std::span<const Point2> fixed_gt, const AffineTransform& estimate);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  int dof = 0;
};

/// Two-sided paired t-test on x - y.
TTestResult paired_t_test(std::span<const double> x, std::span<const double> y);

/// Regularized incomplete beta I_x(a, b), continued-fraction evaluation (about 1e-10 accurate).
double incomplete_beta(double a, double b, double x);
/// Student-t CDF with `dof` degrees of freedom.
double student_t_cdf(double t, double dof);

struct EvalRecord {
  std::string method;
  std::string pair_id;
  bool ok = true;           // false when the method failed on this pair
  std::string error;        // failure reason when !ok
  double mse_x100 = 0.0;
  double ssim = 0.0;
  std::optional<double> ncc;  // missing when undefined (zero variance)
  double kp_rmse = 0.0;
};

struct EvalPair {
  std::string id;
  Image2D moving;
  Image2D fixed;
  std::vector<Point2> keypoints_moving;
  std::vector<Point2> keypoints_fixed;
  AffineTransform gt_affine;
};

/// A registration method under evaluation: register(moving, fixed) -> A_est
/// such that warp(moving, A_est) approximates fixed.
struct Method {
  std::string name;
  bool baseline = true;  // significance marks compare non-baselines against baselines
  std::function<AffineTransform(const Image2D& moving, const Image2D& fixed)> register_pair;
};

struct EvalOptions {
  bool masked_metrics = false;  // restrict pixel metrics to the FOV overlap
  int jobs = 1;
};

/// Per-pair metrics on (warp(moving, A_est), fixed). Failures are recorded, not thrown.
/// Also returns the estimated transform per record (identity on failure).
struct EvalOutput {
  std::vector<EvalRecord> records;
  std::vector<AffineTransform> estimates;
};
EvalOutput evaluate_all(const std::vector<Method>& methods, const std::vector<EvalPair>& pairs,
                        const EvalOptions& options = {});

EvalRecord evaluate_pair(const Method& method, const EvalPair& pair, const AffineTransform& estimate,
                         const EvalOptions& options);

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;
  int count = 0;
  bool significant = false;  // significantly better than every baseline (paired t-test, p < 0.05)
};

struct MethodSummary {
  std::string method;
  bool baseline = true;
  int failures = 0;
  int missing_ncc = 0;
  MetricSummary mse_x100, ssim, ncc, kp_rmse;
};

std::vector<MethodSummary> summarize(const std::vector<EvalRecord>& records, const std::vector<Method>& methods);

void write_results_csv(const std::filesystem::path& path, const std::vector<EvalRecord>& records);
std::vector<EvalRecord> read_results_csv(const std::filesystem::path& path);
/// Table-1-style grid: metrics as rows, methods as columns, **best**, <u>second</u>, * significant.
std::string summary_markdown(const std::vector<MethodSummary>& summaries);

}  // namespace synstitch
