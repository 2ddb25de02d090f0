#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "synstitch/geometry.hpp"
#include "synstitch/metrics.hpp"

namespace synstitch {

/// Annular sector with its apex above the image, opening downwards.
struct FovSpec {
  Point2 apex;
  Range radius;             // inner, outer (pixels)
  double angle_deg = 56.0;  // full opening angle

  static FovSpec for_size(int size);
};

BinaryMask gen_fov_mask(int height, int width, Point2 apex, Range radius, double angle_deg);
inline BinaryMask gen_fov_mask(int height, int width, const FovSpec& fov) {
  return gen_fov_mask(height, width, fov.apex, fov.radius, fov.angle_deg);
}

/// Bounds on the cumulative content motion of a subject relative to frame 0.
/// Any two frames then differ by at most twice these bounds.
struct MotionBounds {
  double translation = 4.0;  // pixels per axis
  double rotation = 3.14159265358979323846 / 48.0;
  double scale = 0.05;       // |s - 1|
};

struct PhantomOptions {
  int size = 64;
  MotionBounds motion;
  double speckle_sigma = 0.25;
};

struct PhantomSubject {
  std::string subject_id;
  std::vector<Image2D> frames;
  BinaryMask fov_mask;
  std::vector<std::vector<Point2>> landmarks;  // per frame
  std::vector<AffineTransform> motion_log;     // content motion of frame k relative to frame 0
};

PhantomSubject gen_subject(std::uint64_t seed, int n_frames, const PhantomOptions& options,
                           std::string subject_id = "s00");
inline PhantomSubject gen_subject(std::uint64_t seed, int n_frames, int size) {
  PhantomOptions o;
  o.size = size;
  return gen_subject(seed, n_frames, o);
}

enum class Role { sspgm_train, curated, stitch_eval };
std::string to_string(Role role);
Role role_from_string(const std::string& s);

struct ManifestEntry {
  std::string subject_id;
  int frame_index = 0;
  std::string file_path;
  Role role = Role::sspgm_train;
};

struct EvalPairRef {
  std::string subject_id;
  int moving_frame = 0;
  int fixed_frame = 0;
};

struct DatasetManifest {
  int size = 64;
  int n_frames = 0;
  std::uint64_t seed = 0;
  std::array<int, 3> ratios{9, 3, 5};
  int max_gap = 20;
  std::vector<std::string> train, val, test;
  std::vector<ManifestEntry> entries;
  std::vector<EvalPairRef> eval_pairs;  // candidate stitching pairs from test subjects

  std::vector<ManifestEntry> with_role(Role role) const;
};

struct ManifestOptions {
  std::array<int, 3> ratios{9, 3, 5};
  int max_gap = 20;
  int pairs_per_subject = 12;
};

/// Subject-level split plus role entries. `subjects` maps id -> frame count.
DatasetManifest build_manifest(const std::vector<std::pair<std::string, int>>& subjects, const ManifestOptions& options,
                               std::mt19937_64& rng);

/// Materializes pairs: moving = frame i, fixed = frame j, gt = motion[j] * motion[i]^-1.
/// Pairs whose identity-estimate keypoint RMSE is below `min_identity_rmse` are skipped.
std::vector<EvalPair> make_eval_pairs(const std::map<std::string, PhantomSubject>& subjects,
                                      const std::vector<EvalPairRef>& refs, int n_pairs,
                                      double min_identity_rmse = 0.0);

nlohmann::json to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const nlohmann::json& j);

/// Dataset directory: manifest.json, img_<subject>_<frame>.f32, fov.f32,
/// landmarks.csv (subject,frame,idx,x,y), motion.json.
void write_dataset(const std::filesystem::path& dir, const DatasetManifest& manifest,
                   const std::vector<PhantomSubject>& subjects);
DatasetManifest read_manifest(const std::filesystem::path& dir);
std::map<std::string, PhantomSubject> read_subjects(const std::filesystem::path& dir, const DatasetManifest& manifest,
                                                    const std::vector<std::string>& ids);
std::string image_file_name(const std::string& subject_id, int frame);

}  // namespace synstitch
