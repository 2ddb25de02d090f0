#include "synstitch/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace synstitch {

namespace {

constexpr double kPi = std::numbers::pi;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * std::generate_canonical<double, 53>(rng);
}

double smoothstep(double edge0, double edge1, double x) {
  const double t = std::clamp((x - edge0) / (edge1 - edge0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// Angle of (dx, dy) measured from the downward (+y) axis, in degrees.
double sector_angle_deg(double dx, double dy) { return std::atan2(dx, dy) * 180.0 / kPi; }

struct Blob {
  Point2 center;
  double sigma;
  double amplitude;
};

struct Wave {
  double kx, ky, phase;
};

// Scene content in frame-0 coordinates plus probe-fixed artifacts.
class Scene {
 public:
  Scene(std::mt19937_64& rng, int size, const FovSpec& fov, double speckle_sigma)
      : size_(size), fov_(fov), speckle_sigma_(speckle_sigma) {
    const double s = size;
    for (auto& w : waves_) {
      const double wavelength = uniform(rng, 0.5, 1.2) * s;
      const double dir = uniform(rng, 0.0, 2.0 * kPi);
      w = {2.0 * kPi / wavelength * std::cos(dir), 2.0 * kPi / wavelength * std::sin(dir), uniform(rng, 0.0, 2.0 * kPi)};
    }
    organ_center_ = {s / 2.0 + uniform(rng, -0.04, 0.04) * s, 0.5 * s + uniform(rng, -0.03, 0.03) * s};
    semi_a_ = uniform(rng, 0.20, 0.25) * s;
    semi_b_ = uniform(rng, 0.12, 0.15) * s;
    orientation_ = uniform(rng, -0.4, 0.4);
    const int n_blobs = 2 + static_cast<int>(std::generate_canonical<double, 53>(rng) * 3.0);
    for (int i = 0; i < n_blobs; ++i) {
      const double u = uniform(rng, -0.5, 0.5);
      const double v = uniform(rng, -0.5, 0.5);
      Blob b;
      b.center = organ_point(u, v);
      b.sigma = uniform(rng, 0.03, 0.06) * s;
      b.amplitude = (std::generate_canonical<double, 53>(rng) < 0.5 ? -1.0 : 1.0) * uniform(rng, 0.15, 0.3);
      blobs_.push_back(b);
    }
    shadow_center_deg_ = uniform(rng, -0.35, 0.35) * fov_.angle_deg;
    shadow_half_width_deg_ = uniform(rng, 3.0, 5.0);
    shadow_depth_ = fov_.radius.lo + uniform(rng, 0.45, 0.65) * (fov_.radius.hi - fov_.radius.lo);

    margin_ = size / 2;
    grid_ = size + 2 * margin_;
    std::normal_distribution<double> normal(0.0, 1.0);
    speckle_.resize(static_cast<std::size_t>(grid_) * grid_);
    for (auto& v : speckle_) v = normal(rng);
  }

  // Point inside the organ at normalized ellipse coordinates (u, v) in [-1, 1].
  Point2 organ_point(double u, double v) const {
    const double c = std::cos(orientation_);
    const double s = std::sin(orientation_);
    const double ex = u * semi_a_;
    const double ey = v * semi_b_;
    return {organ_center_.x + c * ex - s * ey, organ_center_.y + s * ex + c * ey};
  }

  std::vector<Point2> landmarks() const {
    std::vector<Point2> pts;
    pts.push_back(organ_center_);
    for (auto [u, v] : {std::pair{0.75, 0.0}, {-0.75, 0.0}, {0.0, 0.75}, {0.0, -0.75}}) pts.push_back(organ_point(u, v));
    for (auto [u, v] : {std::pair{0.5, 0.5}, {-0.5, 0.5}, {0.5, -0.5}, {-0.5, -0.5}}) pts.push_back(organ_point(u, v));
    for (const auto& b : blobs_) pts.push_back(b.center);
    return pts;
  }

  // Content value at frame-0 coordinate q (before probe-frame effects).
  double content(Point2 q) const {
    double tissue = 0.30;
    for (const auto& w : waves_) tissue += 0.025 * std::cos(w.kx * q.x + w.ky * q.y + w.phase);
    const double c = std::cos(orientation_);
    const double s = std::sin(orientation_);
    const double dx = q.x - organ_center_.x;
    const double dy = q.y - organ_center_.y;
    const double eu = (c * dx + s * dy) / semi_a_;
    const double ev = (-s * dx + c * dy) / semi_b_;
    const double r = std::sqrt(eu * eu + ev * ev);
    const double edge_px = 0.8 * size_ / 64.0;
    const double inside = 1.0 / (1.0 + std::exp(-(1.0 - r) * semi_b_ / edge_px));
    const double rim = 0.22 * std::exp(-std::pow((r - 0.9) / 0.08, 2.0));
    double v = tissue * (1.0 - inside) + (0.55 + rim) * inside;
    for (const auto& b : blobs_) {
      const double bx = q.x - b.center.x;
      const double by = q.y - b.center.y;
      v += b.amplitude * std::exp(-(bx * bx + by * by) / (2.0 * b.sigma * b.sigma));
    }
    return v * std::exp(speckle_sigma_ * speckle_at(q) - 0.5 * speckle_sigma_ * speckle_sigma_);
  }

  // Depth attenuation and the acoustic shadow are tied to the probe, not the content.
  double probe_gain(Point2 p) const {
    const double dx = p.x - fov_.apex.x;
    const double dy = p.y - fov_.apex.y;
    const double r = std::hypot(dx, dy);
    const double depth = std::clamp((r - fov_.radius.lo) / (fov_.radius.hi - fov_.radius.lo), 0.0, 1.0);
    double gain = 1.0 - 0.2 * depth;
    const double off = std::abs(sector_angle_deg(dx, dy) - shadow_center_deg_);
    const double angular = 1.0 - smoothstep(shadow_half_width_deg_, shadow_half_width_deg_ + 1.5, off);
    const double radial = smoothstep(shadow_depth_ - 1.5, shadow_depth_ + 1.5, r);
    gain *= 1.0 - 0.65 * angular * radial;
    return gain;
  }

 private:
  double speckle_at(Point2 q) const {
    const double gx = std::clamp(q.x + margin_, 0.0, grid_ - 1.000001);
    const double gy = std::clamp(q.y + margin_, 0.0, grid_ - 1.000001);
    const int x0 = static_cast<int>(gx);
    const int y0 = static_cast<int>(gy);
    const double ax = gx - x0;
    const double ay = gy - y0;
    auto at = [&](int y, int x) { return speckle_[static_cast<std::size_t>(y) * grid_ + x]; };
    return (1 - ax) * (1 - ay) * at(y0, x0) + ax * (1 - ay) * at(y0, x0 + 1) + (1 - ax) * ay * at(y0 + 1, x0) +
           ax * ay * at(y0 + 1, x0 + 1);
  }

  int size_;
  FovSpec fov_;
  double speckle_sigma_;
  std::array<Wave, 3> waves_{};
  Point2 organ_center_;
  double semi_a_ = 0, semi_b_ = 0, orientation_ = 0;
  std::vector<Blob> blobs_;
  double shadow_center_deg_ = 0, shadow_half_width_deg_ = 0, shadow_depth_ = 0;
  int margin_ = 0, grid_ = 0;
  std::vector<double> speckle_;
};

bool inside_with_margin(const BinaryMask& fov, Point2 p) {
  const int cx = static_cast<int>(std::floor(p.x + 0.5));
  const int cy = static_cast<int>(std::floor(p.y + 0.5));
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      if (!fov.contains(cy + dy, cx + dx) || !fov(cy + dy, cx + dx)) return false;
    }
  }
  return true;
}

Image2D render(const Scene& scene, const BinaryMask& fov, const AffineTransform& motion) {
  const AffineTransform inv = motion.inverse();
  Image2D img(fov.height(), fov.width());
  for (int y = 0; y < fov.height(); ++y) {
    for (int x = 0; x < fov.width(); ++x) {
      if (!fov(y, x)) continue;
      const Point2 p{static_cast<double>(x), static_cast<double>(y)};
      const double v = scene.content(inv.apply(p)) * scene.probe_gain(p);
      // Strictly positive inside the FOV so that H(I) with tau = 0 recovers the FOV.
      img(y, x) = static_cast<float>(std::clamp(v, 0.004, 1.0));
    }
  }
  return img;
}

}  // namespace

FovSpec FovSpec::for_size(int size) {
  const double s = size;
  return {{(size - 1) / 2.0, -0.15 * s}, {0.25 * s, 1.0 * s}, 56.0};
}

BinaryMask gen_fov_mask(int height, int width, Point2 apex, Range radius, double angle_deg) {
  if (!(angle_deg > 10.0 && angle_deg <= 360.0)) throw InvalidParameter("FOV angle must lie in (10, 360] degrees");
  if (!(radius.lo >= 0.0 && radius.hi > radius.lo)) throw InvalidParameter("FOV radii must satisfy 0 <= inner < outer");
  BinaryMask mask(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double dx = x - apex.x;
      const double dy = y - apex.y;
      const double r = std::hypot(dx, dy);
      if (r < radius.lo || r > radius.hi) continue;
      if (std::abs(sector_angle_deg(dx, dy)) <= angle_deg / 2.0) mask(y, x) = 1;
    }
  }
  if (count_set(mask) == 0) throw InvalidParameter("FOV radii do not intersect the image grid");
  return mask;
}

PhantomSubject gen_subject(std::uint64_t seed, int n_frames, const PhantomOptions& options, std::string subject_id) {
  if (n_frames < 1) throw InvalidParameter("a subject needs at least one frame");
  if (options.size != 32 && options.size != 64) throw InvalidParameter("phantom size must be 32 or 64");
  std::mt19937_64 rng(seed);
  const int size = options.size;
  const FovSpec fov_spec = FovSpec::for_size(size);
  PhantomSubject subject;
  subject.subject_id = std::move(subject_id);
  subject.fov_mask = gen_fov_mask(size, size, fov_spec);
  const Scene scene(rng, size, fov_spec, options.speckle_sigma);
  const Point2 center = image_center(size, size);
  const std::vector<Point2> landmarks0 = scene.landmarks();

  const MotionBounds& b = options.motion;
  std::array<double, 4> bound{b.translation, b.translation, b.rotation, b.scale};
  std::array<double, 4> pos{0, 0, 0, 0};  // tx, ty, theta, s - 1
  std::array<double, 4> vel{0, 0, 0, 0};
  auto make_motion = [&](const std::array<double, 4>& q) {
    AffineParams p;
    p.tx = q[0];
    p.ty = q[1];
    p.theta = q[2];
    p.sx = p.sy = 1.0 + q[3];
    return params_to_matrix(p, center);
  };

  for (int k = 0; k < n_frames; ++k) {
    AffineTransform motion = AffineTransform::identity(center);
    if (k > 0) {
      bool accepted = false;
      for (int attempt = 0; attempt < 50 && !accepted; ++attempt) {
        std::array<double, 4> v = vel;
        std::array<double, 4> q = pos;
        for (int i = 0; i < 4; ++i) {
          v[i] = 0.6 * vel[i] + uniform(rng, -bound[i] / 3.0, bound[i] / 3.0);
          q[i] = pos[i] + v[i];
          if (q[i] > bound[i]) {
            q[i] = 2.0 * bound[i] - q[i];
            v[i] = -v[i];
          } else if (q[i] < -bound[i]) {
            q[i] = -2.0 * bound[i] - q[i];
            v[i] = -v[i];
          }
          q[i] = std::clamp(q[i], -bound[i], bound[i]);
        }
        const AffineTransform candidate = make_motion(q);
        accepted = std::all_of(landmarks0.begin(), landmarks0.end(),
                               [&](Point2 p) { return inside_with_margin(subject.fov_mask, candidate.apply(p)); });
        if (accepted) {
          pos = q;
          vel = v;
        }
      }
      if (!accepted) vel = {0, 0, 0, 0};
      motion = make_motion(pos);
    }
    std::vector<Point2> lm;
    lm.reserve(landmarks0.size());
    for (Point2 p : landmarks0) lm.push_back(motion.apply(p));
    subject.frames.push_back(render(scene, subject.fov_mask, motion));
    subject.landmarks.push_back(std::move(lm));
    subject.motion_log.push_back(motion);
  }
  return subject;
}

std::string to_string(Role role) {
  switch (role) {
    case Role::sspgm_train: return "sspgm_train";
    case Role::curated: return "curated";
    case Role::stitch_eval: return "stitch_eval";
  }
  return "unknown";
}

Role role_from_string(const std::string& s) {
  if (s == "sspgm_train") return Role::sspgm_train;
  if (s == "curated") return Role::curated;
  if (s == "stitch_eval") return Role::stitch_eval;
  throw ValidationError("unknown dataset role: " + s);
}

std::vector<ManifestEntry> DatasetManifest::with_role(Role role) const {
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out), [&](const auto& e) { return e.role == role; });
  return out;
}

std::string image_file_name(const std::string& subject_id, int frame) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "_%03d.f32", frame);
  return "img_" + subject_id + buf;
}

DatasetManifest build_manifest(const std::vector<std::pair<std::string, int>>& subjects, const ManifestOptions& options,
                               std::mt19937_64& rng) {
  const int n = static_cast<int>(subjects.size());
  const int total = options.ratios[0] + options.ratios[1] + options.ratios[2];
  if (n < 3 || total <= 0) throw InvalidParameter("need at least three subjects for train/val/test splits");
  const int n_val = static_cast<int>(std::lround(static_cast<double>(n) * options.ratios[1] / total));
  const int n_test = static_cast<int>(std::lround(static_cast<double>(n) * options.ratios[2] / total));
  const int n_train = n - n_val - n_test;
  if (n_train < 1 || n_val < 1 || n_test < 1) {
    throw InvalidParameter("too few subjects for three nonempty splits at the configured ratios");
  }

  std::vector<std::size_t> order(subjects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(std::generate_canonical<double, 53>(rng) * static_cast<double>(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }

  DatasetManifest m;
  m.ratios = options.ratios;
  m.max_gap = options.max_gap;
  std::map<std::string, int> frames;
  for (int i = 0; i < n; ++i) {
    const auto& [id, count] = subjects[order[i]];
    frames[id] = count;
    if (i < n_train) m.train.push_back(id);
    else if (i < n_train + n_val) m.val.push_back(id);
    else m.test.push_back(id);
  }
  std::sort(m.train.begin(), m.train.end());
  std::sort(m.val.begin(), m.val.end());
  std::sort(m.test.begin(), m.test.end());
  m.n_frames = subjects.front().second;

  auto add_entries = [&](const std::vector<std::string>& ids, Role role) {
    for (const auto& id : ids) {
      for (int f = 0; f < frames[id]; ++f) m.entries.push_back({id, f, image_file_name(id, f), role});
    }
  };
  add_entries(m.train, Role::sspgm_train);
  add_entries(m.val, Role::sspgm_train);
  add_entries(m.train, Role::curated);
  add_entries(m.val, Role::curated);
  add_entries(m.test, Role::stitch_eval);

  // Candidate stitching pairs per test subject, interleaved so any prefix spreads across subjects.
  std::vector<std::vector<EvalPairRef>> per_subject;
  const int want = 4 * options.pairs_per_subject;
  for (const auto& id : m.test) {
    const int nf = frames[id];
    std::vector<EvalPairRef> cands;
    std::set<std::pair<int, int>> seen;
    const int max_possible = [&] {
      int c = 0;
      for (int i = 0; i < nf; ++i)
        for (int j = 0; j < nf; ++j) c += (i != j && std::abs(i - j) < options.max_gap);
      return c;
    }();
    while (static_cast<int>(cands.size()) < std::min(want, max_possible)) {
      const int i = static_cast<int>(std::generate_canonical<double, 53>(rng) * nf);
      const int j = static_cast<int>(std::generate_canonical<double, 53>(rng) * nf);
      if (i == j || std::abs(i - j) >= options.max_gap || !seen.insert({i, j}).second) continue;
      cands.push_back({id, i, j});
    }
    per_subject.push_back(std::move(cands));
  }
  for (std::size_t r = 0;; ++r) {
    bool any = false;
    for (const auto& c : per_subject) {
      if (r < c.size()) {
        m.eval_pairs.push_back(c[r]);
        any = true;
      }
    }
    if (!any) break;
  }
  return m;
}

std::vector<EvalPair> make_eval_pairs(const std::map<std::string, PhantomSubject>& subjects,
                                      const std::vector<EvalPairRef>& refs, int n_pairs, double min_identity_rmse) {
  std::vector<EvalPair> out;
  for (const auto& ref : refs) {
    if (static_cast<int>(out.size()) >= n_pairs) break;
    auto it = subjects.find(ref.subject_id);
    if (it == subjects.end()) throw MissingArtifact("eval pair references unknown subject " + ref.subject_id);
    const PhantomSubject& s = it->second;
    const int nf = static_cast<int>(s.frames.size());
    if (ref.moving_frame < 0 || ref.moving_frame >= nf || ref.fixed_frame < 0 || ref.fixed_frame >= nf) {
      throw ValidationError("eval pair frame index out of range for subject " + ref.subject_id);
    }
    EvalPair p;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%03d_%03d", ref.subject_id.c_str(), ref.moving_frame, ref.fixed_frame);
    p.id = buf;
    p.moving = s.frames[ref.moving_frame];
    p.fixed = s.frames[ref.fixed_frame];
    p.keypoints_moving = s.landmarks[ref.moving_frame];
    p.keypoints_fixed = s.landmarks[ref.fixed_frame];
    p.gt_affine = compose(s.motion_log[ref.fixed_frame], s.motion_log[ref.moving_frame].inverse());
    if (min_identity_rmse > 0.0) {
      const double id_rmse = keypoint_rmse(p.keypoints_moving, p.keypoints_fixed,
                                           AffineTransform::identity(p.gt_affine.center()));
      if (id_rmse < min_identity_rmse) continue;
    }
    out.push_back(std::move(p));
  }
  return out;
}

nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["size"] = m.size;
  j["n_frames"] = m.n_frames;
  j["seed"] = m.seed;
  j["ratios"] = m.ratios;
  j["max_gap"] = m.max_gap;
  j["split"] = {{"train", m.train}, {"val", m.val}, {"test", m.test}};
  auto entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"subject_id", e.subject_id},
                       {"frame_index", e.frame_index},
                       {"file_path", e.file_path},
                       {"role", to_string(e.role)}});
  }
  j["entries"] = std::move(entries);
  auto pairs = nlohmann::json::array();
  for (const auto& p : m.eval_pairs) {
    pairs.push_back({{"subject_id", p.subject_id}, {"moving", p.moving_frame}, {"fixed", p.fixed_frame}});
  }
  j["eval_pairs"] = std::move(pairs);
  return j;
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
  try {
    DatasetManifest m;
    m.size = j.at("size").get<int>();
    m.n_frames = j.at("n_frames").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.ratios = j.at("ratios").get<std::array<int, 3>>();
    m.max_gap = j.at("max_gap").get<int>();
    m.train = j.at("split").at("train").get<std::vector<std::string>>();
    m.val = j.at("split").at("val").get<std::vector<std::string>>();
    m.test = j.at("split").at("test").get<std::vector<std::string>>();
    for (const auto& e : j.at("entries")) {
      m.entries.push_back({e.at("subject_id").get<std::string>(), e.at("frame_index").get<int>(),
                           e.at("file_path").get<std::string>(), role_from_string(e.at("role").get<std::string>())});
    }
    for (const auto& p : j.at("eval_pairs")) {
      m.eval_pairs.push_back(
          {p.at("subject_id").get<std::string>(), p.at("moving").get<int>(), p.at("fixed").get<int>()});
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
}

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const DatasetManifest& manifest,
                   const std::vector<PhantomSubject>& subjects) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    os << to_json(manifest).dump(2) << "\n";
  }
  if (!subjects.empty()) write_mask_f32(dir / "fov.f32", subjects.front().fov_mask);
  std::ofstream lm(dir / "landmarks.csv", std::ios::trunc);
  lm << "subject,frame,idx,x,y\n";
  nlohmann::json motion = nlohmann::json::object();
  for (const auto& s : subjects) {
    auto list = nlohmann::json::array();
    for (std::size_t k = 0; k < s.frames.size(); ++k) {
      write_f32(dir / image_file_name(s.subject_id, static_cast<int>(k)), s.frames[k]);
      for (std::size_t i = 0; i < s.landmarks[k].size(); ++i) {
        lm << s.subject_id << ',' << k << ',' << i << ',' << fmt17(s.landmarks[k][i].x) << ','
           << fmt17(s.landmarks[k][i].y) << "\n";
      }
      list.push_back(to_json(s.motion_log[k]));
    }
    motion[s.subject_id] = std::move(list);
  }
  std::ofstream ms(dir / "motion.json", std::ios::trunc);
  ms << motion.dump(2) << "\n";
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw MissingArtifact("no manifest.json in " + dir.string() + " (run phantom-gen first)");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("cannot parse manifest.json: ") + e.what());
  }
  return manifest_from_json(j);
}

std::map<std::string, PhantomSubject> read_subjects(const std::filesystem::path& dir, const DatasetManifest& manifest,
                                                    const std::vector<std::string>& ids) {
  const std::set<std::string> wanted(ids.begin(), ids.end());
  std::map<std::string, PhantomSubject> out;
  const BinaryMask fov = read_mask_f32(dir / "fov.f32", manifest.size, manifest.size);
  nlohmann::json motion;
  {
    std::ifstream is(dir / "motion.json");
    if (!is) throw MissingArtifact("no motion.json in " + dir.string());
    is >> motion;
  }
  for (const auto& id : ids) {
    PhantomSubject s;
    s.subject_id = id;
    s.fov_mask = fov;
    if (!motion.contains(id)) throw MissingArtifact("motion.json lacks subject " + id);
    for (const auto& t : motion.at(id)) s.motion_log.push_back(affine_from_json(t));
    const std::size_t nf = s.motion_log.size();
    for (std::size_t k = 0; k < nf; ++k) {
      s.frames.push_back(read_f32(dir / image_file_name(id, static_cast<int>(k)), manifest.size, manifest.size));
    }
    s.landmarks.resize(nf);
    out.emplace(id, std::move(s));
  }
  std::ifstream lm(dir / "landmarks.csv");
  if (!lm) throw MissingArtifact("no landmarks.csv in " + dir.string());
  std::string line;
  std::getline(lm, line);
  while (std::getline(lm, line)) {
    std::istringstream row(line);
    std::string subject, frame, idx, x, y;
    std::getline(row, subject, ',');
    std::getline(row, frame, ',');
    std::getline(row, idx, ',');
    std::getline(row, x, ',');
    std::getline(row, y, ',');
    if (!wanted.count(subject)) continue;
    auto& lms = out.at(subject).landmarks.at(std::stoul(frame));
    const std::size_t i = std::stoul(idx);
    if (lms.size() <= i) lms.resize(i + 1);
    lms[i] = {std::stod(x), std::stod(y)};
  }
  return out;
}

}  // namespace synstitch
