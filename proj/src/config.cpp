#include "synstitch/config.hpp"

#include <cstdlib>
#include <fstream>
#include <numbers>

#include "synstitch/errors.hpp"

namespace synstitch {

namespace {

using nlohmann::json;

json ranges(double t, double r, double s_lo, double s_hi) {
  return to_json(AffineRanges{{-t, t}, {-r, r}, {s_lo, s_hi}});
}

json desk_defaults(int size) {
  constexpr double pi = std::numbers::pi;
  // ControlNet training translations are capped so a 32 px image keeps enough overlap to pass the 0.3 filter.
  const double cn_translation = size <= 32 ? 16.0 : 24.0;
  return {
      {"profile", size <= 32 ? "desk32" : "desk64"},
      {"seed", 0},
      {"jobs", 1},
      {"paths", {{"data_dir", ""}, {"ckpt_dir", ""}, {"out_dir", ""}}},
      {"phantom",
       {{"size", size},
        {"subjects", 17},
        {"frames", 40},
        {"ratios", {9, 3, 5}},
        {"max_gap", 20},
        {"pairs_per_subject", 12},
        {"speckle_sigma", 0.25},
        {"motion", {{"translation", 4.0}, {"rotation", pi / 48}, {"scale", 0.05}}}}},
      {"diffusion",
       {{"steps", 200},
        {"beta_lo", 5e-4},
        {"beta_hi", 0.1},
        {"channels", {16, 32, 32}},
        {"groups", 8},
        {"embedding_multiplier", 4},
        {"lr", 1e-4},
        {"batch", 32},
        {"train_steps", 2000},
        {"check_samples", 32}}},
      {"controlnet",
       {{"mask_channel", false},
        {"lr", 1e-4},
        {"batch", 32},
        {"train_steps", 2000},
        {"train_ranges", ranges(cn_translation, pi / 12, 0.9, 1.1)},
        {"min_overlap", 0.3}}},
      {"pairs",
       {{"count", 100},
        {"val_count", 20},
        {"gen_ranges", ranges(8.0, pi / 24, 0.9, 1.1)},
        {"min_overlap", 0.3},
        {"max_attempts", 100},
        {"warp_only", false},
        {"batch", 16}}},
      {"ism",
       {{"backbones", {"global", "pairenc"}},
        {"channels", 16},
        {"hidden", 128},
        {"epochs", 200},
        {"batch", 32},
        {"lr", 1e-3},
        {"patience", 30},
        {"swap_augment", false}}},
      {"baselines",
       {{"intensity",
         {{"metric", "mse"},
          {"starts", 8},
          {"iterations", 200},
          {"start_translation", 6.0},
          {"start_rotation", 0.1},
          {"start_scale", 0.05},
          {"fov_union", true}}},
        {"feature",
         {{"max_corners", 120},
          {"nms_radius", 3},
          {"patch_radius", 4},
          {"ratio", 0.9},
          {"ransac_iterations", 1000},
          {"inlier_px", 2.0}}}}},
      {"eval",
       {{"pairs", 60}, {"min_identity_rmse", 0.0}, {"masked_metrics", false}, {"blend", "average"}, {"figures", true}}},
  };
}

json paper_defaults() {
  json j = desk_defaults(64);
  j["profile"] = "paper";
  auto& d = j["diffusion"];
  d["steps"] = 1000;
  d["beta_lo"] = 1e-4;
  d["beta_hi"] = 0.02;
  d["channels"] = {128, 256, 256};
  d["groups"] = 32;
  d["lr"] = 1e-5;
  d["batch"] = 64;
  d["train_steps"] = 100000;
  auto& c = j["controlnet"];
  c["lr"] = 1e-5;
  c["batch"] = 64;
  c["train_steps"] = 100000;
  auto& i = j["ism"];
  i["lr"] = 1e-5;
  i["batch"] = 128;
  i["epochs"] = 500;
  i["patience"] = 500;
  return j;
}

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
  return a.type() == b.type();
}

template <class T>
T get(const json& j, const char* key) {
  return j.at(key).get<T>();
}

}  // namespace

std::vector<std::string> profile_names() { return {"desk32", "desk64", "paper"}; }

json profile_defaults(const std::string& profile) {
  if (profile == "desk32") return desk_defaults(32);
  if (profile == "desk64") return desk_defaults(64);
  if (profile == "paper") return paper_defaults();
  throw InvalidParameter("unknown profile '" + profile + "' (expected desk32, desk64 or paper)");
}

void merge_strict(json& base, const json& overrides, const std::string& path) {
  if (!overrides.is_object()) throw InvalidParameter("config" + (path.empty() ? "" : " key '" + path + "'") + " must be an object");
  for (const auto& [key, value] : overrides.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw InvalidParameter("unknown config key '" + here + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      merge_strict(slot, value, here);
    } else if (!same_kind(slot, value)) {
      throw InvalidParameter("config key '" + here + "' expects " + std::string(slot.type_name()) + ", got " +
                             value.type_name());
    } else {
      slot = value;
    }
  }
}

RunConfig resolve_config(const json& file_config, const json& flag_overrides) {
  std::string profile = "desk32";
  if (file_config.is_object() && file_config.contains("profile")) profile = file_config.at("profile").get<std::string>();
  if (flag_overrides.is_object() && flag_overrides.contains("profile")) {
    profile = flag_overrides.at("profile").get<std::string>();
  }
  RunConfig c{profile_defaults(profile)};
  if (file_config.is_object()) merge_strict(c.tree, file_config);
  if (flag_overrides.is_object()) merge_strict(c.tree, flag_overrides);
  c.tree["profile"] = profile;

  auto& paths = c.tree["paths"];
  if (paths["out_dir"].get<std::string>().empty()) paths["out_dir"] = "runs/" + profile;
  const std::filesystem::path out = paths["out_dir"].get<std::string>();
  if (paths["data_dir"].get<std::string>().empty()) {
    const char* env = std::getenv("SYNSTITCH_DATA");
    paths["data_dir"] = env && *env ? std::string(env) : (out / "data").string();
  }
  if (paths["ckpt_dir"].get<std::string>().empty()) paths["ckpt_dir"] = (out / "ckpt").string();
  if (c.jobs() < 1) throw InvalidParameter("jobs must be at least 1");
  return c;
}

RunConfig load_config_file(const std::filesystem::path& path, const json& flag_overrides) {
  std::ifstream is(path);
  if (!is) throw MissingArtifact("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw InvalidParameter("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return resolve_config(j, flag_overrides);
}

std::filesystem::path RunConfig::data_dir() const { return tree.at("paths").at("data_dir").get<std::string>(); }
std::filesystem::path RunConfig::ckpt_dir() const { return tree.at("paths").at("ckpt_dir").get<std::string>(); }
std::filesystem::path RunConfig::out_dir() const { return tree.at("paths").at("out_dir").get<std::string>(); }

std::uint64_t config_hash(const RunConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config.tree.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

PhantomOptions phantom_options(const RunConfig& c) {
  const auto& p = c.tree.at("phantom");
  PhantomOptions o;
  o.size = get<int>(p, "size");
  o.speckle_sigma = get<double>(p, "speckle_sigma");
  o.motion.translation = get<double>(p.at("motion"), "translation");
  o.motion.rotation = get<double>(p.at("motion"), "rotation");
  o.motion.scale = get<double>(p.at("motion"), "scale");
  return o;
}

ManifestOptions manifest_options(const RunConfig& c) {
  const auto& p = c.tree.at("phantom");
  ManifestOptions o;
  o.ratios = get<std::array<int, 3>>(p, "ratios");
  o.max_gap = get<int>(p, "max_gap");
  o.pairs_per_subject = get<int>(p, "pairs_per_subject");
  return o;
}

UNetConfig unet_config(const RunConfig& c) {
  const auto& d = c.tree.at("diffusion");
  UNetConfig u;
  u.channels = get<std::vector<int>>(d, "channels");
  u.groups = get<int>(d, "groups");
  u.embedding_multiplier = get<int>(d, "embedding_multiplier");
  return u;
}

NoiseSchedule noise_schedule(const RunConfig& c) {
  const auto& d = c.tree.at("diffusion");
  return make_schedule(get<int>(d, "steps"), get<double>(d, "beta_lo"), get<double>(d, "beta_hi"));
}

TrainConfig diffusion_train_config(const RunConfig& c) {
  const auto& d = c.tree.at("diffusion");
  TrainConfig t;
  t.steps = get<long>(d, "train_steps");
  t.batch = get<int>(d, "batch");
  t.lr = get<double>(d, "lr");
  return t;
}

ControlNetTrainConfig controlnet_train_config(const RunConfig& c) {
  const auto& d = c.tree.at("controlnet");
  ControlNetTrainConfig t;
  t.steps = get<long>(d, "train_steps");
  t.batch = get<int>(d, "batch");
  t.lr = get<double>(d, "lr");
  t.train_ranges = ranges_from_json(d.at("train_ranges"));
  t.min_overlap = get<double>(d, "min_overlap");
  return t;
}

PairGenConfig pair_gen_config(const RunConfig& c) {
  const auto& d = c.tree.at("pairs");
  PairGenConfig p;
  p.gen_ranges = ranges_from_json(d.at("gen_ranges"));
  p.min_overlap = get<double>(d, "min_overlap");
  p.max_attempts = get<int>(d, "max_attempts");
  p.warp_only = get<bool>(d, "warp_only");
  p.batch = get<int>(d, "batch");
  p.jobs = c.jobs();
  return p;
}

std::vector<Backbone> ism_backbones(const RunConfig& c) {
  std::vector<Backbone> out;
  for (const auto& s : c.tree.at("ism").at("backbones")) out.push_back(backbone_from_string(s.get<std::string>()));
  return out;
}

IsmConfig ism_config(const RunConfig& c, Backbone backbone) {
  const auto& d = c.tree.at("ism");
  IsmConfig i;
  i.backbone = backbone;
  i.size = get<int>(c.tree.at("phantom"), "size");
  i.channels = get<int>(d, "channels");
  i.hidden = get<int>(d, "hidden");
  return i;
}

IsmTrainConfig ism_train_config(const RunConfig& c) {
  const auto& d = c.tree.at("ism");
  IsmTrainConfig t;
  t.epochs = get<int>(d, "epochs");
  t.batch = get<int>(d, "batch");
  t.lr = get<double>(d, "lr");
  t.patience = get<int>(d, "patience");
  t.swap_augment = get<bool>(d, "swap_augment");
  return t;
}

IntensityRegisterConfig intensity_config(const RunConfig& c) {
  const auto& d = c.tree.at("baselines").at("intensity");
  IntensityRegisterConfig i;
  const auto metric = get<std::string>(d, "metric");
  if (metric == "mse") i.metric = SimilarityMetric::mse;
  else if (metric == "ncc") i.metric = SimilarityMetric::ncc;
  else throw InvalidParameter("baselines.intensity.metric must be mse or ncc");
  i.starts = get<int>(d, "starts");
  i.iterations = get<int>(d, "iterations");
  i.start_translation = get<double>(d, "start_translation");
  i.start_rotation = get<double>(d, "start_rotation");
  i.start_scale = get<double>(d, "start_scale");
  i.fov_union = get<bool>(d, "fov_union");
  i.seed = c.seed();
  return i;
}

FeatureRegisterConfig feature_config(const RunConfig& c) {
  const auto& d = c.tree.at("baselines").at("feature");
  FeatureRegisterConfig f;
  f.max_corners = get<int>(d, "max_corners");
  f.corners.nms_radius = get<int>(d, "nms_radius");
  f.match.patch_radius = get<int>(d, "patch_radius");
  f.match.ratio = get<double>(d, "ratio");
  f.ransac.iterations = get<int>(d, "ransac_iterations");
  f.ransac.inlier_px = get<double>(d, "inlier_px");
  f.ransac.seed = c.seed();
  return f;
}

EvalOptions eval_options(const RunConfig& c) {
  EvalOptions o;
  o.masked_metrics = get<bool>(c.tree.at("eval"), "masked_metrics");
  o.jobs = c.jobs();
  return o;
}

}  // namespace synstitch
