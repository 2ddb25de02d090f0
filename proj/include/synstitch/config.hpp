#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "synstitch/baselines.hpp"
#include "synstitch/diffusion.hpp"
#include "synstitch/ism.hpp"
#include "synstitch/metrics.hpp"
#include "synstitch/phantom.hpp"
#include "synstitch/sspgm.hpp"

namespace synstitch {

/// Resolved run configuration. The tree always has the shape of the profile
/// defaults: keys outside that shape are rejected when overrides are applied.
///
///   profile, seed, jobs
///   paths      {data_dir, ckpt_dir, out_dir}          empty -> derived from out_dir / SYNSTITCH_DATA
///   phantom    {size, subjects, frames, ratios, max_gap, pairs_per_subject, speckle_sigma, motion{...}}
///   diffusion  {steps, beta_lo, beta_hi, channels, groups, embedding_multiplier, lr, batch, train_steps, check_samples}
///   controlnet {mask_channel, lr, batch, train_steps, train_ranges, min_overlap}
///   pairs      {count, val_count, gen_ranges, min_overlap, max_attempts, warp_only, batch}
///   ism        {backbones, channels, hidden, epochs, batch, lr, patience, swap_augment}
///   baselines  {intensity{...}, feature{...}}
///   eval       {pairs, min_identity_rmse, masked_metrics, blend, figures}
struct RunConfig {
  nlohmann::json tree;

  std::string profile() const { return tree.at("profile").get<std::string>(); }
  std::uint64_t seed() const { return tree.at("seed").get<std::uint64_t>(); }
  int jobs() const { return tree.at("jobs").get<int>(); }
  std::filesystem::path data_dir() const;
  std::filesystem::path ckpt_dir() const;
  std::filesystem::path out_dir() const;
};

std::vector<std::string> profile_names();
/// Throws InvalidParameter for an unknown profile.
nlohmann::json profile_defaults(const std::string& profile);

/// Recursively overlays `overrides` onto `base`. Unknown keys and type changes
/// throw InvalidParameter naming the offending path.
void merge_strict(nlohmann::json& base, const nlohmann::json& overrides, const std::string& path = "");

/// Profile defaults, then the config file's contents, then `flag_overrides`.
/// The profile comes from the flags, else the file, else desk32. Empty paths
/// are filled in: out_dir "runs/<profile>", data_dir $SYNSTITCH_DATA or <out>/data, ckpt_dir <out>/ckpt.
RunConfig resolve_config(const nlohmann::json& file_config, const nlohmann::json& flag_overrides);
RunConfig load_config_file(const std::filesystem::path& path, const nlohmann::json& flag_overrides);

/// FNV-1a 64 over the compact dump of the resolved tree.
std::uint64_t config_hash(const RunConfig& config);

PhantomOptions phantom_options(const RunConfig& c);
ManifestOptions manifest_options(const RunConfig& c);
UNetConfig unet_config(const RunConfig& c);
NoiseSchedule noise_schedule(const RunConfig& c);
TrainConfig diffusion_train_config(const RunConfig& c);
ControlNetTrainConfig controlnet_train_config(const RunConfig& c);
PairGenConfig pair_gen_config(const RunConfig& c);
std::vector<Backbone> ism_backbones(const RunConfig& c);
IsmConfig ism_config(const RunConfig& c, Backbone backbone);
IsmTrainConfig ism_train_config(const RunConfig& c);
IntensityRegisterConfig intensity_config(const RunConfig& c);
FeatureRegisterConfig feature_config(const RunConfig& c);
EvalOptions eval_options(const RunConfig& c);

}  // namespace synstitch
