#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "synstitch/config.hpp"

namespace synstitch {

// Run directory layout (all under the resolved paths):
//   <data_dir>/                   phantom dataset
//   <ckpt_dir>/diffusion/         base denoiser, samples.json, samples/*.png
//   <ckpt_dir>/controlnet/
//   <ckpt_dir>/ism-<backbone>/
//   <out_dir>/pairs/{train,val}/  synthetic stitching pairs
//   <out_dir>/eval/               results.csv, transforms.json, summary.md, figs/
//   <out_dir>/report/summary.md
// Every command writes config.json (resolved) and run.json (provenance) into its output directory.

std::filesystem::path diffusion_dir(const RunConfig& c);
std::filesystem::path controlnet_dir(const RunConfig& c);
std::filesystem::path ism_dir(const RunConfig& c, Backbone backbone);
std::filesystem::path pairs_dir(const RunConfig& c, const std::string& split);
std::filesystem::path eval_dir(const RunConfig& c);
std::filesystem::path report_dir(const RunConfig& c);

/// Writes config.json and run.json (command, config hash, seed, git revision, wall time, extra).
void write_provenance(const std::filesystem::path& dir, const RunConfig& config, const std::string& command,
                      double wall_seconds, const nlohmann::json& extra = {});
std::string git_revision();

/// Each command returns a short JSON summary that is also stored in run.json.
nlohmann::json run_phantom_gen(const RunConfig& c);
nlohmann::json run_train_diffusion(const RunConfig& c);
nlohmann::json run_train_controlnet(const RunConfig& c);
nlohmann::json run_gen_pairs(const RunConfig& c);
nlohmann::json run_train_ism(const RunConfig& c);
nlohmann::json run_eval(const RunConfig& c);
nlohmann::json run_report(const RunConfig& c);

struct StitchRequest {
  std::filesystem::path moving, fixed;  // raw float32 images, size x size
  std::optional<Backbone> backbone;     // defaults to the first configured backbone
  Blend blend = Blend::average;
  std::filesystem::path out;            // defaults to <out_dir>/stitch
};
nlohmann::json run_stitch(const RunConfig& c, const StitchRequest& request);

/// Fraction of total intensity inside `fov`, summed over images.
double fov_mass_fraction(const std::vector<Image2D>& images, const BinaryMask& fov);

/// Images of `role` belonging to `subjects`, in manifest order; `sources` receives "subject/frame" ids.
std::vector<Image2D> load_role_images(const RunConfig& c, Role role, const std::vector<std::string>& subjects,
                                      std::vector<std::string>* sources = nullptr);

}  // namespace synstitch
