// synstitch: command-line entry point for the stitching pipeline.
//
//   synstitch <command> [--config FILE] [--profile P] [--seed N] [--jobs N] [--out DIR] [--set key.path=VALUE]...
//
// Exit codes: 0 success, 1 validation error (bad config, missing upstream artifact), 2 runtime failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "synstitch/errors.hpp"
#include "synstitch/pipeline.hpp"
#include "synstitch/selftest.hpp"

using namespace synstitch;
using nlohmann::json;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::string> profile;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<std::string> out;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON config file (keys must exist in the profile)");
  cmd->add_option("--profile", f.profile, "desk32, desk64 or paper");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--jobs", f.jobs, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--out", f.out, "run directory (paths.out_dir)");
  cmd->add_option("--set", f.sets, "override one key, e.g. --set ism.epochs=50 (value parsed as JSON)");
}

// "a.b.c=value" -> {"a": {"b": {"c": value}}}; the value is JSON when it parses, else a string.
void apply_set(json& overrides, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw InvalidParameter("--set expects key.path=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &overrides;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

RunConfig resolve(const CommonFlags& f, const json& extra = json::object()) {
  json overrides = json::object();
  for (const auto& s : f.sets) apply_set(overrides, s);
  if (f.profile) overrides["profile"] = *f.profile;
  if (f.seed) overrides["seed"] = *f.seed;
  if (f.jobs) overrides["jobs"] = *f.jobs;
  if (f.out) overrides["paths"]["out_dir"] = *f.out;
  overrides.merge_patch(extra);
  return f.config.empty() ? resolve_config(json::object(), overrides) : load_config_file(f.config, overrides);
}

int selftest() {
  bool all = true;
  for (const auto& r : run_selftest()) {
    std::printf("[%s] %-20s %s (%.1f s)\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str(), r.seconds);
    all &= r.passed;
  }
  return all ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic stitching-pair generation and affine stitching"};
  app.require_subcommand(1);
  CommonFlags flags;

  struct Command {
    const char* name;
    const char* help;
    std::function<json(const RunConfig&)> run;
  };
  const std::vector<Command> commands{
      {"phantom-gen", "generate the phantom dataset", run_phantom_gen},
      {"train-diffusion", "train the unconditional denoiser", run_train_diffusion},
      {"train-controlnet", "train the patch-conditioned ControlNet", run_train_controlnet},
      {"gen-pairs", "generate synthetic stitching pairs", run_gen_pairs},
      {"train-ism", "train the stitching networks", run_train_ism},
      {"eval", "evaluate baselines and trained networks", run_eval},
      {"report", "write the summary report", run_report},
  };
  std::vector<CLI::App*> subs;
  bool warp_only = false;
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    add_common(sub, flags);
    if (std::string(c.name) == "gen-pairs") sub->add_flag("--warp-only", warp_only, "I_s = warp(I, A), no outpainting");
    subs.push_back(sub);
  }

  StitchRequest stitch_req;
  std::string backbone, blend = "average", dest;
  auto* stitch_cmd = app.add_subcommand("stitch", "stitch one image pair with a trained network");
  add_common(stitch_cmd, flags);
  stitch_cmd->add_option("--moving", stitch_req.moving, "moving image (raw float32, size x size)")->required();
  stitch_cmd->add_option("--fixed", stitch_req.fixed, "fixed image (raw float32, size x size)")->required();
  stitch_cmd->add_option("--backbone", backbone, "global or pairenc");
  stitch_cmd->add_option("--blend", blend, "average, feather or max");
  stitch_cmd->add_option("--dest", dest, "output directory (default <out>/stitch)");

  auto* selftest_cmd = app.add_subcommand("selftest", "run the fast property suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (selftest_cmd->parsed()) return selftest();
    if (stitch_cmd->parsed()) {
      if (!backbone.empty()) stitch_req.backbone = backbone_from_string(backbone);
      stitch_req.blend = blend_from_string(blend);
      stitch_req.out = dest;
      std::cout << run_stitch(resolve(flags), stitch_req).dump(2) << "\n";
      return 0;
    }
    for (std::size_t i = 0; i < commands.size(); ++i) {
      if (!subs[i]->parsed()) continue;
      json extra = json::object();
      if (warp_only) extra["pairs"]["warp_only"] = true;
      const auto config = resolve(flags, extra);
      std::cout << commands[i].run(config).dump(2) << "\n";
      return 0;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
