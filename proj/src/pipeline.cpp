#include "synstitch/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "synstitch/checkpoint.hpp"
#include "synstitch/errors.hpp"
#include "synstitch/parallel.hpp"
#include "synstitch/torch_utils.hpp"

#ifndef SYNSTITCH_GIT_REV
#define SYNSTITCH_GIT_REV "unknown"
#endif

namespace synstitch {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Independent RNG streams per pipeline stage, all derived from the run seed.
enum Stream : std::uint64_t {
  subjects_stream = 1,
  manifest_stream,
  diffusion_init,
  diffusion_train,
  diffusion_samples,
  controlnet_train,
  pairs_train,
  pairs_val,
  ism_init,
  ism_train,
};

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifact("cannot read " + path.string());
  return json::parse(is);
}

void require_dir(const fs::path& dir, const std::string& what, const std::string& producer) {
  if (!fs::exists(dir)) throw MissingArtifact(what + " not found at " + dir.string() + "; run `" + producer + "` first");
}

void use_jobs(const RunConfig& c) {
  torch::set_num_threads(c.jobs());
}

DatasetManifest load_manifest(const RunConfig& c) {
  require_dir(c.data_dir() / "manifest.json", "phantom dataset", "synstitch phantom-gen");
  return read_manifest(c.data_dir());
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f%%", 100.0 * v);
  return buf;
}

}  // namespace

fs::path diffusion_dir(const RunConfig& c) { return c.ckpt_dir() / "diffusion"; }
fs::path controlnet_dir(const RunConfig& c) { return c.ckpt_dir() / "controlnet"; }
fs::path ism_dir(const RunConfig& c, Backbone b) { return c.ckpt_dir() / ("ism-" + to_string(b)); }
fs::path pairs_dir(const RunConfig& c, const std::string& split) { return c.out_dir() / "pairs" / split; }
fs::path eval_dir(const RunConfig& c) { return c.out_dir() / "eval"; }
fs::path report_dir(const RunConfig& c) { return c.out_dir() / "report"; }

std::string git_revision() { return SYNSTITCH_GIT_REV; }

void write_provenance(const fs::path& dir, const RunConfig& config, const std::string& command, double wall_seconds,
                      const json& extra) {
  fs::create_directories(dir);
  write_json(dir / "config.json", config.tree);
  char hash[17];
  std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(config_hash(config)));
  json run{{"command", command},
           {"config_hash", hash},
           {"seed", config.seed()},
           {"git_revision", git_revision()},
           {"wall_seconds", wall_seconds}};
  if (!extra.is_null()) run["result"] = extra;
  write_json(dir / "run.json", run);
}

double fov_mass_fraction(const std::vector<Image2D>& images, const BinaryMask& fov) {
  double inside = 0.0, total = 0.0;
  for (const auto& img : images) {
    require_same_shape(img, fov, "fov_mass_fraction");
    for (std::size_t i = 0; i < img.size(); ++i) {
      total += img.pixels()[i];
      if (fov.pixels()[i]) inside += img.pixels()[i];
    }
  }
  if (total <= 0.0) throw UndefinedMetric("images carry no intensity");
  return inside / total;
}

std::vector<Image2D> load_role_images(const RunConfig& c, Role role, const std::vector<std::string>& subjects,
                                      std::vector<std::string>* sources) {
  const auto manifest = load_manifest(c);
  const std::set<std::string> wanted(subjects.begin(), subjects.end());
  std::vector<Image2D> out;
  for (const auto& e : manifest.with_role(role)) {
    if (!wanted.count(e.subject_id)) continue;
    out.push_back(read_f32(c.data_dir() / e.file_path, manifest.size, manifest.size));
    if (sources) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%s/%03d", e.subject_id.c_str(), e.frame_index);
      sources->push_back(buf);
    }
  }
  if (out.empty()) throw MissingArtifact("dataset has no " + to_string(role) + " images for the requested subjects");
  return out;
}

json run_phantom_gen(const RunConfig& c) {
  Timer timer;
  const auto& p = c.tree.at("phantom");
  const int n_subjects = p.at("subjects").get<int>();
  const int n_frames = p.at("frames").get<int>();
  if (n_subjects < 3) throw InvalidParameter("phantom.subjects must be at least 3");
  const auto options = phantom_options(c);

  std::vector<PhantomSubject> subjects(static_cast<std::size_t>(n_subjects));
  parallel_for(subjects.size(), c.jobs(), [&](std::size_t s) {
    char id[16];
    std::snprintf(id, sizeof(id), "s%02zu", s);
    subjects[s] = gen_subject(derive_seed(c.seed(), subjects_stream * 1000 + s), n_frames, options, id);
  });

  std::vector<std::pair<std::string, int>> counts;
  for (const auto& s : subjects) counts.emplace_back(s.subject_id, static_cast<int>(s.frames.size()));
  std::mt19937_64 rng(derive_seed(c.seed(), manifest_stream));
  auto manifest = build_manifest(counts, manifest_options(c), rng);
  manifest.size = options.size;
  manifest.seed = c.seed();
  write_dataset(c.data_dir(), manifest, subjects);

  const json result{{"subjects", n_subjects},
                    {"frames", n_frames},
                    {"size", options.size},
                    {"split", {{"train", manifest.train.size()}, {"val", manifest.val.size()}, {"test", manifest.test.size()}}},
                    {"eval_pair_candidates", manifest.eval_pairs.size()}};
  write_provenance(c.data_dir(), c, "phantom-gen", timer.seconds(), result);
  return result;
}

json run_train_diffusion(const RunConfig& c) {
  Timer timer;
  use_jobs(c);
  const auto manifest = load_manifest(c);
  auto subjects = manifest.train;
  subjects.insert(subjects.end(), manifest.val.begin(), manifest.val.end());
  const auto images = load_role_images(c, Role::sspgm_train, subjects);
  const auto data = to_tensor(images);
  const auto schedule = noise_schedule(c);
  const auto cfg = diffusion_train_config(c);

  torch::manual_seed(derive_seed(c.seed(), diffusion_init));
  UNet net(unet_config(c));
  auto state = make_train_state(net->parameters(), cfg.lr, derive_seed(c.seed(), diffusion_train));
  train_diffusion(net, data, schedule, cfg, state);
  const auto dir = diffusion_dir(c);
  save_diffusion(dir, net, schedule, state);

  // Unconditional samples: how much of their intensity stays inside the training FOV.
  const int n = c.tree.at("diffusion").at("check_samples").get<int>();
  json result{{"images", images.size()}, {"steps", state.step}, {"final_loss", state.losses.empty() ? 0.0 : state.losses.back().second}};
  if (n > 0) {
    std::vector<std::uint64_t> seeds;
    for (int k = 0; k < n; ++k) seeds.push_back(derive_seed(c.seed(), diffusion_samples * 1000 + k));
    std::vector<Image2D> samples;
    torch::NoGradGuard no_grad;
    net->eval();
    for (std::size_t lo = 0; lo < seeds.size(); lo += 16) {
      const auto chunk = std::span(seeds).subspan(lo, std::min<std::size_t>(16, seeds.size() - lo));
      const auto batch = ddpm_sample([&](const auto& x, const auto& t) { return net->forward(x, t); }, schedule,
                                     manifest.size, manifest.size, chunk);
      for (auto& img : images_from_batch(batch)) samples.push_back(std::move(img));
    }
    const BinaryMask fov = read_mask_f32(c.data_dir() / "fov.f32", manifest.size, manifest.size);
    const double mass = fov_mass_fraction(samples, fov);
    fs::create_directories(dir / "samples");
    for (std::size_t k = 0; k < std::min<std::size_t>(samples.size(), 8); ++k) {
      char name[32];
      std::snprintf(name, sizeof(name), "sample_%02zu.png", k);
      write_png(dir / "samples" / name, samples[k]);
    }
    result["check_samples"] = n;
    result["fov_mass"] = mass;
    write_json(dir / "samples.json", {{"count", n}, {"fov_mass", mass}});
  }
  write_provenance(dir, c, "train-diffusion", timer.seconds(), result);
  return result;
}

json run_train_controlnet(const RunConfig& c) {
  Timer timer;
  use_jobs(c);
  require_dir(diffusion_dir(c) / "meta.json", "diffusion checkpoint", "synstitch train-diffusion");
  const auto manifest = load_manifest(c);
  auto subjects = manifest.train;
  subjects.insert(subjects.end(), manifest.val.begin(), manifest.val.end());
  const auto data = to_tensor(load_role_images(c, Role::sspgm_train, subjects));
  auto base = load_diffusion(diffusion_dir(c));
  const auto cfg = controlnet_train_config(c);
  ControlNet cn(base.net, c.tree.at("controlnet").at("mask_channel").get<bool>());
  auto state = make_train_state(cn->parameters(), cfg.lr, derive_seed(c.seed(), controlnet_train));
  train_controlnet(cn, data, base.schedule, cfg, state);
  const auto dir = controlnet_dir(c);
  save_controlnet(dir, cn, base.schedule, state, cfg);
  const json result{{"steps", state.step}, {"final_loss", state.losses.empty() ? 0.0 : state.losses.back().second}};
  write_provenance(dir, c, "train-controlnet", timer.seconds(), result);
  return result;
}

namespace {

// Cycles `images` up to `count` entries.
void cycle_to(std::vector<Image2D>& images, std::vector<std::string>& sources, int count) {
  const std::size_t n = images.size();
  for (std::size_t k = n; k < static_cast<std::size_t>(count); ++k) {
    images.push_back(images[k % n]);
    sources.push_back(sources[k % n]);
  }
  images.resize(static_cast<std::size_t>(count));
  sources.resize(static_cast<std::size_t>(count));
}

json consistency_stats(const std::vector<StitchSample>& samples) {
  std::vector<double> v;
  for (const auto& s : samples) {
    if (count_set(s.condition_mask) > 0) v.push_back(condition_consistency(s.fixed, s.condition, s.condition_mask));
  }
  auto mean_of = [&](std::size_t n) {
    n = std::min(n, v.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += v[i];
    return n ? sum / static_cast<double>(n) : 0.0;
  };
  return {{"mean", mean_of(v.size())}, {"mean_first_32", mean_of(32)}, {"count", v.size()}};
}

}  // namespace

json run_gen_pairs(const RunConfig& c) {
  Timer timer;
  use_jobs(c);
  const auto manifest = load_manifest(c);
  const auto cfg = pair_gen_config(c);
  const auto& p = c.tree.at("pairs");
  const int count = p.at("count").get<int>();
  const int val_count = p.at("val_count").get<int>();
  if (count < 1) throw InvalidParameter("pairs.count must be at least 1");
  if (val_count < 0) throw InvalidParameter("pairs.val_count must be non-negative");

  std::optional<LoadedDiffusion> base;
  std::optional<LoadedControlNet> cn;
  if (!cfg.warp_only) {
    require_dir(controlnet_dir(c) / "meta.json", "ControlNet checkpoint", "synstitch train-controlnet");
    require_dir(diffusion_dir(c) / "meta.json", "diffusion checkpoint", "synstitch train-diffusion");
    base = load_diffusion(diffusion_dir(c));
    cn = load_controlnet(controlnet_dir(c), base->net);
  }
  const std::string mode = cfg.warp_only ? "warp_only" : "outpaint";

  json result{{"mode", mode}};
  auto generate = [&](const std::string& split, const std::vector<std::string>& subjects, int n, std::uint64_t stream) {
    std::vector<std::string> sources;
    auto images = load_role_images(c, Role::curated, subjects, &sources);
    cycle_to(images, sources, n);
    const auto samples = gen_stitch_pairs(cn ? &cn->net : nullptr, cn ? &cn->schedule : nullptr, images, sources, cfg,
                                          derive_seed(c.seed(), stream));
    const json stats = consistency_stats(samples);
    write_pairs(pairs_dir(c, split), samples, {{"mode", mode}, {"split", split}, {"consistency", stats}});
    result[split] = {{"count", samples.size()}, {"consistency", stats}};
  };
  generate("train", manifest.train, count, pairs_train);
  if (val_count > 0) generate("val", manifest.val, val_count, pairs_val);
  write_provenance(c.out_dir() / "pairs", c, "gen-pairs", timer.seconds(), result);
  return result;
}

json run_train_ism(const RunConfig& c) {
  Timer timer;
  use_jobs(c);
  require_dir(pairs_dir(c, "train") / "pairs_manifest.json", "stitching pairs", "synstitch gen-pairs");
  const auto train_set = read_pairs(pairs_dir(c, "train"));
  const auto train = to_pair_tensors(train_set.samples);
  PairTensors val;
  if (fs::exists(pairs_dir(c, "val") / "pairs_manifest.json")) val = to_pair_tensors(read_pairs(pairs_dir(c, "val")).samples);
  const auto cfg = ism_train_config(c);

  json result = json::object();
  const auto backbones = ism_backbones(c);
  for (std::size_t b = 0; b < backbones.size(); ++b) {
    Timer t;
    torch::manual_seed(derive_seed(c.seed(), ism_init * 100 + b));
    RegressorNet net(ism_config(c, backbones[b]));
    auto state = make_ism_state(net, cfg.lr, derive_seed(c.seed(), ism_train * 100 + b));
    train_ism(net, train, val, cfg, state);
    const auto dir = ism_dir(c, backbones[b]);
    save_ism(dir, net, state, cfg, {{"pairs_mode", train_set.meta.value("mode", "")}});
    const json r{{"epochs", state.epoch}, {"best_val", state.best_val}, {"stopped_early", state.stopped},
                 {"train_pairs", train.size()}, {"val_pairs", val.size()}};
    write_provenance(dir, c, "train-ism", t.seconds(), r);
    result["ism-" + to_string(backbones[b])] = r;
  }
  write_json(c.ckpt_dir() / "ism_summary.json", {{"wall_seconds", timer.seconds()}, {"models", result}});
  return result;
}

namespace {

std::vector<Method> eval_methods(const RunConfig& c, std::vector<RegressorNet>& nets) {
  std::vector<Method> methods;
  methods.push_back({"identity", true, [](const Image2D&, const Image2D&) { return AffineTransform::identity(); }});
  const auto icfg = intensity_config(c);
  methods.push_back({"intensity", true, [icfg](const Image2D& m, const Image2D& f) { return intensity_register(m, f, icfg); }});
  const auto fcfg = feature_config(c);
  methods.push_back({"feature", true, [fcfg](const Image2D& m, const Image2D& f) { return feature_register(m, f, fcfg); }});
  nets.reserve(4);
  for (auto b : ism_backbones(c)) {
    const auto dir = ism_dir(c, b);
    if (!fs::exists(dir / "meta.json")) continue;
    nets.push_back(load_ism(dir).net);
    RegressorNet net = nets.back();
    methods.push_back({"ism-" + to_string(b), false,
                       [net](const Image2D& m, const Image2D& f) mutable { return ism_forward(net, m, f).transform; }});
  }
  return methods;
}

std::string summary_header(const RunConfig& c, std::size_t n_pairs) {
  std::ostringstream os;
  os << "# Stitching evaluation (" << c.profile() << ", seed " << c.seed() << ")\n\n"
     << n_pairs << " phantom test pairs; metrics on the "
     << (c.tree.at("eval").at("masked_metrics").get<bool>() ? "FOV overlap" : "full canvas")
     << "; mean ± std. **best**, <u>second best</u>, * significantly better than every baseline (paired t-test, p < 0.05).\n\n";
  return os.str();
}

}  // namespace

json run_eval(const RunConfig& c) {
  Timer timer;
  use_jobs(c);
  const auto manifest = load_manifest(c);
  const auto subjects = read_subjects(c.data_dir(), manifest, manifest.test);
  const auto& e = c.tree.at("eval");
  const auto pairs = make_eval_pairs(subjects, manifest.eval_pairs, e.at("pairs").get<int>(),
                                     e.at("min_identity_rmse").get<double>());
  if (pairs.empty()) throw InvalidParameter("no evaluation pairs satisfy eval.min_identity_rmse");
  std::vector<RegressorNet> nets;
  const auto methods = eval_methods(c, nets);
  const auto out = evaluate_all(methods, pairs, eval_options(c));

  const auto dir = eval_dir(c);
  fs::create_directories(dir);
  write_results_csv(dir / "results.csv", out.records);
  json transforms = json::array();
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    transforms.push_back({{"method", out.records[i].method},
                          {"pair_id", out.records[i].pair_id},
                          {"ok", out.records[i].ok},
                          {"affine", to_json(out.estimates[i])}});
  }
  write_json(dir / "transforms.json", transforms);
  const auto summaries = summarize(out.records, methods);
  {
    std::ofstream os(dir / "summary.md");
    os << summary_header(c, pairs.size()) << summary_markdown(summaries);
  }
  if (e.at("figures").get<bool>()) {
    fs::create_directories(dir / "figs");
    const auto blend = blend_from_string(e.at("blend").get<std::string>());
    for (std::size_t i = 0; i < out.records.size(); ++i) {
      const auto& pair = pairs[i % pairs.size()];
      const auto r = stitch_with(pair.moving, pair.fixed, out.estimates[i], blend);
      write_png(dir / "figs" / ("pair_" + out.records[i].pair_id + "_" + out.records[i].method + ".png"), r.overlay);
    }
  }
  json result{{"pairs", pairs.size()}, {"methods", json::array()}};
  for (const auto& s : summaries) {
    result["methods"].push_back({{"method", s.method},
                                 {"kp_rmse", s.kp_rmse.mean},
                                 {"kp_rmse_significant", s.kp_rmse.significant},
                                 {"failures", s.failures}});
  }
  write_provenance(dir, c, "eval", timer.seconds(), result);
  return result;
}

json run_report(const RunConfig& c) {
  Timer timer;
  require_dir(eval_dir(c) / "results.csv", "evaluation results", "synstitch eval");
  const auto records = read_results_csv(eval_dir(c) / "results.csv");
  std::vector<Method> methods;
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (seen.insert(r.method).second) methods.push_back({r.method, r.method.rfind("ism-", 0) != 0, {}});
  }
  const auto summaries = summarize(records, methods);

  std::ostringstream os;
  std::set<std::string> pair_ids;
  for (const auto& r : records) pair_ids.insert(r.pair_id);
  os << summary_header(c, pair_ids.size()) << summary_markdown(summaries) << "\n## Pipeline\n\n";
  if (fs::exists(diffusion_dir(c) / "samples.json")) {
    const auto s = read_json(diffusion_dir(c) / "samples.json");
    os << "- Diffusion samples: " << s.at("count").get<int>() << " unconditional draws, "
       << percent(s.at("fov_mass").get<double>()) << " of intensity inside the FOV.\n";
  }
  json pairs_info;
  if (fs::exists(pairs_dir(c, "train") / "pairs_manifest.json")) {
    pairs_info = read_json(pairs_dir(c, "train") / "pairs_manifest.json");
    const auto& cs = pairs_info.at("consistency");
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%.4f (first 32: %.4f)", cs.at("mean").get<double>(),
                  cs.at("mean_first_32").get<double>());
    os << "- Stitching pairs: " << pairs_info.at("count").get<int>() << " (" << pairs_info.value("mode", "")
       << "); mean |I_s - C_s| inside the condition mask " << buf << ".\n";
  }
  for (auto b : ism_backbones(c)) {
    const auto dir = ism_dir(c, b);
    if (!fs::exists(dir / "meta.json")) continue;
    const auto meta = read_checkpoint_meta(dir);
    os << "- ism-" << to_string(b) << ": " << meta.at("epoch").get<int>() << " epochs, best validation loss "
       << meta.at("best_val").dump() << (meta.at("stopped").get<bool>() ? " (early stop)" : "") << ".\n";
  }
  const auto dir = report_dir(c);
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "summary.md");
    out << os.str();
  }
  const json result{{"methods", methods.size()}, {"pairs", pair_ids.size()}};
  write_provenance(dir, c, "report", timer.seconds(), result);
  return result;
}

json run_stitch(const RunConfig& c, const StitchRequest& request) {
  Timer timer;
  const int size = c.tree.at("phantom").at("size").get<int>();
  const auto backbone = request.backbone ? *request.backbone : ism_backbones(c).front();
  require_dir(ism_dir(c, backbone) / "meta.json", "ISM checkpoint", "synstitch train-ism");
  auto net = load_ism(ism_dir(c, backbone)).net;
  if (!fs::exists(request.moving)) throw MissingArtifact("moving image " + request.moving.string() + " not found");
  if (!fs::exists(request.fixed)) throw MissingArtifact("fixed image " + request.fixed.string() + " not found");
  const auto moving = read_f32(request.moving, size, size);
  const auto fixed = read_f32(request.fixed, size, size);
  const auto r = stitch(net, moving, fixed, request.blend);
  const auto dir = request.out.empty() ? c.out_dir() / "stitch" : request.out;
  fs::create_directories(dir);
  write_f32(dir / "composite.f32", r.composite);
  write_png(dir / "composite.png", r.composite);
  write_png(dir / "overlay.png", r.overlay);
  write_json(dir / "transform.json", to_json(r.transform));
  const json result{{"backbone", to_string(backbone)}, {"blend", to_string(request.blend)}, {"affine", to_json(r.transform)}};
  write_provenance(dir, c, "stitch", timer.seconds(), result);
  return result;
}

}  // namespace synstitch
