// Copyright 2026 The mvdiff Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "mvd/pipeline.hpp"

#include <openssl/opensslv.h>
#include <png.h>

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <sstream>

#include "mvd/bridge.hpp"
#include "mvd/io.hpp"

#ifndef MVD_VERSION
#define MVD_VERSION "0.0.0"
#endif

namespace mvd {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kModule = "pipeline";
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Re-raises a module error with the pipeline step prepended, keeping its kind.
template <typename Fn>
auto in_step(const std::string& step, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    std::string what = e.what();
    const std::string prefix = e.module() + ": ";
    if (what.rfind(prefix, 0) == 0) what = what.substr(prefix.size());
    throw Error(e.kind(), e.module(), step + ": " + what);
  }
}

// Output directory under construction. Files land in "<out>.partial" and are
// moved to "<out>" by commit(); an uncommitted bundle removes itself.
class Bundle {
 public:
  explicit Bundle(const fs::path& out) : out_(out), staging_(out.string() + ".partial") {
    check_target();
    std::error_code ec;
    fs::remove_all(staging_, ec);
    fs::create_directories(staging_, ec);
    if (ec) throw RuntimeError(kModule, "cannot create '" + staging_.string() + "': " + ec.message());
  }
  ~Bundle() {
    if (committed_) return;
    std::error_code ec;
    fs::remove_all(staging_, ec);
  }
  Bundle(const Bundle&) = delete;
  Bundle& operator=(const Bundle&) = delete;

  void text(const std::string& rel, const std::string& body) {
    write_text_file(staging_ / rel, body);
    add(rel);
  }
  void png(const std::string& rel, const LatentField& img) {
    fs::create_directories((staging_ / rel).parent_path());
    write_png(staging_ / rel, img);
    add(rel);
  }
  void pfm(const std::string& rel, const LatentField& f) {
    fs::create_directories((staging_ / rel).parent_path());
    for (const fs::path& p : write_field_pfm(staging_ / rel, f)) add(fs::relative(p, staging_).generic_string());
  }
  void obj(const std::string& rel, const TriMesh& mesh) {
    write_obj(staging_ / rel, mesh);
    add(rel);
  }

  /// Writes manifest.json (hashed files) and timings.json (unhashed), then
  /// moves the bundle into place.
  RunArtifacts commit(const std::string& command, const RunConfig& config, json summary, const json& timings) {
    std::sort(files_.begin(), files_.end());
    files_.erase(std::unique(files_.begin(), files_.end()), files_.end());
    json listed = json::array();
    for (const auto& rel : files_) {
      const std::string bytes = read_text_file(staging_ / rel);
      listed.push_back({{"path", rel}, {"bytes", bytes.size()}, {"sha256", sha256_hex(bytes)}});
    }
    json manifest = {
        {"schema_version", 1},
        {"tool", "mvdiff"},
        {"version", MVD_VERSION},
        {"command", command},
        {"libraries",
         {{"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"libpng", PNG_LIBPNG_VER_STRING},
          {"openssl", OPENSSL_VERSION_TEXT}}},
        {"seed", config.seed},
        {"config_sha256", sha256_hex(config_identity_json(config).dump())},
        {"summary", std::move(summary)},
        {"files", std::move(listed)},
        {"unhashed", json::array({"timings.json"})},
    };
    write_text_file(staging_ / "manifest.json", manifest.dump(2) + "\n");
    write_text_file(staging_ / "timings.json", timings.dump(2) + "\n");

    check_target();
    std::error_code ec;
    if (fs::exists(out_)) fs::remove_all(out_, ec);
    if (out_.has_parent_path()) fs::create_directories(out_.parent_path(), ec);
    fs::rename(staging_, out_, ec);
    if (ec) throw RuntimeError(kModule, "cannot move outputs into '" + out_.string() + "': " + ec.message());
    committed_ = true;
    return {out_, files_, std::move(manifest)};
  }

 private:
  // Only empty directories and earlier run outputs are replaced.
  void check_target() const {
    if (!fs::exists(out_)) return;
    if (!fs::is_directory(out_)) throw ConfigError(kModule, "output path '" + out_.string() + "' is not a directory");
    if (fs::is_empty(out_) || fs::exists(out_ / "manifest.json")) return;
    throw ConfigError(kModule, "output directory '" + out_.string() + "' is not empty and holds no previous run");
  }
  void add(const std::string& rel) { files_.push_back(rel); }

  fs::path out_;
  fs::path staging_;
  std::vector<std::string> files_;
  bool committed_ = false;
};

// Denoisers for a run, including any backend connections.
struct DenoiserSet {
  std::vector<std::unique_ptr<ChildProcess>> children;
  std::vector<std::unique_ptr<Denoiser>> owned;
  std::unique_ptr<DenoiserPool> pool;

  ~DenoiserSet() {
    pool.reset();
    owned.clear();  // proxies borrow the children's streams
    children.clear();
  }
};

void add_remote(DenoiserSet& set, const RunConfig& c, const Schedule& schedule) {
  const auto timeout = std::chrono::milliseconds(static_cast<long long>(std::llround(c.denoiser.timeout_s * 1000.0)));
  for (int k = 0; k < c.workers; ++k) {
    if (!c.denoiser.backend_cmd.empty()) {
      set.children.push_back(std::make_unique<ChildProcess>(c.denoiser.backend_cmd));
      set.owned.push_back(std::make_unique<RemoteDenoiser>(set.children.back()->stream(), schedule, timeout));
    } else {
      set.owned.push_back(std::make_unique<RemoteDenoiser>(connect_tcp(c.denoiser.backend_addr), schedule, timeout));
    }
  }
}

void finish_pool(DenoiserSet& set) {
  std::vector<Denoiser*> raw;
  for (auto& d : set.owned) raw.push_back(d.get());
  set.pool = std::make_unique<DenoiserPool>(raw);
}

// PNG view of a field: mesh scenes are images already, flat scenes hold
// signed latents and are shown as 0.5 * x + 0.5.
LatentField displayable(const LatentField& img, bool flat) {
  if (!flat) return img;
  LatentField out = img;
  for (double& v : out.storage()) v = 0.5 * v + 0.5;
  return out;
}

std::string csv_number(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

std::unique_ptr<Codec> codec_for(const RunConfig& c) { return make_codec(c.codec.kind, c.codec.ratio); }

}  // namespace

std::string view_file_name(const char* stem, int index, const char* ext, int digits) {
  std::ostringstream os;
  os << stem << '_' << std::setw(digits) << std::setfill('0') << index << ext;
  return os.str();
}

TriMesh load_scene_mesh(const RunConfig& c) {
  if (c.scene.kind == "sphere") return make_icosphere(c.scene.subdivisions);
  if (c.scene.kind == "obj") {
    try {
      return read_obj(c.scene.obj_path);
    } catch (const RuntimeError& e) {
      throw ConfigError(kModule, std::string("scene.obj_path: ") + e.what());
    }
  }
  throw ConfigError(kModule, "scene kind '" + c.scene.kind + "' has no mesh");
}

SceneParams scene_params(const RunConfig& c) {
  SceneParams p;
  p.per_track = c.rig.per_track;
  p.width = c.rig.width;
  p.height = c.rig.height;
  p.vfov_deg = c.rig.vfov_deg;
  p.upper_fraction = c.rig.upper_fraction;
  p.elevation_deg = c.rig.elevation_deg;
  p.margin = c.rig.margin;
  p.variants = c.scene.variants;
  p.occlusion = c.occlusion;
  return p;
}

ViewRig build_scene_rig(const RunConfig& c, const TriMesh& scene_mesh) {
  return build_rig(frame_rig(scene_mesh, c.rig.per_track, c.rig.vfov_deg, c.rig.width, c.rig.height,
                             c.rig.upper_fraction, c.rig.elevation_deg, c.rig.margin));
}

std::vector<Camera> render_cameras(const RunConfig& c, const TriMesh& scene_mesh) {
  std::vector<Camera> cams;
  if (!c.blend.camera_path.empty()) {
    for (const auto& pose : c.blend.camera_path) {
      cams.push_back(Camera::look_at(pose.eye, pose.target, pose.up, c.rig.vfov_deg, c.rig.width, c.rig.height));
    }
    return cams;
  }
  const RigParams p = frame_rig(scene_mesh, c.rig.per_track, c.rig.vfov_deg, c.rig.width, c.rig.height,
                                c.rig.upper_fraction, c.rig.elevation_deg, c.rig.margin);
  const double el = c.rig.elevation_deg * M_PI / 180.0;
  for (int f = 0; f < c.blend.orbit_frames; ++f) {
    const double a = 2.0 * M_PI * f / c.blend.orbit_frames;
    const Vec3 dir(std::cos(el) * std::sin(a), std::sin(el), std::cos(el) * std::cos(a));
    cams.push_back(Camera::look_at(p.target_fb + p.radius_fb * dir, p.target_fb, Vec3::UnitY(), c.rig.vfov_deg,
                                   c.rig.width, c.rig.height));
  }
  return cams;
}

std::vector<LatentField> load_view_images(const fs::path& dir, int count) {
  std::vector<LatentField> out;
  for (int v = 0; v < count; ++v) {
    const fs::path p = dir / view_file_name("view", v, ".png");
    if (!fs::exists(p)) throw ConfigError(kModule, "missing view image '" + p.string() + "'");
    out.push_back(read_png(p));
  }
  return out;
}

std::vector<NormalTarget> load_normal_targets(const fs::path& dir, int count) {
  std::vector<NormalTarget> out;
  for (int v = 0; v < count; ++v) {
    const fs::path p = dir / view_file_name("normal", v, ".png");
    if (!fs::exists(p)) throw ConfigError(kModule, "missing normal target '" + p.string() + "'");
    const LatentField rgb = read_png(p);
    if (rgb.channels() != 3) throw ConfigError(kModule, "normal target '" + p.string() + "' is not RGB");
    Map2D mask(rgb.height(), rgb.width());
    for (int y = 0; y < rgb.height(); ++y)
      for (int x = 0; x < rgb.width(); ++x)
        mask(y, x) = rgb.at(0, y, x) + rgb.at(1, y, x) + rgb.at(2, y, x) > 0.0 ? 1.0 : 0.0;
    out.push_back(NormalTarget::from_encoded(rgb, mask));
  }
  return out;
}

void write_normal_targets(const fs::path& dir, const std::vector<NormalTarget>& targets) {
  fs::create_directories(dir);
  for (std::size_t v = 0; v < targets.size(); ++v) {
    const NormalTarget& t = targets[v];
    LatentField rgb(t.normal.shape(), Space::image);
    for (int y = 0; y < rgb.height(); ++y)
      for (int x = 0; x < rgb.width(); ++x)
        if (t.mask(y, x) > 0.0)
          for (int c = 0; c < 3; ++c) rgb.at(c, y, x) = t.normal.at(c, y, x) * 0.5 + 0.5;
    write_png(dir / view_file_name("normal", static_cast<int>(v), ".png"), rgb);
  }
}

GenerateOutput run_generate(const RunConfig& config) {
  config.validate();
  const auto t_start = Clock::now();
  json timings;
  Bundle bundle(config.output_dir);

  const Schedule schedule = Schedule::build(config.steps, config.beta);
  const std::unique_ptr<Codec> codec = codec_for(config);
  const bool flat = config.is_flat();

  // Scene, geometry and denoisers.
  SceneSetup scene;
  std::unique_ptr<IdentityGeometry> flat_geo;
  std::optional<GaussianMixtureModel> modes;
  DenoiserSet denoisers;
  Shape latent_shape;
  in_step("setup", [&] {
    if (flat) {
      const Shape image{config.scene.channels, config.scene.height, config.scene.width};
      latent_shape = codec->latent_shape(image);
      flat_geo = std::make_unique<IdentityGeometry>(config.scene.views, image.width, image.height);
      if (config.denoiser.kind == "gmm") {
        modes = cosine_modes(latent_shape, config.denoiser.modes, config.denoiser.amplitude);
        denoisers.owned.push_back(std::make_unique<GmmDenoiser>(*modes, schedule));
      }
    } else {
      scene = make_scene(load_scene_mesh(config), scene_params(config));
      latent_shape = codec->latent_shape({3, config.rig.height, config.rig.width});
      if (config.denoiser.kind == "mesh_oracle") {
        denoisers.owned.push_back(std::make_unique<MeshOracleDenoiser>(scene.renders, std::vector<double>{}, *codec, schedule));
      } else if (config.denoiser.kind == "oracle") {
        std::vector<LatentField> targets;
        for (const auto& img : scene.renders[static_cast<std::size_t>(config.denoiser.target_variant)]) {
          targets.push_back(codec->encode(img));
        }
        denoisers.owned.push_back(std::make_unique<OracleDenoiser>(std::move(targets), schedule));
      }
    }
    if (config.is_remote()) add_remote(denoisers, config, schedule);
    finish_pool(denoisers);
  });
  const ViewGeometry& geo = flat ? static_cast<const ViewGeometry&>(*flat_geo) : *scene.geometry;
  timings["setup_s"] = seconds_since(t_start);

  // Sampling.
  const auto t_sample = Clock::now();
  SampleInputs in;
  in.schedule = &schedule;
  in.geometry = &geo;
  in.rig = flat ? nullptr : &scene.rig;
  in.codec = codec.get();
  in.denoisers = denoisers.pool.get();
  in.conditions = scene.conditions;
  in.policy = config.sampling;
  if (config.optimizer.enabled) in.optimizer = config.optimizer.config;
  in.latent_shape = latent_shape;
  in.seed = config.seed;
  in.workers = config.workers;
  if (config.dump.intermediates) {
    in.observer = [&](const StepRecord& r) {
      if (r.t % config.dump.intermediate_stride != 0 && r.t != 1) return;
      std::ostringstream dir_name;
      dir_name << "intermediates/t" << std::setw(3) << std::setfill('0') << r.t;
      const std::string dir = dir_name.str();
      for (std::size_t v = 0; v < r.predicted.size(); ++v) {
        bundle.pfm(dir + "/" + view_file_name("x0", static_cast<int>(v), ".pfm"), r.predicted[v]);
        if (r.guided && v < r.blended.size() && !r.blended[v].empty()) {
          bundle.pfm(dir + "/" + view_file_name("blended", static_cast<int>(v), ".pfm"), r.blended[v]);
        }
      }
    };
  }
  SampleOutput sampled = sample_views(in);
  timings["sampling_s"] = seconds_since(t_sample);

  const auto t_metrics = Clock::now();
  MetricsReport metrics = in_step("metrics", [&] { return cross_view_consistency(sampled.images, geo, config.workers); });
  timings["metrics_s"] = seconds_since(t_metrics);

  // Outputs, written serially.
  const auto t_write = Clock::now();
  for (std::size_t v = 0; v < sampled.images.size(); ++v) {
    const LatentField& img = sampled.images[v];
    if (img.channels() == 1 || img.channels() == 3) {
      bundle.png(view_file_name("view", static_cast<int>(v), ".png"), displayable(img, flat));
    }
    if (config.dump.latents) bundle.pfm("latents/" + view_file_name("view", static_cast<int>(v), ".pfm"), sampled.latents[v]);
  }
  if (config.dump.intermediates && !flat) {
    for (std::size_t v = 0; v < scene.conditions.size(); ++v) {
      for (const char* name : {"depth", "normal"}) {
        const LatentField& m = scene.conditions[v].at(name);
        bundle.png("conditions/" + view_file_name(name, static_cast<int>(v), ".png"), m);
        bundle.pfm("conditions/" + view_file_name(name, static_cast<int>(v), ".pfm"), m);
      }
    }
  }
  std::ostringstream metrics_csv;
  write_metrics_csv(metrics_csv, metrics);
  bundle.text("metrics.csv", metrics_csv.str());
  std::ostringstream trace_csv;
  write_loss_trace_csv(trace_csv, sampled.loss_trace);
  bundle.text("loss_trace.csv", trace_csv.str());
  bundle.text("config.json", config_identity_json(config).dump(2) + "\n");

  json summary = {{"views", geo.num_views()},
                  {"mean_psnr", metrics.mean_psnr},
                  {"mean_ssim", metrics.mean_ssim},
                  {"pairs", metrics.pairs.size()},
                  {"empty_pairs", metrics.empty_pairs.size()}};
  if (modes) {
    std::ostringstream os;
    os << "view,mode,max_abs_distance\n";
    json assigned = json::array();
    for (std::size_t v = 0; v < sampled.latents.size(); ++v) {
      double d = 0.0;
      const int k = nearest_component(sampled.latents[v], *modes, &d);
      os << v << ',' << k << ',' << csv_number(d) << '\n';
      assigned.push_back(k);
    }
    bundle.text("modes.csv", os.str());
    summary["modes"] = assigned;
  }
  timings["write_s"] = seconds_since(t_write);
  timings["total_s"] = seconds_since(t_start);

  GenerateOutput out;
  out.artifacts = bundle.commit("generate", config, std::move(summary), timings);
  out.latents = std::move(sampled.latents);
  out.images = std::move(sampled.images);
  out.metrics = std::move(metrics);
  out.loss_trace = std::move(sampled.loss_trace);
  return out;
}

RefineOutput run_refine(const RunConfig& config, const TriMesh& mesh, const std::vector<NormalTarget>& targets) {
  config.validate();
  if (config.is_flat()) throw ConfigError(kModule, "refine needs a mesh scene");
  const auto t0 = Clock::now();
  Bundle bundle(config.output_dir);
  const ViewRig rig = in_step("setup", [&] { return build_scene_rig(config, load_scene_mesh(config)); });
  if (static_cast<int>(targets.size()) != rig.size()) {
    throw ConfigError(kModule, "refine needs " + std::to_string(rig.size()) + " normal targets, got " +
                                   std::to_string(targets.size()));
  }
  RefineConfig rc = config.refine;
  rc.workers = config.workers;
  RefineOutput out;
  out.result = in_step("refine", [&] { return refine_mesh(mesh, rig.views, targets, rc); });

  bundle.obj("refined.obj", out.result.mesh);
  std::ostringstream os;
  os << "iteration,data_loss,total_loss,step,halvings,max_displacement\n";
  for (const auto& r : out.result.trace) {
    os << r.iteration << ',' << csv_number(r.data_loss) << ',' << csv_number(r.total_loss) << ','
       << csv_number(r.step) << ',' << r.halvings << ',' << csv_number(r.max_displacement) << '\n';
  }
  bundle.text("refine_trace.csv", os.str());
  bundle.text("config.json", config_identity_json(config).dump(2) + "\n");
  json summary = {{"initial_data_loss", out.result.initial_data_loss},
                  {"final_data_loss", out.result.final_data_loss},
                  {"iterations", out.result.trace.empty() ? 0 : out.result.trace.back().iteration},
                  {"stop_reason", out.result.stop_reason}};
  out.artifacts = bundle.commit("refine", config, std::move(summary), json{{"total_s", seconds_since(t0)}});
  return out;
}

RenderOutput run_render(const RunConfig& config, const TriMesh& mesh, const std::vector<LatentField>& images) {
  config.validate();
  if (config.is_flat()) throw ConfigError(kModule, "render needs a mesh scene");
  const auto t0 = Clock::now();
  Bundle bundle(config.output_dir);
  const TriMesh scene_mesh = in_step("setup", [&] { return load_scene_mesh(config); });
  const ViewRig rig = build_scene_rig(config, scene_mesh);
  if (static_cast<int>(images.size()) != rig.size()) {
    throw ConfigError(kModule, "render needs " + std::to_string(rig.size()) + " view images, got " +
                                   std::to_string(images.size()));
  }
  for (const auto& img : images) {
    if (img.channels() != 3 || img.width() != config.rig.width || img.height() != config.rig.height) {
      throw ConfigError(kModule, "view images must be 3x" + std::to_string(config.rig.height) + "x" +
                                     std::to_string(config.rig.width) + ", got " + to_string(img.shape()));
    }
  }

  RenderOutput out;
  out.baked = in_step("bake", [&] { return bake_vertex_colors(mesh, rig, images, {config.occlusion.w_s, config.occlusion.w_c}); });
  const std::vector<Camera> cams = render_cameras(config, scene_mesh);
  const HeuristicWeightProvider provider({config.blend.tau_fraction});
  out.frames.resize(cams.size());
  in_step("blend", [&] {
    parallel_for(static_cast<int>(cams.size()), config.workers, [&](int f) {
      const Camera& cam = cams[static_cast<std::size_t>(f)];
      const LatentField base = render_vertex_colors(out.baked, cam);
      out.frames[static_cast<std::size_t>(f)] =
          blend_novel_view(mesh, cam, rig, images, base, provider, config.occlusion).image;
    });
  });

  for (std::size_t f = 0; f < out.frames.size(); ++f) {
    bundle.png(view_file_name("frame", static_cast<int>(f), ".png", 3), out.frames[f]);
  }
  bundle.obj("baked.obj", out.baked);
  bundle.text("config.json", config_identity_json(config).dump(2) + "\n");
  out.artifacts =
      bundle.commit("render", config, json{{"frames", out.frames.size()}}, json{{"total_s", seconds_since(t0)}});
  return out;
}

EvalOutput run_eval(const RunConfig& config, const std::vector<LatentField>& images) {
  config.validate();
  const auto t0 = Clock::now();
  Bundle bundle(config.output_dir);
  EvalOutput out;
  if (config.is_flat()) {
    const IdentityGeometry geo(config.scene.views, config.scene.width, config.scene.height);
    out.metrics = in_step("metrics", [&] { return cross_view_consistency(images, geo, config.workers); });
  } else {
    const TriMesh scene_mesh = in_step("setup", [&] { return load_scene_mesh(config); });
    const MeshGeometry geo(scene_mesh, build_scene_rig(config, scene_mesh), config.occlusion);
    out.metrics = in_step("metrics", [&] { return cross_view_consistency(images, geo, config.workers); });
  }
  std::ostringstream os;
  write_metrics_csv(os, out.metrics);
  bundle.text("metrics.csv", os.str());
  bundle.text("config.json", config_identity_json(config).dump(2) + "\n");
  json summary = {{"mean_psnr", out.metrics.mean_psnr},
                  {"mean_ssim", out.metrics.mean_ssim},
                  {"pairs", out.metrics.pairs.size()},
                  {"empty_pairs", out.metrics.empty_pairs.size()}};
  out.artifacts = bundle.commit("eval", config, std::move(summary), json{{"total_s", seconds_since(t0)}});
  return out;
}

}  // namespace mvd
