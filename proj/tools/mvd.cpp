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

// Command-line front end: generate, refine, render, eval, demo2d.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mvd/pipeline.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct CommonFlags {
  std::string config_path;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool dump_intermediates = false;
  std::optional<int> workers;
  std::string backend_cmd;
  std::string backend_addr;
};

void add_common(CLI::App* cmd, CommonFlags& f, const std::string& default_preset) {
  f.preset = default_preset;
  cmd->add_option("--config", f.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--preset", f.preset, "built-in configuration when --config is absent (demo2d, sphere)")
      ->capture_default_str();
  cmd->add_option("--seed", f.seed, "override the configured seed");
  cmd->add_option("--out", f.out, "override the output directory");
  cmd->add_flag("--dump-intermediates", f.dump_intermediates, "also write latents, per-step predictions and conditions");
  cmd->add_option("--workers", f.workers, "worker threads (and backend connections)")->check(CLI::PositiveNumber);
  cmd->add_option("--backend-cmd", f.backend_cmd, "denoise with a backend spawned by this shell command");
  cmd->add_option("--backend-addr", f.backend_addr, "denoise with a TCP backend at host:port");
}

mvd::RunConfig resolve(const CommonFlags& f) {
  mvd::RunConfig c = f.config_path.empty() ? mvd::preset_config(f.preset) : mvd::load_config(f.config_path);
  if (f.seed) c.seed = *f.seed;
  if (!f.out.empty()) c.output_dir = f.out;
  if (f.workers) c.workers = *f.workers;
  if (f.dump_intermediates) {
    c.dump.intermediates = true;
    c.dump.latents = true;
  }
  if (!f.backend_cmd.empty() || !f.backend_addr.empty()) {
    c.denoiser.kind = "remote";
    c.denoiser.backend_cmd = f.backend_cmd;
    c.denoiser.backend_addr = f.backend_addr;
  }
  c.refine.workers = c.workers;
  c.validate();
  return c;
}

void report(const mvd::RunArtifacts& a) {
  std::printf("wrote %zu files to %s\n", a.files.size() + 2, a.output_dir.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view consistent sampling engine"};
  app.require_subcommand(1);

  CommonFlags gen_flags, refine_flags, render_flags, eval_flags, demo_flags;
  auto* gen = app.add_subcommand("generate", "sample all rig views and write images, metrics and a manifest");
  add_common(gen, gen_flags, "sphere");

  auto* refine = app.add_subcommand("refine", "refine a mesh against per-view normal targets");
  add_common(refine, refine_flags, "sphere");
  std::string refine_mesh, refine_targets, refine_targets_obj, write_targets;
  refine->add_option("--mesh", refine_mesh, "mesh to refine (default: the scene mesh)")->check(CLI::ExistingFile);
  auto* targets_opt = refine->add_option("--targets", refine_targets, "directory of normal_XX.png targets")
                          ->check(CLI::ExistingDirectory);
  auto* targets_obj_opt =
      refine->add_option("--targets-obj", refine_targets_obj, "render normal targets from this mesh instead")
          ->check(CLI::ExistingFile);
  targets_opt->excludes(targets_obj_opt);
  refine->add_option("--write-targets", write_targets, "also save the targets rendered from --targets-obj here");

  auto* render = app.add_subcommand("render", "bake vertex colors and blend novel views along the camera path");
  add_common(render, render_flags, "sphere");
  std::string render_images, render_mesh;
  render->add_option("--images", render_images, "directory with view_XX.png from generate")
      ->required()
      ->check(CLI::ExistingDirectory);
  render->add_option("--mesh", render_mesh, "mesh to bake onto (default: the scene mesh)")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "cross-view PSNR/SSIM of existing view images");
  add_common(eval, eval_flags, "sphere");
  std::string eval_images;
  eval->add_option("--images", eval_images, "directory with view_XX.png")->required()->check(CLI::ExistingDirectory);

  auto* demo = app.add_subcommand("demo2d", "flat scenario: identical views over a Gaussian mixture");
  add_common(demo, demo_flags, "demo2d");

  auto* cfg = app.add_subcommand("config", "print a preset configuration as JSON");
  std::string cfg_preset = "sphere";
  cfg->add_option("--preset", cfg_preset, "demo2d or sphere")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*cfg) {
      std::cout << mvd::config_to_json(mvd::preset_config(cfg_preset)).dump(2) << '\n';
      return 0;
    }
    if (*gen || *demo) {
      const mvd::RunConfig c = resolve(*gen ? gen_flags : demo_flags);
      const mvd::GenerateOutput out = mvd::run_generate(c);
      std::printf("views %d  pairs %zu  mean PSNR %.3f dB  mean SSIM %.4f\n", static_cast<int>(out.images.size()),
                  out.metrics.pairs.size(), out.metrics.mean_psnr, out.metrics.mean_ssim);
      if (out.artifacts.manifest["summary"].contains("modes")) {
        std::printf("modes %s\n", out.artifacts.manifest["summary"]["modes"].dump().c_str());
      }
      report(out.artifacts);
    } else if (*refine) {
      const mvd::RunConfig c = resolve(refine_flags);
      const mvd::TriMesh scene_mesh = mvd::load_scene_mesh(c);
      const mvd::TriMesh mesh = refine_mesh.empty() ? scene_mesh : mvd::read_obj(refine_mesh);
      const mvd::ViewRig rig = mvd::build_scene_rig(c, scene_mesh);
      std::vector<mvd::NormalTarget> targets;
      if (!refine_targets_obj.empty()) {
        targets = mvd::render_normal_targets(mvd::read_obj(refine_targets_obj), rig.views);
        if (!write_targets.empty()) mvd::write_normal_targets(write_targets, targets);
      } else if (!refine_targets.empty()) {
        targets = mvd::load_normal_targets(refine_targets, rig.size());
      } else {
        throw mvd::ConfigError("cli", "refine needs --targets or --targets-obj");
      }
      const mvd::RefineOutput out = mvd::run_refine(c, mesh, targets);
      std::printf("data loss %.6g -> %.6g after %d iterations (%s)\n", out.result.initial_data_loss,
                  out.result.final_data_loss, out.result.trace.empty() ? 0 : out.result.trace.back().iteration,
                  out.result.stop_reason.c_str());
      report(out.artifacts);
    } else if (*render) {
      const mvd::RunConfig c = resolve(render_flags);
      const mvd::TriMesh mesh = render_mesh.empty() ? mvd::load_scene_mesh(c) : mvd::read_obj(render_mesh);
      const auto images = mvd::load_view_images(render_images, 2 * c.rig.per_track);
      const mvd::RenderOutput out = mvd::run_render(c, mesh, images);
      std::printf("rendered %zu frames\n", out.frames.size());
      report(out.artifacts);
    } else if (*eval) {
      const mvd::RunConfig c = resolve(eval_flags);
      const int views = c.is_flat() ? c.scene.views : 2 * c.rig.per_track;
      const mvd::EvalOutput out = mvd::run_eval(c, mvd::load_view_images(eval_images, views));
      std::printf("pairs %zu (excluded %zu)  mean PSNR %.3f dB  mean SSIM %.4f\n", out.metrics.pairs.size(),
                  out.metrics.empty_pairs.size(), out.metrics.mean_psnr, out.metrics.mean_ssim);
      report(out.artifacts);
    }
  } catch (const mvd::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.kind() == mvd::ErrorKind::config ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return 0;
}
