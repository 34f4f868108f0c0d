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

#include "mvd/config.hpp"

#include <cmath>
#include <limits>
#include <set>

#include "mvd/io.hpp"

namespace mvd {
namespace {

using nlohmann::json;
constexpr const char* kModule = "config";

[[noreturn]] void fail(const std::string& what) { throw ConfigError(kModule, what); }

// Walks one JSON object, remembering which keys were consumed so leftovers
// can be reported.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("'" + label() + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    const json* v = take(key);
    if (!v) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v->is_boolean()) throw std::invalid_argument("boolean");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v->is_string()) throw std::invalid_argument("string");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v->is_number_integer()) throw std::invalid_argument("integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (!v->is_number_unsigned()) throw std::invalid_argument("non-negative integer");
        } else {
          const bool fits = !v->is_number_unsigned() || v->get<std::uint64_t>() <= static_cast<std::uint64_t>(std::numeric_limits<T>::max());
          if (!fits || v->get<std::int64_t>() < std::numeric_limits<T>::min() ||
              v->get<std::int64_t>() > std::numeric_limits<T>::max()) {
            throw std::invalid_argument("integer in range");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v->is_number()) throw std::invalid_argument("number");
      }
      out = v->get<T>();
    } catch (const std::invalid_argument& e) {
      fail("'" + field(key) + "' must be a " + e.what());
    } catch (const json::exception&) {
      fail("'" + field(key) + "' has the wrong type");
    }
  }

  void read_vec3(const char* key, Vec3& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_array() || v->size() != 3) fail("'" + field(key) + "' must be an array of 3 numbers");
    for (int i = 0; i < 3; ++i) {
      if (!(*v)[i].is_number()) fail("'" + field(key) + "' must be an array of 3 numbers");
      out[i] = (*v)[i].get<double>();
    }
  }

  /// Sub-object, or nullptr when absent.
  const json* object(const char* key) { return take(key); }
  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) fail("unknown key '" + field(it.key().c_str()) + "'");
    }
  }

 private:
  std::string label() const { return path_.empty() ? "<root>" : path_; }
  const json* take(const char* key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

template <typename Fn>
void with_section(Section& parent, const char* key, Fn&& fn) {
  if (const json* sub = parent.object(key)) {
    Section s(*sub, parent.field(key));
    fn(s);
    s.finish();
  }
}

json vec3_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

const char* beta_name(BetaKind k) { return k == BetaKind::cosine ? "cosine" : "linear"; }
const char* method_name(GradientMethod m) {
  return m == GradientMethod::finite_difference ? "finite_difference" : "analytic";
}

void require(bool ok, const std::string& what) {
  if (!ok) fail(what);
}

// Re-raises a module's own validation error under the config section name.
template <typename Fn>
void check_module(const std::string& section, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    fail(section + ": " + e.what());
  }
}

}  // namespace

RunConfig config_from_json(const json& j) {
  RunConfig c;
  Section root(j, "");
  int version = -1;
  root.read("schema_version", version);
  if (version != kConfigSchemaVersion) {
    fail("schema_version must be " + std::to_string(kConfigSchemaVersion) +
         (version == -1 ? " (missing)" : ", got " + std::to_string(version)));
  }

  with_section(root, "scene", [&](Section& s) {
    s.read("kind", c.scene.kind);
    s.read("obj_path", c.scene.obj_path);
    s.read("subdivisions", c.scene.subdivisions);
    s.read("variants", c.scene.variants);
    s.read("views", c.scene.views);
    s.read("channels", c.scene.channels);
    s.read("width", c.scene.width);
    s.read("height", c.scene.height);
  });
  with_section(root, "schedule", [&](Section& s) {
    s.read("steps", c.steps);
    std::string kind = beta_name(c.beta.kind);
    s.read("beta_kind", kind);
    if (kind == "linear") {
      c.beta.kind = BetaKind::linear;
    } else if (kind == "cosine") {
      c.beta.kind = BetaKind::cosine;
    } else {
      fail("'schedule.beta_kind' must be linear or cosine, got '" + kind + "'");
    }
    s.read("beta_start", c.beta.beta_start);
    s.read("beta_end", c.beta.beta_end);
  });
  with_section(root, "rig", [&](Section& s) {
    s.read("per_track", c.rig.per_track);
    s.read("vfov_deg", c.rig.vfov_deg);
    s.read("width", c.rig.width);
    s.read("height", c.rig.height);
    s.read("upper_fraction", c.rig.upper_fraction);
    s.read("elevation_deg", c.rig.elevation_deg);
    s.read("margin", c.rig.margin);
  });
  with_section(root, "denoiser", [&](Section& s) {
    s.read("kind", c.denoiser.kind);
    s.read("modes", c.denoiser.modes);
    s.read("amplitude", c.denoiser.amplitude);
    s.read("target_variant", c.denoiser.target_variant);
    s.read("backend_cmd", c.denoiser.backend_cmd);
    s.read("backend_addr", c.denoiser.backend_addr);
    s.read("timeout_s", c.denoiser.timeout_s);
  });
  with_section(root, "codec", [&](Section& s) {
    s.read("kind", c.codec.kind);
    s.read("ratio", c.codec.ratio);
  });
  with_section(root, "sampling", [&](Section& s) {
    SamplingPolicy& p = c.sampling;
    s.read("guidance", p.guidance);
    s.read("cg_start_fraction", p.cg_start_fraction);
    s.read("original_steps", p.original_steps);
    s.read("guided_steps", p.guided_steps);
    s.read("closeup_replacement", p.closeup_replacement);
    s.read("replace_before_noise", p.replace_before_noise);
    s.read("reference_attention", p.reference_attention);
    s.read("reference_view", p.reference_view);
  });
  with_section(root, "optimizer", [&](Section& s) {
    OptimizerConfig& o = c.optimizer.config;
    s.read("enabled", c.optimizer.enabled);
    s.read("step", o.step);
    s.read("iterations", o.iterations);
    std::string method = method_name(o.method);
    s.read("method", method);
    if (method == "analytic") {
      o.method = GradientMethod::analytic;
    } else if (method == "finite_difference") {
      o.method = GradientMethod::finite_difference;
    } else {
      fail("'optimizer.method' must be analytic or finite_difference, got '" + method + "'");
    }
    s.read("fd_epsilon", o.fd_epsilon);
    s.read("max_halvings", o.max_halvings);
    s.read("period", o.period);
    s.read("side_lock_fraction", o.side_lock_fraction);
    s.read("lock_front_back_at_start", o.lock_front_back_at_start);
  });
  with_section(root, "occlusion", [&](Section& s) {
    s.read("w_s", c.occlusion.w_s);
    s.read("w_c", c.occlusion.w_c);
    s.read("abs_tol_factor", c.occlusion.abs_tol_factor);
    s.read("rel_tol", c.occlusion.rel_tol);
  });
  with_section(root, "refine", [&](Section& s) {
    s.read("iterations", c.refine.iterations);
    s.read("step", c.refine.step);
    s.read("laplacian_weight", c.refine.laplacian_weight);
    s.read("max_move", c.refine.max_move);
    s.read("max_halvings", c.refine.max_halvings);
  });
  with_section(root, "blend", [&](Section& s) {
    s.read("tau_fraction", c.blend.tau_fraction);
    s.read("orbit_frames", c.blend.orbit_frames);
    if (const json* path = s.object("camera_path")) {
      if (!path->is_array()) fail("'blend.camera_path' must be an array");
      for (std::size_t i = 0; i < path->size(); ++i) {
        Section p((*path)[i], "blend.camera_path[" + std::to_string(i) + "]");
        CameraPose pose;
        p.read_vec3("eye", pose.eye);
        p.read_vec3("target", pose.target);
        p.read_vec3("up", pose.up);
        p.finish();
        c.blend.camera_path.push_back(pose);
      }
    }
  });
  root.read("seed", c.seed);
  root.read("output_dir", c.output_dir);
  root.read("workers", c.workers);
  with_section(root, "dump", [&](Section& s) {
    s.read("latents", c.dump.latents);
    s.read("intermediates", c.dump.intermediates);
    s.read("intermediate_stride", c.dump.intermediate_stride);
  });
  root.finish();
  c.refine.workers = c.workers;
  return c;
}

json config_identity_json(const RunConfig& c) {
  const SamplingPolicy& p = c.sampling;
  const OptimizerConfig& o = c.optimizer.config;
  json path = json::array();
  for (const auto& pose : c.blend.camera_path) {
    path.push_back({{"eye", vec3_json(pose.eye)}, {"target", vec3_json(pose.target)}, {"up", vec3_json(pose.up)}});
  }
  return {
      {"schema_version", kConfigSchemaVersion},
      {"scene",
       {{"kind", c.scene.kind},
        {"obj_path", c.scene.obj_path},
        {"subdivisions", c.scene.subdivisions},
        {"variants", c.scene.variants},
        {"views", c.scene.views},
        {"channels", c.scene.channels},
        {"width", c.scene.width},
        {"height", c.scene.height}}},
      {"schedule",
       {{"steps", c.steps},
        {"beta_kind", beta_name(c.beta.kind)},
        {"beta_start", c.beta.beta_start},
        {"beta_end", c.beta.beta_end}}},
      {"rig",
       {{"per_track", c.rig.per_track},
        {"vfov_deg", c.rig.vfov_deg},
        {"width", c.rig.width},
        {"height", c.rig.height},
        {"upper_fraction", c.rig.upper_fraction},
        {"elevation_deg", c.rig.elevation_deg},
        {"margin", c.rig.margin}}},
      {"denoiser",
       {{"kind", c.denoiser.kind},
        {"modes", c.denoiser.modes},
        {"amplitude", c.denoiser.amplitude},
        {"target_variant", c.denoiser.target_variant},
        {"backend_cmd", c.denoiser.backend_cmd},
        {"backend_addr", c.denoiser.backend_addr},
        {"timeout_s", c.denoiser.timeout_s}}},
      {"codec", {{"kind", c.codec.kind}, {"ratio", c.codec.ratio}}},
      {"sampling",
       {{"guidance", p.guidance},
        {"cg_start_fraction", p.cg_start_fraction},
        {"original_steps", p.original_steps},
        {"guided_steps", p.guided_steps},
        {"closeup_replacement", p.closeup_replacement},
        {"replace_before_noise", p.replace_before_noise},
        {"reference_attention", p.reference_attention},
        {"reference_view", p.reference_view}}},
      {"optimizer",
       {{"enabled", c.optimizer.enabled},
        {"step", o.step},
        {"iterations", o.iterations},
        {"method", method_name(o.method)},
        {"fd_epsilon", o.fd_epsilon},
        {"max_halvings", o.max_halvings},
        {"period", o.period},
        {"side_lock_fraction", o.side_lock_fraction},
        {"lock_front_back_at_start", o.lock_front_back_at_start}}},
      {"occlusion",
       {{"w_s", c.occlusion.w_s},
        {"w_c", c.occlusion.w_c},
        {"abs_tol_factor", c.occlusion.abs_tol_factor},
        {"rel_tol", c.occlusion.rel_tol}}},
      {"refine",
       {{"iterations", c.refine.iterations},
        {"step", c.refine.step},
        {"laplacian_weight", c.refine.laplacian_weight},
        {"max_move", c.refine.max_move},
        {"max_halvings", c.refine.max_halvings}}},
      {"blend", {{"tau_fraction", c.blend.tau_fraction}, {"orbit_frames", c.blend.orbit_frames}, {"camera_path", path}}},
      {"seed", c.seed},
      {"dump",
       {{"latents", c.dump.latents},
        {"intermediates", c.dump.intermediates},
        {"intermediate_stride", c.dump.intermediate_stride}}},
  };
}

json config_to_json(const RunConfig& c) {
  json j = config_identity_json(c);
  j["output_dir"] = c.output_dir;
  j["workers"] = c.workers;
  return j;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const RuntimeError& e) {
    fail(e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail("'" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void RunConfig::validate() const {
  const std::set<std::string> scenes{"sphere", "obj", "flat"};
  require(scenes.count(scene.kind) > 0, "'scene.kind' must be sphere, obj or flat, got '" + scene.kind + "'");
  const std::set<std::string> denoisers{"mesh_oracle", "gmm", "oracle", "remote"};
  require(denoisers.count(denoiser.kind) > 0,
          "'denoiser.kind' must be mesh_oracle, gmm, oracle or remote, got '" + denoiser.kind + "'");

  check_module("schedule", [&] { Schedule::build(steps, beta); });
  check_module("sampling", [&] { sampling.validate(); });
  check_module("optimizer", [&] { optimizer.config.validate(); });
  check_module("refine", [&] { refine.validate(); });
  require(workers >= 1, "'workers' must be >= 1");
  require(!output_dir.empty(), "'output_dir' must not be empty");

  require(codec.kind == "identity" || codec.kind == "pooling",
          "'codec.kind' must be identity or pooling, got '" + codec.kind + "'");
  require(codec.ratio >= 1, "'codec.ratio' must be >= 1");
  require(codec.kind != "identity" || codec.ratio == 1, "'codec.ratio' must be 1 for the identity codec");

  require(occlusion.w_s >= 0.0 && occlusion.w_c >= 0.0 && occlusion.w_s + occlusion.w_c > 0.0,
          "'occlusion.w_s' and 'occlusion.w_c' must be non-negative and not both zero");
  require(occlusion.abs_tol_factor >= 0.0 && occlusion.rel_tol >= 0.0, "occlusion tolerances must be non-negative");

  int width = rig.width;
  int height = rig.height;
  int views = 2 * rig.per_track;
  if (is_flat()) {
    require(scene.views >= 1, "'scene.views' must be >= 1");
    require(scene.channels >= 1, "'scene.channels' must be >= 1");
    width = scene.width;
    height = scene.height;
    views = scene.views;
    require(denoiser.kind == "gmm" || denoiser.kind == "remote",
            "flat scenes need the gmm or remote denoiser, got '" + denoiser.kind + "'");
    require(!optimizer.enabled, "'optimizer.enabled' needs a mesh scene with a view rig");
  } else {
    require(rig.per_track >= 3, "'rig.per_track' must be >= 3, got " + std::to_string(rig.per_track));
    require(rig.vfov_deg > 0.0 && rig.vfov_deg < 180.0, "'rig.vfov_deg' must lie in (0, 180)");
    require(rig.upper_fraction > 0.0 && rig.upper_fraction <= 1.0, "'rig.upper_fraction' must lie in (0, 1]");
    require(rig.margin > 0.0, "'rig.margin' must be positive");
    require(std::abs(rig.elevation_deg) < 90.0, "'rig.elevation_deg' must lie in (-90, 90)");
    require(scene.variants >= 1, "'scene.variants' must be >= 1");
    require(denoiser.kind != "gmm", "the gmm denoiser needs a flat scene");
    if (scene.kind == "sphere") require(scene.subdivisions >= 0 && scene.subdivisions <= 6, "'scene.subdivisions' must lie in [0, 6]");
    if (scene.kind == "obj") require(!scene.obj_path.empty(), "'scene.obj_path' is required for obj scenes");
    if (denoiser.kind == "oracle") {
      require(denoiser.target_variant >= 0 && denoiser.target_variant < scene.variants,
              "'denoiser.target_variant' must index one of the scene's variants");
    }
    if (scene.kind == "sphere" || scene.kind == "obj") {
      require(scene.variants <= 64, "'scene.variants' must be <= 64");
    }
  }
  require(width >= 3 && height >= 3, "image size must be at least 3x3");
  require(width % codec.ratio == 0 && height % codec.ratio == 0,
          "image size " + std::to_string(width) + "x" + std::to_string(height) + " is not divisible by codec.ratio " +
              std::to_string(codec.ratio));
  require(sampling.reference_view < views, "'sampling.reference_view' must index a view");

  if (denoiser.kind == "gmm") {
    require(denoiser.modes >= 1, "'denoiser.modes' must be >= 1");
    require(std::isfinite(denoiser.amplitude), "'denoiser.amplitude' must be finite");
  }
  if (is_remote()) {
    require(denoiser.backend_cmd.empty() != denoiser.backend_addr.empty(),
            "the remote denoiser needs exactly one of 'denoiser.backend_cmd' and 'denoiser.backend_addr'");
    require(denoiser.timeout_s > 0.0, "'denoiser.timeout_s' must be positive");
  }

  require(blend.tau_fraction > 0.0, "'blend.tau_fraction' must be positive");
  require(blend.orbit_frames >= 1, "'blend.orbit_frames' must be >= 1");
  for (const auto& pose : blend.camera_path) {
    require((pose.eye - pose.target).norm() > 0.0, "camera path poses need eye != target");
    require(pose.up.cross(pose.target - pose.eye).norm() > 0.0, "camera path 'up' must not be parallel to the view direction");
  }
  require(dump.intermediate_stride >= 1, "'dump.intermediate_stride' must be >= 1");
}

RunConfig preset_config(const std::string& name) {
  RunConfig c;
  if (name == "demo2d") {
    c.scene.kind = "flat";
    c.scene.views = 4;
    c.scene.channels = 3;
    c.scene.width = 64;
    c.scene.height = 64;
    c.denoiser.kind = "gmm";
    c.denoiser.modes = 3;
    c.denoiser.amplitude = 0.5;
    c.output_dir = "out/demo2d";
    return c;
  }
  if (name == "sphere") {
    c.scene.kind = "sphere";
    c.scene.subdivisions = 3;
    c.scene.variants = 3;
    c.rig.per_track = 8;
    c.rig.width = 128;
    c.rig.height = 128;
    c.denoiser.kind = "mesh_oracle";
    c.optimizer.enabled = true;
    c.output_dir = "out/sphere";
    return c;
  }
  fail("unknown preset '" + name + "' (expected demo2d or sphere)");
}

}  // namespace mvd
