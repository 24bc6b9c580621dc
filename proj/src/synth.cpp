#include "avatar/synth.hpp"

#include <cmath>

#include "avatar/renderer.hpp"
#include "avatar/rng.hpp"

namespace avatar {

namespace {

double smooth_band(double x, double lo, double hi, double soft) {
  // 1 inside [lo, hi], smoothstep falloff of width `soft` outside
  auto rise = [&](double t) {
    t = clamp01(t);
    return t * t * (3.0 - 2.0 * t);
  };
  return rise((x - lo) / soft + 1.0) * rise((hi - x) / soft + 1.0);
}

}  // namespace

void AnalyticShell::query(const Vec3& x, Vec3* rgb, double* density) const {
  const double r = std::sqrt(x[0] * x[0] + x[2] * x[2]);
  const double radial =
      smooth_band(r, spec.r_inner, spec.r_inner + spec.thickness, spec.edge_softness);
  const double axial = smooth_band(x[1], spec.y_min, spec.y_max, spec.edge_softness);
  const double occupancy = radial * axial;
  *density = spec.density * occupancy;
  *rgb = occupancy > 0 ? spec.color : Vec3::Zero();
}

nlohmann::json SceneSpec::to_json() const {
  nlohmann::json j;
  j["n_frames"] = n_frames;
  j["width"] = width;
  j["height"] = height;
  j["seed"] = seed;
  j["beta_true"] = std::vector<double>(beta_true.data(), beta_true.data() + beta_true.size());
  j["psi_amplitude"] =
      std::vector<double>(psi_amplitude.data(), psi_amplitude.data() + psi_amplitude.size());
  j["camera_scale"] = camera_scale;
  j["camera_jitter"] = camera_jitter;
  j["turntable_turns"] = turntable_turns;
  j["arm_swing"] = arm_swing;
  j["spine_sway"] = spine_sway;
  j["n_bins"] = n_bins;
  j["preset"] = preset;
  j["shell"] = {{"y_min", shell.y_min},     {"y_max", shell.y_max},
                {"r_inner", shell.r_inner}, {"thickness", shell.thickness},
                {"density", shell.density}, {"edge_softness", shell.edge_softness},
                {"color", {shell.color[0], shell.color[1], shell.color[2]}}};
  return j;
}

SceneSpec SceneSpec::from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.n_frames = j.value("n_frames", s.n_frames);
  s.width = j.value("width", s.width);
  s.height = j.value("height", s.height);
  s.seed = j.value("seed", s.seed);
  if (j.contains("beta_true")) {
    const auto v = j.at("beta_true").get<std::vector<double>>();
    s.beta_true = Eigen::Map<const VecX>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  if (j.contains("psi_amplitude")) {
    const auto v = j.at("psi_amplitude").get<std::vector<double>>();
    s.psi_amplitude = Eigen::Map<const VecX>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  s.camera_scale = j.value("camera_scale", s.camera_scale);
  s.camera_jitter = j.value("camera_jitter", s.camera_jitter);
  s.turntable_turns = j.value("turntable_turns", s.turntable_turns);
  s.arm_swing = j.value("arm_swing", s.arm_swing);
  s.spine_sway = j.value("spine_sway", s.spine_sway);
  s.n_bins = j.value("n_bins", s.n_bins);
  s.preset = j.value("preset", s.preset);
  if (j.contains("shell")) {
    const auto& sh = j.at("shell");
    s.shell.y_min = sh.value("y_min", s.shell.y_min);
    s.shell.y_max = sh.value("y_max", s.shell.y_max);
    s.shell.r_inner = sh.value("r_inner", s.shell.r_inner);
    s.shell.thickness = sh.value("thickness", s.shell.thickness);
    s.shell.density = sh.value("density", s.shell.density);
    s.shell.edge_softness = sh.value("edge_softness", s.shell.edge_softness);
    if (sh.contains("color")) {
      const auto c = sh.at("color").get<std::vector<double>>();
      s.shell.color = Vec3(c[0], c[1], c[2]);
    }
  }
  return s;
}

MatX3 toy_true_albedo(const ParametricModel& model) {
  MatX3 albedo(model.n_vertices(), 3);
  for (int v = 0; v < model.n_vertices(); ++v) {
    const Vec3 p = model.template_vertices.row(v).transpose();
    const double shade = 0.12 * std::sin(2.3 * p[1]) + 0.08 * std::cos(3.1 * p[0]);
    albedo.row(v) = Vec3(clamp01(0.78 + shade), clamp01(0.58 + 0.5 * shade), clamp01(0.47 + 0.3 * shade))
                        .transpose();
  }
  return albedo;
}

FrameParams scene_frame_params(const SceneSpec& spec, const ParametricModel& model, int frame) {
  FrameParams fp;
  fp.theta = VecX::Zero(model.pose_dim());
  fp.psi = VecX::Zero(model.expr_dim());
  const double phase = spec.n_frames > 0 ? static_cast<double>(frame) / spec.n_frames : 0.0;

  // Turntable about +y plus small articulations around the canonical pose.
  fp.theta[1] = 2.0 * M_PI * spec.turntable_turns * phase;
  fp.theta.segment<3>(3) = Vec3(0, 0, spec.spine_sway * std::sin(2.0 * M_PI * phase));
  fp.theta.segment<3>(6) =
      Vec3(0, 0, model.canonical_pose[8] + spec.arm_swing * std::sin(4.0 * M_PI * phase));
  fp.theta.segment<3>(9) =
      Vec3(0, 0, model.canonical_pose[11] - spec.arm_swing * std::sin(4.0 * M_PI * phase));
  for (Eigen::Index i = 0; i < fp.psi.size() && i < spec.psi_amplitude.size(); ++i)
    fp.psi[i] = spec.psi_amplitude[i] * std::sin(2.0 * M_PI * phase + 0.7);

  Rng cam_rng(Rng::mix(spec.seed, 0xCA3E7A + static_cast<uint64_t>(frame)));
  fp.camera.scale = spec.camera_scale;
  fp.camera.translation = Vec2(spec.camera_jitter * cam_rng.uniform(-1, 1),
                               spec.camera_jitter * cam_rng.uniform(-1, 1));
  fp.camera.width = spec.width;
  fp.camera.height = spec.height;
  return fp;
}

Dataset generate(const ParametricModel& model, const SceneSpec& spec) {
  Dataset ds;
  ds.spec = spec.to_json();

  const CanonicalContext canon = build_canonical_context(model);
  const AnalyticShell shell(spec.shell);
  const RayBounds bounds = spec.preset == "head" ? head_bounds() : body_bounds();

  AvatarParams avatar;
  avatar.beta = spec.beta_true;
  avatar.offsets = MatX3::Zero(model.n_vertices(), 3);
  avatar.albedo = toy_true_albedo(model);

  RenderOptions opts;
  opts.n_bins = spec.n_bins;
  opts.jitter = false;

  for (int f = 0; f < spec.n_frames; ++f) {
    FrameData frame;
    frame.params = scene_frame_params(spec, model, f);

    const PosedMesh mesh = pose_mesh(model, avatar, frame.params, canon);
    Bvh bvh;
    bvh.build(mesh.vertices, model.faces);
    const NeighborIndex index(mesh.vertices);
    PosedScene scene;
    scene.model = &model;
    scene.mesh = &mesh;
    scene.bvh = &bvh;
    scene.neighbors = &index;
    scene.albedo = &avatar.albedo;
    scene.residual = nullptr;

    const FrameRender fr =
        render_frame(scene, shell, frame.params.camera, bounds, opts, true);
    frame.rgb = fr.rgb;

    // Masks: exterior from exterior-only opacity; interior where the mesh is
    // visible and not occluded by the exterior; S covers the whole avatar.
    const int w = spec.width, h = spec.height;
    frame.masks.S = Image(w, h, 1);
    frame.masks.S_b = Image(w, h, 1);
    frame.masks.S_e = Image(w, h, 1);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const Ray ray = pixel_ray(frame.params.camera, x, y, bounds);
        const bool mesh_hit = fr.silhouette.at(x, y, 0) > 0.5;
        const double s_v = fr.s_v.at(x, y, 0);  // exterior opacity up to the mesh
        const bool exterior = s_v > 0.5;
        bool body_visible = false;
        if (mesh_hit) {
          // opacity accumulated before the hit comes straight from s_v,
          // since the march already truncates at the mesh
          body_visible = s_v < 0.5;
        }
        (void)ray;
        frame.masks.S_e.at(x, y, 0) = exterior ? 1.0 : 0.0;
        frame.masks.S_b.at(x, y, 0) = (body_visible && !exterior) ? 1.0 : 0.0;
        frame.masks.S.at(x, y, 0) = (exterior || mesh_hit) ? 1.0 : 0.0;
      }
    }
    frame.masks.validate();
    ds.frames.push_back(std::move(frame));
  }
  return ds;
}

namespace {

// Pixels within `band` (Chebyshev) of a 0/1 edge in the mask.
std::vector<uint8_t> boundary_band(const Image& mask, int band) {
  const int w = mask.width, h = mask.height;
  std::vector<uint8_t> edge(static_cast<size_t>(w) * h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool v = mask.at(x, y, 0) > 0.5;
      const bool ex = (x + 1 < w && (mask.at(x + 1, y, 0) > 0.5) != v) ||
                      (y + 1 < h && (mask.at(x, y + 1, 0) > 0.5) != v);
      if (ex) edge[static_cast<size_t>(y) * w + x] = 1;
    }
  std::vector<uint8_t> out(static_cast<size_t>(w) * h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool near = false;
      for (int dy = -band; dy <= band && !near; ++dy)
        for (int dx = -band; dx <= band && !near; ++dx) {
          const int xx = x + dx, yy = y + dy;
          if (xx >= 0 && xx < w && yy >= 0 && yy < h && edge[static_cast<size_t>(yy) * w + xx])
            near = true;
        }
      if (near) out[static_cast<size_t>(y) * w + x] = 1;
    }
  return out;
}

void corrupt_one(Image* mask, double rate, Rng* rng, int band) {
  const std::vector<uint8_t> in_band = boundary_band(*mask, band);
  for (int y = 0; y < mask->height; ++y)
    for (int x = 0; x < mask->width; ++x) {
      if (!in_band[static_cast<size_t>(y) * mask->width + x]) continue;
      if (rng->uniform() < rate) mask->at(x, y, 0) = mask->at(x, y, 0) > 0.5 ? 0.0 : 1.0;
    }
}

}  // namespace

Dataset corrupt_masks(const Dataset& ds, CorruptMode mode, double rate, uint64_t seed, int band) {
  Dataset out = ds;
  for (size_t f = 0; f < out.frames.size(); ++f) {
    Rng rng(Rng::mix(seed, 0xC0F5 + f));
    if (mode == CorruptMode::kExterior || mode == CorruptMode::kBoth)
      corrupt_one(&out.frames[f].masks.S_e, rate, &rng, band);
    if (mode == CorruptMode::kInterior || mode == CorruptMode::kBoth)
      corrupt_one(&out.frames[f].masks.S_b, rate, &rng, band);
    // Corrupted masks may violate the consistency invariants on purpose
    // (that is the failure mode under study); resolve overlaps toward S_e
    // and keep S covering the union.
    MaskSet& m = out.frames[f].masks;
    for (size_t i = 0; i < m.S.data.size(); ++i) {
      if (m.S_b.data[i] > 0.5 && m.S_e.data[i] > 0.5) m.S_b.data[i] = 0.0;
      if (m.S_b.data[i] > 0.5 || m.S_e.data[i] > 0.5) m.S.data[i] = 1.0;
    }
  }
  return out;
}

void perturb_poses(Dataset* ds, double sigma, uint64_t seed, const std::vector<int>& frame_ids) {
  for (int f : frame_ids) {
    Rng rng(Rng::mix(seed, 0x9057 + static_cast<uint64_t>(f)));
    VecX& theta = ds->frames[static_cast<size_t>(f)].params.theta;
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] += sigma * rng.normal();
  }
}

}  // namespace avatar
