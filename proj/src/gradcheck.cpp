#include "avatar/gradcheck.hpp"

#include <memory>

#include <cmath>

#include "avatar/renderer.hpp"
#include "avatar/rng.hpp"

namespace avatar {

namespace {

enum Group : int {
  kGBeta = 0,
  kGTheta,
  kGPsi,
  kGCamera,
  kGOffsets,
  kGAlbedo,
  kGField,
  kGResidual,
  kGNumGroups
};

const char* kGroupNames[kGNumGroups] = {"beta",    "theta",  "psi",   "camera",
                                        "offsets", "albedo", "field", "residual"};

// All optimizable parameters in one flat vector with named slices.
struct ParamVector {
  std::array<int64_t, kGNumGroups + 1> offset{};
  VecX values;

  static ParamVector pack(const ParametricModel& model, const AvatarParams& avatar,
                          const FrameParams& frame) {
    ParamVector p;
    const int64_t sizes[kGNumGroups] = {
        model.shape_dim(),
        model.pose_dim(),
        model.expr_dim(),
        3,
        3LL * model.n_vertices(),
        3LL * model.n_vertices(),
        avatar.field.param_count(),
        avatar.residual_field.param_count()};
    p.offset[0] = 0;
    for (int g = 0; g < kGNumGroups; ++g) p.offset[g + 1] = p.offset[g] + sizes[g];
    p.values.resize(p.offset[kGNumGroups]);

    int64_t o = p.offset[kGBeta];
    for (Eigen::Index i = 0; i < avatar.beta.size(); ++i) p.values[o++] = avatar.beta[i];
    o = p.offset[kGTheta];
    for (Eigen::Index i = 0; i < frame.theta.size(); ++i) p.values[o++] = frame.theta[i];
    o = p.offset[kGPsi];
    for (Eigen::Index i = 0; i < frame.psi.size(); ++i) p.values[o++] = frame.psi[i];
    o = p.offset[kGCamera];
    p.values[o++] = frame.camera.scale;
    p.values[o++] = frame.camera.translation[0];
    p.values[o++] = frame.camera.translation[1];
    o = p.offset[kGOffsets];
    for (int v = 0; v < model.n_vertices(); ++v)
      for (int a = 0; a < 3; ++a) p.values[o++] = avatar.offsets(v, a);
    o = p.offset[kGAlbedo];
    for (int v = 0; v < model.n_vertices(); ++v)
      for (int a = 0; a < 3; ++a) p.values[o++] = avatar.albedo(v, a);
    VecX f;
    avatar.field.to_flat(&f);
    p.values.segment(p.offset[kGField], f.size()) = f;
    VecX r;
    avatar.residual_field.to_flat(&r);
    p.values.segment(p.offset[kGResidual], r.size()) = r;
    return p;
  }

  void unpack(const ParametricModel& model, AvatarParams* avatar, FrameParams* frame) const {
    int64_t o = offset[kGBeta];
    for (Eigen::Index i = 0; i < avatar->beta.size(); ++i) avatar->beta[i] = values[o++];
    o = offset[kGTheta];
    for (Eigen::Index i = 0; i < frame->theta.size(); ++i) frame->theta[i] = values[o++];
    o = offset[kGPsi];
    for (Eigen::Index i = 0; i < frame->psi.size(); ++i) frame->psi[i] = values[o++];
    o = offset[kGCamera];
    frame->camera.scale = values[o++];
    frame->camera.translation[0] = values[o++];
    frame->camera.translation[1] = values[o++];
    o = offset[kGOffsets];
    for (int v = 0; v < model.n_vertices(); ++v)
      for (int a = 0; a < 3; ++a) avatar->offsets(v, a) = values[o++];
    o = offset[kGAlbedo];
    for (int v = 0; v < model.n_vertices(); ++v)
      for (int a = 0; a < 3; ++a) avatar->albedo(v, a) = values[o++];
    avatar->field.from_flat(values.segment(offset[kGField], offset[kGField + 1] - offset[kGField]));
    avatar->residual_field.from_flat(
        values.segment(offset[kGResidual], offset[kGResidual + 1] - offset[kGResidual]));
  }

  int64_t size(int g) const { return offset[g + 1] - offset[g]; }
};

constexpr int kNumObjectives = 7;
const char* kObjectiveNames[kNumObjectives] = {"render", "recon",  "ext",   "skin",
                                               "skin_inside", "edge", "offset"};

// Fixed targets/masks/upstream weights of one configuration.
struct CheckSetup {
  std::vector<std::pair<int, int>> pixels;
  std::vector<Vec3> target;
  std::vector<double> m_s, m_b, m_e;
  Vec3 u_rgb;
  double u_sv = 0;
  Vec3 u_mesh;
  LossWeights weights;
  SkinningConfig skin;
  RayBounds bounds;
  int n_bins = 32;
  int skin_region = kRegionHands;
};

struct Objectives {
  double value[kNumObjectives] = {0};
};

struct SceneBundle {
  PosedMesh mesh;
  Bvh bvh;
  std::unique_ptr<NeighborIndex> index;
  PosedScene scene;
};

void build_scene(const ParametricModel& model, const CanonicalContext& canon,
                 const AvatarParams& avatar, const FrameParams& frame, const CheckSetup& setup,
                 bool residual_active, SceneBundle* b) {
  b->mesh = pose_mesh(model, avatar, frame, canon);
  b->bvh.build(b->mesh.vertices, model.faces);
  b->index = std::make_unique<NeighborIndex>(b->mesh.vertices);
  b->scene.model = &model;
  b->scene.mesh = &b->mesh;
  b->scene.bvh = &b->bvh;
  b->scene.neighbors = b->index.get();
  b->scene.albedo = &avatar.albedo;
  b->scene.skin = setup.skin;
  b->scene.residual = residual_active ? &avatar.residual_field : nullptr;
}

// Forward pass of all objectives at the given parameters.
Objectives eval_objectives(const ParametricModel& model, const CanonicalContext& canon,
                           const AvatarParams& avatar, const FrameParams& frame,
                           const CheckSetup& setup, std::vector<RayCache>* caches,
                           std::vector<RayOutputs>* outs_out) {
  SceneBundle b;
  build_scene(model, canon, avatar, frame, setup, true, &b);

  const int n = static_cast<int>(setup.pixels.size());
  std::vector<RayJob> jobs(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    jobs[static_cast<size_t>(i)].px = setup.pixels[static_cast<size_t>(i)].first;
    jobs[static_cast<size_t>(i)].py = setup.pixels[static_cast<size_t>(i)].second;
    jobs[static_cast<size_t>(i)].ray = pixel_ray(frame.camera, jobs[static_cast<size_t>(i)].px,
                                                 jobs[static_cast<size_t>(i)].py, setup.bounds);
  }
  RenderOptions opts;
  opts.n_bins = setup.n_bins;
  opts.jitter = false;
  std::vector<RayOutputs> outs;
  render_ray_batch(b.scene, avatar.field, jobs, opts, &outs, caches, false);
  if (outs_out) *outs_out = outs;

  std::vector<Vec3> rgb(static_cast<size_t>(n)), mesh_rgb(static_cast<size_t>(n));
  std::vector<double> s_v(static_cast<size_t>(n)), sil(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    rgb[static_cast<size_t>(i)] = outs[static_cast<size_t>(i)].rgb;
    mesh_rgb[static_cast<size_t>(i)] = outs[static_cast<size_t>(i)].mesh_rgb;
    s_v[static_cast<size_t>(i)] = outs[static_cast<size_t>(i)].s_v;
    sil[static_cast<size_t>(i)] = outs[static_cast<size_t>(i)].silhouette;
  }

  Objectives obj;
  for (int i = 0; i < n; ++i) {
    obj.value[0] += setup.u_rgb.dot(rgb[static_cast<size_t>(i)]) +
                    setup.u_sv * s_v[static_cast<size_t>(i)] +
                    setup.u_mesh.dot(mesh_rgb[static_cast<size_t>(i)]);
  }
  obj.value[1] = recon_pixel_loss(rgb, setup.target, setup.weights, nullptr);
  obj.value[2] = exterior_loss(s_v, setup.m_e, setup.weights, nullptr);
  const Vec3 c_skin = region_mean_albedo(model, avatar.albedo, setup.skin_region, nullptr);
  const InteriorBreakdown ib =
      interior_losses(sil, mesh_rgb, setup.target, setup.m_s, setup.m_b, setup.m_e, c_skin,
                      setup.weights, nullptr, nullptr);
  obj.value[3] = ib.skin;
  obj.value[4] = ib.skin_inside;
  const MatX3 shaped_without = shaped_template(model, avatar.beta, frame.theta, frame.psi,
                                               MatX3::Zero(model.n_vertices(), 3));
  const RegularizationResult reg =
      regularization(b.mesh.shaped, shaped_without, model.edges(), avatar.offsets,
                     model.region_labels, setup.weights, nullptr, nullptr, nullptr);
  obj.value[5] = reg.edge;
  obj.value[6] = reg.offset;
  return obj;
}

// Analytic gradients of every objective, one flat vector per objective.
std::vector<VecX> analytic_gradients(const ParametricModel& model, const CanonicalContext& canon,
                                     const AvatarParams& avatar, const FrameParams& frame,
                                     const CheckSetup& setup, const ParamVector& shape) {
  SceneBundle b;
  build_scene(model, canon, avatar, frame, setup, true, &b);
  const int n = static_cast<int>(setup.pixels.size());
  std::vector<RayJob> jobs(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    jobs[static_cast<size_t>(i)].px = setup.pixels[static_cast<size_t>(i)].first;
    jobs[static_cast<size_t>(i)].py = setup.pixels[static_cast<size_t>(i)].second;
    jobs[static_cast<size_t>(i)].ray = pixel_ray(frame.camera, jobs[static_cast<size_t>(i)].px,
                                                 jobs[static_cast<size_t>(i)].py, setup.bounds);
  }
  RenderOptions opts;
  opts.n_bins = setup.n_bins;
  opts.jitter = false;
  std::vector<RayOutputs> outs;
  std::vector<RayCache> caches;
  render_ray_batch(b.scene, avatar.field, jobs, opts, &outs, &caches, false);

  std::vector<Vec3> rgb(static_cast<size_t>(n)), mesh_rgb(static_cast<size_t>(n));
  std::vector<double> s_v(static_cast<size_t>(n)), sil(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    rgb[static_cast<size_t>(i)] = outs[static_cast<size_t>(i)].rgb;
    mesh_rgb[static_cast<size_t>(i)] = outs[static_cast<size_t>(i)].mesh_rgb;
    s_v[static_cast<size_t>(i)] = outs[static_cast<size_t>(i)].s_v;
    sil[static_cast<size_t>(i)] = outs[static_cast<size_t>(i)].silhouette;
  }

  const int nv = model.n_vertices();
  std::vector<VecX> grads;
  for (int o = 0; o < kNumObjectives; ++o) grads.push_back(VecX::Zero(shape.values.size()));

  struct Upstreams {
    std::vector<Vec3> d_rgb, d_mesh;
    std::vector<double> d_sv;
    Vec3 d_c_skin = Vec3::Zero();
    MatX3 d_shaped_with, d_shaped_without, d_offsets_direct;
  };
  auto make_up = [&](int obj) {
    Upstreams up;
    up.d_rgb.assign(static_cast<size_t>(n), Vec3::Zero());
    up.d_mesh.assign(static_cast<size_t>(n), Vec3::Zero());
    up.d_sv.assign(static_cast<size_t>(n), 0.0);
    up.d_shaped_with = MatX3::Zero(nv, 3);
    up.d_shaped_without = MatX3::Zero(nv, 3);
    up.d_offsets_direct = MatX3::Zero(nv, 3);
    switch (obj) {
      case 0:
        for (int i = 0; i < n; ++i) {
          up.d_rgb[static_cast<size_t>(i)] = setup.u_rgb;
          up.d_sv[static_cast<size_t>(i)] = setup.u_sv;
          up.d_mesh[static_cast<size_t>(i)] = setup.u_mesh;
        }
        break;
      case 1:
        recon_pixel_loss(rgb, setup.target, setup.weights, &up.d_rgb);
        break;
      case 2:
        exterior_loss(s_v, setup.m_e, setup.weights, &up.d_sv);
        break;
      case 3:
      case 4: {
        // isolate one term by zeroing the other's weight
        LossWeights w = setup.weights;
        if (obj == 3) w.skin_inside = 0;
        if (obj == 4) w.skin = 0;
        const Vec3 c_skin = region_mean_albedo(model, avatar.albedo, setup.skin_region, nullptr);
        interior_losses(sil, mesh_rgb, setup.target, setup.m_s, setup.m_b, setup.m_e, c_skin, w,
                        &up.d_mesh, &up.d_c_skin);
        break;
      }
      case 5:
      case 6: {
        LossWeights w = setup.weights;
        if (obj == 5) w.offset = 0;
        if (obj == 6) w.edge = 0;
        const MatX3 shaped_without = shaped_template(model, avatar.beta, frame.theta, frame.psi,
                                                     MatX3::Zero(nv, 3));
        regularization(b.mesh.shaped, shaped_without, model.edges(), avatar.offsets,
                       model.region_labels, w, &up.d_shaped_with, &up.d_shaped_without,
                       &up.d_offsets_direct);
        break;
      }
    }
    return up;
  };

  for (int o = 0; o < kNumObjectives; ++o) {
    const Upstreams up = make_up(o);
    VecX& g = grads[static_cast<size_t>(o)];

    MatX3 d_vertices = MatX3::Zero(nv, 3);
    std::vector<Mat34> d_canonical(static_cast<size_t>(nv), Mat34::Zero());
    MatX3 d_albedo = MatX3::Zero(nv, 3);
    double d_scale = 0;
    Vec2 d_trans = Vec2::Zero();

    bool renderer_touched = false;
    for (int i = 0; i < n; ++i) {
      if (up.d_rgb[static_cast<size_t>(i)].squaredNorm() == 0 &&
          up.d_sv[static_cast<size_t>(i)] == 0 &&
          up.d_mesh[static_cast<size_t>(i)].squaredNorm() == 0)
        continue;
      renderer_touched = true;
      RayUpstream u;
      u.d_rgb = up.d_rgb[static_cast<size_t>(i)];
      u.d_s_v = up.d_sv[static_cast<size_t>(i)];
      u.d_mesh_rgb = up.d_mesh[static_cast<size_t>(i)];
      RayGrads rg;
      render_ray_backward(b.scene, avatar.field, caches[static_cast<size_t>(i)], u, &rg);
      for (const auto& [vid, gv] : rg.d_vertex) d_vertices.row(vid) += gv.transpose();
      for (const auto& [vid, gm] : rg.d_canonical) d_canonical[static_cast<size_t>(vid)] += gm;
      for (const auto& [vid, ga] : rg.d_albedo) d_albedo.row(vid) += ga.transpose();
      for (const auto& gc : rg.d_grid) {
        int64_t off = shape.offset[kGField];
        for (int l = 0; l < gc.level; ++l)
          off += static_cast<int64_t>(avatar.field.levels[static_cast<size_t>(l)].raw.size());
        for (int ch = 0; ch < 4; ++ch) g[off + gc.index + ch] += gc.g[ch];
      }
      if (rg.d_residual.size())
        g.segment(shape.offset[kGResidual], rg.d_residual.size()) += rg.d_residual;
      pixel_ray_backward(frame.camera, jobs[static_cast<size_t>(i)].px,
                         jobs[static_cast<size_t>(i)].py, rg.d_origin, &d_scale, &d_trans);
    }

    if (up.d_c_skin.squaredNorm() != 0) {
      MatX3 d_alb2 = MatX3::Zero(nv, 3);
      region_mean_albedo_backward(model, avatar.albedo, setup.skin_region, up.d_c_skin, &d_alb2);
      d_albedo += d_alb2;
    }

    VecX d_beta = VecX::Zero(model.shape_dim());
    VecX d_theta = VecX::Zero(model.pose_dim());
    VecX d_psi = VecX::Zero(model.expr_dim());
    MatX3 d_offsets = up.d_offsets_direct;
    if (renderer_touched) {
      const PoseGrads pg = pose_mesh_backward(model, avatar, frame, canon, d_vertices, d_canonical);
      d_beta += pg.d_beta;
      d_theta += pg.d_theta;
      d_psi += pg.d_psi;
      d_offsets += pg.d_offsets;
    }
    if (up.d_shaped_with.squaredNorm() != 0 || up.d_shaped_without.squaredNorm() != 0) {
      const ShapedGrads sw = shaped_template_backward(model, frame.theta, up.d_shaped_with);
      const ShapedGrads sn = shaped_template_backward(model, frame.theta, up.d_shaped_without);
      d_beta += sw.d_beta + sn.d_beta;
      d_theta += sw.d_theta + sn.d_theta;
      d_psi += sw.d_psi + sn.d_psi;
      d_offsets += sw.d_offsets;
    }

    g.segment(shape.offset[kGBeta], d_beta.size()) += d_beta;
    g.segment(shape.offset[kGTheta], d_theta.size()) += d_theta;
    g.segment(shape.offset[kGPsi], d_psi.size()) += d_psi;
    g[shape.offset[kGCamera] + 0] += d_scale;
    g[shape.offset[kGCamera] + 1] += d_trans[0];
    g[shape.offset[kGCamera] + 2] += d_trans[1];
    for (int v = 0; v < nv; ++v)
      for (int a = 0; a < 3; ++a) {
        g[shape.offset[kGOffsets] + 3 * v + a] += d_offsets(v, a);
        g[shape.offset[kGAlbedo] + 3 * v + a] += d_albedo(v, a);
      }
  }
  return grads;
}

// A pixel is usable when its 3x3 neighborhood shares the hit state, the hit
// (if any) is away from triangle edges, and the neighbor sets of all marched
// samples have a distance margin (no discrete switches within the FD step).
bool pixel_is_stable(const ParametricModel& model, const SceneBundle& b, const FrameParams& frame,
                     const CheckSetup& setup, int px, int py) {
  const Ray center = pixel_ray(frame.camera, px, py, setup.bounds);
  const std::optional<Hit> hit = b.bvh.intersect(b.mesh.vertices, model.faces, center);
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      const Ray r = pixel_ray(frame.camera, px + dx, py + dy, setup.bounds);
      const std::optional<Hit> h = b.bvh.intersect(b.mesh.vertices, model.faces, r);
      if (h.has_value() != hit.has_value()) return false;
    }
  if (hit) {
    const double wb = 1.0 - hit->u - hit->v;
    if (hit->u < 0.03 || hit->v < 0.03 || wb < 0.03) return false;
  }
  // neighbor-set margin along the march
  const double t_end = hit ? hit->t : center.t_far;
  const double dt = (t_end - center.t_near) / setup.n_bins;
  for (int j = 0; j < setup.n_bins; ++j) {
    const Vec3 x = center.origin + (center.t_near + (j + 0.5) * dt) * center.dir;
    const std::vector<int> nn =
        nearest_neighbors(x, b.mesh.vertices, std::min(setup.skin.k + 1, model.n_vertices()));
    if (static_cast<int>(nn.size()) > setup.skin.k) {
      const double dk =
          (Vec3(b.mesh.vertices.row(nn[static_cast<size_t>(setup.skin.k - 1)]).transpose()) - x)
              .norm();
      const double dk1 =
          (Vec3(b.mesh.vertices.row(nn[static_cast<size_t>(setup.skin.k)]).transpose()) - x)
              .norm();
      if (dk1 - dk < 2e-3) return false;
    }
  }
  return true;
}

double rel_error(double analytic, double fd) {
  const double scale = std::max({std::abs(analytic), std::abs(fd), 1e-6});
  return std::abs(analytic - fd) / scale;
}

}  // namespace

std::vector<GradCheckReport> run_gradcheck(const ParametricModel& model,
                                           const AvatarParams* base,
                                           const GradCheckOptions& opts) {
  const CanonicalContext canon = build_canonical_context(model);
  const int nv = model.n_vertices();

  std::vector<GradCheckReport> reports;
  for (int o = 0; o < kNumObjectives; ++o)
    for (int g = 0; g < kGNumGroups; ++g) {
      GradCheckReport r;
      r.objective = kObjectiveNames[o];
      r.group = kGroupNames[g];
      reports.push_back(r);
    }
  auto report_at = [&](int o, int g) -> GradCheckReport& {
    return reports[static_cast<size_t>(o) * kGNumGroups + static_cast<size_t>(g)];
  };

  for (int config = 0; config < opts.configurations; ++config) {
    Rng rng(Rng::mix(opts.seed, 0xC0FF + static_cast<uint64_t>(config)));

    AvatarParams avatar;
    if (base) {
      avatar = *base;
    } else {
      avatar.beta = VecX::Zero(model.shape_dim());
      for (Eigen::Index i = 0; i < avatar.beta.size(); ++i) avatar.beta[i] = 0.3 * rng.normal();
      avatar.offsets = MatX3::Zero(nv, 3);
      for (int v = 0; v < nv; ++v)
        for (int a = 0; a < 3; ++a) avatar.offsets(v, a) = 0.002 * rng.normal();
      avatar.albedo = MatX3::Zero(nv, 3);
      for (int v = 0; v < nv; ++v)
        for (int a = 0; a < 3; ++a) avatar.albedo(v, a) = rng.uniform(0.1, 0.9);
      avatar.field = CanonicalField::create(opts.grid_levels, opts.box_min, opts.box_max, 0.0);
      // smooth low-frequency raw values: slope jumps between cells stay small
      const Vec3 k1(rng.uniform(1, 3), rng.uniform(1, 3), rng.uniform(1, 3));
      const Vec3 phase(rng.uniform(0, 6), rng.uniform(0, 6), rng.uniform(0, 6));
      for (auto& lev : avatar.field.levels) {
        for (int z = 0; z < lev.res; ++z)
          for (int y = 0; y < lev.res; ++y)
            for (int x = 0; x < lev.res; ++x) {
              const Vec3 p(static_cast<double>(x) / (lev.res - 1),
                           static_cast<double>(y) / (lev.res - 1),
                           static_cast<double>(z) / (lev.res - 1));
              const size_t idx =
                  ((static_cast<size_t>(z) * lev.res + y) * lev.res + x) * 4;
              lev.raw[idx + 0] = 0.4 * std::sin(k1[0] * p[0] * 6.28 + phase[0]);
              lev.raw[idx + 1] = 0.4 * std::sin(k1[1] * p[1] * 6.28 + phase[1]);
              lev.raw[idx + 2] = 0.4 * std::cos(k1[2] * p[2] * 6.28 + phase[2]);
              lev.raw[idx + 3] =
                  -1.0 + 1.5 * std::sin((p[0] + p[1] + p[2]) * 3.14 + phase[0]);
            }
      }
      avatar.residual_field = DeformationField::create(64, Rng::mix(opts.seed, config), 0.05);
      // non-zero last layer so residual gradients are exercised
      for (Eigen::Index i = 0; i < avatar.residual_field.w3.size(); ++i)
        avatar.residual_field.w3.data()[i] = 0.05 * rng.normal();
    }

    FrameParams frame;
    frame.theta = model.canonical_pose;
    for (Eigen::Index i = 0; i < frame.theta.size(); ++i) frame.theta[i] += 0.1 * rng.normal();
    frame.psi = VecX::Zero(model.expr_dim());
    for (Eigen::Index i = 0; i < frame.psi.size(); ++i) frame.psi[i] = 0.3 * rng.normal();
    frame.camera.scale = rng.uniform(1.1, 1.4);
    frame.camera.translation = Vec2(0.05 * rng.normal(), 0.05 * rng.normal());
    frame.camera.width = 48;
    frame.camera.height = 48;

    CheckSetup setup;
    setup.bounds = body_bounds();
    setup.n_bins = opts.n_bins;
    setup.skin = SkinningConfig{0.1, 6};
    setup.weights = LossWeights::body_preset();
    setup.u_rgb = Vec3(rng.normal(), rng.normal(), rng.normal());
    setup.u_sv = rng.normal();
    setup.u_mesh = Vec3(rng.normal(), rng.normal(), rng.normal());

    SceneBundle probe;
    build_scene(model, canon, avatar, frame, setup, true, &probe);
    int want_hit = 0, want_miss = 0;
    const int half = opts.rays / 2;
    int guard = 0;
    while (static_cast<int>(setup.pixels.size()) < opts.rays && guard++ < 4000) {
      const int px = 1 + rng.uniform_int(frame.camera.width - 2);
      const int py = 1 + rng.uniform_int(frame.camera.height - 2);
      const Ray r = pixel_ray(frame.camera, px, py, setup.bounds);
      const bool hits = probe.bvh.intersect(probe.mesh.vertices, model.faces, r).has_value();
      if (hits && want_hit >= half + 1) continue;
      if (!hits && want_miss >= half + 1) continue;
      if (!pixel_is_stable(model, probe, frame, setup, px, py)) continue;
      setup.pixels.push_back({px, py});
      (hits ? want_hit : want_miss)++;
    }
    for (size_t i = 0; i < setup.pixels.size(); ++i) {
      setup.target.push_back(Vec3(rng.uniform(), rng.uniform(), rng.uniform()));
      setup.m_s.push_back(rng.uniform() < 0.7 ? 1.0 : 0.0);
      const bool b = rng.uniform() < 0.5;
      setup.m_b.push_back(b ? 1.0 : 0.0);
      setup.m_e.push_back(!b && rng.uniform() < 0.6 ? 1.0 : 0.0);
    }

    const ParamVector pv = ParamVector::pack(model, avatar, frame);
    const std::vector<VecX> grads = analytic_gradients(model, canon, avatar, frame, setup, pv);

    // FD directions per group: random unit directions plus per-component
    // probes for the small groups.
    for (int g = 0; g < kGNumGroups; ++g) {
      const int64_t off = pv.offset[g];
      const int64_t len = pv.size(g);
      if (len == 0) continue;
      std::vector<VecX> dirs;
      const int n_dirs = 2;
      for (int d = 0; d < n_dirs; ++d) {
        VecX dir = VecX::Zero(len);
        for (int64_t i = 0; i < len; ++i) dir[i] = rng.normal();
        dir.normalize();
        dirs.push_back(dir);
      }
      if (len <= 12) {
        for (int64_t i = 0; i < len; ++i) {
          VecX dir = VecX::Zero(len);
          dir[i] = 1.0;
          dirs.push_back(dir);
        }
      }

      for (const VecX& dir : dirs) {
        ParamVector plus = pv, minus = pv;
        plus.values.segment(off, len) += opts.step * dir;
        minus.values.segment(off, len) -= opts.step * dir;
        AvatarParams ap = avatar, am = avatar;
        FrameParams fp = frame, fm = frame;
        plus.unpack(model, &ap, &fp);
        minus.unpack(model, &am, &fm);
        const Objectives op = eval_objectives(model, canon, ap, fp, setup, nullptr, nullptr);
        const Objectives om = eval_objectives(model, canon, am, fm, setup, nullptr, nullptr);
        for (int o = 0; o < kNumObjectives; ++o) {
          const double fd = (op.value[o] - om.value[o]) / (2.0 * opts.step);
          const double an = grads[static_cast<size_t>(o)].segment(off, len).dot(dir);
          // skip directions where the objective is flat in both views
          if (std::abs(fd) < 1e-9 && std::abs(an) < 1e-9) {
            report_at(o, g).checks++;
            continue;
          }
          const double err = rel_error(an, fd);
          GradCheckReport& rep = report_at(o, g);
          rep.checks++;
          rep.max_rel_err = std::max(rep.max_rel_err, err);
          if (err > opts.tol) rep.pass = false;
        }
      }
    }
  }
  return reports;
}

bool gradcheck_passed(const std::vector<GradCheckReport>& reports) {
  for (const auto& r : reports)
    if (!r.pass) return false;
  return true;
}

}  // namespace avatar
