#pragma once

// Test-side reference implementations, independent of the library paths
// they check.

#include <functional>
#include <memory>
#include <vector>

#include "avatar/geometry.hpp"
#include "avatar/renderer.hpp"
#include "avatar/rng.hpp"
#include "avatar/skinning.hpp"

namespace oracle {

using namespace avatar;

// Central finite difference of a scalar function.
inline double central_diff(const std::function<double(double)>& f, double x, double h = 1e-4) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Dense blend-shape sum, element by element (no matrix products).
inline MatX3 blend_sum(const ParametricModel& m, const VecX& beta, const VecX& theta,
                       const VecX& psi, const MatX3& offsets) {
  MatX3 out = m.template_vertices;
  const VecX pf = pose_feature(m, theta);
  for (int v = 0; v < m.n_vertices(); ++v)
    for (int a = 0; a < 3; ++a) {
      double x = out(v, a);
      for (Eigen::Index i = 0; i < beta.size(); ++i) x += beta[i] * m.shape_dirs(3 * v + a, i);
      for (Eigen::Index i = 0; i < pf.size(); ++i) x += pf[i] * m.pose_dirs(3 * v + a, i);
      for (Eigen::Index i = 0; i < psi.size(); ++i) x += psi[i] * m.expr_dirs(3 * v + a, i);
      out(v, a) = x + offsets(v, a);
    }
  return out;
}

// Naive 8-corner trilinear interpolation of one grid level.
inline Vec4 trilinear_ref(const CanonicalField& f, size_t level, const Vec3& x) {
  const auto& lev = f.levels[level];
  Vec4 out = Vec4::Zero();
  double g[3], fr[3];
  int i0[3];
  for (int a = 0; a < 3; ++a) {
    const double u = (x[a] - f.box_min[a]) / (f.box_max[a] - f.box_min[a]);
    g[a] = u * (lev.res - 1);
    i0[a] = std::clamp(static_cast<int>(std::floor(g[a])), 0, lev.res - 2);
    fr[a] = g[a] - i0[a];
  }
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? fr[0] : 1 - fr[0]) * (dy ? fr[1] : 1 - fr[1]) *
                         (dz ? fr[2] : 1 - fr[2]);
        const size_t idx =
            ((static_cast<size_t>(i0[2] + dz) * lev.res + (i0[1] + dy)) * lev.res +
             (i0[0] + dx)) *
            4;
        for (int c = 0; c < 4; ++c) out[c] += w * lev.raw[idx + c];
      }
  return out;
}

// Fine Riemann quadrature of the mesh-integrated rendering equation using
// only public query/canonicalize operations.
inline Vec3 quadrature_render(const PosedScene& scene, const RadianceSource& field,
                              const Ray& ray, int n_bins) {
  const std::optional<Hit> hit =
      scene.bvh->intersect(scene.mesh->vertices, scene.model->faces, ray);
  const double t_end = hit ? hit->t : ray.t_far;
  const double dt = (t_end - ray.t_near) / n_bins;
  double transmittance = 1.0;
  Vec3 rgb = Vec3::Zero();
  Vec3 last_color = Vec3::Zero();
  for (int j = 0; j < n_bins - 1; ++j) {
    const Vec3 x = ray.origin + (ray.t_near + (j + 0.5) * dt) * ray.dir;
    const CanonicalQuery q =
        canonicalize(x, *scene.mesh, *scene.neighbors, scene.skin, scene.residual);
    Vec3 c;
    double sigma;
    field.query(q.x_c_tilde, &c, &sigma);
    const double a = std::exp(-sigma * dt);
    rgb += transmittance * (1.0 - a) * c;
    transmittance *= a;
  }
  if (hit) {
    const FaceMat& faces = scene.model->faces;
    Vec3 alb = Vec3::Zero();
    const double wb[3] = {1.0 - hit->u - hit->v, hit->u, hit->v};
    for (int c = 0; c < 3; ++c) {
      const int vid = faces(hit->face, c);
      alb += wb[c] * Vec3(clamp01((*scene.albedo)(vid, 0)), clamp01((*scene.albedo)(vid, 1)),
                          clamp01((*scene.albedo)(vid, 2)));
    }
    last_color = alb;
  } else {
    const Vec3 x = ray.origin + (ray.t_near + (n_bins - 0.5) * dt) * ray.dir;
    const CanonicalQuery q =
        canonicalize(x, *scene.mesh, *scene.neighbors, scene.skin, scene.residual);
    double sigma;
    field.query(q.x_c_tilde, &last_color, &sigma);
  }
  return rgb + transmittance * last_color;
}

// Single-joint wrapper model for standalone meshes (rasterization tests).
inline ParametricModel wrap_static_mesh(const MatX3& verts, const FaceMat& faces) {
  ParametricModel m;
  m.template_vertices = verts;
  m.faces = faces;
  const int nv = static_cast<int>(verts.rows());
  m.shape_dirs = MatX::Zero(3 * nv, 1);
  m.pose_dirs = MatX::Zero(3 * nv, 0);
  m.expr_dirs = MatX::Zero(3 * nv, 1);
  m.skin_weights = MatX::Ones(1, nv);
  m.joint_regressor = MatX::Zero(1, nv);
  m.joint_regressor(0, 0) = 1.0;
  m.parents = {-1};
  m.region_labels.assign(static_cast<size_t>(nv), kRegionBody);
  m.canonical_pose = VecX::Zero(3);
  m.validate();
  return m;
}

// Scene bundle owning everything a PosedScene points at.
struct TestScene {
  ParametricModel model;
  CanonicalContext canon;
  AvatarParams avatar;
  FrameParams frame;
  PosedMesh mesh;
  Bvh bvh;
  std::unique_ptr<NeighborIndex> index;
  PosedScene scene;

  void finalize(bool with_residual = false) {
    mesh = pose_mesh(model, avatar, frame, canon);
    bvh.build(mesh.vertices, model.faces);
    index = std::make_unique<NeighborIndex>(mesh.vertices);
    scene.model = &model;
    scene.mesh = &mesh;
    scene.bvh = &bvh;
    scene.neighbors = index.get();
    scene.albedo = &avatar.albedo;
    scene.skin = SkinningConfig{0.1, 6};
    scene.residual = with_residual ? &avatar.residual_field : nullptr;
  }
};

// Toy avatar in a mildly articulated pose with deterministic parameters.
inline TestScene make_toy_scene(uint64_t seed, bool with_residual = false,
                                bool identity_pose = false) {
  TestScene ts;
  ts.model = make_toy_model();
  ts.canon = build_canonical_context(ts.model);
  Rng rng(seed);
  const int nv = ts.model.n_vertices();
  ts.avatar.beta = VecX::Zero(2);
  ts.avatar.offsets = MatX3::Zero(nv, 3);
  ts.avatar.albedo = MatX3::Constant(nv, 3, 0.5);
  ts.avatar.field = CanonicalField::create({8, 16}, Vec3(-0.9, -0.9, -0.9), Vec3(0.9, 0.9, 0.9));
  ts.avatar.residual_field = DeformationField::create(32, seed, 0.05);
  ts.frame.theta = ts.model.canonical_pose;
  ts.frame.psi = VecX::Zero(1);
  if (!identity_pose) {
    ts.avatar.beta = VecX::Zero(2);
    ts.avatar.beta[0] = 0.2 * rng.normal();
    ts.avatar.beta[1] = 0.2 * rng.normal();
    for (int v = 0; v < nv; ++v)
      for (int a = 0; a < 3; ++a) {
        ts.avatar.offsets(v, a) = 0.002 * rng.normal();
        ts.avatar.albedo(v, a) = rng.uniform(0.1, 0.9);
      }
    for (Eigen::Index i = 0; i < ts.frame.theta.size(); ++i)
      ts.frame.theta[i] += 0.15 * rng.normal();
    ts.frame.psi[0] = 0.3 * rng.normal();
  }
  ts.frame.camera.scale = 1.3;
  ts.frame.camera.width = 48;
  ts.frame.camera.height = 48;
  ts.finalize(with_residual);
  return ts;
}

}  // namespace oracle
