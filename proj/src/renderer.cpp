#include "avatar/renderer.hpp"

#include <algorithm>
#include <cmath>

#include "avatar/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace avatar {

Ray pixel_ray(const OrthoCamera& cam, double px, double py, const RayBounds& bounds) {
  if (cam.scale <= 0) throw std::invalid_argument("pixel_ray: camera scale must be positive");
  const double ndc_x = (2.0 * (px + 0.5) - cam.width) / cam.width;
  const double ndc_y = (cam.height - 2.0 * (py + 0.5)) / cam.height;
  Ray r;
  r.origin = Vec3((ndc_x - cam.translation[0]) / cam.scale,
                  (ndc_y - cam.translation[1]) / cam.scale, 0.0);
  r.dir = Vec3(0, 0, -1);
  r.t_near = bounds.near;
  r.t_far = bounds.far;
  return r;
}

void pixel_ray_backward(const OrthoCamera& cam, double px, double py, const Vec3& d_origin,
                        double* d_scale, Vec2* d_translation) {
  const double ndc_x = (2.0 * (px + 0.5) - cam.width) / cam.width;
  const double ndc_y = (cam.height - 2.0 * (py + 0.5)) / cam.height;
  const double s = cam.scale;
  // origin_x = (ndc_x - t_x)/s
  if (d_scale) {
    *d_scale += d_origin[0] * (-(ndc_x - cam.translation[0]) / (s * s)) +
                d_origin[1] * (-(ndc_y - cam.translation[1]) / (s * s));
  }
  if (d_translation) {
    (*d_translation)[0] += d_origin[0] * (-1.0 / s);
    (*d_translation)[1] += d_origin[1] * (-1.0 / s);
  }
}

bool intersect_triangle(const Vec3& origin, const Vec3& dir, const Vec3& v0, const Vec3& v1,
                        const Vec3& v2, double* t, double* u, double* v) {
  const Vec3 e1 = v1 - v0;
  const Vec3 e2 = v2 - v0;
  const Vec3 pv = dir.cross(e2);
  const double det = e1.dot(pv);
  if (std::abs(det) < 1e-14) return false;
  const double inv = 1.0 / det;
  const Vec3 tv = origin - v0;
  const double uu = tv.dot(pv) * inv;
  if (uu < 0.0 || uu > 1.0) return false;
  const Vec3 qv = tv.cross(e1);
  const double vv = dir.dot(qv) * inv;
  if (vv < 0.0 || uu + vv > 1.0) return false;
  *t = e2.dot(qv) * inv;
  *u = uu;
  *v = vv;
  return true;
}

TriangleGrads intersect_triangle_backward(const Vec3& origin, const Vec3& dir, const Vec3& v0,
                                          const Vec3& v1, const Vec3& v2, double d_t, double d_u,
                                          double d_v) {
  const Vec3 e1 = v1 - v0;
  const Vec3 e2 = v2 - v0;
  const Vec3 pv = dir.cross(e2);
  const double det = e1.dot(pv);
  const double inv = 1.0 / det;
  const Vec3 tv = origin - v0;
  const Vec3 qv = tv.cross(e1);

  Vec3 g_e1 = Vec3::Zero(), g_e2 = Vec3::Zero(), g_pv = Vec3::Zero(), g_tv = Vec3::Zero(),
       g_qv = Vec3::Zero();
  double g_inv = 0.0;

  // t = (e2 . qv) inv ; v = (d . qv) inv ; u = (tv . pv) inv
  g_e2 += d_t * inv * qv;
  g_qv += d_t * inv * e2;
  g_inv += d_t * e2.dot(qv);
  g_qv += d_v * inv * dir;
  g_inv += d_v * dir.dot(qv);
  g_tv += d_u * inv * pv;
  g_pv += d_u * inv * tv;
  g_inv += d_u * tv.dot(pv);

  const double g_det = -inv * inv * g_inv;
  // det = e1 . pv
  g_e1 += g_det * pv;
  g_pv += g_det * e1;
  // qv = tv x e1
  g_tv += e1.cross(g_qv);
  g_e1 += g_qv.cross(tv);
  // pv = d x e2
  g_e2 += g_pv.cross(dir);

  TriangleGrads g;
  g.d_origin = g_tv;
  g.d_v0 = -g_tv - g_e1 - g_e2;
  g.d_v1 = g_e1;
  g.d_v2 = g_e2;
  return g;
}

// ---------------------------------------------------------------------------
// BVH

namespace {

inline void face_bounds(const MatX3& verts, const FaceMat& faces, int f, Vec3* lo, Vec3* hi) {
  *lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  *hi = -*lo;
  for (int c = 0; c < 3; ++c) {
    const Vec3 p = verts.row(faces(f, c)).transpose();
    *lo = lo->cwiseMin(p);
    *hi = hi->cwiseMax(p);
  }
}

inline bool slab_test(const Vec3& lo, const Vec3& hi, const Ray& ray, double t_max) {
  double tmin = ray.t_near, tmax = t_max;
  for (int a = 0; a < 3; ++a) {
    const double d = ray.dir[a];
    const double o = ray.origin[a];
    if (std::abs(d) < 1e-300) {
      if (o < lo[a] || o > hi[a]) return false;
    } else {
      double t0 = (lo[a] - o) / d;
      double t1 = (hi[a] - o) / d;
      if (t0 > t1) std::swap(t0, t1);
      tmin = std::max(tmin, t0);
      tmax = std::min(tmax, t1);
      if (tmin > tmax) return false;
    }
  }
  return true;
}

}  // namespace

int Bvh::build_node(const MatX3& verts, const FaceMat& faces, std::vector<int>& ids, int begin,
                    int end, int leaf_size, std::vector<Vec3>& centroids) {
  Node node;
  node.lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  node.hi = -node.lo;
  for (int i = begin; i < end; ++i) {
    Vec3 lo, hi;
    face_bounds(verts, faces, ids[i], &lo, &hi);
    node.lo = node.lo.cwiseMin(lo);
    node.hi = node.hi.cwiseMax(hi);
  }
  const int idx = static_cast<int>(nodes_.size());
  nodes_.push_back(node);
  if (end - begin <= leaf_size) {
    nodes_[idx].start = begin;
    nodes_[idx].count = end - begin;
    return idx;
  }
  // median split along the widest centroid axis
  Vec3 clo = Vec3::Constant(std::numeric_limits<double>::infinity()), chi = -clo;
  for (int i = begin; i < end; ++i) {
    clo = clo.cwiseMin(centroids[ids[i]]);
    chi = chi.cwiseMax(centroids[ids[i]]);
  }
  int axis = 0;
  (chi - clo).maxCoeff(&axis);
  const int mid = (begin + end) / 2;
  std::nth_element(ids.begin() + begin, ids.begin() + mid, ids.begin() + end,
                   [&](int a, int b) {
                     const double ca = centroids[a][axis], cb = centroids[b][axis];
                     return ca < cb || (ca == cb && a < b);
                   });
  const int left = build_node(verts, faces, ids, begin, mid, leaf_size, centroids);
  const int right = build_node(verts, faces, ids, mid, end, leaf_size, centroids);
  nodes_[idx].left = left;
  nodes_[idx].right = right;
  return idx;
}

void Bvh::build(const MatX3& verts, const FaceMat& faces, int leaf_size) {
  nodes_.clear();
  const int nf = static_cast<int>(faces.rows());
  order_.resize(nf);
  for (int i = 0; i < nf; ++i) order_[i] = i;
  if (nf == 0) return;
  std::vector<Vec3> centroids(nf);
  for (int f = 0; f < nf; ++f) {
    centroids[f] = (verts.row(faces(f, 0)) + verts.row(faces(f, 1)) + verts.row(faces(f, 2)))
                       .transpose() /
                   3.0;
  }
  nodes_.reserve(static_cast<size_t>(2 * nf));
  build_node(verts, faces, order_, 0, nf, leaf_size, centroids);
}

std::optional<Hit> Bvh::intersect(const MatX3& verts, const FaceMat& faces,
                                  const Ray& ray) const {
  if (nodes_.empty()) return std::nullopt;
  Hit best;
  best.t = ray.t_far;
  bool found = false;
  int stack[64];
  int sp = 0;
  stack[sp++] = 0;
  while (sp > 0) {
    const Node& node = nodes_[stack[--sp]];
    if (!slab_test(node.lo, node.hi, ray, best.t)) continue;
    if (node.count > 0) {
      for (int i = node.start; i < node.start + node.count; ++i) {
        const int f = order_[i];
        double t, u, v;
        if (intersect_triangle(ray.origin, ray.dir, verts.row(faces(f, 0)).transpose(),
                               verts.row(faces(f, 1)).transpose(),
                               verts.row(faces(f, 2)).transpose(), &t, &u, &v)) {
          if (t > ray.t_near && t < ray.t_far &&
              (t < best.t || (t == best.t && (!found || f < best.face)))) {
            best = {t, f, u, v};
            found = true;
          }
        }
      }
    } else {
      stack[sp++] = node.right;
      stack[sp++] = node.left;
    }
  }
  if (!found) return std::nullopt;
  return best;
}

std::optional<Hit> intersect_brute_force(const MatX3& verts, const FaceMat& faces,
                                         const Ray& ray) {
  Hit best;
  best.t = ray.t_far;
  bool found = false;
  for (int f = 0; f < faces.rows(); ++f) {
    double t, u, v;
    if (intersect_triangle(ray.origin, ray.dir, verts.row(faces(f, 0)).transpose(),
                           verts.row(faces(f, 1)).transpose(),
                           verts.row(faces(f, 2)).transpose(), &t, &u, &v)) {
      if (t > ray.t_near && t < ray.t_far &&
          (t < best.t || (t == best.t && (!found || f < best.face)))) {
        best = {t, f, u, v};
        found = true;
      }
    }
  }
  if (!found) return std::nullopt;
  return best;
}

// ---------------------------------------------------------------------------
// Mesh-integrated volume rendering

namespace {

Vec3 clamped_albedo(const MatX3& albedo, int vertex) {
  return Vec3(clamp01(albedo(vertex, 0)), clamp01(albedo(vertex, 1)), clamp01(albedo(vertex, 2)));
}

Vec3 barycentric_albedo(const PosedScene& scene, const Hit& hit) {
  const FaceMat& faces = scene.model->faces;
  const Vec3 a0 = clamped_albedo(*scene.albedo, faces(hit.face, 0));
  const Vec3 a1 = clamped_albedo(*scene.albedo, faces(hit.face, 1));
  const Vec3 a2 = clamped_albedo(*scene.albedo, faces(hit.face, 2));
  return (1.0 - hit.u - hit.v) * a0 + hit.u * a1 + hit.v * a2;
}

}  // namespace

RayOutputs render_ray(const PosedScene& scene, const RadianceSource& field, const Ray& ray,
                      const RenderOptions& opts, RayCache* cache) {
  if (opts.n_bins < 2) throw std::invalid_argument("render_ray: n_bins must be >= 2");
  const std::optional<Hit> hit = scene.bvh->intersect(scene.mesh->vertices, scene.model->faces, ray);

  const double t_end = hit ? hit->t : ray.t_far;
  const int m = opts.n_bins - 1;
  const double dt = (t_end - ray.t_near) / opts.n_bins;
  Rng rng(opts.seed);

  if (cache) {
    cache->valid = true;
    cache->ray = ray;
    cache->hit = hit;
    cache->t_end = t_end;
    cache->dt = dt;
    cache->n_field_samples = m;
    cache->samples.clear();
    cache->samples.reserve(static_cast<size_t>(m) + 1);
  }

  double transmittance = 1.0;
  double s_v = 0.0;
  Vec3 rgb = Vec3::Zero();

  auto take_sample = [&](int j) -> RaySample {
    RaySample s;
    const double xi = opts.jitter ? rng.uniform() : 0.5;
    s.t = ray.t_near + (j + xi) * dt;
    s.frac = (s.t - ray.t_near) / (t_end - ray.t_near);
    const Vec3 x_p = ray.origin + s.t * ray.dir;
    s.q = canonicalize(x_p, *scene.mesh, *scene.neighbors, scene.skin, scene.residual);
    if (!s.q.x_c_tilde.allFinite())
      throw numerical_error(
          "render_ray: canonicalization produced a non-finite point (pose/skinning parameters)");
    field.query(s.q.x_c_tilde, &s.rgb, &s.sigma);
    if (!s.rgb.allFinite() || !std::isfinite(s.sigma))
      throw numerical_error("render_ray: non-finite field output (field parameters)");
    s.inside = s.sigma != 0.0 || s.rgb.squaredNorm() != 0.0;
    return s;
  };

  for (int j = 0; j < m; ++j) {
    RaySample s = take_sample(j);
    const double a = std::exp(-s.sigma * dt);
    const double w = transmittance * (1.0 - a);
    rgb += w * s.rgb;
    s_v += w;
    transmittance *= a;
    if (cache) cache->samples.push_back(std::move(s));
  }

  Vec3 final_color;
  if (hit) {
    final_color = barycentric_albedo(scene, *hit);
  } else {
    RaySample s = take_sample(m);
    final_color = s.rgb;
    if (cache) cache->samples.push_back(std::move(s));
  }
  rgb += transmittance * final_color;

  RayOutputs out;
  out.rgb = rgb;
  out.s_v = s_v;
  out.silhouette = hit ? 1.0 : 0.0;
  out.mesh_rgb = hit ? final_color : Vec3::Zero();
  if (cache) {
    cache->final_color = final_color;
    cache->out = out;
  }
  return out;
}

void render_ray_backward(const PosedScene& scene, const CanonicalField& field,
                         const RayCache& cache, const RayUpstream& up, RayGrads* out) {
  if (!cache.valid) throw precondition_error("render_ray_backward: forward cache missing");
  const int m = cache.n_field_samples;
  const double dt = cache.dt;
  const Vec3& u = up.d_rgb;

  // Recompute the transmittance prefix.
  std::vector<double> trans(static_cast<size_t>(m) + 1);
  trans[0] = 1.0;
  for (int j = 0; j < m; ++j)
    trans[static_cast<size_t>(j) + 1] =
        trans[static_cast<size_t>(j)] * std::exp(-cache.samples[static_cast<size_t>(j)].sigma * dt);

  // Compositing reverse sweep.
  Vec3 d_final = trans[static_cast<size_t>(m)] * u;
  if (cache.hit) d_final += up.d_mesh_rgb;

  std::vector<double> d_sigma(static_cast<size_t>(m), 0.0);
  std::vector<Vec3> d_rgb_sample(static_cast<size_t>(m), Vec3::Zero());
  double d_dt_total = 0.0;
  double g_trans = u.dot(cache.final_color);
  for (int j = m - 1; j >= 0; --j) {
    const RaySample& s = cache.samples[static_cast<size_t>(j)];
    const double a = std::exp(-s.sigma * dt);
    const double tj = trans[static_cast<size_t>(j)];
    const double w = tj * (1.0 - a);
    const double g_w = u.dot(s.rgb) + up.d_s_v;
    const double g_a = tj * g_trans - tj * g_w;
    g_trans = a * g_trans + (1.0 - a) * g_w;
    d_sigma[static_cast<size_t>(j)] = -dt * a * g_a;
    d_dt_total += -s.sigma * a * g_a;
    d_rgb_sample[static_cast<size_t>(j)] = w * u;
  }

  double d_t_end = d_dt_total / /* dt = (t_end - t_near)/n_bins */ (m + 1);

  SkinGradSink sink;
  sink.d_vertex = &out->d_vertex;
  sink.d_canonical = &out->d_canonical;
  if (scene.residual) {
    if (out->d_residual.size() != scene.residual->param_count())
      out->d_residual = VecX::Zero(scene.residual->param_count());
    sink.d_residual_params = &out->d_residual;
  }

  auto sample_backward = [&](const RaySample& s, const Vec3& d_color, double d_sig) {
    if (!s.inside) return;  // hard zero outside the field support
    Vec4 d_raw = Vec4::Zero();
    for (int c = 0; c < 3; ++c) d_raw[c] = d_color[c] * s.rgb[c] * (1.0 - s.rgb[c]);
    d_raw[3] = d_sig * (1.0 - std::exp(-s.sigma));  // softplus' = sigmoid(raw)
    Vec3 d_xct = Vec3::Zero();
    field.query_raw_backward(s.q.x_c_tilde, d_raw, &out->d_grid, &d_xct);
    const Vec3 d_xp =
        canonicalize_backward(s.q, *scene.mesh, scene.skin, scene.residual, d_xct, &sink);
    out->d_origin += d_xp;
    d_t_end += d_xp.dot(cache.ray.dir) * s.frac;
  };

  for (int j = 0; j < m; ++j)
    sample_backward(cache.samples[static_cast<size_t>(j)], d_rgb_sample[static_cast<size_t>(j)],
                    d_sigma[static_cast<size_t>(j)]);

  if (cache.hit) {
    // Final color is barycentric-interpolated clamped albedo.
    const Hit& hit = *cache.hit;
    const FaceMat& faces = scene.model->faces;
    const int i0 = faces(hit.face, 0), i1 = faces(hit.face, 1), i2 = faces(hit.face, 2);
    const Vec3 a0 = clamped_albedo(*scene.albedo, i0);
    const Vec3 a1 = clamped_albedo(*scene.albedo, i1);
    const Vec3 a2 = clamped_albedo(*scene.albedo, i2);
    const double wb[3] = {1.0 - hit.u - hit.v, hit.u, hit.v};
    const int ids[3] = {i0, i1, i2};
    for (int c = 0; c < 3; ++c) {
      Vec3 g = wb[c] * d_final;
      // clamp gate: zero gradient where the raw albedo sits outside [0,1]
      for (int ch = 0; ch < 3; ++ch) {
        const double raw = (*scene.albedo)(ids[c], ch);
        if (raw < 0.0 || raw > 1.0) g[ch] = 0.0;
      }
      out->d_albedo.push_back({ids[c], g});
    }
    const double d_u_b = d_final.dot(a1 - a0);
    const double d_v_b = d_final.dot(a2 - a0);
    const TriangleGrads tg = intersect_triangle_backward(
        cache.ray.origin, cache.ray.dir, scene.mesh->vertices.row(i0).transpose(),
        scene.mesh->vertices.row(i1).transpose(), scene.mesh->vertices.row(i2).transpose(),
        d_t_end, d_u_b, d_v_b);
    out->d_origin += tg.d_origin;
    out->d_vertex.push_back({i0, tg.d_v0});
    out->d_vertex.push_back({i1, tg.d_v1});
    out->d_vertex.push_back({i2, tg.d_v2});
  } else {
    // Final color sample: color-only chain.
    const RaySample& s = cache.samples[static_cast<size_t>(m)];
    sample_backward(s, d_final, 0.0);
    // t_far is a configuration constant; d_t_end is dropped here.
  }
}

// ---------------------------------------------------------------------------
// Batch kernels

void render_ray_batch(const PosedScene& scene, const RadianceSource& field,
                      const std::vector<RayJob>& jobs, const RenderOptions& opts,
                      std::vector<RayOutputs>* outputs, std::vector<RayCache>* caches,
                      bool parallel) {
  const int n = static_cast<int>(jobs.size());
  outputs->resize(static_cast<size_t>(n));
  if (caches) caches->resize(static_cast<size_t>(n));

  std::exception_ptr error = nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 16) if (parallel)
#endif
  for (int i = 0; i < n; ++i) {
    if (error) continue;
    try {
      RenderOptions ray_opts = opts;
      ray_opts.seed = jobs[static_cast<size_t>(i)].seed;
      (*outputs)[static_cast<size_t>(i)] =
          render_ray(scene, field, jobs[static_cast<size_t>(i)].ray, ray_opts,
                     caches ? &(*caches)[static_cast<size_t>(i)] : nullptr);
    } catch (...) {
#ifdef _OPENMP
#pragma omp critical
#endif
      {
        if (!error) error = std::current_exception();
      }
    }
  }
  if (error) std::rethrow_exception(error);
}

FrameRender render_frame(const PosedScene& scene, const RadianceSource& field,
                         const OrthoCamera& cam, const RayBounds& bounds,
                         const RenderOptions& opts, bool parallel) {
  std::vector<RayJob> jobs;
  jobs.reserve(static_cast<size_t>(cam.width) * cam.height);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      RayJob j;
      j.ray = pixel_ray(cam, x, y, bounds);
      j.seed = Rng::mix(opts.seed, static_cast<uint64_t>(y) * cam.width + x);
      j.px = x;
      j.py = y;
      jobs.push_back(j);
    }
  std::vector<RayOutputs> outs;
  render_ray_batch(scene, field, jobs, opts, &outs, nullptr, parallel);

  FrameRender fr;
  fr.rgb = Image(cam.width, cam.height, 3);
  fr.s_v = Image(cam.width, cam.height, 1);
  fr.silhouette = Image(cam.width, cam.height, 1);
  fr.mesh_rgb = Image(cam.width, cam.height, 3);
  for (size_t i = 0; i < outs.size(); ++i) {
    const int x = jobs[i].px, y = jobs[i].py;
    fr.rgb.set_rgb(x, y, outs[i].rgb);
    fr.s_v.at(x, y, 0) = outs[i].s_v;
    fr.silhouette.at(x, y, 0) = outs[i].silhouette;
    fr.mesh_rgb.set_rgb(x, y, outs[i].mesh_rgb);
  }
  return fr;
}

RasterResult rasterize(const PosedScene& scene, const OrthoCamera& cam, const RayBounds& bounds,
                       bool parallel) {
  RasterResult rr;
  rr.mesh_rgb = Image(cam.width, cam.height, 3);
  rr.silhouette = Image(cam.width, cam.height, 1);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 4) if (parallel)
#endif
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      const Ray ray = pixel_ray(cam, x, y, bounds);
      const std::optional<Hit> hit =
          scene.bvh->intersect(scene.mesh->vertices, scene.model->faces, ray);
      if (hit) {
        rr.silhouette.at(x, y, 0) = 1.0;
        rr.mesh_rgb.set_rgb(x, y, barycentric_albedo(scene, *hit));
      }
    }
  }
  return rr;
}

}  // namespace avatar
