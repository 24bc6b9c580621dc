#include "avatar/optimizer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>

#include "avatar/checkpoint.hpp"
#include "avatar/renderer.hpp"
#include "avatar/rng.hpp"

namespace avatar {

void adam_step(Eigen::Ref<VecX> param, const VecX& grad, AdamState* state, const AdamParams& ap,
               const std::string& group_name) {
  if (param.size() != grad.size())
    throw std::invalid_argument("adam_step: size mismatch for group " + group_name);
  if (!grad.allFinite())
    throw numerical_error("adam_step: non-finite gradient in group " + group_name);
  if (state->m.size() != param.size()) {
    state->m = VecX::Zero(param.size());
    state->v = VecX::Zero(param.size());
    state->t = 0;
  }
  state->t += 1;
  const double bc1 = 1.0 - std::pow(ap.beta1, static_cast<double>(state->t));
  const double bc2 = 1.0 - std::pow(ap.beta2, static_cast<double>(state->t));
  for (Eigen::Index i = 0; i < param.size(); ++i) {
    state->m[i] = ap.beta1 * state->m[i] + (1.0 - ap.beta1) * grad[i];
    state->v[i] = ap.beta2 * state->v[i] + (1.0 - ap.beta2) * grad[i] * grad[i];
    const double mhat = state->m[i] / bc1;
    const double vhat = state->v[i] / bc2;
    param[i] -= ap.lr * mhat / (std::sqrt(vhat) + ap.eps);
  }
}

void TrainConfig::apply_preset() {
  if (preset == "head") {
    weights = LossWeights::head_preset();
    bounds = head_bounds();
  } else if (preset == "body") {
    weights = LossWeights::body_preset();
    bounds = body_bounds();
  } else {
    throw std::invalid_argument("train config: unknown preset '" + preset + "'");
  }
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  j["preset"] = preset;
  j["rays_per_step"] = rays_per_step;
  j["frames_per_batch"] = frames_per_batch;
  j["stage1_steps"] = stage1_steps;
  j["stage2_steps"] = stage2_steps;
  j["lr_field"] = lr_field;
  j["lr_albedo"] = lr_albedo;
  j["lr_offsets"] = lr_offsets;
  j["lr_beta"] = lr_beta;
  j["lr_residual"] = lr_residual;
  j["lr_pose"] = lr_pose;
  j["n_bins"] = n_bins;
  j["grid_levels"] = grid_levels;
  j["box_min"] = {box_min[0], box_min[1], box_min[2]};
  j["box_max"] = {box_max[0], box_max[1], box_max[2]};
  j["sigma"] = sigma;
  j["k"] = k;
  j["seed"] = seed;
  j["holdout_stride"] = holdout_stride;
  j["optimize_pose"] = optimize_pose;
  j["optimize_beta"] = optimize_beta;
  j["optimize_offsets"] = optimize_offsets;
  j["optimize_albedo"] = optimize_albedo;
  j["optimize_field"] = optimize_field;
  j["semantic_surrogate"] = semantic_surrogate;
  j["patches_per_step"] = patches_per_step;
  j["residual_hidden"] = residual_hidden;
  j["residual_scale"] = residual_scale;
  j["checkpoint_every"] = checkpoint_every;
  j["log_every"] = log_every;
  j["lambda_semantic"] = weights.semantic;
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.preset = j.value("preset", c.preset);
  c.apply_preset();
  c.rays_per_step = j.value("rays_per_step", c.rays_per_step);
  c.frames_per_batch = j.value("frames_per_batch", c.frames_per_batch);
  c.stage1_steps = j.value("stage1_steps", c.stage1_steps);
  c.stage2_steps = j.value("stage2_steps", c.stage2_steps);
  c.lr_field = j.value("lr_field", c.lr_field);
  c.lr_albedo = j.value("lr_albedo", c.lr_albedo);
  c.lr_offsets = j.value("lr_offsets", c.lr_offsets);
  c.lr_beta = j.value("lr_beta", c.lr_beta);
  c.lr_residual = j.value("lr_residual", c.lr_residual);
  c.lr_pose = j.value("lr_pose", c.lr_pose);
  c.n_bins = j.value("n_bins", c.n_bins);
  if (j.contains("grid_levels")) c.grid_levels = j.at("grid_levels").get<std::vector<int>>();
  if (j.contains("box_min")) {
    const auto v = j.at("box_min").get<std::vector<double>>();
    c.box_min = Vec3(v[0], v[1], v[2]);
  }
  if (j.contains("box_max")) {
    const auto v = j.at("box_max").get<std::vector<double>>();
    c.box_max = Vec3(v[0], v[1], v[2]);
  }
  c.sigma = j.value("sigma", c.sigma);
  c.k = j.value("k", c.k);
  c.seed = j.value("seed", c.seed);
  c.holdout_stride = j.value("holdout_stride", c.holdout_stride);
  c.optimize_pose = j.value("optimize_pose", c.optimize_pose);
  c.optimize_beta = j.value("optimize_beta", c.optimize_beta);
  c.optimize_offsets = j.value("optimize_offsets", c.optimize_offsets);
  c.optimize_albedo = j.value("optimize_albedo", c.optimize_albedo);
  c.optimize_field = j.value("optimize_field", c.optimize_field);
  c.semantic_surrogate = j.value("semantic_surrogate", c.semantic_surrogate);
  c.patches_per_step = j.value("patches_per_step", c.patches_per_step);
  c.residual_hidden = j.value("residual_hidden", c.residual_hidden);
  c.residual_scale = j.value("residual_scale", c.residual_scale);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.log_every = j.value("log_every", c.log_every);
  if (j.contains("lambda_semantic")) c.weights.semantic = j.at("lambda_semantic").get<double>();
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    c.weights.pixel = w.value("pixel", c.weights.pixel);
    c.weights.semantic = w.value("semantic", c.weights.semantic);
    c.weights.ext = w.value("ext", c.weights.ext);
    c.weights.silhouette = w.value("silhouette", c.weights.silhouette);
    c.weights.int_mask = w.value("int_mask", c.weights.int_mask);
    c.weights.skin = w.value("skin", c.weights.skin);
    c.weights.inside = w.value("inside", c.weights.inside);
    c.weights.skin_inside = w.value("skin_inside", c.weights.skin_inside);
    c.weights.edge = w.value("edge", c.weights.edge);
    c.weights.offset = w.value("offset", c.weights.offset);
  }
  c.weights.validate();
  return c;
}

TrainState init_train_state(const ParametricModel& model, const Dataset& ds,
                            const TrainConfig& cfg) {
  TrainState st;
  st.seed = cfg.seed;
  st.avatar.beta = VecX::Zero(model.shape_dim());
  st.avatar.offsets = MatX3::Zero(model.n_vertices(), 3);
  st.avatar.albedo = MatX3::Constant(model.n_vertices(), 3, 0.5);
  st.avatar.field = CanonicalField::create(cfg.grid_levels, cfg.box_min, cfg.box_max, -3.0);
  st.avatar.residual_field =
      DeformationField::create(cfg.residual_hidden, cfg.seed, cfg.residual_scale);
  for (const FrameData& f : ds.frames) st.frames.push_back(f.params);
  st.adam_theta.resize(ds.frames.size());
  st.adam_psi.resize(ds.frames.size());
  st.adam_camera.resize(ds.frames.size());
  return st;
}

void split_frames(const Dataset& ds, const TrainConfig& cfg, std::vector<int>* train_ids,
                  std::vector<int>* holdout_ids) {
  train_ids->clear();
  holdout_ids->clear();
  for (int i = 0; i < static_cast<int>(ds.frames.size()); ++i) {
    if (cfg.holdout_stride > 0 && i % cfg.holdout_stride == cfg.holdout_stride - 1)
      holdout_ids->push_back(i);
    else
      train_ids->push_back(i);
  }
}

namespace {

struct FieldLayout {
  std::vector<int64_t> level_offset;
  int64_t total = 0;
};

FieldLayout field_layout(const CanonicalField& f) {
  FieldLayout l;
  int64_t o = 0;
  for (const auto& lev : f.levels) {
    l.level_offset.push_back(o);
    o += static_cast<int64_t>(lev.raw.size());
  }
  l.total = o;
  return l;
}

VecX flatten_rows(const MatX3& m) {
  VecX v(m.rows() * 3);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (int a = 0; a < 3; ++a) v[3 * i + a] = m(i, a);
  return v;
}

void unflatten_rows(const VecX& v, MatX3* m) {
  for (Eigen::Index i = 0; i < m->rows(); ++i)
    for (int a = 0; a < 3; ++a) (*m)(i, a) = v[3 * i + a];
}

}  // namespace

LossBreakdown train_step(const ParametricModel& model, const CanonicalContext& canon,
                         const Dataset& ds, const std::vector<int>& train_frames,
                         const TrainConfig& cfg, TrainState* state) {
  if (train_frames.empty()) throw std::invalid_argument("train_step: no training frames");
  state->stage = state->step < cfg.stage1_steps ? 1 : 2;
  const bool residual_active = state->stage == 2;
  const bool surrogate_active =
      residual_active && cfg.semantic_surrogate && cfg.weights.semantic > 0;
  const uint64_t step_seed =
      Rng::mix(state->seed, 0x57E9 + 1000003ull * static_cast<uint64_t>(state->step));

  const int nv = model.n_vertices();
  VecX d_beta = VecX::Zero(model.shape_dim());
  MatX3 d_offsets_total = MatX3::Zero(nv, 3);
  MatX3 d_albedo_total = MatX3::Zero(nv, 3);
  const FieldLayout layout = field_layout(state->avatar.field);
  VecX d_field = VecX::Zero(layout.total);
  VecX d_residual = VecX::Zero(state->avatar.residual_field.param_count());

  struct FrameGrad {
    int frame;
    VecX d_theta, d_psi;
    double d_scale = 0;
    Vec2 d_translation = Vec2::Zero();
  };
  std::vector<FrameGrad> frame_grads;

  LossBreakdown breakdown;
  Rng frame_rng(Rng::mix(step_seed, 0xF7A));
  const double inv_batch = 1.0 / cfg.frames_per_batch;

  for (int bi = 0; bi < cfg.frames_per_batch; ++bi) {
    const int f = train_frames[static_cast<size_t>(frame_rng.uniform_int(
        static_cast<int>(train_frames.size())))];
    const FrameData& data = ds.frames[static_cast<size_t>(f)];
    const FrameParams& fp = state->frames[static_cast<size_t>(f)];

    const PosedMesh mesh = pose_mesh(model, state->avatar, fp, canon);
    Bvh bvh;
    bvh.build(mesh.vertices, model.faces);
    const NeighborIndex index(mesh.vertices);

    PosedScene scene;
    scene.model = &model;
    scene.mesh = &mesh;
    scene.bvh = &bvh;
    scene.neighbors = &index;
    scene.albedo = &state->avatar.albedo;
    scene.skin = SkinningConfig{cfg.sigma, cfg.k};
    scene.residual = residual_active ? &state->avatar.residual_field : nullptr;

    // Sample random rays plus optional 5x5 patches for the surrogate term.
    const int w = data.rgb.width, h = data.rgb.height;
    const int n_random = std::max(1, cfg.rays_per_step / cfg.frames_per_batch);
    Rng pix_rng(Rng::mix(step_seed, 0xA11CE + static_cast<uint64_t>(f)));
    std::vector<RayJob> jobs;
    for (int i = 0; i < n_random; ++i) {
      const int pix = pix_rng.uniform_int(w * h);
      RayJob j;
      j.px = pix % w;
      j.py = pix / w;
      j.ray = pixel_ray(fp.camera, j.px, j.py, cfg.bounds);
      jobs.push_back(j);
    }
    int n_patches = 0;
    if (surrogate_active) {
      n_patches = cfg.patches_per_step;
      for (int p = 0; p < n_patches; ++p) {
        const int x0 = pix_rng.uniform_int(w - 4);
        const int y0 = pix_rng.uniform_int(h - 4);
        for (int dy = 0; dy < 5; ++dy)
          for (int dx = 0; dx < 5; ++dx) {
            RayJob j;
            j.px = x0 + dx;
            j.py = y0 + dy;
            j.ray = pixel_ray(fp.camera, j.px, j.py, cfg.bounds);
            jobs.push_back(j);
          }
      }
    }
    const int n_rays = static_cast<int>(jobs.size());
    for (int i = 0; i < n_rays; ++i)
      jobs[static_cast<size_t>(i)].seed =
          Rng::mix(step_seed, 0x5EED + (static_cast<uint64_t>(f) << 32) + static_cast<uint64_t>(i));

    RenderOptions opts;
    opts.n_bins = cfg.n_bins;
    opts.jitter = true;
    std::vector<RayOutputs> outs;
    std::vector<RayCache> caches;
    render_ray_batch(scene, state->avatar.field, jobs, opts, &outs, &caches, true);

    // Gather per-ray buffers.
    std::vector<Vec3> rgb(n_rays), mesh_rgb(n_rays), target(n_rays);
    std::vector<double> s_v(n_rays), sil(n_rays), m_s(n_rays), m_b(n_rays), m_e(n_rays);
    for (int i = 0; i < n_rays; ++i) {
      rgb[static_cast<size_t>(i)] = outs[static_cast<size_t>(i)].rgb;
      mesh_rgb[static_cast<size_t>(i)] = outs[static_cast<size_t>(i)].mesh_rgb;
      s_v[static_cast<size_t>(i)] = outs[static_cast<size_t>(i)].s_v;
      sil[static_cast<size_t>(i)] = outs[static_cast<size_t>(i)].silhouette;
      const int px = jobs[static_cast<size_t>(i)].px, py = jobs[static_cast<size_t>(i)].py;
      target[static_cast<size_t>(i)] = data.rgb.rgb(px, py);
      m_s[static_cast<size_t>(i)] = data.masks.S.at(px, py, 0) > 0.5 ? 1.0 : 0.0;
      m_b[static_cast<size_t>(i)] = data.masks.S_b.at(px, py, 0) > 0.5 ? 1.0 : 0.0;
      m_e[static_cast<size_t>(i)] = data.masks.S_e.at(px, py, 0) > 0.5 ? 1.0 : 0.0;
    }

    // Losses with per-ray upstream gradients.
    std::vector<Vec3> d_rgb(static_cast<size_t>(n_rays), Vec3::Zero());
    std::vector<Vec3> d_mesh_rgb(static_cast<size_t>(n_rays), Vec3::Zero());
    std::vector<double> d_sv(static_cast<size_t>(n_rays), 0.0);
    LossBreakdown lb;

    lb.pixel = recon_pixel_loss(rgb, target, cfg.weights, &d_rgb);
    if (surrogate_active && n_patches > 0) {
      const double patch_norm = cfg.weights.semantic / n_patches;
      for (int p = 0; p < n_patches; ++p) {
        const int base = n_random + 25 * p;
        std::array<Vec3, 25> d_patch{};
        lb.semantic += patch_norm * patch_correlation_distance(&rgb[static_cast<size_t>(base)],
                                                               &target[static_cast<size_t>(base)],
                                                               d_patch.data());
        for (int i = 0; i < 25; ++i)
          d_rgb[static_cast<size_t>(base + i)] += patch_norm * d_patch[static_cast<size_t>(i)];
      }
    }
    lb.ext = exterior_loss(s_v, m_e, cfg.weights, &d_sv);

    bool skin_fallback = false;
    const Vec3 c_skin =
        region_mean_albedo(model, state->avatar.albedo, cfg.skin_region(), &skin_fallback);
    Vec3 d_c_skin = Vec3::Zero();
    const InteriorBreakdown ib = interior_losses(sil, mesh_rgb, target, m_s, m_b, m_e, c_skin,
                                                 cfg.weights, &d_mesh_rgb, &d_c_skin);
    lb.silhouette = ib.silhouette;
    lb.int_mask = ib.int_mask;
    lb.skin = ib.skin;
    lb.inside = ib.inside;
    lb.skin_inside = ib.skin_inside;

    // Regularization on the shaped (pre-skinning) mesh.
    const MatX3 shaped_without =
        shaped_template(model, state->avatar.beta, fp.theta, fp.psi, MatX3::Zero(nv, 3));
    MatX3 d_shaped_with = MatX3::Zero(nv, 3);
    MatX3 d_shaped_without = MatX3::Zero(nv, 3);
    MatX3 d_offsets_reg = MatX3::Zero(nv, 3);
    const RegularizationResult reg =
        regularization(mesh.shaped, shaped_without, model.edges(), state->avatar.offsets,
                       model.region_labels, cfg.weights, &d_shaped_with, &d_shaped_without,
                       &d_offsets_reg);
    lb.edge = reg.edge;
    lb.offset = reg.offset;

    breakdown += lb;

    // Backward through the renderer, rays in parallel, reduction in ray order.
    std::vector<RayGrads> ray_grads(static_cast<size_t>(n_rays));
    std::exception_ptr error = nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 16)
#endif
    for (int i = 0; i < n_rays; ++i) {
      if (error) continue;
      try {
        RayUpstream up;
        up.d_rgb = d_rgb[static_cast<size_t>(i)] * inv_batch;
        up.d_s_v = d_sv[static_cast<size_t>(i)] * inv_batch;
        up.d_mesh_rgb = d_mesh_rgb[static_cast<size_t>(i)] * inv_batch;
        render_ray_backward(scene, state->avatar.field, caches[static_cast<size_t>(i)], up,
                            &ray_grads[static_cast<size_t>(i)]);
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

    MatX3 d_vertices = MatX3::Zero(nv, 3);
    std::vector<Mat34> d_canonical(static_cast<size_t>(nv), Mat34::Zero());
    FrameGrad fg;
    fg.frame = f;
    fg.d_theta = VecX::Zero(model.pose_dim());
    fg.d_psi = VecX::Zero(model.expr_dim());
    for (int i = 0; i < n_rays; ++i) {
      const RayGrads& rg = ray_grads[static_cast<size_t>(i)];
      for (const auto& [vid, g] : rg.d_vertex) d_vertices.row(vid) += g.transpose();
      for (const auto& [vid, g] : rg.d_canonical) d_canonical[static_cast<size_t>(vid)] += g;
      // upstreams already carry the 1/frames_per_batch factor
      for (const auto& [vid, g] : rg.d_albedo) d_albedo_total.row(vid) += g.transpose();
      for (const auto& gc : rg.d_grid)
        for (int ch = 0; ch < 4; ++ch)
          d_field[layout.level_offset[static_cast<size_t>(gc.level)] + gc.index + ch] +=
              gc.g[ch];
      if (rg.d_residual.size()) d_residual += rg.d_residual;
      pixel_ray_backward(fp.camera, jobs[static_cast<size_t>(i)].px,
                         jobs[static_cast<size_t>(i)].py, rg.d_origin, &fg.d_scale,
                         &fg.d_translation);
    }

    // C_skin chain into the albedo.
    region_mean_albedo_backward(model, state->avatar.albedo, cfg.skin_region(),
                                d_c_skin * inv_batch, &d_albedo_total);

    // Skinning/blend-shape chain.
    const PoseGrads pg =
        pose_mesh_backward(model, state->avatar, fp, canon, d_vertices, d_canonical);
    const ShapedGrads sw = shaped_template_backward(model, fp.theta, d_shaped_with);
    const ShapedGrads sn = shaped_template_backward(model, fp.theta, d_shaped_without);
    d_beta += pg.d_beta + inv_batch * (sw.d_beta + sn.d_beta);
    d_offsets_total += pg.d_offsets + inv_batch * (sw.d_offsets + d_offsets_reg);
    fg.d_theta += pg.d_theta + inv_batch * (sw.d_theta + sn.d_theta);
    fg.d_psi += pg.d_psi + inv_batch * (sw.d_psi + sn.d_psi);
    // merge grads when a frame repeats within the batch
    bool merged = false;
    for (FrameGrad& existing : frame_grads) {
      if (existing.frame == fg.frame) {
        existing.d_theta += fg.d_theta;
        existing.d_psi += fg.d_psi;
        existing.d_scale += fg.d_scale;
        existing.d_translation += fg.d_translation;
        merged = true;
        break;
      }
    }
    if (!merged) frame_grads.push_back(std::move(fg));
  }
  breakdown *= inv_batch;

  // Parameter updates.
  if (cfg.optimize_beta)
    adam_step(state->avatar.beta, d_beta, &state->adam_beta, AdamParams{cfg.lr_beta}, "beta");
  if (cfg.optimize_offsets) {
    VecX p = flatten_rows(state->avatar.offsets);
    adam_step(p, flatten_rows(d_offsets_total), &state->adam_offsets, AdamParams{cfg.lr_offsets},
              "offsets");
    unflatten_rows(p, &state->avatar.offsets);
  }
  if (cfg.optimize_albedo) {
    VecX p = flatten_rows(state->avatar.albedo);
    adam_step(p, flatten_rows(d_albedo_total), &state->adam_albedo, AdamParams{cfg.lr_albedo},
              "albedo");
    unflatten_rows(p, &state->avatar.albedo);
  }
  if (cfg.optimize_field) {
    VecX p;
    state->avatar.field.to_flat(&p);
    adam_step(p, d_field, &state->adam_field, AdamParams{cfg.lr_field}, "field");
    state->avatar.field.from_flat(p);
  }
  if (residual_active) {
    VecX p;
    state->avatar.residual_field.to_flat(&p);
    adam_step(p, d_residual, &state->adam_residual, AdamParams{cfg.lr_residual}, "residual");
    state->avatar.residual_field.from_flat(p);
  }
  if (cfg.optimize_pose) {
    for (const FrameGrad& fg : frame_grads) {
      const size_t f = static_cast<size_t>(fg.frame);
      adam_step(state->frames[f].theta, fg.d_theta, &state->adam_theta[f],
                AdamParams{cfg.lr_pose}, "theta[" + std::to_string(fg.frame) + "]");
      if (state->frames[f].psi.size())
        adam_step(state->frames[f].psi, fg.d_psi, &state->adam_psi[f], AdamParams{cfg.lr_pose},
                  "psi[" + std::to_string(fg.frame) + "]");
      VecX cam(3);
      cam << state->frames[f].camera.scale, state->frames[f].camera.translation[0],
          state->frames[f].camera.translation[1];
      VecX cam_grad(3);
      cam_grad << fg.d_scale, fg.d_translation[0], fg.d_translation[1];
      adam_step(cam, cam_grad, &state->adam_camera[f], AdamParams{cfg.lr_pose},
                "camera[" + std::to_string(fg.frame) + "]");
      state->frames[f].camera.scale = cam[0];
      state->frames[f].camera.translation = Vec2(cam[1], cam[2]);
    }
  }

  state->step += 1;
  return breakdown;
}

namespace {

Checkpoint make_checkpoint(const ParametricModel& model, const TrainState& st,
                           const TrainConfig& cfg) {
  Checkpoint ck;
  ck.model = model;
  ck.avatar = st.avatar;
  ck.frames = st.frames;
  ck.meta["step"] = st.step;
  ck.meta["stage"] = st.stage;
  ck.meta["seed"] = st.seed;
  ck.meta["preset"] = cfg.preset;
  ck.meta["config"] = cfg.to_json();
  return ck;
}

void log_line(std::ofstream* log, int64_t step, int stage, const LossBreakdown& lb) {
  if (!log || !log->is_open()) return;
  nlohmann::json j;
  j["step"] = step;
  j["stage"] = stage;
  j["total"] = lb.total();
  j["pixel"] = lb.pixel;
  j["semantic"] = lb.semantic;
  j["ext"] = lb.ext;
  j["silhouette"] = lb.silhouette;
  j["int_mask"] = lb.int_mask;
  j["skin"] = lb.skin;
  j["inside"] = lb.inside;
  j["skin_inside"] = lb.skin_inside;
  j["edge"] = lb.edge;
  j["offset"] = lb.offset;
  (*log) << j.dump() << "\n";
}

}  // namespace

TrainResult train(const ParametricModel& model, const Dataset& ds, const TrainConfig& cfg,
                  const std::string& log_path, const std::string& ckpt_path,
                  const TrainState* resume) {
  if (ds.frames.empty()) throw std::invalid_argument("train: empty dataset");
  const CanonicalContext canon = build_canonical_context(model);
  std::vector<int> train_ids, holdout_ids;
  split_frames(ds, cfg, &train_ids, &holdout_ids);

  TrainResult result;
  result.state = resume ? *resume : init_train_state(model, ds, cfg);
  TrainState& st = result.state;

  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path);
    if (!log) throw std::invalid_argument("train: cannot open log path " + log_path);
  }

  TrainState last_good = st;
  while (st.step < cfg.total_steps()) {
    LossBreakdown lb;
    try {
      lb = train_step(model, canon, ds, train_ids, cfg, &st);
    } catch (const numerical_error&) {
      if (!ckpt_path.empty()) save_checkpoint(ckpt_path, make_checkpoint(model, last_good, cfg));
      throw;
    }
    if (!std::isfinite(lb.total())) {
      if (!ckpt_path.empty()) save_checkpoint(ckpt_path, make_checkpoint(model, last_good, cfg));
      throw numerical_error("train: loss diverged at step " + std::to_string(st.step));
    }
    result.loss_log.push_back(lb);
    if (cfg.log_every > 0 && (st.step % cfg.log_every == 0 || st.step == cfg.total_steps()))
      log_line(&log, st.step, st.stage, lb);
    if (cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0) {
      last_good = st;
      if (!ckpt_path.empty()) save_checkpoint(ckpt_path, make_checkpoint(model, st, cfg));
    }
  }
  if (!ckpt_path.empty()) save_checkpoint(ckpt_path, make_checkpoint(model, st, cfg));
  return result;
}

std::vector<FrameMetrics> evaluate(const ParametricModel& model, const CanonicalContext& canon,
                                   const AvatarParams& avatar,
                                   const std::vector<FrameParams>& render_params,
                                   const Dataset& ds, const std::vector<int>& frame_ids,
                                   const TrainConfig& cfg, bool use_residual) {
  std::vector<FrameMetrics> out;
  // True interior geometry for the silhouette reference.
  AvatarParams true_avatar;
  true_avatar.beta = VecX::Zero(model.shape_dim());
  if (ds.spec.contains("beta_true")) {
    const auto v = ds.spec.at("beta_true").get<std::vector<double>>();
    true_avatar.beta = Eigen::Map<const VecX>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  true_avatar.offsets = MatX3::Zero(model.n_vertices(), 3);
  true_avatar.albedo = MatX3::Constant(model.n_vertices(), 3, 0.5);

  for (int f : frame_ids) {
    const FrameData& truth = ds.frames[static_cast<size_t>(f)];
    const FrameParams& rp = render_params[static_cast<size_t>(f)];

    const PosedMesh mesh = pose_mesh(model, avatar, rp, canon);
    Bvh bvh;
    bvh.build(mesh.vertices, model.faces);
    const NeighborIndex index(mesh.vertices);
    PosedScene scene;
    scene.model = &model;
    scene.mesh = &mesh;
    scene.bvh = &bvh;
    scene.neighbors = &index;
    scene.albedo = &avatar.albedo;
    scene.skin = SkinningConfig{cfg.sigma, cfg.k};
    scene.residual = use_residual ? &avatar.residual_field : nullptr;

    RenderOptions opts;
    opts.n_bins = cfg.n_bins;
    opts.jitter = false;
    const FrameRender fr = render_frame(scene, avatar.field, rp.camera, cfg.bounds, opts, true);

    FrameMetrics m;
    m.l1 = metric_l1(fr.rgb, truth.rgb);
    m.psnr = metric_psnr(fr.rgb, truth.rgb);
    m.ssim = metric_ssim(fr.rgb, truth.rgb);
    m.l1_avatar = metric_l1_masked(fr.rgb, truth.rgb, truth.masks.S);
    m.psnr_avatar = metric_psnr_masked(fr.rgb, truth.rgb, truth.masks.S);
    m.iou_exterior = metric_iou(fr.s_v, truth.masks.S_e, 0.5);

    const PosedMesh true_mesh = pose_mesh(model, true_avatar, truth.params, canon);
    Bvh true_bvh;
    true_bvh.build(true_mesh.vertices, model.faces);
    PosedScene true_scene = scene;
    true_scene.mesh = &true_mesh;
    true_scene.bvh = &true_bvh;
    true_scene.albedo = &true_avatar.albedo;
    const RasterResult true_raster = rasterize(true_scene, truth.params.camera, cfg.bounds);
    m.iou_silhouette = metric_iou(fr.silhouette, true_raster.silhouette, 0.5);
    out.push_back(m);
  }
  return out;
}

FrameMetrics mean_metrics(const std::vector<FrameMetrics>& all) {
  FrameMetrics m;
  if (all.empty()) return m;
  for (const FrameMetrics& x : all) {
    m.l1 += x.l1;
    m.psnr += x.psnr;
    m.ssim += x.ssim;
    m.l1_avatar += x.l1_avatar;
    m.psnr_avatar += x.psnr_avatar;
    m.iou_exterior += x.iou_exterior;
    m.iou_silhouette += x.iou_silhouette;
  }
  const double inv = 1.0 / static_cast<double>(all.size());
  m.l1 *= inv;
  m.psnr *= inv;
  m.ssim *= inv;
  m.l1_avatar *= inv;
  m.psnr_avatar *= inv;
  m.iou_exterior *= inv;
  m.iou_silhouette *= inv;
  return m;
}

}  // namespace avatar
