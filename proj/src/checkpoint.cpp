#include "avatar/checkpoint.hpp"

#include "avatar/container.hpp"

namespace avatar {

namespace {

void put_model(Container* c, const ParametricModel& m) {
  c->put("model/template_vertices", MatX(m.template_vertices));
  c->put("model/faces", m.faces);
  c->put("model/shape_dirs", m.shape_dirs);
  c->put("model/pose_dirs", m.pose_dirs);
  c->put("model/expr_dirs", m.expr_dirs);
  c->put("model/skin_weights", m.skin_weights);
  c->put("model/joint_regressor", m.joint_regressor);
  c->put_ints("model/parents", m.parents);
  c->put_ints("model/region_labels", m.region_labels);
  c->put("model/canonical_pose", m.canonical_pose);
}

ParametricModel get_model(const Container& c) {
  ParametricModel m;
  m.template_vertices = c.get_matrix("model/template_vertices");
  m.faces = c.get_faces("model/faces");
  m.shape_dirs = c.get_matrix("model/shape_dirs");
  m.pose_dirs = c.get_matrix("model/pose_dirs");
  m.expr_dirs = c.get_matrix("model/expr_dirs");
  m.skin_weights = c.get_matrix("model/skin_weights");
  m.joint_regressor = c.get_matrix("model/joint_regressor");
  m.parents = c.get_ints("model/parents");
  m.region_labels = c.get_ints("model/region_labels");
  m.canonical_pose = c.get_vector("model/canonical_pose");
  // f32 roundtrips can perturb normalized skin-weight columns; renormalize.
  for (Eigen::Index v = 0; v < m.skin_weights.cols(); ++v) {
    const double s = m.skin_weights.col(v).sum();
    if (s > 0) m.skin_weights.col(v) /= s;
  }
  m.validate();
  return m;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  Container c;
  c.meta = ckpt.meta;
  c.meta["type"] = "checkpoint";
  put_model(&c, ckpt.model);

  c.put("avatar/beta", ckpt.avatar.beta);
  c.put("avatar/offsets", MatX(ckpt.avatar.offsets));
  c.put("avatar/albedo", MatX(ckpt.avatar.albedo));

  const CanonicalField& f = ckpt.avatar.field;
  c.meta["field"]["box_min"] = {f.box_min[0], f.box_min[1], f.box_min[2]};
  c.meta["field"]["box_max"] = {f.box_max[0], f.box_max[1], f.box_max[2]};
  std::vector<int> res;
  for (const auto& lev : f.levels) res.push_back(lev.res);
  c.meta["field"]["levels"] = res;
  for (size_t l = 0; l < f.levels.size(); ++l) {
    const auto& lev = f.levels[l];
    c.put_raw("field/level" + std::to_string(l),
              {static_cast<int64_t>(lev.res), static_cast<int64_t>(lev.res),
               static_cast<int64_t>(lev.res), 4},
              lev.raw.data());
  }

  const DeformationField& r = ckpt.avatar.residual_field;
  c.meta["residual"]["hidden"] = r.hidden();
  c.meta["residual"]["output_scale"] = r.output_scale;
  VecX rflat;
  r.to_flat(&rflat);
  c.put("residual/params", rflat);

  const int nf = static_cast<int>(ckpt.frames.size());
  c.meta["n_frames"] = nf;
  if (nf > 0) {
    MatX thetas(nf, ckpt.frames[0].theta.size());
    MatX psis(nf, ckpt.frames[0].psi.size());
    MatX cams(nf, 3);
    for (int i = 0; i < nf; ++i) {
      thetas.row(i) = ckpt.frames[static_cast<size_t>(i)].theta.transpose();
      psis.row(i) = ckpt.frames[static_cast<size_t>(i)].psi.transpose();
      const OrthoCamera& cam = ckpt.frames[static_cast<size_t>(i)].camera;
      cams(i, 0) = cam.scale;
      cams(i, 1) = cam.translation[0];
      cams(i, 2) = cam.translation[1];
    }
    c.put("frames/theta", thetas);
    c.put("frames/psi", psis);
    c.put("frames/camera", cams);
    c.meta["camera"]["width"] = ckpt.frames[0].camera.width;
    c.meta["camera"]["height"] = ckpt.frames[0].camera.height;
  }
  write_container(path, c);
}

Checkpoint load_checkpoint(const std::string& path) {
  const Container c = read_container(path);
  if (c.meta.value("type", "") != "checkpoint")
    throw std::invalid_argument("checkpoint: '" + path + "' is not a checkpoint container");
  Checkpoint ckpt;
  ckpt.meta = c.meta;
  ckpt.model = get_model(c);

  ckpt.avatar.beta = c.get_vector("avatar/beta");
  ckpt.avatar.offsets = c.get_matrix("avatar/offsets");
  ckpt.avatar.albedo = c.get_matrix("avatar/albedo");

  const auto res = c.meta.at("field").at("levels").get<std::vector<int>>();
  const auto bmin = c.meta.at("field").at("box_min").get<std::vector<double>>();
  const auto bmax = c.meta.at("field").at("box_max").get<std::vector<double>>();
  ckpt.avatar.field = CanonicalField::create(res, Vec3(bmin[0], bmin[1], bmin[2]),
                                             Vec3(bmax[0], bmax[1], bmax[2]), 0.0);
  for (size_t l = 0; l < res.size(); ++l) {
    const ContainerArray& a = c.get("field/level" + std::to_string(l));
    auto& lev = ckpt.avatar.field.levels[l];
    if (a.data.size() != lev.raw.size())
      throw std::invalid_argument("checkpoint: field level size mismatch");
    for (size_t i = 0; i < a.data.size(); ++i) lev.raw[i] = a.data[i];
  }

  const int hidden = c.meta.at("residual").at("hidden").get<int>();
  ckpt.avatar.residual_field = DeformationField::create(hidden, 0, 0.1);
  ckpt.avatar.residual_field.output_scale =
      c.meta.at("residual").at("output_scale").get<double>();
  ckpt.avatar.residual_field.from_flat(c.get_vector("residual/params"));

  const int nf = c.meta.value("n_frames", 0);
  if (nf > 0) {
    const MatX thetas = c.get_matrix("frames/theta");
    const MatX psis = c.get_matrix("frames/psi");
    const MatX cams = c.get_matrix("frames/camera");
    for (int i = 0; i < nf; ++i) {
      FrameParams fp;
      fp.theta = thetas.row(i).transpose();
      fp.psi = psis.row(i).transpose();
      fp.camera.scale = cams(i, 0);
      fp.camera.translation = Vec2(cams(i, 1), cams(i, 2));
      fp.camera.width = c.meta.at("camera").at("width").get<int>();
      fp.camera.height = c.meta.at("camera").at("height").get<int>();
      ckpt.frames.push_back(std::move(fp));
    }
  }
  return ckpt;
}

}  // namespace avatar
