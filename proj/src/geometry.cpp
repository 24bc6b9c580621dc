#include "avatar/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace avatar {

namespace {

inline Mat4 affine(const Mat3& r, const Vec3& t) {
  Mat4 m = Mat4::Identity();
  m.block<3, 3>(0, 0) = r;
  m.block<3, 1>(0, 3) = t;
  return m;
}

inline Mat4 translation(const Vec3& t) { return affine(Mat3::Identity(), t); }

inline Mat3 skew(const Vec3& a) {
  Mat3 m;
  m << 0, -a[2], a[1], a[2], 0, -a[0], -a[1], a[0], 0;
  return m;
}

inline MatX3 unflatten3(const VecX& v) {
  MatX3 m(v.size() / 3, 3);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (int a = 0; a < 3; ++a) m(i, a) = v[3 * i + a];
  return m;
}

inline VecX flatten3(const MatX3& m) {
  VecX v(m.rows() * 3);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (int a = 0; a < 3; ++a) v[3 * i + a] = m(i, a);
  return v;
}

constexpr double kTaylorAngle = 1e-8;

}  // namespace

void ParametricModel::validate() const {
  const int nv = n_vertices();
  const int nk = n_joints();
  if (nk < 1) throw std::invalid_argument("model: needs at least one joint");
  if (parents[0] != -1) throw std::invalid_argument("model: joint 0 must be the root");
  for (int k = 1; k < nk; ++k)
    if (parents[k] < 0 || parents[k] >= k)
      throw std::invalid_argument("model: parents must form a tree with parent index < child");
  for (Eigen::Index f = 0; f < faces.rows(); ++f)
    for (int c = 0; c < 3; ++c)
      if (faces(f, c) < 0 || faces(f, c) >= nv)
        throw std::invalid_argument("model: face indexes an invalid vertex");
  if (shape_dirs.rows() != 3 * nv || expr_dirs.rows() != 3 * nv ||
      pose_dirs.rows() != 3 * nv)
    throw std::invalid_argument("model: blend-shape basis vertex count mismatch");
  if (pose_dirs.cols() != pose_feature_dim())
    throw std::invalid_argument("model: pose basis must have 9*(n_k-1) columns");
  if (skin_weights.rows() != nk || skin_weights.cols() != nv)
    throw std::invalid_argument("model: skin weights must be n_k x n_v");
  if (joint_regressor.rows() != nk || joint_regressor.cols() != nv)
    throw std::invalid_argument("model: joint regressor must be n_k x n_v");
  for (int v = 0; v < nv; ++v) {
    double sum = 0;
    for (int k = 0; k < nk; ++k) {
      if (skin_weights(k, v) < 0) throw std::invalid_argument("model: negative skin weight");
      sum += skin_weights(k, v);
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw std::invalid_argument("model: skin weight column does not sum to 1");
  }
  if (static_cast<int>(region_labels.size()) != nv)
    throw std::invalid_argument("model: region labels size mismatch");
  if (canonical_pose.size() != pose_dim())
    throw std::invalid_argument("model: canonical pose size mismatch");
}

const std::vector<std::pair<int, int>>& ParametricModel::edges() const {
  if (edges_.empty() && faces.rows() > 0) {
    std::set<std::pair<int, int>> seen;
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
      for (int c = 0; c < 3; ++c) {
        int a = faces(f, c), b = faces(f, (c + 1) % 3);
        if (a > b) std::swap(a, b);
        seen.insert({a, b});
      }
    }
    edges_.assign(seen.begin(), seen.end());
  }
  return edges_;
}

Mat3 rodrigues(const Vec3& aa) {
  const double theta = aa.norm();
  const Mat3 k = skew(aa);
  if (theta < kTaylorAngle) {
    return Mat3::Identity() + k + 0.5 * (k * k);
  }
  const double s = std::sin(theta) / theta;
  const double c = (1.0 - std::cos(theta)) / (theta * theta);
  return Mat3::Identity() + s * k + c * (k * k);
}

Vec3 rodrigues_backward(const Vec3& aa, const Mat3& d_rot) {
  const double theta = aa.norm();
  Vec3 out = Vec3::Zero();
  if (theta < kTaylorAngle) {
    // R ~ I + [a]x near zero
    out[0] = d_rot(2, 1) - d_rot(1, 2);
    out[1] = d_rot(0, 2) - d_rot(2, 0);
    out[2] = d_rot(1, 0) - d_rot(0, 1);
    return out;
  }
  // Gallego & Yezzi: dR/da_i = (a_i [a]x + [a x ((I-R) e_i)]x) / theta^2 * R
  const Mat3 r = rodrigues(aa);
  const Mat3 imr = Mat3::Identity() - r;
  for (int i = 0; i < 3; ++i) {
    const Vec3 col = imr.col(i);
    const Mat3 dr_di = ((aa[i] * skew(aa) + skew(aa.cross(col))) / (theta * theta)) * r;
    out[i] = (d_rot.array() * dr_di.array()).sum();
  }
  return out;
}

VecX pose_feature(const ParametricModel& model, const VecX& theta) {
  if (theta.size() != model.pose_dim())
    throw std::invalid_argument("pose_feature: theta size mismatch");
  const int nk = model.n_joints();
  VecX pf = VecX::Zero(model.pose_feature_dim());
  for (int k = 1; k < nk; ++k) {
    const Mat3 r = rodrigues(theta.segment<3>(3 * k)) - Mat3::Identity();
    for (int c = 0; c < 3; ++c)
      for (int rr = 0; rr < 3; ++rr) pf[9 * (k - 1) + 3 * c + rr] = r(rr, c);
  }
  return pf;
}

namespace {

VecX blend_flat(const ParametricModel& model, const VecX& beta, const VecX& theta,
                const VecX& psi) {
  if (beta.size() != model.shape_dim()) throw std::invalid_argument("blend: beta size mismatch");
  if (psi.size() != model.expr_dim()) throw std::invalid_argument("blend: psi size mismatch");
  VecX b = model.shape_dirs * beta;
  b += model.pose_dirs * pose_feature(model, theta);
  b += model.expr_dirs * psi;
  return b;
}

}  // namespace

MatX3 shaped_template(const ParametricModel& model, const VecX& beta, const VecX& theta,
                      const VecX& psi, const MatX3& offsets) {
  if (offsets.rows() != model.n_vertices())
    throw std::invalid_argument("shaped_template: offsets size mismatch");
  MatX3 out = model.template_vertices + unflatten3(blend_flat(model, beta, theta, psi));
  out += offsets;
  return out;
}

ShapedGrads shaped_template_backward(const ParametricModel& model, const VecX& theta,
                                     const MatX3& d_shaped) {
  ShapedGrads g;
  const VecX flat = flatten3(d_shaped);
  g.d_beta = model.shape_dirs.transpose() * flat;
  g.d_psi = model.expr_dirs.transpose() * flat;
  g.d_offsets = d_shaped;
  const VecX d_pf = model.pose_dirs.transpose() * flat;
  g.d_theta = VecX::Zero(model.pose_dim());
  for (int k = 1; k < model.n_joints(); ++k) {
    Mat3 dr;
    for (int c = 0; c < 3; ++c)
      for (int rr = 0; rr < 3; ++rr) dr(rr, c) = d_pf[9 * (k - 1) + 3 * c + rr];
    g.d_theta.segment<3>(3 * k) = rodrigues_backward(theta.segment<3>(3 * k), dr);
  }
  return g;
}

MatX joints(const ParametricModel& model, const VecX& beta) {
  const MatX3 shaped = model.template_vertices + unflatten3(model.shape_dirs * beta);
  return model.joint_regressor * shaped;
}

std::vector<Mat4> joint_transforms(const ParametricModel& model, const VecX& theta,
                                   const MatX& rest_joints) {
  const int nk = model.n_joints();
  if (theta.size() != 3 * nk) throw std::invalid_argument("joint_transforms: theta size mismatch");
  std::vector<Mat4> fk(nk), g(nk);
  for (int k = 0; k < nk; ++k) {
    const Mat3 r = rodrigues(theta.segment<3>(3 * k));
    const Vec3 jk = rest_joints.row(k).transpose();
    const Vec3 rel = model.parents[k] < 0
                         ? jk
                         : Vec3(jk - Vec3(rest_joints.row(model.parents[k]).transpose()));
    const Mat4 local = affine(r, rel);
    fk[k] = model.parents[k] < 0 ? local : Mat4(fk[model.parents[k]] * local);
    g[k] = fk[k] * translation(-jk);  // identity in the rest pose
  }
  return g;
}

std::vector<Mat4> vertex_transforms(const ParametricModel& model, const VecX& beta,
                                    const VecX& theta, const VecX& psi, const MatX3& offsets) {
  const int nv = model.n_vertices();
  const int nk = model.n_joints();
  const MatX rest = joints(model, beta);
  const std::vector<Mat4> g = joint_transforms(model, theta, rest);
  const VecX b = blend_flat(model, beta, theta, psi);

  std::vector<Mat4> m(nv);
  for (int i = 0; i < nv; ++i) {
    Mat4 s = Mat4::Zero();
    for (int k = 0; k < nk; ++k) {
      const double w = model.skin_weights(k, i);
      if (w != 0.0) s += w * g[k];
    }
    const Vec3 u = Vec3(b[3 * i], b[3 * i + 1], b[3 * i + 2]) + offsets.row(i).transpose();
    m[i] = s * translation(u);
  }
  return m;
}

PosedMesh pose_mesh(const ParametricModel& model, const AvatarParams& avatar,
                    const FrameParams& frame, const CanonicalContext& canon) {
  PosedMesh mesh;
  mesh.model = &model;
  const int nv = model.n_vertices();
  mesh.vertex_transforms =
      vertex_transforms(model, avatar.beta, frame.theta, frame.psi, avatar.offsets);
  mesh.vertex_transforms_inv.resize(nv);
  mesh.canonical_map.resize(nv);
  mesh.vertices.resize(nv, 3);
  mesh.shaped = shaped_template(model, avatar.beta, frame.theta, frame.psi, avatar.offsets);
  for (int i = 0; i < nv; ++i) {
    const Mat4& m = mesh.vertex_transforms[i];
    if (std::abs(m.block<3, 3>(0, 0).determinant()) < 1e-12)
      throw numerical_error("pose_mesh: singular blend transform at vertex " + std::to_string(i));
    Mat4 inv = Mat4::Identity();
    const Mat3 rinv = m.block<3, 3>(0, 0).inverse();
    inv.block<3, 3>(0, 0) = rinv;
    inv.block<3, 1>(0, 3) = -rinv * m.block<3, 1>(0, 3);
    mesh.vertex_transforms_inv[i] = inv;
    mesh.canonical_map[i] = canon.transforms[i] * inv;
    const Vec3 t = model.template_vertices.row(i).transpose();
    mesh.vertices.row(i) =
        (m.block<3, 3>(0, 0) * t + m.block<3, 1>(0, 3)).transpose();
  }
  return mesh;
}

CanonicalContext build_canonical_context(const ParametricModel& model) {
  CanonicalContext ctx;
  const int nv = model.n_vertices();
  const MatX3 zero_off = MatX3::Zero(nv, 3);
  ctx.transforms = vertex_transforms(model, VecX::Zero(model.shape_dim()), model.canonical_pose,
                                     VecX::Zero(model.expr_dim()), zero_off);
  ctx.transforms_inv.resize(nv);
  ctx.vertices.resize(nv, 3);
  for (int i = 0; i < nv; ++i) {
    const Mat4& c = ctx.transforms[i];
    if (std::abs(c.block<3, 3>(0, 0).determinant()) < 1e-12)
      throw numerical_error("canonical context: singular transform at vertex " +
                            std::to_string(i));
    Mat4 inv = Mat4::Identity();
    const Mat3 rinv = c.block<3, 3>(0, 0).inverse();
    inv.block<3, 3>(0, 0) = rinv;
    inv.block<3, 1>(0, 3) = -rinv * c.block<3, 1>(0, 3);
    ctx.transforms_inv[i] = inv;
    const Vec3 t = model.template_vertices.row(i).transpose();
    ctx.vertices.row(i) = (c.block<3, 3>(0, 0) * t + c.block<3, 1>(0, 3)).transpose();
  }
  return ctx;
}

PoseGrads pose_mesh_backward(const ParametricModel& model, const AvatarParams& avatar,
                             const FrameParams& frame, const CanonicalContext& canon,
                             const MatX3& d_vertices, const std::vector<Mat34>& d_canonical_map) {
  const int nv = model.n_vertices();
  const int nk = model.n_joints();
  if (d_vertices.rows() != nv || static_cast<int>(d_canonical_map.size()) != nv)
    throw std::invalid_argument("pose_mesh_backward: gradient buffer size mismatch");

  // Recompute the forward chain.
  const MatX rest = joints(model, avatar.beta);
  const VecX& theta = frame.theta;
  std::vector<Mat3> local_rot(nk);
  std::vector<Mat4> fk(nk), g(nk);
  for (int k = 0; k < nk; ++k) {
    local_rot[k] = rodrigues(theta.segment<3>(3 * k));
    const Vec3 jk = rest.row(k).transpose();
    const Vec3 rel =
        model.parents[k] < 0 ? jk : Vec3(jk - Vec3(rest.row(model.parents[k]).transpose()));
    const Mat4 local = affine(local_rot[k], rel);
    fk[k] = model.parents[k] < 0 ? local : Mat4(fk[model.parents[k]] * local);
    g[k] = fk[k] * translation(-jk);
  }
  const VecX b = blend_flat(model, avatar.beta, theta, frame.psi);

  PoseGrads out;
  out.d_beta = VecX::Zero(model.shape_dim());
  out.d_theta = VecX::Zero(model.pose_dim());
  out.d_psi = VecX::Zero(model.expr_dim());
  out.d_offsets = MatX3::Zero(nv, 3);

  std::vector<Mat4> d_g(nk, Mat4::Zero());
  VecX d_b = VecX::Zero(3 * nv);

  for (int i = 0; i < nv; ++i) {
    const Vec3 dv = d_vertices.row(i).transpose();
    const Mat34& da = d_canonical_map[i];
    const bool has_dv = dv.squaredNorm() != 0.0;
    const bool has_da = da.squaredNorm() != 0.0;
    if (!has_dv && !has_da) continue;

    Mat4 s = Mat4::Zero();
    for (int k = 0; k < nk; ++k) {
      const double w = model.skin_weights(k, i);
      if (w != 0.0) s += w * g[k];
    }
    const Vec3 u = Vec3(b[3 * i], b[3 * i + 1], b[3 * i + 2]) + avatar.offsets.row(i).transpose();
    const Mat4 m = s * translation(u);

    Mat4 d_m = Mat4::Zero();
    if (has_dv) {
      const Vec3 t = model.template_vertices.row(i).transpose();
      Vec4 th(t[0], t[1], t[2], 1.0);
      d_m.block<3, 4>(0, 0) += dv * th.transpose();
    }
    if (has_da) {
      const Mat3 rinv = m.block<3, 3>(0, 0).inverse();
      Mat4 minv = Mat4::Identity();
      minv.block<3, 3>(0, 0) = rinv;
      minv.block<3, 1>(0, 3) = -rinv * m.block<3, 1>(0, 3);
      const Mat4 a = canon.transforms[i] * minv;
      Mat4 da4 = Mat4::Zero();
      da4.block<3, 4>(0, 0) = da;
      d_m += -a.transpose() * da4 * minv.transpose();
    }
    // M = S * T(u); bottom rows are structurally fixed, so only the top
    // three rows of the factor gradients carry through.
    const Mat4 tu = translation(u);
    Mat4 d_s = d_m * tu.transpose();
    d_s.row(3).setZero();
    Mat4 d_tu = s.transpose() * d_m;
    const Vec3 d_u = d_tu.block<3, 1>(0, 3);

    out.d_offsets.row(i) += d_u.transpose();
    d_b.segment<3>(3 * i) += d_u;
    for (int k = 0; k < nk; ++k) {
      const double w = model.skin_weights(k, i);
      if (w != 0.0) d_g[k] += w * d_s;
    }
  }

  // Blend-shape sum: b = S beta + P pf(theta) + E psi
  out.d_beta += model.shape_dirs.transpose() * d_b;
  out.d_psi += model.expr_dirs.transpose() * d_b;
  std::vector<Mat3> d_local_rot(nk, Mat3::Zero());
  {
    const VecX d_pf = model.pose_dirs.transpose() * d_b;
    for (int k = 1; k < nk; ++k)
      for (int c = 0; c < 3; ++c)
        for (int rr = 0; rr < 3; ++rr) d_local_rot[k](rr, c) += d_pf[9 * (k - 1) + 3 * c + rr];
  }

  // G_k = FK_k * T(-j_k)
  std::vector<Mat4> d_fk(nk, Mat4::Zero());
  MatX d_joints = MatX::Zero(nk, 3);
  for (int k = 0; k < nk; ++k) {
    const Vec3 jk = rest.row(k).transpose();
    const Vec3 d_gt = d_g[k].block<3, 1>(0, 3);
    d_fk[k].block<3, 3>(0, 0) += d_g[k].block<3, 3>(0, 0) - d_gt * jk.transpose();
    d_fk[k].block<3, 1>(0, 3) += d_gt;
    d_joints.row(k) += (-fk[k].block<3, 3>(0, 0).transpose() * d_gt).transpose();
  }

  // FK chain, children before parents (parents[k] < k).
  for (int k = nk - 1; k >= 0; --k) {
    const Vec3 jk = rest.row(k).transpose();
    const int p = model.parents[k];
    const Vec3 rel = p < 0 ? jk : Vec3(jk - Vec3(rest.row(p).transpose()));
    const Mat4 local = affine(local_rot[k], rel);
    Mat4 d_local;
    if (p >= 0) {
      d_fk[p] += d_fk[k] * local.transpose();
      d_local = fk[p].transpose() * d_fk[k];
    } else {
      d_local = d_fk[k];
    }
    d_local_rot[k] += d_local.block<3, 3>(0, 0);
    const Vec3 d_rel = d_local.block<3, 1>(0, 3);
    d_joints.row(k) += d_rel.transpose();
    if (p >= 0) d_joints.row(p) -= d_rel.transpose();
  }

  for (int k = 0; k < nk; ++k)
    out.d_theta.segment<3>(3 * k) +=
        rodrigues_backward(theta.segment<3>(3 * k), d_local_rot[k]);

  // J(beta) = regressor * (template + B_S(beta))
  const MatX d_shaped_j = model.joint_regressor.transpose() * d_joints;  // n_v x 3
  out.d_beta += model.shape_dirs.transpose() * flatten3(d_shaped_j);

  return out;
}

}  // namespace avatar
