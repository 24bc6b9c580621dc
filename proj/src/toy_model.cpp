#include <cmath>

#include "avatar/geometry.hpp"

namespace avatar {

namespace {

double smoothstep01(double t) {
  t = clamp01(t);
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace

void append_capsule(MatX3* vertices, FaceMat* faces, const Vec3& base, const Vec3& axis_dir,
                    double length, double radius, int segments, int rings) {
  const Vec3 axis = axis_dir.normalized();
  // orthonormal frame around the axis
  Vec3 u = std::abs(axis[0]) < 0.9 ? Vec3(1, 0, 0) : Vec3(0, 1, 0);
  u = (u - u.dot(axis) * axis).normalized();
  const Vec3 w = axis.cross(u);

  const int cap_rings = std::max(2, rings / 3);
  const int cyl_rings = std::max(1, rings);
  const int base_vertex = static_cast<int>(vertices->rows());

  std::vector<Vec3> pts;
  pts.push_back(base - radius * axis);  // bottom pole
  auto add_ring = [&](const Vec3& center, double r) {
    for (int s = 0; s < segments; ++s) {
      const double a = 2.0 * M_PI * s / segments;
      pts.push_back(center + r * (std::cos(a) * u + std::sin(a) * w));
    }
  };
  for (int i = 1; i <= cap_rings; ++i) {
    const double phi = -M_PI / 2 + (M_PI / 2) * i / cap_rings;
    add_ring(base + std::sin(phi) * radius * axis, radius * std::cos(phi));
  }
  for (int j = 1; j <= cyl_rings; ++j) add_ring(base + (length * j / cyl_rings) * axis, radius);
  for (int i = 1; i < cap_rings; ++i) {
    const double phi = (M_PI / 2) * i / cap_rings;
    add_ring(base + length * axis + std::sin(phi) * radius * axis, radius * std::cos(phi));
  }
  pts.push_back(base + length * axis + radius * axis);  // top pole

  const int old_rows = static_cast<int>(vertices->rows());
  vertices->conservativeResize(old_rows + static_cast<int>(pts.size()), 3);
  for (size_t i = 0; i < pts.size(); ++i)
    vertices->row(old_rows + static_cast<int>(i)) = pts[i].transpose();

  std::vector<Eigen::Vector3i> tri;
  const int n_rings = cap_rings + cyl_rings + (cap_rings - 1);
  auto ring_vertex = [&](int ring, int s) {
    return base_vertex + 1 + ring * segments + (s % segments);
  };
  for (int s = 0; s < segments; ++s)
    tri.emplace_back(base_vertex, ring_vertex(0, s + 1), ring_vertex(0, s));
  for (int r = 0; r + 1 < n_rings; ++r)
    for (int s = 0; s < segments; ++s) {
      const int a = ring_vertex(r, s), b = ring_vertex(r, s + 1);
      const int c = ring_vertex(r + 1, s), d = ring_vertex(r + 1, s + 1);
      tri.emplace_back(a, b, d);
      tri.emplace_back(a, d, c);
    }
  const int top = base_vertex + 1 + n_rings * segments;
  for (int s = 0; s < segments; ++s)
    tri.emplace_back(top, ring_vertex(n_rings - 1, s), ring_vertex(n_rings - 1, s + 1));

  const int old_faces = static_cast<int>(faces->rows());
  faces->conservativeResize(old_faces + static_cast<int>(tri.size()), 3);
  for (size_t i = 0; i < tri.size(); ++i)
    faces->row(old_faces + static_cast<int>(i)) = tri[i].transpose();
}

ParametricModel make_toy_model() {
  ParametricModel m;
  m.template_vertices.resize(0, 3);
  m.faces.resize(0, 3);

  constexpr double kTorsoBaseY = -0.45;
  constexpr double kTorsoLen = 0.9;
  constexpr double kTorsoR = 0.20;
  constexpr double kArmX = 0.16;
  constexpr double kArmY = 0.30;
  constexpr double kArmLen = 0.34;
  constexpr double kArmR = 0.065;

  append_capsule(&m.template_vertices, &m.faces, Vec3(0, kTorsoBaseY, 0), Vec3(0, 1, 0),
                 kTorsoLen, kTorsoR, 20, 10);
  const int torso_end = static_cast<int>(m.template_vertices.rows());
  append_capsule(&m.template_vertices, &m.faces, Vec3(-kArmX, kArmY, 0), Vec3(-1, 0, 0), kArmLen,
                 kArmR, 12, 5);
  const int arm_l_end = static_cast<int>(m.template_vertices.rows());
  append_capsule(&m.template_vertices, &m.faces, Vec3(kArmX, kArmY, 0), Vec3(1, 0, 0), kArmLen,
                 kArmR, 12, 5);
  const int nv = static_cast<int>(m.template_vertices.rows());

  // Joints: root, spine, left arm, right arm.
  m.parents = {-1, 0, 1, 1};
  const Vec3 joint_pos[4] = {Vec3(0, -0.40, 0), Vec3(0, 0.10, 0), Vec3(-kArmX, kArmY, 0),
                             Vec3(kArmX, kArmY, 0)};
  m.joint_regressor = MatX::Zero(4, nv);
  for (int k = 0; k < 4; ++k) {
    // uniform weights over the nearest vertices; ring symmetry puts the
    // regressed joint close to the target
    std::vector<std::pair<double, int>> d(static_cast<size_t>(nv));
    for (int v = 0; v < nv; ++v)
      d[static_cast<size_t>(v)] = {
          (Vec3(m.template_vertices.row(v).transpose()) - joint_pos[k]).squaredNorm(), v};
    std::partial_sort(d.begin(), d.begin() + 12, d.end());
    for (int i = 0; i < 12; ++i) m.joint_regressor(k, d[static_cast<size_t>(i)].second) = 1.0 / 12;
  }

  // Skin weights: torso blends root->spine along y, arms blend spine->arm
  // along |x| from the shoulder.
  m.skin_weights = MatX::Zero(4, nv);
  for (int v = 0; v < nv; ++v) {
    const Vec3 p = m.template_vertices.row(v).transpose();
    if (v < torso_end) {
      const double a = smoothstep01((p[1] + 0.15) / 0.40);
      m.skin_weights(0, v) = 1.0 - a;
      m.skin_weights(1, v) = a;
    } else {
      const int arm = v < arm_l_end ? 2 : 3;
      const double a = smoothstep01((std::abs(p[0]) - kArmX) / 0.12);
      m.skin_weights(1, v) = 1.0 - a;
      m.skin_weights(arm, v) = a;
    }
  }

  // Regions: top cap is the "face", outer arms are the "hands".
  m.region_labels.assign(static_cast<size_t>(nv), kRegionBody);
  for (int v = 0; v < nv; ++v) {
    const Vec3 p = m.template_vertices.row(v).transpose();
    if (v < torso_end && p[1] > 0.42) m.region_labels[static_cast<size_t>(v)] = kRegionFace;
    if (v >= torso_end && std::abs(p[0]) > 0.38) m.region_labels[static_cast<size_t>(v)] = kRegionHands;
  }

  // Shape dirs: 0 = girth (radial from the part axis), 1 = height stretch.
  m.shape_dirs = MatX::Zero(3 * nv, 2);
  for (int v = 0; v < nv; ++v) {
    const Vec3 p = m.template_vertices.row(v).transpose();
    Vec3 radial;
    if (v < torso_end) {
      radial = Vec3(p[0], 0, p[2]);
    } else {
      radial = Vec3(0, p[1] - kArmY, p[2]);
    }
    const Vec3 girth = 0.3 * radial;
    const Vec3 height(0, 0.12 * p[1], 0);
    for (int a = 0; a < 3; ++a) {
      m.shape_dirs(3 * v + a, 0) = girth[a];
      m.shape_dirs(3 * v + a, 1) = height[a];
    }
  }

  // One expression dir: a bump around the top cap.
  m.expr_dirs = MatX::Zero(3 * nv, 1);
  for (int v = 0; v < nv; ++v) {
    const Vec3 p = m.template_vertices.row(v).transpose();
    const double wgt = std::exp(-(p - Vec3(0, 0.62, 0)).squaredNorm() / (2 * 0.12 * 0.12));
    const Vec3 dir = (p - Vec3(0, 0.45, 0)).normalized();
    for (int a = 0; a < 3; ++a) m.expr_dirs(3 * v + a, 0) = 0.05 * wgt * dir[a];
  }

  // Small smooth pose correctives, deterministic patterns.
  m.pose_dirs = MatX::Zero(3 * nv, 27);
  for (int col = 0; col < 27; ++col) {
    const Vec3 dir = Vec3(std::sin(col * 1.7 + 0.3), std::cos(col * 2.3), std::sin(col * 0.9 + 1.1))
                         .normalized();
    for (int v = 0; v < nv; ++v) {
      const Vec3 p = m.template_vertices.row(v).transpose();
      const double phase = 3.1 * (col + 1) * (p[0] + 0.9 * p[1] - 0.7 * p[2]);
      const double mag = 0.008 * std::sin(phase + 0.61 * col);
      for (int a = 0; a < 3; ++a) m.pose_dirs(3 * v + a, col) = mag * dir[a];
    }
  }

  // Canonical A-pose: arms angled down.
  m.canonical_pose = VecX::Zero(12);
  m.canonical_pose[3 * 2 + 2] = 0.45;   // left arm about +z
  m.canonical_pose[3 * 3 + 2] = -0.45;  // right arm about -z

  m.validate();
  return m;
}

}  // namespace avatar
