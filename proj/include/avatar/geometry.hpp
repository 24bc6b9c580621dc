#pragma once

#include <vector>

#include "avatar/camera.hpp"
#include "avatar/deformation.hpp"
#include "avatar/field.hpp"
#include "avatar/types.hpp"

namespace avatar {

enum Region : int { kRegionBody = 0, kRegionFace = 1, kRegionHands = 2 };

// Parametric interior mesh: template, blend-shape bases, skinning weights,
// joint hierarchy. Blend-shape direction matrices are stored flattened as
// (3*n_v) x dim with element (3*v + axis).
struct ParametricModel {
  MatX3 template_vertices;      // n_v x 3
  FaceMat faces;                // n_t x 3
  MatX shape_dirs;              // 3 n_v x dim(beta)
  MatX pose_dirs;               // 3 n_v x 9 (n_k - 1)
  MatX expr_dirs;               // 3 n_v x dim(psi)
  MatX skin_weights;            // n_k x n_v, columns sum to 1, entries >= 0
  MatX joint_regressor;         // n_k x n_v
  std::vector<int> parents;     // -1 for the root (joint 0)
  std::vector<int> region_labels;  // Region per vertex
  VecX canonical_pose;          // axis-angle per joint; pose the field lives in

  int n_vertices() const { return static_cast<int>(template_vertices.rows()); }
  int n_faces() const { return static_cast<int>(faces.rows()); }
  int n_joints() const { return static_cast<int>(parents.size()); }
  int shape_dim() const { return static_cast<int>(shape_dirs.cols()); }
  int expr_dim() const { return static_cast<int>(expr_dirs.cols()); }
  int pose_dim() const { return 3 * n_joints(); }
  int pose_feature_dim() const { return 9 * (n_joints() - 1); }

  void validate() const;  // throws std::invalid_argument

  // Unique undirected mesh edges (computed once, cached).
  const std::vector<std::pair<int, int>>& edges() const;

 private:
  mutable std::vector<std::pair<int, int>> edges_;
};

// Shared optimizable avatar state.
struct AvatarParams {
  VecX beta;
  MatX3 offsets;   // n_v x 3
  MatX3 albedo;    // n_v x 3, clamped to [0,1] at render time
  CanonicalField field;
  DeformationField residual_field;
};

// Per-frame optimizable state.
struct FrameParams {
  VecX theta;  // axis-angle per joint
  VecX psi;
  OrthoCamera camera;
};

// Posed mesh with the per-vertex transform caches used by inverse skinning.
struct PosedMesh {
  const ParametricModel* model = nullptr;
  MatX3 vertices;                          // posed, n_v x 3
  MatX3 shaped;                            // shaped template incl. offsets (pre-skinning)
  std::vector<Mat4> vertex_transforms;     // M_i
  std::vector<Mat4> vertex_transforms_inv; // M_i^{-1}
  std::vector<Mat4> canonical_map;         // A_i = C_i * M_i^{-1}
};

// Canonical-configuration caches shared by every frame of an avatar.
struct CanonicalContext {
  std::vector<Mat4> transforms;      // C_i = M_i at (0, theta_c, 0, 0)
  std::vector<Mat4> transforms_inv;  // C_i^{-1}
  MatX3 vertices;                    // canonically posed template
};
CanonicalContext build_canonical_context(const ParametricModel& model);

Mat3 rodrigues(const Vec3& axis_angle);
// d(loss)/d(axis_angle) given d(loss)/dR.
Vec3 rodrigues_backward(const Vec3& axis_angle, const Mat3& d_rotation);

// Flattened (R_j - I) of the non-root joints, column-major per joint.
VecX pose_feature(const ParametricModel& model, const VecX& theta);

MatX3 shaped_template(const ParametricModel& model, const VecX& beta, const VecX& theta,
                      const VecX& psi, const MatX3& offsets);

// Gradients of a functional of the shaped template w.r.t. the parameters.
struct ShapedGrads {
  VecX d_beta;
  VecX d_theta;
  VecX d_psi;
  MatX3 d_offsets;
};
ShapedGrads shaped_template_backward(const ParametricModel& model, const VecX& theta,
                                     const MatX3& d_shaped);

MatX joints(const ParametricModel& model, const VecX& beta);  // n_k x 3

// Rest-pose-corrected world transforms G_k (identity at theta = 0).
std::vector<Mat4> joint_transforms(const ParametricModel& model, const VecX& theta,
                                   const MatX& rest_joints);

std::vector<Mat4> vertex_transforms(const ParametricModel& model, const VecX& beta,
                                    const VecX& theta, const VecX& psi, const MatX3& offsets);

PosedMesh pose_mesh(const ParametricModel& model, const AvatarParams& avatar,
                    const FrameParams& frame, const CanonicalContext& canon);

// Reverse pass of pose_mesh: maps accumulated gradients on posed vertex
// positions and on the canonical-map matrices A_i back to the parameters.
struct PoseGrads {
  VecX d_beta;
  VecX d_theta;
  VecX d_psi;
  MatX3 d_offsets;
};
PoseGrads pose_mesh_backward(const ParametricModel& model, const AvatarParams& avatar,
                             const FrameParams& frame, const CanonicalContext& canon,
                             const MatX3& d_vertices, const std::vector<Mat34>& d_canonical_map);

// In-repo toy body: capsule torso plus two arm capsules, 4 joints
// (root, spine, two arms), 2 shape dirs, 1 expression dir.
ParametricModel make_toy_model();

// Lat-long capsule mesh along +y, used by the toy body and by tests.
void append_capsule(MatX3* vertices, FaceMat* faces, const Vec3& base, const Vec3& axis_dir,
                    double length, double radius, int segments, int rings);

}  // namespace avatar
