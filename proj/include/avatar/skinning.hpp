#pragma once

#include <array>
#include <vector>

#include "avatar/deformation.hpp"
#include "avatar/geometry.hpp"
#include "avatar/types.hpp"

namespace avatar {

struct SkinningConfig {
  double sigma = 0.1;  // kernel width of the skinning-weight blend
  int k = 6;           // neighbors per query
};

constexpr int kMaxQueryNeighbors = 32;

// Exact linear scan; ties broken by lower index. The oracle path.
std::vector<int> nearest_neighbors(const Vec3& x, const MatX3& verts, int k);

// k-NN facade: exact scan below `grid_threshold` vertices, uniform-grid
// acceleration above it. Both paths return identical results.
class NeighborIndex {
 public:
  explicit NeighborIndex(const MatX3& verts, int grid_threshold = 5000);

  // Writes k indices sorted by (distance, index); k <= kMaxQueryNeighbors.
  void query(const Vec3& x, int k, int* out) const;
  bool uses_grid() const { return use_grid_; }

 private:
  const MatX3* verts_;
  bool use_grid_ = false;
  Vec3 origin_ = Vec3::Zero();
  double cell_ = 1.0;
  int dims_[3] = {0, 0, 0};
  std::vector<int> cell_start_;  // CSR layout
  std::vector<int> cell_items_;
};

// alpha_i ~ exp(-(1/2 sigma^2) |x - v_i| |w_nn - w_i|), normalized.
// neighbors[0] must be the nearest vertex. Falls back to uniform weights
// when the kernel degenerates (all terms underflow to zero).
void blend_alpha(const Vec3& x, const int* neighbors, int n, const MatX3& posed_verts,
                 const MatX& skin_weights, double sigma, double* alpha_out);

// d(loss)/d(x) and per-neighbor vertex-position gradients for blend_alpha.
void blend_alpha_backward(const Vec3& x, const int* neighbors, int n, const MatX3& posed_verts,
                          const MatX& skin_weights, double sigma, const double* d_alpha,
                          Vec3* d_x, std::vector<std::pair<int, Vec3>>* d_vertex);

// x_c = sum_i alpha_i * A_i * x (homogeneous), A_i the cached canonical map.
Vec3 inverse_skin(const Vec3& x, const PosedMesh& mesh, const int* neighbors,
                  const double* alpha, int n);

// Observation point -> canonical query (neighbors, kernel weights, inverse
// skinning, optional learned residual displacement).
struct CanonicalQuery {
  Vec3 x_p = Vec3::Zero();
  Vec3 x_c = Vec3::Zero();
  Vec3 x_c_tilde = Vec3::Zero();
  int n = 0;
  std::array<int, kMaxQueryNeighbors> neighbors{};
  std::array<double, kMaxQueryNeighbors> alpha{};
};

CanonicalQuery canonicalize(const Vec3& x_p, const PosedMesh& mesh, const NeighborIndex& index,
                            const SkinningConfig& cfg, const DeformationField* residual);

// Sparse gradient sinks filled by the canonicalize backward pass.
struct SkinGradSink {
  std::vector<std::pair<int, Vec3>>* d_vertex = nullptr;
  std::vector<std::pair<int, Mat34>>* d_canonical = nullptr;
  VecX* d_residual_params = nullptr;
};

// Returns d(loss)/d(x_p). Recomputes the cheap intermediate values.
Vec3 canonicalize_backward(const CanonicalQuery& q, const PosedMesh& mesh,
                           const SkinningConfig& cfg, const DeformationField* residual,
                           const Vec3& d_x_c_tilde, SkinGradSink* sink);

// Forward map for canonical points (the inverse of inverse_skin up to
// neighbor-set consistency): neighbors found among canonically posed
// vertices, transform sum_i alpha_i * M_i * C_i^{-1}.
Vec3 forward_skin(const Vec3& x_c, const PosedMesh& mesh, const CanonicalContext& canon,
                  const NeighborIndex& canonical_index, const SkinningConfig& cfg);

}  // namespace avatar
