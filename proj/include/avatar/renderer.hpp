#pragma once

#include <optional>
#include <vector>

#include "avatar/camera.hpp"
#include "avatar/field.hpp"
#include "avatar/image.hpp"
#include "avatar/skinning.hpp"
#include "avatar/types.hpp"

namespace avatar {

struct Hit {
  double t = 0.0;
  int face = -1;
  double u = 0.0;  // barycentric of vertex 1
  double v = 0.0;  // barycentric of vertex 2
};

// Double-sided Moller-Trumbore; returns false for parallel or outside hits.
bool intersect_triangle(const Vec3& origin, const Vec3& dir, const Vec3& v0, const Vec3& v1,
                        const Vec3& v2, double* t, double* u, double* v);

struct TriangleGrads {
  Vec3 d_origin = Vec3::Zero();
  Vec3 d_v0 = Vec3::Zero();
  Vec3 d_v1 = Vec3::Zero();
  Vec3 d_v2 = Vec3::Zero();
};
// Reverse pass of intersect_triangle w.r.t. origin and triangle vertices
// (direction held fixed), given upstream gradients on (t, u, v).
TriangleGrads intersect_triangle_backward(const Vec3& origin, const Vec3& dir, const Vec3& v0,
                                          const Vec3& v1, const Vec3& v2, double d_t, double d_u,
                                          double d_v);

// Axis-aligned BVH over faces, leaf size <= 4. Rebuilt whenever the mesh
// moves; nearest hit ties broken by lower face index (matches the
// exhaustive scan exactly).
class Bvh {
 public:
  void build(const MatX3& verts, const FaceMat& faces, int leaf_size = 4);
  bool built() const { return !nodes_.empty(); }
  std::optional<Hit> intersect(const MatX3& verts, const FaceMat& faces, const Ray& ray) const;

 private:
  struct Node {
    Vec3 lo, hi;
    int left = -1, right = -1;  // internal
    int start = 0, count = 0;   // leaf when count > 0
  };
  std::vector<Node> nodes_;
  std::vector<int> order_;
  int build_node(const MatX3& verts, const FaceMat& faces, std::vector<int>& ids, int begin,
                 int end, int leaf_size, std::vector<Vec3>& centroids);
};

// Exhaustive all-triangle scan; the oracle the BVH is tested against.
std::optional<Hit> intersect_brute_force(const MatX3& verts, const FaceMat& faces,
                                         const Ray& ray);

// Immutable per-frame snapshot the renderer marches through.
struct PosedScene {
  const ParametricModel* model = nullptr;
  const PosedMesh* mesh = nullptr;
  const Bvh* bvh = nullptr;
  const NeighborIndex* neighbors = nullptr;
  const MatX3* albedo = nullptr;
  SkinningConfig skin;
  const DeformationField* residual = nullptr;  // null while frozen
};

struct RenderOptions {
  int n_bins = 64;
  bool jitter = false;   // stratified jitter within bins (training)
  uint64_t seed = 0;     // per-ray jitter stream
};

struct RaySample {
  double t = 0.0;
  double frac = 0.0;  // (t - t_near) / (t_end - t_near)
  CanonicalQuery q;
  Vec3 rgb = Vec3::Zero();
  double sigma = 0.0;
  bool inside = true;  // canonical point inside the field support
};

struct RayOutputs {
  Vec3 rgb = Vec3::Zero();
  double s_v = 0.0;
  double silhouette = 0.0;  // hard 0/1
  Vec3 mesh_rgb = Vec3::Zero();
};

struct RayCache {
  bool valid = false;
  Ray ray;
  std::optional<Hit> hit;
  double t_end = 0.0;
  double dt = 0.0;
  int n_field_samples = 0;
  std::vector<RaySample> samples;  // field samples, plus final color sample when no hit
  Vec3 final_color = Vec3::Zero();
  RayOutputs out;
};

// Mesh-integrated volume rendering of one ray. The ray is truncated at the
// first mesh hit; per-bin field contributions and the residual transmittance
// weight on the final color sum to exactly one.
RayOutputs render_ray(const PosedScene& scene, const RadianceSource& field, const Ray& ray,
                      const RenderOptions& opts, RayCache* cache);

struct RayUpstream {
  Vec3 d_rgb = Vec3::Zero();
  double d_s_v = 0.0;
  Vec3 d_mesh_rgb = Vec3::Zero();
};

// Per-ray sparse gradient contributions; reduced by the caller in ray order
// so runs are bit-reproducible regardless of thread count.
struct RayGrads {
  Vec3 d_origin = Vec3::Zero();
  std::vector<std::pair<int, Vec3>> d_vertex;
  std::vector<std::pair<int, Mat34>> d_canonical;
  std::vector<std::pair<int, Vec3>> d_albedo;
  std::vector<GridCellGrad> d_grid;
  VecX d_residual;  // sized on demand when the residual field is active

  void clear() {
    d_origin.setZero();
    d_vertex.clear();
    d_canonical.clear();
    d_albedo.clear();
    d_grid.clear();
    if (d_residual.size()) d_residual.setZero();
  }
};

void render_ray_backward(const PosedScene& scene, const CanonicalField& field,
                         const RayCache& cache, const RayUpstream& up, RayGrads* out);

// d(loss)/d(camera scale, translation) from a gradient on the ray origin.
void pixel_ray_backward(const OrthoCamera& cam, double px, double py, const Vec3& d_origin,
                        double* d_scale, Vec2* d_translation);

struct RayJob {
  Ray ray;
  uint64_t seed = 0;
  int px = 0, py = 0;
};

// Batch kernel. `parallel` switches between the OpenMP path and the serial
// reference; outputs are bit-identical between the two.
void render_ray_batch(const PosedScene& scene, const RadianceSource& field,
                      const std::vector<RayJob>& jobs, const RenderOptions& opts,
                      std::vector<RayOutputs>* outputs, std::vector<RayCache>* caches,
                      bool parallel);

struct FrameRender {
  Image rgb;         // w x h x 3
  Image s_v;         // w x h x 1
  Image silhouette;  // w x h x 1
  Image mesh_rgb;    // w x h x 3
};

FrameRender render_frame(const PosedScene& scene, const RadianceSource& field,
                         const OrthoCamera& cam, const RayBounds& bounds,
                         const RenderOptions& opts, bool parallel = true);

// Per-pixel ray cast of the mesh alone: interpolated-albedo color image and
// the hard silhouette, sharing one hit buffer.
struct RasterResult {
  Image mesh_rgb;
  Image silhouette;
};
RasterResult rasterize(const PosedScene& scene, const OrthoCamera& cam, const RayBounds& bounds,
                       bool parallel = true);

}  // namespace avatar
