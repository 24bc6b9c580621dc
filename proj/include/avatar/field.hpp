#pragma once

#include <vector>

#include "avatar/types.hpp"

namespace avatar {

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Anything the volumetric renderer can march through.
struct RadianceSource {
  virtual ~RadianceSource() = default;
  virtual void query(const Vec3& x, Vec3* rgb, double* density) const = 0;
};

// One corner-gradient contribution of a field query (flat index within a level).
struct GridCellGrad {
  int32_t level;
  int32_t index;  // node index * 4, channel-0 position
  Vec4 g;         // d/d raw channels (r, g, b, density)
};

// Canonical exterior appearance: L dense grids of raw (r,g,b,density)
// node values, trilinearly interpolated and summed across levels, then
// sigmoid/softplus activations. Outside the box: hard zero.
struct CanonicalField : RadianceSource {
  struct Level {
    int res = 0;                // nodes per axis
    std::vector<double> raw;    // res^3 * 4, node-major, channels innermost
  };

  std::vector<Level> levels;
  Vec3 box_min = Vec3(-1, -1, -1);
  Vec3 box_max = Vec3(1, 1, 1);

  // density_raw_init goes into the coarsest level so the summed raw
  // density starts at density_raw_init (softplus(-3) ~ 0.049 by default).
  static CanonicalField create(const std::vector<int>& resolutions, const Vec3& bmin,
                               const Vec3& bmax, double density_raw_init = -3.0);

  bool inside(const Vec3& x) const {
    return x[0] >= box_min[0] && x[0] <= box_max[0] && x[1] >= box_min[1] &&
           x[1] <= box_max[1] && x[2] >= box_min[2] && x[2] <= box_max[2];
  }

  // Summed raw channels; zero outside the box (*was_inside=false).
  Vec4 query_raw(const Vec3& x, bool* was_inside = nullptr) const;

  void query(const Vec3& x, Vec3* rgb, double* density) const override;

  // Chain-rule: d_raw is the upstream gradient on the summed raw channels.
  // Appends per-node contributions to `out` and (optionally) accumulates
  // the gradient w.r.t. the query point.
  void query_raw_backward(const Vec3& x, const Vec4& d_raw, std::vector<GridCellGrad>* out,
                          Vec3* d_x) const;

  int64_t param_count() const;
  // Flat parameter order: levels in order, node-major, channels innermost.
  void to_flat(VecX* out) const;
  void from_flat(const VecX& in);
};

}  // namespace avatar
