#pragma once

#include <string>
#include <vector>

#include "avatar/geometry.hpp"
#include "avatar/optimizer.hpp"

namespace avatar {

struct GradCheckOptions {
  int configurations = 100;
  double tol = 1e-3;
  double step = 1e-4;
  uint64_t seed = 42;
  int rays = 8;          // stable rays per configuration
  int n_bins = 32;
  std::vector<int> grid_levels = {8, 16};
  Vec3 box_min = Vec3(-0.9, -0.9, -0.9);
  Vec3 box_max = Vec3(0.9, 0.9, 0.9);
};

struct GradCheckReport {
  std::string objective;  // "render", "recon", "ext", ...
  std::string group;      // "beta", "theta", ...
  double max_rel_err = 0;
  int checks = 0;
  bool pass = true;
};

// Central finite differences against the analytic backward pass, for the
// renderer objective and each differentiable loss term, w.r.t. every
// parameter group. Rays near silhouette edges or unstable neighbor sets are
// re-drawn (discrete-switch boundaries are excluded by contract).
// When `base` is non-null its parameters seed every configuration; otherwise
// smooth random fields and small random parameters are generated per config.
std::vector<GradCheckReport> run_gradcheck(const ParametricModel& model,
                                           const AvatarParams* base,
                                           const GradCheckOptions& opts);

bool gradcheck_passed(const std::vector<GradCheckReport>& reports);

}  // namespace avatar
