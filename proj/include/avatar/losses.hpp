#pragma once

#include <span>
#include <vector>

#include "avatar/geometry.hpp"
#include "avatar/image.hpp"
#include "avatar/types.hpp"

namespace avatar {

struct LossWeights {
  double pixel = 1.0;
  double semantic = 0.0005;
  double ext = 0.5;
  double silhouette = 0.001;
  double int_mask = 30.0;
  double skin = 1.0;
  double inside = 40.0;
  double skin_inside = 0.01;
  double edge = 500.0;
  double offset = 400.0;
  Vec3 offset_region_ratio = Vec3(2.0, 3.0, 12.0);  // body : face : hands
  double huber_delta = 1.0;

  static LossWeights body_preset();
  static LossWeights head_preset();
  void validate() const;
};

// Binary segmentation targets: S full avatar, S_b visible interior skin,
// S_e exterior (clothing/hair).
struct MaskSet {
  Image S;
  Image S_b;
  Image S_e;
  void validate() const;  // S_b and S_e disjoint, S covers their union
};

double huber(double x, double delta);
double huber_grad(double x, double delta);

struct LossBreakdown {
  double pixel = 0, semantic = 0, ext = 0;
  double silhouette = 0, int_mask = 0, skin = 0, inside = 0, skin_inside = 0;
  double edge = 0, offset = 0;
  double recon() const { return pixel + semantic; }
  double interior() const { return silhouette + int_mask + skin + inside + skin_inside; }
  double reg() const { return edge + offset; }
  double total() const { return recon() + ext + interior() + reg(); }
  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown& operator*=(double s);
};

// lambda_pixel * huber(render - target), mean over elements. The semantic
// term is handled separately (patch surrogate) and is zero by default.
double recon_pixel_loss(std::span<const Vec3> render, std::span<const Vec3> target,
                        const LossWeights& w, std::vector<Vec3>* d_render);

// Normalized 5x5-patch correlation distance, mean over channels; the
// optional local-contrast stand-in for the semantic loss.
double patch_correlation_distance(const Vec3* render25, const Vec3* target25,
                                  Vec3* d_render25);

// lambda_ext * || s_v - S_e ||_{1,1}, mean-reduced.
double exterior_loss(std::span<const double> s_v, std::span<const double> mask_e,
                     const LossWeights& w, std::vector<double>* d_s_v);

struct InteriorBreakdown {
  double silhouette = 0, int_mask = 0, skin = 0, inside = 0, skin_inside = 0;
  double total() const { return silhouette + int_mask + skin + inside + skin_inside; }
};

// The five interior terms over a sampled ray batch. The hard silhouette
// carries no gradient; mesh-color gradients flow through d_mesh_rgb and the
// mean-skin-color chain through d_c_skin.
InteriorBreakdown interior_losses(std::span<const double> sil, std::span<const Vec3> mesh_rgb,
                                  std::span<const Vec3> target, std::span<const double> mask_s,
                                  std::span<const double> mask_b, std::span<const double> mask_e,
                                  const Vec3& c_skin, const LossWeights& w,
                                  std::vector<Vec3>* d_mesh_rgb, Vec3* d_c_skin);

// Mean clamped albedo over a vertex region; falls back to the global mean
// (with a warning) when the region is empty. d_albedo gets the uniform
// chain of an upstream gradient on the mean color.
Vec3 region_mean_albedo(const ParametricModel& model, const MatX3& albedo, int region,
                        bool* used_fallback);
void region_mean_albedo_backward(const ParametricModel& model, const MatX3& albedo, int region,
                                 const Vec3& d_mean, MatX3* d_albedo);

struct RegularizationResult {
  double edge = 0;
  double offset = 0;
};

// Relative edge loss between the shaped mesh with and without offsets plus
// the region-weighted squared offset penalty (ratios normalized to unit
// mean over vertices).
RegularizationResult regularization(const MatX3& shaped_with, const MatX3& shaped_without,
                                    const std::vector<std::pair<int, int>>& edges,
                                    const MatX3& offsets, const std::vector<int>& region_labels,
                                    const LossWeights& w, MatX3* d_shaped_with,
                                    MatX3* d_shaped_without, MatX3* d_offsets);

}  // namespace avatar
