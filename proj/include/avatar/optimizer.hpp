#pragma once

#include <functional>
#include <string>
#include <vector>

#include "avatar/dataset.hpp"
#include "avatar/geometry.hpp"
#include "avatar/losses.hpp"
#include "avatar/metrics.hpp"

namespace avatar {

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  VecX m, v;
  int64_t t = 0;
};

// Bias-corrected Adam on one parameter group. Throws numerical_error naming
// the group when the gradient is not finite.
void adam_step(Eigen::Ref<VecX> param, const VecX& grad, AdamState* state, const AdamParams& ap,
               const std::string& group_name);

struct TrainConfig {
  std::string preset = "body";  // body | head
  int rays_per_step = 512;
  int frames_per_batch = 1;
  int stage1_steps = 1500;
  int stage2_steps = 500;
  double lr_field = 1e-2;
  double lr_albedo = 1e-3;
  double lr_offsets = 1e-3;
  double lr_beta = 1e-3;
  double lr_residual = 1e-3;
  double lr_pose = 1e-4;  // per-frame theta / psi / camera
  int n_bins = 64;
  std::vector<int> grid_levels = {16, 32, 64};
  Vec3 box_min = Vec3(-0.9, -0.9, -0.9);
  Vec3 box_max = Vec3(0.9, 0.9, 0.9);
  double sigma = 0.1;
  int k = 6;
  uint64_t seed = 0;
  int holdout_stride = 0;  // every n-th frame held out, 0 = none
  bool optimize_pose = true;
  bool optimize_beta = true;
  bool optimize_offsets = true;
  bool optimize_albedo = true;
  bool optimize_field = true;
  bool semantic_surrogate = false;
  int patches_per_step = 6;
  int residual_hidden = 64;
  double residual_scale = 0.1;
  int checkpoint_every = 500;
  int log_every = 25;
  LossWeights weights = LossWeights::body_preset();
  RayBounds bounds = body_bounds();

  void apply_preset();
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  int total_steps() const { return stage1_steps + stage2_steps; }
  int skin_region() const { return preset == "head" ? kRegionFace : kRegionHands; }
};

struct TrainState {
  AvatarParams avatar;
  std::vector<FrameParams> frames;
  int64_t step = 0;
  int stage = 1;
  uint64_t seed = 0;
  AdamState adam_beta, adam_offsets, adam_albedo, adam_field, adam_residual;
  std::vector<AdamState> adam_theta, adam_psi, adam_camera;
};

TrainState init_train_state(const ParametricModel& model, const Dataset& ds,
                            const TrainConfig& cfg);

// Frame indices used for optimization / held out, per holdout_stride.
void split_frames(const Dataset& ds, const TrainConfig& cfg, std::vector<int>* train_ids,
                  std::vector<int>* holdout_ids);

// One optimization step (sample rays, render, losses, backward, Adam).
// Deterministic given (state->seed, state->step).
LossBreakdown train_step(const ParametricModel& model, const CanonicalContext& canon,
                         const Dataset& ds, const std::vector<int>& train_frames,
                         const TrainConfig& cfg, TrainState* state);

struct TrainResult {
  TrainState state;
  std::vector<LossBreakdown> loss_log;  // one entry per step
};

// Two-stage optimization. Writes JSON-line loss logs to log_path and
// checkpoints to ckpt_path when non-empty; on divergence the last good
// snapshot is saved before the error propagates.
TrainResult train(const ParametricModel& model, const Dataset& ds, const TrainConfig& cfg,
                  const std::string& log_path = "", const std::string& ckpt_path = "",
                  const TrainState* resume = nullptr);

struct FrameMetrics {
  double l1 = 0, psnr = 0, ssim = 0;
  double l1_avatar = 0, psnr_avatar = 0;  // restricted to the avatar mask
  double iou_exterior = 0;                // rendered S_v>0.5 vs true S_e
  double iou_silhouette = 0;              // mesh silhouette vs true interior
};

// Renders the listed frames with the given per-frame parameters and compares
// against the stored ground truth. The true interior silhouette is
// re-rasterized from the dataset's true parameters.
std::vector<FrameMetrics> evaluate(const ParametricModel& model, const CanonicalContext& canon,
                                   const AvatarParams& avatar,
                                   const std::vector<FrameParams>& render_params,
                                   const Dataset& ds, const std::vector<int>& frame_ids,
                                   const TrainConfig& cfg, bool use_residual);

FrameMetrics mean_metrics(const std::vector<FrameMetrics>& all);

}  // namespace avatar
