#pragma once

#include "avatar/dataset.hpp"
#include "avatar/field.hpp"
#include "avatar/geometry.hpp"

namespace avatar {

// Analytic exterior ground truth: a constant-color density shell wrapped
// around the torso in canonical space, with smoothstep edge falloff.
struct ShellSpec {
  double y_min = -0.35;
  double y_max = 0.18;
  double r_inner = 0.215;
  double thickness = 0.05;
  double density = 60.0;
  double edge_softness = 0.012;
  Vec3 color = Vec3(0.25, 0.35, 0.85);
};

struct AnalyticShell : RadianceSource {
  ShellSpec spec;
  explicit AnalyticShell(const ShellSpec& s) : spec(s) {}
  void query(const Vec3& x, Vec3* rgb, double* density) const override;
};

struct SceneSpec {
  int n_frames = 25;
  int width = 64;
  int height = 64;
  uint64_t seed = 1234;
  VecX beta_true = VecX::Zero(2);
  VecX psi_amplitude = VecX::Zero(1);
  double camera_scale = 1.3;
  double camera_jitter = 0.01;
  double turntable_turns = 1.0;   // root rotations over the sequence
  double arm_swing = 0.25;        // added to the canonical arm pose
  double spine_sway = 0.08;
  ShellSpec shell;
  int n_bins = 64;
  std::string preset = "body";

  nlohmann::json to_json() const;
  static SceneSpec from_json(const nlohmann::json& j);
};

// True per-vertex albedo of the toy avatar (smooth skin-tone gradient).
MatX3 toy_true_albedo(const ParametricModel& model);

FrameParams scene_frame_params(const SceneSpec& spec, const ParametricModel& model, int frame);

// Renders the toy avatar with the analytic exterior through the full
// renderer; masks are derived from exterior-only transmittance and mesh
// visibility. Bit-reproducible from (spec, seed).
Dataset generate(const ParametricModel& model, const SceneSpec& spec);

enum class CorruptMode { kExterior, kInterior, kBoth };

// Flips mask pixels inside the boundary band (pixels within `band` of a
// mask edge) with the given probability.
Dataset corrupt_masks(const Dataset& ds, CorruptMode mode, double rate, uint64_t seed,
                      int band = 2);

// Gaussian pose noise on the listed frames (pose-refinement ablations).
void perturb_poses(Dataset* ds, double sigma, uint64_t seed, const std::vector<int>& frame_ids);

}  // namespace avatar
