#pragma once

#include "avatar/types.hpp"

namespace avatar {

// Scaled orthographic camera: ndc = scale * world_xy + translation.
// Rays run along -z from z = 0; near/far are distances along the ray.
struct OrthoCamera {
  double scale = 1.0;
  Vec2 translation = Vec2::Zero();
  int width = 0;
  int height = 0;
};

struct RayBounds {
  double near = -0.6;
  double far = 0.6;
};

inline RayBounds body_bounds() { return {-0.6, 0.6}; }
inline RayBounds head_bounds() { return {-1.5, 1.5}; }

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 dir = Vec3(0, 0, -1);
  double t_near = 0.0;
  double t_far = 0.0;
};

// Pixel centers map to ndc in [-1,1]^2, +y up.
Ray pixel_ray(const OrthoCamera& cam, double px, double py, const RayBounds& bounds);

}  // namespace avatar
