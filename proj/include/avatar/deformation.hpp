#pragma once

#include "avatar/types.hpp"

namespace avatar {

// Learnable non-rigid residual: (canonical point, anchor point) -> canonical
// displacement. Two tanh hidden layers; the last layer is zero-initialized so
// the residual starts as the exact zero map.
struct DeformationField {
  MatX w1;  // hidden x 6
  VecX b1;
  MatX w2;  // hidden x hidden
  VecX b2;
  MatX w3;  // 3 x hidden
  VecX b3;
  double output_scale = 0.1;

  static DeformationField create(int hidden, uint64_t seed, double output_scale = 0.1);

  int hidden() const { return static_cast<int>(b1.size()); }
  int64_t param_count() const;
  void to_flat(VecX* out) const;
  void from_flat(const VecX& in);

  Vec3 eval(const Vec6& in) const;

  // Backward for one evaluation: accumulates parameter gradients into
  // d_params (flat layout, sized param_count) and returns the gradient
  // w.r.t. the 6-d input. Recomputes the forward activations internally.
  Vec6 eval_backward(const Vec6& in, const Vec3& d_out, VecX* d_params) const;
};

}  // namespace avatar
