#pragma once

#include <cstdint>
#include <vector>

#include "gwreg/autodiff.hpp"
#include "gwreg/kernels.hpp"
#include "gwreg/tensor.hpp"

namespace gwreg::diffeo {

/// Stationary velocity field, {2,H,W} with the dy plane first, pixel units
/// of its own grid.
struct VelocityField {
  Tensor values;

  VelocityField() = default;
  explicit VelocityField(Tensor v);

  int height() const { return values.dim(1); }
  int width() const { return values.dim(2); }
};

/// Dense transform mapping(omega) = omega + displacement(omega), pixel units.
struct TransformField {
  Tensor displacement;

  TransformField() = default;
  explicit TransformField(Tensor d);

  static TransformField identity(int h, int w) { return TransformField(Tensor({2, h, w})); }

  int height() const { return displacement.dim(1); }
  int width() const { return displacement.dim(2); }
};

/// exp(v) by scaling and squaring: v is halved 2^steps times, then the small
/// transform is self-composed steps times.
TransformField integrate_velocity(const VelocityField& v, int steps);

/// integrate_velocity(-v, steps).
TransformField inverse_transform(const VelocityField& v, int steps);

/// Bilinear resampling of image ({H,W} or {C,H,W}) at omega + displacement.
Tensor warp(const Tensor& image, const TransformField& t, Boundary boundary);

/// result(omega) = outer(inner(omega)).
TransformField compose(const TransformField& outer, const TransformField& inner);

/// Per-pixel determinant of the spatial Jacobian of the mapping; {H,W}.
Tensor jacobian_determinant(const TransformField& t);

/// Bilinear spatial resampling plus per-axis magnitude rescaling (velocities
/// are expressed in pixel units of their own grid).
VelocityField resize_velocity(const VelocityField& v, int new_h, int new_w);
TransformField resize_transform(const TransformField& t, int new_h, int new_w);

/// Numerical inverse of an arbitrary displacement field by fixed-point
/// iteration d_inv <- -warp(d, d_inv). Converges for small deformations.
TransformField invert_displacement(const TransformField& t, int iterations = 30);

/// Nearest-neighbor label propagation: labels are {H,W} row-major.
std::vector<uint8_t> warp_nearest(const std::vector<uint8_t>& labels, int h, int w,
                                  const TransformField& t);

/// Fraction of interior pixels (margin px from every border) with positive
/// Jacobian determinant.
double positive_jacobian_fraction(const TransformField& t, int margin = 4);

// Differentiable variants on batched {N,2,H,W} flow tensors.
ad::Var integrate_velocity_ad(const ad::Var& v, int steps);
ad::Var compose_ad(const ad::Var& outer, const ad::Var& inner);
/// Resize + magnitude rescale for batched velocity/displacement tensors.
ad::Var resize_flow_ad(const ad::Var& flow, int new_h, int new_w);

}  // namespace gwreg::diffeo
