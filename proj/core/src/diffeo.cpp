#include "gwreg/diffeo.hpp"

#include <cmath>

#include "gwreg/error.hpp"

namespace gwreg::diffeo {

namespace {

void check_flow_shape(const Tensor& t, const char* what) {
  if (t.rank() != 3 || t.dim(0) != 2)
    throw InvalidInput(std::string(what) + ": expected {2,H,W}, got " +
                       Tensor::shape_str(t.shape()));
}

}  // namespace

VelocityField::VelocityField(Tensor v) : values(std::move(v)) {
  check_flow_shape(values, "VelocityField");
  if (!values.all_finite()) throw InvalidInput("VelocityField: non-finite components");
}

TransformField::TransformField(Tensor d) : displacement(std::move(d)) {
  check_flow_shape(displacement, "TransformField");
  if (!displacement.all_finite()) throw InvalidInput("TransformField: non-finite components");
}

TransformField integrate_velocity(const VelocityField& v, int steps) {
  if (steps < 1) throw InvalidInput("integrate_velocity: steps must be >= 1");
  const int h = v.height(), w = v.width();
  Tensor d(v.values.shape());
  const double scale = std::ldexp(1.0, -steps);  // 2^-steps
  for (int64_t i = 0; i < d.numel(); ++i) d[i] = v.values[i] * scale;
  Tensor warped({2, h, w});
  for (int s = 0; s < steps; ++s) {
    kernels::warp_forward(d.data(), 2, h, w, d.data(), Boundary::clamp, warped.data());
    for (int64_t i = 0; i < d.numel(); ++i) d[i] += warped[i];
  }
  return TransformField(std::move(d));
}

TransformField inverse_transform(const VelocityField& v, int steps) {
  Tensor neg(v.values.shape());
  for (int64_t i = 0; i < neg.numel(); ++i) neg[i] = -v.values[i];
  return integrate_velocity(VelocityField(std::move(neg)), steps);
}

Tensor warp(const Tensor& image, const TransformField& t, Boundary boundary) {
  const int c = image.rank() == 3 ? image.dim(0) : 1;
  const int h = image.rank() == 3 ? image.dim(1) : image.dim(0);
  const int w = image.rank() == 3 ? image.dim(2) : image.dim(1);
  if (image.rank() != 2 && image.rank() != 3)
    throw InvalidInput("warp: image must be {H,W} or {C,H,W}");
  if (h != t.height() || w != t.width())
    throw InvalidInput("warp: image and transform spatial shapes differ");
  Tensor out(image.shape());
  kernels::warp_forward(image.data(), c, h, w, t.displacement.data(), boundary, out.data());
  return out;
}

TransformField compose(const TransformField& outer, const TransformField& inner) {
  if (!(outer.displacement.shape() == inner.displacement.shape()))
    throw InvalidInput("compose: shape mismatch");
  const int h = outer.height(), w = outer.width();
  Tensor out({2, h, w});
  kernels::warp_forward(outer.displacement.data(), 2, h, w, inner.displacement.data(),
                        Boundary::clamp, out.data());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += inner.displacement[i];
  return TransformField(std::move(out));
}

Tensor jacobian_determinant(const TransformField& t) {
  Tensor out({t.height(), t.width()});
  kernels::jacobian_determinant(t.displacement.data(), t.height(), t.width(), out.data());
  return out;
}

namespace {

Tensor resize_flow(const Tensor& flow, int new_h, int new_w) {
  const int h = flow.dim(1), w = flow.dim(2);
  Tensor out({2, new_h, new_w});
  kernels::resize_forward(flow.data(), 2, h, w, new_h, new_w, out.data());
  const double sy = double(new_h) / h, sx = double(new_w) / w;
  const int64_t plane = int64_t(new_h) * new_w;
  for (int64_t i = 0; i < plane; ++i) out[i] *= sy;
  for (int64_t i = plane; i < 2 * plane; ++i) out[i] *= sx;
  return out;
}

}  // namespace

VelocityField resize_velocity(const VelocityField& v, int new_h, int new_w) {
  if (new_h <= 0 || new_w <= 0) throw InvalidInput("resize_velocity: bad target shape");
  return VelocityField(resize_flow(v.values, new_h, new_w));
}

TransformField resize_transform(const TransformField& t, int new_h, int new_w) {
  if (new_h <= 0 || new_w <= 0) throw InvalidInput("resize_transform: bad target shape");
  return TransformField(resize_flow(t.displacement, new_h, new_w));
}

TransformField invert_displacement(const TransformField& t, int iterations) {
  const int h = t.height(), w = t.width();
  Tensor inv({2, h, w});
  Tensor warped({2, h, w});
  for (int it = 0; it < iterations; ++it) {
    kernels::warp_forward(t.displacement.data(), 2, h, w, inv.data(), Boundary::clamp,
                          warped.data());
    for (int64_t i = 0; i < inv.numel(); ++i) inv[i] = -warped[i];
  }
  return TransformField(std::move(inv));
}

std::vector<uint8_t> warp_nearest(const std::vector<uint8_t>& labels, int h, int w,
                                  const TransformField& t) {
  if (int64_t(labels.size()) != int64_t(h) * w)
    throw InvalidInput("warp_nearest: label grid size mismatch");
  if (h != t.height() || w != t.width())
    throw InvalidInput("warp_nearest: transform spatial shape mismatch");
  std::vector<uint8_t> out(labels.size());
  kernels::warp_nearest_u8(labels.data(), h, w, t.displacement.data(), out.data());
  return out;
}

double positive_jacobian_fraction(const TransformField& t, int margin) {
  Tensor det = jacobian_determinant(t);
  const int h = t.height(), w = t.width();
  int64_t total = 0, positive = 0;
  for (int y = margin; y < h - margin; ++y)
    for (int x = margin; x < w - margin; ++x) {
      ++total;
      if (det[int64_t(y) * w + x] > 0.0) ++positive;
    }
  return total > 0 ? double(positive) / double(total) : 1.0;
}

ad::Var integrate_velocity_ad(const ad::Var& v, int steps) {
  if (steps < 1) throw InvalidInput("integrate_velocity_ad: steps must be >= 1");
  ad::Var d = ad::mul_scalar(v, std::ldexp(1.0, -steps));
  for (int s = 0; s < steps; ++s) d = ad::add(d, ad::warp(d, d, Boundary::clamp));
  return d;
}

ad::Var compose_ad(const ad::Var& outer, const ad::Var& inner) {
  return ad::add(inner, ad::warp(outer, inner, Boundary::clamp));
}

ad::Var resize_flow_ad(const ad::Var& flow, int new_h, int new_w) {
  const auto& s = flow.val().shape();
  const double sy = double(new_h) / s[2], sx = double(new_w) / s[3];
  ad::Var resized = ad::bilinear_resize(flow, new_h, new_w);
  if (sy == 1.0 && sx == 1.0) return resized;
  return ad::scale_channels(resized, {sy, sx});
}

}  // namespace gwreg::diffeo
