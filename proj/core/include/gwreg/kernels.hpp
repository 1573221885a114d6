#pragma once

#include <cstdint>

namespace gwreg {

enum class Boundary { clamp, zero };

namespace kernels {

// Single-item routines on channel-major buffers ({C,H,W}); displacement
// fields are {2,H,W} with the dy plane first. Batched callers parallelize
// over items.

void warp_forward(const double* img, int c, int h, int w, const double* disp, Boundary b,
                  double* out);
/// Accumulates into d_img / d_disp; either may be nullptr.
void warp_backward(const double* img, int c, int h, int w, const double* disp, Boundary b,
                   const double* d_out, double* d_img, double* d_disp);

/// align_corners=false (pixel-area) convention; same-size resize is identity.
void resize_forward(const double* in, int c, int hi, int wi, int ho, int wo, double* out);
void resize_backward(int c, int hi, int wi, int ho, int wo, const double* d_out, double* d_in);

/// Per-pixel determinant of the spatial Jacobian of omega + disp(omega);
/// central differences in the interior, one-sided at borders. out is {H,W}.
void jacobian_determinant(const double* disp, int h, int w, double* out);

/// Nearest-neighbor warp for integer label grids.
void warp_nearest_u8(const uint8_t* img, int h, int w, const double* disp, uint8_t* out);

}  // namespace kernels
}  // namespace gwreg
