#include "gwreg/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace gwreg::kernels {

namespace {

struct BilinearTaps {
  int y0, x0;
  double fy, fx;  // fractional weights toward (y0+1, x0+1)
  bool dy_active, dx_active;
};

// Tap layout for clamp boundary: coordinates are clamped to the valid range
// and the base index pinned to [0, n-2] so all four taps stay in range.
// *_active reports whether the coordinate still moves the output (false once
// clamped), which is what the displacement gradient needs.
inline void taps_clamp(double ys, double xs, int h, int w, BilinearTaps& t) {
  t.dy_active = ys > 0.0 && ys < h - 1;
  t.dx_active = xs > 0.0 && xs < w - 1;
  ys = std::clamp(ys, 0.0, double(h - 1));
  xs = std::clamp(xs, 0.0, double(w - 1));
  t.y0 = std::min(int(ys), h - 2);
  t.x0 = std::min(int(xs), w - 2);
  if (h == 1) t.y0 = 0;
  if (w == 1) t.x0 = 0;
  t.fy = ys - t.y0;
  t.fx = xs - t.x0;
}

}  // namespace

void warp_forward(const double* img, int c, int h, int w, const double* disp, Boundary b,
                  double* out) {
  const double* dy = disp;
  const double* dx = disp + int64_t(h) * w;
  const int64_t plane = int64_t(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int64_t p = int64_t(y) * w + x;
      const double ys = y + dy[p];
      const double xs = x + dx[p];
      if (b == Boundary::clamp) {
        BilinearTaps t;
        taps_clamp(ys, xs, h, w, t);
        const double w00 = (1 - t.fy) * (1 - t.fx), w01 = (1 - t.fy) * t.fx;
        const double w10 = t.fy * (1 - t.fx), w11 = t.fy * t.fx;
        const int y1 = std::min(t.y0 + 1, h - 1), x1 = std::min(t.x0 + 1, w - 1);
        for (int ch = 0; ch < c; ++ch) {
          const double* im = img + ch * plane;
          out[ch * plane + p] = w00 * im[int64_t(t.y0) * w + t.x0] +
                                w01 * im[int64_t(t.y0) * w + x1] +
                                w10 * im[int64_t(y1) * w + t.x0] + w11 * im[int64_t(y1) * w + x1];
        }
      } else {
        const int y0 = int(std::floor(ys)), x0 = int(std::floor(xs));
        const double fy = ys - y0, fx = xs - x0;
        const double wt[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
        const int yy[4] = {y0, y0, y0 + 1, y0 + 1};
        const int xx[4] = {x0, x0 + 1, x0, x0 + 1};
        for (int ch = 0; ch < c; ++ch) {
          const double* im = img + ch * plane;
          double v = 0.0;
          for (int k = 0; k < 4; ++k)
            if (yy[k] >= 0 && yy[k] < h && xx[k] >= 0 && xx[k] < w)
              v += wt[k] * im[int64_t(yy[k]) * w + xx[k]];
          out[ch * plane + p] = v;
        }
      }
    }
  }
}

void warp_backward(const double* img, int c, int h, int w, const double* disp, Boundary b,
                   const double* d_out, double* d_img, double* d_disp) {
  const double* dy = disp;
  const double* dx = disp + int64_t(h) * w;
  const int64_t plane = int64_t(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int64_t p = int64_t(y) * w + x;
      const double ys = y + dy[p];
      const double xs = x + dx[p];
      if (b == Boundary::clamp) {
        BilinearTaps t;
        taps_clamp(ys, xs, h, w, t);
        const int y1 = std::min(t.y0 + 1, h - 1), x1 = std::min(t.x0 + 1, w - 1);
        const double w00 = (1 - t.fy) * (1 - t.fx), w01 = (1 - t.fy) * t.fx;
        const double w10 = t.fy * (1 - t.fx), w11 = t.fy * t.fx;
        double gy = 0.0, gx = 0.0;
        for (int ch = 0; ch < c; ++ch) {
          const double g = d_out[ch * plane + p];
          if (g == 0.0) continue;
          const double* im = img + ch * plane;
          const double v00 = im[int64_t(t.y0) * w + t.x0], v01 = im[int64_t(t.y0) * w + x1];
          const double v10 = im[int64_t(y1) * w + t.x0], v11 = im[int64_t(y1) * w + x1];
          if (d_img) {
            double* di = d_img + ch * plane;
            di[int64_t(t.y0) * w + t.x0] += g * w00;
            di[int64_t(t.y0) * w + x1] += g * w01;
            di[int64_t(y1) * w + t.x0] += g * w10;
            di[int64_t(y1) * w + x1] += g * w11;
          }
          gy += g * ((1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
          gx += g * ((1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
        }
        if (d_disp) {
          if (t.dy_active) d_disp[p] += gy;
          if (t.dx_active) d_disp[plane + p] += gx;
        }
      } else {
        const int y0 = int(std::floor(ys)), x0 = int(std::floor(xs));
        const double fy = ys - y0, fx = xs - x0;
        double gy = 0.0, gx = 0.0;
        for (int ch = 0; ch < c; ++ch) {
          const double g = d_out[ch * plane + p];
          if (g == 0.0) continue;
          const double* im = img + ch * plane;
          auto tap = [&](int yy, int xx) -> double {
            return (yy >= 0 && yy < h && xx >= 0 && xx < w) ? im[int64_t(yy) * w + xx] : 0.0;
          };
          const double v00 = tap(y0, x0), v01 = tap(y0, x0 + 1);
          const double v10 = tap(y0 + 1, x0), v11 = tap(y0 + 1, x0 + 1);
          if (d_img) {
            double* di = d_img + ch * plane;
            auto acc = [&](int yy, int xx, double wt) {
              if (yy >= 0 && yy < h && xx >= 0 && xx < w) di[int64_t(yy) * w + xx] += g * wt;
            };
            acc(y0, x0, (1 - fy) * (1 - fx));
            acc(y0, x0 + 1, (1 - fy) * fx);
            acc(y0 + 1, x0, fy * (1 - fx));
            acc(y0 + 1, x0 + 1, fy * fx);
          }
          gy += g * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
          gx += g * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
        }
        if (d_disp) {
          d_disp[p] += gy;
          d_disp[plane + p] += gx;
        }
      }
    }
  }
}

void resize_forward(const double* in, int c, int hi, int wi, int ho, int wo, double* out) {
  const double sy = double(hi) / ho, sx = double(wi) / wo;
  const int64_t pin = int64_t(hi) * wi, pout = int64_t(ho) * wo;
  for (int y = 0; y < ho; ++y) {
    double ys = (y + 0.5) * sy - 0.5;
    ys = std::clamp(ys, 0.0, double(hi - 1));
    int y0 = std::min(int(ys), std::max(hi - 2, 0));
    const double fy = ys - y0;
    const int y1 = std::min(y0 + 1, hi - 1);
    for (int x = 0; x < wo; ++x) {
      double xs = (x + 0.5) * sx - 0.5;
      xs = std::clamp(xs, 0.0, double(wi - 1));
      int x0 = std::min(int(xs), std::max(wi - 2, 0));
      const double fx = xs - x0;
      const int x1 = std::min(x0 + 1, wi - 1);
      const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx;
      const double w10 = fy * (1 - fx), w11 = fy * fx;
      for (int ch = 0; ch < c; ++ch) {
        const double* im = in + ch * pin;
        out[ch * pout + int64_t(y) * wo + x] =
            w00 * im[int64_t(y0) * wi + x0] + w01 * im[int64_t(y0) * wi + x1] +
            w10 * im[int64_t(y1) * wi + x0] + w11 * im[int64_t(y1) * wi + x1];
      }
    }
  }
}

void resize_backward(int c, int hi, int wi, int ho, int wo, const double* d_out, double* d_in) {
  const double sy = double(hi) / ho, sx = double(wi) / wo;
  const int64_t pin = int64_t(hi) * wi, pout = int64_t(ho) * wo;
  for (int y = 0; y < ho; ++y) {
    double ys = (y + 0.5) * sy - 0.5;
    ys = std::clamp(ys, 0.0, double(hi - 1));
    int y0 = std::min(int(ys), std::max(hi - 2, 0));
    const double fy = ys - y0;
    const int y1 = std::min(y0 + 1, hi - 1);
    for (int x = 0; x < wo; ++x) {
      double xs = (x + 0.5) * sx - 0.5;
      xs = std::clamp(xs, 0.0, double(wi - 1));
      int x0 = std::min(int(xs), std::max(wi - 2, 0));
      const double fx = xs - x0;
      const int x1 = std::min(x0 + 1, wi - 1);
      const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx;
      const double w10 = fy * (1 - fx), w11 = fy * fx;
      for (int ch = 0; ch < c; ++ch) {
        const double g = d_out[ch * pout + int64_t(y) * wo + x];
        if (g == 0.0) continue;
        double* di = d_in + ch * pin;
        di[int64_t(y0) * wi + x0] += g * w00;
        di[int64_t(y0) * wi + x1] += g * w01;
        di[int64_t(y1) * wi + x0] += g * w10;
        di[int64_t(y1) * wi + x1] += g * w11;
      }
    }
  }
}

void jacobian_determinant(const double* disp, int h, int w, double* out) {
  const double* dy = disp;
  const double* dx = disp + int64_t(h) * w;
  auto d_dy = [&](const double* f, int y, int x) {  // d f / d y
    if (y == 0) return f[int64_t(1) * w + x] - f[x];
    if (y == h - 1) return f[int64_t(y) * w + x] - f[int64_t(y - 1) * w + x];
    return 0.5 * (f[int64_t(y + 1) * w + x] - f[int64_t(y - 1) * w + x]);
  };
  auto d_dx = [&](const double* f, int y, int x) {  // d f / d x
    if (x == 0) return f[int64_t(y) * w + 1] - f[int64_t(y) * w];
    if (x == w - 1) return f[int64_t(y) * w + x] - f[int64_t(y) * w + x - 1];
    return 0.5 * (f[int64_t(y) * w + x + 1] - f[int64_t(y) * w + x - 1]);
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double a = 1.0 + d_dy(dy, y, x);
      const double b = d_dx(dy, y, x);
      const double c2 = d_dy(dx, y, x);
      const double d = 1.0 + d_dx(dx, y, x);
      out[int64_t(y) * w + x] = a * d - b * c2;
    }
}

void warp_nearest_u8(const uint8_t* img, int h, int w, const double* disp, uint8_t* out) {
  const double* dy = disp;
  const double* dx = disp + int64_t(h) * w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int64_t p = int64_t(y) * w + x;
      int ys = int(std::lround(y + dy[p]));
      int xs = int(std::lround(x + dx[p]));
      ys = std::clamp(ys, 0, h - 1);
      xs = std::clamp(xs, 0, w - 1);
      out[p] = img[int64_t(ys) * w + xs];
    }
}

}  // namespace gwreg::kernels
