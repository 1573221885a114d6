#include "gwreg/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "gwreg/error.hpp"
#include "gwreg/parallel.hpp"

namespace gwreg::ad {

namespace {

std::atomic<int64_t> g_seq{0};

std::shared_ptr<Node> new_node(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return n;
}

Tensor& ensure_grad(Node& n) {
  if (n.grad.empty() && n.value.numel() > 0) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!(a.val().shape() == b.val().shape()))
    throw InvalidInput(std::string(op) + ": shape mismatch " +
                       Tensor::shape_str(a.val().shape()) + " vs " +
                       Tensor::shape_str(b.val().shape()));
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using MapRowC = Eigen::Map<const RowMat>;

}  // namespace

const Tensor& Var::val() const {
  if (!node_) throw std::logic_error("Var: undefined");
  return node_->value;
}
Tensor& Var::val_mut() {
  if (!node_) throw std::logic_error("Var: undefined");
  return node_->value;
}
Tensor& Var::grad() {
  if (!node_) throw std::logic_error("Var: undefined");
  return ensure_grad(*node_);
}
bool Var::has_grad() const { return node_ && !node_->grad.empty(); }
void Var::clear_grad() {
  if (node_) node_->grad = Tensor();
}
bool Var::requires_grad() const { return node_ && node_->requires_grad; }

Var constant(Tensor v) { return Var(new_node(std::move(v), false)); }
Var param(Tensor v) { return Var(new_node(std::move(v), true)); }

namespace {

/// Elementwise unary op: out = f(a); backprop g_a += g_out * dfda(a, out).
template <class F, class DF>
Var unary(const Var& a, F f, DF dfda) {
  Tensor out(a.val().shape());
  const Tensor& av = a.val();
  for (int64_t i = 0; i < av.numel(); ++i) out[i] = f(av[i]);
  auto node = new_node(std::move(out), a.requires_grad());
  if (node->requires_grad) {
    node->parents = {a};
    node->backprop = [a, dfda](Node& self) {
      Tensor& ga = ensure_grad(*a.node_);
      const Tensor& av2 = a.val();
      const Tensor& ov = self.value;
      for (int64_t i = 0; i < ov.numel(); ++i) ga[i] += self.grad[i] * dfda(av2[i], ov[i]);
    };
  }
  return Var(node);
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.val().shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] + b.val()[i];
  auto node = new_node(std::move(out), a.requires_grad() || b.requires_grad());
  if (node->requires_grad) {
    node->parents = {a, b};
    node->backprop = [a, b](Node& self) {
      if (a.requires_grad()) {
        Tensor& ga = ensure_grad(*a.node_);
        for (int64_t i = 0; i < self.grad.numel(); ++i) ga[i] += self.grad[i];
      }
      if (b.requires_grad()) {
        Tensor& gb = ensure_grad(*b.node_);
        for (int64_t i = 0; i < self.grad.numel(); ++i) gb[i] += self.grad[i];
      }
    };
  }
  return Var(node);
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a.val().shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] - b.val()[i];
  auto node = new_node(std::move(out), a.requires_grad() || b.requires_grad());
  if (node->requires_grad) {
    node->parents = {a, b};
    node->backprop = [a, b](Node& self) {
      if (a.requires_grad()) {
        Tensor& ga = ensure_grad(*a.node_);
        for (int64_t i = 0; i < self.grad.numel(); ++i) ga[i] += self.grad[i];
      }
      if (b.requires_grad()) {
        Tensor& gb = ensure_grad(*b.node_);
        for (int64_t i = 0; i < self.grad.numel(); ++i) gb[i] -= self.grad[i];
      }
    };
  }
  return Var(node);
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a.val().shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * b.val()[i];
  auto node = new_node(std::move(out), a.requires_grad() || b.requires_grad());
  if (node->requires_grad) {
    node->parents = {a, b};
    node->backprop = [a, b](Node& self) {
      if (a.requires_grad()) {
        Tensor& ga = ensure_grad(*a.node_);
        for (int64_t i = 0; i < self.grad.numel(); ++i) ga[i] += self.grad[i] * b.val()[i];
      }
      if (b.requires_grad()) {
        Tensor& gb = ensure_grad(*b.node_);
        for (int64_t i = 0; i < self.grad.numel(); ++i) gb[i] += self.grad[i] * a.val()[i];
      }
    };
  }
  return Var(node);
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out(a.val().shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] / b.val()[i];
  auto node = new_node(std::move(out), a.requires_grad() || b.requires_grad());
  if (node->requires_grad) {
    node->parents = {a, b};
    node->backprop = [a, b](Node& self) {
      if (a.requires_grad()) {
        Tensor& ga = ensure_grad(*a.node_);
        for (int64_t i = 0; i < self.grad.numel(); ++i) ga[i] += self.grad[i] / b.val()[i];
      }
      if (b.requires_grad()) {
        Tensor& gb = ensure_grad(*b.node_);
        for (int64_t i = 0; i < self.grad.numel(); ++i) {
          const double bv = b.val()[i];
          gb[i] -= self.grad[i] * a.val()[i] / (bv * bv);
        }
      }
    };
  }
  return Var(node);
}

Var neg(const Var& a) {
  return unary(a, [](double v) { return -v; }, [](double, double) { return -1.0; });
}
Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}
Var mul_scalar(const Var& a, double s) {
  return unary(a, [s](double v) { return v * s; }, [s](double, double) { return s; });
}
Var exp(const Var& a) {
  return unary(a, [](double v) { return std::exp(v); }, [](double, double o) { return o; });
}
Var log(const Var& a) {
  return unary(a, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}
Var square(const Var& a) {
  return unary(a, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}
Var sigmoid(const Var& a) {
  return unary(a, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
               [](double, double o) { return o * (1.0 - o); });
}
Var leaky_relu(const Var& a, double slope) {
  return unary(a, [slope](double v) { return v > 0.0 ? v : slope * v; },
               [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}
Var clamp(const Var& a, double lo, double hi) {
  return unary(a, [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a.val().numel(); ++i) s += a.val()[i];
  auto node = new_node(Tensor::scalar(s), a.requires_grad());
  if (node->requires_grad) {
    node->parents = {a};
    node->backprop = [a](Node& self) {
      Tensor& ga = ensure_grad(*a.node_);
      const double g = self.grad[0];
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    };
  }
  return Var(node);
}

Var concat_ch(const Var& a, const Var& b) {
  const auto& sa = a.val().shape();
  const auto& sb = b.val().shape();
  if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw InvalidInput("concat_ch: incompatible shapes");
  const int n = sa[0], ca = sa[1], cb = sb[1], h = sa[2], w = sa[3];
  Tensor out({n, ca + cb, h, w});
  const int64_t plane = int64_t(h) * w;
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.val().data() + int64_t(i) * ca * plane, ca * plane,
                out.data() + int64_t(i) * (ca + cb) * plane);
    std::copy_n(b.val().data() + int64_t(i) * cb * plane, cb * plane,
                out.data() + int64_t(i) * (ca + cb) * plane + ca * plane);
  }
  auto node = new_node(std::move(out), a.requires_grad() || b.requires_grad());
  if (node->requires_grad) {
    node->parents = {a, b};
    node->backprop = [a, b, n, ca, cb, plane](Node& self) {
      if (a.requires_grad()) {
        Tensor& ga = ensure_grad(*a.node_);
        for (int i = 0; i < n; ++i) {
          const double* src = self.grad.data() + int64_t(i) * (ca + cb) * plane;
          double* dst = ga.data() + int64_t(i) * ca * plane;
          for (int64_t k = 0; k < ca * plane; ++k) dst[k] += src[k];
        }
      }
      if (b.requires_grad()) {
        Tensor& gb = ensure_grad(*b.node_);
        for (int i = 0; i < n; ++i) {
          const double* src = self.grad.data() + int64_t(i) * (ca + cb) * plane + ca * plane;
          double* dst = gb.data() + int64_t(i) * cb * plane;
          for (int64_t k = 0; k < cb * plane; ++k) dst[k] += src[k];
        }
      }
    };
  }
  return Var(node);
}

Var slice_ch(const Var& a, int c0, int c1) {
  const auto& s = a.val().shape();
  if (s.size() != 4 || c0 < 0 || c1 > s[1] || c0 >= c1) throw InvalidInput("slice_ch: bad range");
  const int n = s[0], c = s[1], h = s[2], w = s[3], cs = c1 - c0;
  Tensor out({n, cs, h, w});
  const int64_t plane = int64_t(h) * w;
  for (int i = 0; i < n; ++i)
    std::copy_n(a.val().data() + (int64_t(i) * c + c0) * plane, cs * plane,
                out.data() + int64_t(i) * cs * plane);
  auto node = new_node(std::move(out), a.requires_grad());
  if (node->requires_grad) {
    node->parents = {a};
    node->backprop = [a, n, c, c0, cs, plane](Node& self) {
      Tensor& ga = ensure_grad(*a.node_);
      for (int i = 0; i < n; ++i) {
        const double* src = self.grad.data() + int64_t(i) * cs * plane;
        double* dst = ga.data() + (int64_t(i) * c + c0) * plane;
        for (int64_t k = 0; k < cs * plane; ++k) dst[k] += src[k];
      }
    };
  }
  return Var(node);
}

Var select_item(const Var& a, int n) {
  const auto& s = a.val().shape();
  if (s.size() != 4 || n < 0 || n >= s[0]) throw InvalidInput("select_item: bad index");
  const int c = s[1], h = s[2], w = s[3];
  const int64_t item = int64_t(c) * h * w;
  Tensor out({c, h, w});
  std::copy_n(a.val().data() + n * item, item, out.data());
  auto node = new_node(std::move(out), a.requires_grad());
  if (node->requires_grad) {
    node->parents = {a};
    node->backprop = [a, n, item](Node& self) {
      Tensor& ga = ensure_grad(*a.node_);
      double* dst = ga.data() + n * item;
      for (int64_t k = 0; k < item; ++k) dst[k] += self.grad[k];
    };
  }
  return Var(node);
}

namespace {

Var diff_axis(const Var& a, bool along_y) {
  const auto& s = a.val().shape();
  if (s.size() != 4) throw InvalidInput("diff: rank-4 tensor required");
  const int n = s[0], c = s[1], h = s[2], w = s[3];
  const int ho = along_y ? h - 1 : h, wo = along_y ? w : w - 1;
  Tensor out({n, c, ho, wo});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < ho; ++y)
        for (int x = 0; x < wo; ++x) {
          const double hi = along_y ? a.val().at4(i, ch, y + 1, x) : a.val().at4(i, ch, y, x + 1);
          out.at4(i, ch, y, x) = hi - a.val().at4(i, ch, y, x);
        }
  auto node = new_node(std::move(out), a.requires_grad());
  if (node->requires_grad) {
    node->parents = {a};
    node->backprop = [a, n, c, ho, wo, along_y](Node& self) {
      Tensor& ga = ensure_grad(*a.node_);
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
          for (int y = 0; y < ho; ++y)
            for (int x = 0; x < wo; ++x) {
              const double g = self.grad.at4(i, ch, y, x);
              if (along_y) {
                ga.at4(i, ch, y + 1, x) += g;
                ga.at4(i, ch, y, x) -= g;
              } else {
                ga.at4(i, ch, y, x + 1) += g;
                ga.at4(i, ch, y, x) -= g;
              }
            }
    };
  }
  return Var(node);
}

}  // namespace

Var diff_y(const Var& a) { return diff_axis(a, true); }
Var diff_x(const Var& a) { return diff_axis(a, false); }

Var mul_plane(const Var& a, Tensor hw) {
  const auto& s = a.val().shape();
  if (s.size() != 4 || hw.rank() != 2 || hw.dim(0) != s[2] || hw.dim(1) != s[3])
    throw InvalidInput("mul_plane: plane shape mismatch");
  const int n = s[0], c = s[1];
  const int64_t plane = int64_t(s[2]) * s[3];
  Tensor out(s);
  for (int64_t nc = 0; nc < int64_t(n) * c; ++nc)
    for (int64_t k = 0; k < plane; ++k) out[nc * plane + k] = a.val()[nc * plane + k] * hw[k];
  auto node = new_node(std::move(out), a.requires_grad());
  if (node->requires_grad) {
    node->parents = {a};
    auto plane_vals = std::make_shared<Tensor>(std::move(hw));
    node->backprop = [a, n, c, plane, plane_vals](Node& self) {
      Tensor& ga = ensure_grad(*a.node_);
      for (int64_t nc = 0; nc < int64_t(n) * c; ++nc)
        for (int64_t k = 0; k < plane; ++k)
          ga[nc * plane + k] += self.grad[nc * plane + k] * (*plane_vals)[k];
    };
  }
  return Var(node);
}

Var scale_channels(const Var& a, std::vector<double> scales) {
  const auto& s = a.val().shape();
  if (s.size() != 4 || int(scales.size()) != s[1])
    throw InvalidInput("scale_channels: needs one scale per channel");
  const int n = s[0], c = s[1];
  const int64_t plane = int64_t(s[2]) * s[3];
  Tensor out(s);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const double* src = a.val().data() + (int64_t(i) * c + ch) * plane;
      double* dst = out.data() + (int64_t(i) * c + ch) * plane;
      for (int64_t k = 0; k < plane; ++k) dst[k] = src[k] * scales[ch];
    }
  auto node = new_node(std::move(out), a.requires_grad());
  if (node->requires_grad) {
    node->parents = {a};
    node->backprop = [a, n, c, plane, scales](Node& self) {
      Tensor& ga = ensure_grad(*a.node_);
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
          const double* src = self.grad.data() + (int64_t(i) * c + ch) * plane;
          double* dst = ga.data() + (int64_t(i) * c + ch) * plane;
          for (int64_t k = 0; k < plane; ++k) dst[k] += src[k] * scales[ch];
        }
    };
  }
  return Var(node);
}

namespace {

void im2col(const double* x, int cin, int h, int w, int kh, int kw, int stride, int pad, int ho,
            int wo, double* col) {
  // col is {cin*kh*kw, ho*wo} row-major
  const int64_t pcount = int64_t(ho) * wo;
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        double* row = col + ((int64_t(c) * kh + ky) * kw + kx) * pcount;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          double* dst = row + int64_t(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill_n(dst, wo, 0.0);
            continue;
          }
          const double* src = x + (int64_t(c) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
}

void col2im_acc(const double* col, int cin, int h, int w, int kh, int kw, int stride, int pad,
                int ho, int wo, double* dx) {
  const int64_t pcount = int64_t(ho) * wo;
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const double* row = col + ((int64_t(c) * kh + ky) * kw + kx) * pcount;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          double* dst = dx + (int64_t(c) * h + iy) * w;
          const double* src = row + int64_t(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const auto& xs = x.val().shape();
  const auto& ws = w.val().shape();
  if (xs.size() != 4 || ws.size() != 4) throw InvalidInput("conv2d: rank-4 tensors required");
  const int n = xs[0], cin = xs[1], h = xs[2], wd = xs[3];
  const int cout = ws[0], kh = ws[2], kw = ws[3];
  if (ws[1] != cin) throw InvalidInput("conv2d: channel mismatch");
  if (b.val().numel() != cout) throw InvalidInput("conv2d: bias size mismatch");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  const int k = cin * kh * kw;
  const int64_t pcount = int64_t(ho) * wo;

  Tensor out({n, cout, ho, wo});
  {
    const int64_t item_in = int64_t(cin) * h * wd;
    const int64_t item_out = int64_t(cout) * pcount;
    parallel_for(n, [&](int64_t i) {
      std::vector<double> col(size_t(k) * pcount);
      im2col(x.val().data() + i * item_in, cin, h, wd, kh, kw, stride, pad, ho, wo, col.data());
      MapRowC wm(w.val().data(), cout, k);
      MapRowC cm(col.data(), k, pcount);
      MapRow om(out.data() + i * item_out, cout, pcount);
      om.noalias() = wm * cm;
      for (int c = 0; c < cout; ++c) om.row(c).array() += b.val()[c];
    });
  }

  auto node = new_node(std::move(out), x.requires_grad() || w.requires_grad() || b.requires_grad());
  if (node->requires_grad) {
    node->parents = {x, w, b};
    node->backprop = [x, w, b, n, cin, h, wd, cout, kh, kw, stride, pad, ho, wo, k,
                      pcount](Node& self) {
      const int64_t item_in = int64_t(cin) * h * wd;
      const int64_t item_out = int64_t(cout) * pcount;
      const bool need_dx = x.requires_grad();
      const bool need_dw = w.requires_grad();
      const bool need_db = b.requires_grad();
      // Per-item weight/bias contributions, reduced serially afterwards so the
      // result does not depend on the thread count.
      std::vector<double> dw_items(need_dw ? size_t(n) * cout * k : 0, 0.0);
      std::vector<double> db_items(need_db ? size_t(n) * cout : 0, 0.0);
      Tensor* gx = nullptr;
      if (need_dx) gx = &ensure_grad(*x.node_);
      parallel_for(n, [&](int64_t i) {
        std::vector<double> col(size_t(k) * pcount);
        im2col(x.val().data() + i * item_in, cin, h, wd, kh, kw, stride, pad, ho, wo, col.data());
        MapRowC go(self.grad.data() + i * item_out, cout, pcount);
        if (need_dw) {
          MapRowC cm(col.data(), k, pcount);
          MapRow dwm(dw_items.data() + i * cout * k, cout, k);
          dwm.noalias() = go * cm.transpose();
        }
        if (need_db) {
          for (int c = 0; c < cout; ++c) db_items[size_t(i) * cout + c] = go.row(c).sum();
        }
        if (need_dx) {
          std::vector<double> dcol(size_t(k) * pcount);
          MapRowC wm(w.val().data(), cout, k);
          MapRow dcm(dcol.data(), k, pcount);
          dcm.noalias() = wm.transpose() * go;
          col2im_acc(dcol.data(), cin, h, wd, kh, kw, stride, pad, ho, wo,
                     gx->data() + i * item_in);
        }
      });
      if (need_dw) {
        Tensor& gw = ensure_grad(*w.node_);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < int64_t(cout) * k; ++j) gw[j] += dw_items[i * cout * k + j];
      }
      if (need_db) {
        Tensor& gb = ensure_grad(*b.node_);
        for (int64_t i = 0; i < n; ++i)
          for (int c = 0; c < cout; ++c) gb[c] += db_items[i * cout + c];
      }
    };
  }
  return Var(node);
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum, double eps) {
  const auto& s = x.val().shape();
  if (s.size() != 4) throw InvalidInput("batch_norm: rank-4 tensor required");
  const int n = s[0], c = s[1], h = s[2], w = s[3];
  if (gamma.val().numel() != c || beta.val().numel() != c || running_mean.numel() != c ||
      running_var.numel() != c)
    throw InvalidInput("batch_norm: parameter size mismatch");
  const int64_t plane = int64_t(h) * w;
  const int64_t count = int64_t(n) * plane;

  Tensor mean({c}), invstd({c});
  if (training) {
    parallel_for(c, [&](int64_t ch) {
      double m = 0.0;
      for (int i = 0; i < n; ++i) {
        const double* src = x.val().data() + (int64_t(i) * c + ch) * plane;
        for (int64_t k = 0; k < plane; ++k) m += src[k];
      }
      m /= double(count);
      double v = 0.0;
      for (int i = 0; i < n; ++i) {
        const double* src = x.val().data() + (int64_t(i) * c + ch) * plane;
        for (int64_t k = 0; k < plane; ++k) {
          const double d = src[k] - m;
          v += d * d;
        }
      }
      v /= double(count);
      mean[ch] = m;
      invstd[ch] = 1.0 / std::sqrt(v + eps);
      const double unbiased = count > 1 ? v * double(count) / double(count - 1) : v;
      running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * m;
      running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * unbiased;
    });
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean[ch];
      invstd[ch] = 1.0 / std::sqrt(running_var[ch] + eps);
    }
  }

  Tensor out(s);
  parallel_for(int64_t(n) * c, [&](int64_t nc) {
    const int ch = int(nc % c);
    const double m = mean[ch], is = invstd[ch];
    const double g = gamma.val()[ch], bt = beta.val()[ch];
    const double* src = x.val().data() + nc * plane;
    double* dst = out.data() + nc * plane;
    for (int64_t k = 0; k < plane; ++k) dst[k] = (src[k] - m) * is * g + bt;
  });

  auto node =
      new_node(std::move(out), x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  if (node->requires_grad) {
    node->parents = {x, gamma, beta};
    auto saved_mean = std::make_shared<Tensor>(std::move(mean));
    auto saved_invstd = std::make_shared<Tensor>(std::move(invstd));
    node->backprop = [x, gamma, beta, n, c, plane, count, training, saved_mean,
                      saved_invstd](Node& self) {
      const Tensor& gm = *saved_mean;
      const Tensor& gi = *saved_invstd;
      // dgamma doubles as sum(dy*xhat) and dbeta as sum(dy) in the input
      // gradient below. Fixed-order reductions per channel.
      Tensor dgamma({c}), dbeta({c});
      for (int ch = 0; ch < c; ++ch) {
        double sg = 0.0, sb = 0.0;
        for (int i = 0; i < n; ++i) {
          const double* gsrc = self.grad.data() + (int64_t(i) * c + ch) * plane;
          const double* xsrc = x.val().data() + (int64_t(i) * c + ch) * plane;
          for (int64_t k = 0; k < plane; ++k) {
            sg += gsrc[k] * (xsrc[k] - gm[ch]) * gi[ch];
            sb += gsrc[k];
          }
        }
        dgamma[ch] = sg;
        dbeta[ch] = sb;
      }
      if (gamma.requires_grad()) {
        Tensor& gg = ensure_grad(*gamma.node_);
        for (int ch = 0; ch < c; ++ch) gg[ch] += dgamma[ch];
      }
      if (beta.requires_grad()) {
        Tensor& gb = ensure_grad(*beta.node_);
        for (int ch = 0; ch < c; ++ch) gb[ch] += dbeta[ch];
      }
      if (x.requires_grad()) {
        Tensor& gx = ensure_grad(*x.node_);
        parallel_for(int64_t(n) * c, [&](int64_t nc) {
          const int ch = int(nc % c);
          const double g = gamma.val()[ch], is = gi[ch], m = gm[ch];
          const double* gsrc = self.grad.data() + nc * plane;
          const double* xsrc = x.val().data() + nc * plane;
          double* dst = gx.data() + nc * plane;
          if (training) {
            const double inv_count = 1.0 / double(count);
            for (int64_t k = 0; k < plane; ++k) {
              const double xhat = (xsrc[k] - m) * is;
              const double dxhat = gsrc[k] * g;
              dst[k] +=
                  is * (dxhat - inv_count * dbeta[ch] * g - xhat * inv_count * dgamma[ch] * g);
            }
          } else {
            for (int64_t k = 0; k < plane; ++k) dst[k] += gsrc[k] * g * is;
          }
        });
      }
    };
  }
  return Var(node);
}

Var bilinear_resize(const Var& x, int out_h, int out_w) {
  const auto& s = x.val().shape();
  if (s.size() != 4) throw InvalidInput("bilinear_resize: rank-4 tensor required");
  if (out_h <= 0 || out_w <= 0) throw InvalidInput("bilinear_resize: bad output size");
  const int n = s[0], c = s[1], h = s[2], w = s[3];
  Tensor out({n, c, out_h, out_w});
  const int64_t item_in = int64_t(c) * h * w;
  const int64_t item_out = int64_t(c) * out_h * out_w;
  parallel_for(n, [&](int64_t i) {
    kernels::resize_forward(x.val().data() + i * item_in, c, h, w, out_h, out_w,
                            out.data() + i * item_out);
  });
  auto node = new_node(std::move(out), x.requires_grad());
  if (node->requires_grad) {
    node->parents = {x};
    node->backprop = [x, n, c, h, w, out_h, out_w, item_in, item_out](Node& self) {
      Tensor& gx = ensure_grad(*x.node_);
      parallel_for(n, [&](int64_t i) {
        kernels::resize_backward(c, h, w, out_h, out_w, self.grad.data() + i * item_out,
                                 gx.data() + i * item_in);
      });
    };
  }
  return Var(node);
}

Var warp(const Var& x, const Var& disp, Boundary boundary) {
  const auto& xs = x.val().shape();
  const auto& ds = disp.val().shape();
  if (xs.size() != 4 || ds.size() != 4) throw InvalidInput("warp: rank-4 tensors required");
  if (ds[1] != 2 || ds[0] != xs[0] || ds[2] != xs[2] || ds[3] != xs[3])
    throw InvalidInput("warp: displacement must be {N,2,H,W} matching the image");
  const int n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const int64_t item_img = int64_t(c) * h * w;
  const int64_t item_disp = int64_t(2) * h * w;
  Tensor out(xs);
  parallel_for(n, [&](int64_t i) {
    kernels::warp_forward(x.val().data() + i * item_img, c, h, w,
                          disp.val().data() + i * item_disp, boundary, out.data() + i * item_img);
  });
  auto node = new_node(std::move(out), x.requires_grad() || disp.requires_grad());
  if (node->requires_grad) {
    node->parents = {x, disp};
    node->backprop = [x, disp, boundary, n, c, h, w, item_img, item_disp](Node& self) {
      Tensor* gx = x.requires_grad() ? &ensure_grad(*x.node_) : nullptr;
      Tensor* gd = disp.requires_grad() ? &ensure_grad(*disp.node_) : nullptr;
      parallel_for(n, [&](int64_t i) {
        kernels::warp_backward(x.val().data() + i * item_img, c, h, w,
                               disp.val().data() + i * item_disp, boundary,
                               self.grad.data() + i * item_img,
                               gx ? gx->data() + i * item_img : nullptr,
                               gd ? gd->data() + i * item_disp : nullptr);
      });
    };
  }
  return Var(node);
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
  bool req = false;
  for (const auto& p : parents) req = req || p.requires_grad();
  auto node = new_node(std::move(value), req);
  if (req) {
    node->parents = std::move(parents);
    node->backprop = std::move(backprop);
  }
  return Var(node);
}

Tensor& grad_of(const Var& v) { return ensure_grad(*v.node_); }

void backward(const Var& loss) {
  if (!loss.defined() || loss.val().numel() != 1)
    throw InvalidInput("backward: loss must be a defined scalar");
  if (!loss.requires_grad()) return;

  // Collect the reachable subgraph that requires grad; creation order (seq)
  // is a topological order because graphs are built eagerly.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{loss.node_.get()};
  seen.insert(loss.node_.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const Var& p : n->parents)
      if (p.node_ && p.node_->requires_grad && seen.insert(p.node_.get()).second)
        stack.push_back(p.node_.get());
  }
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->seq > b->seq; });

  ensure_grad(*loss.node_)[0] += 1.0;
  for (Node* n : order)
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
}

}  // namespace gwreg::ad
