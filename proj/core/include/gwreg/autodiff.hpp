#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "gwreg/kernels.hpp"
#include "gwreg/tensor.hpp"

namespace gwreg::ad {

struct Node;

/// Handle to a node of the dynamically built computation graph. Graphs are
/// built eagerly; creation order is a valid topological order.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& val() const;
  Tensor& val_mut();  // for optimizer updates on leaves
  Tensor& grad();     // allocated on demand (zeros)
  bool has_grad() const;
  void clear_grad();
  bool requires_grad() const;
  const std::vector<int>& shape() const { return val().shape(); }

  std::shared_ptr<Node> node_;
};

struct Node {
  Tensor value;
  Tensor grad;  // empty until first accumulation
  bool requires_grad = false;
  int64_t seq = 0;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents
};

Var constant(Tensor v);
Var param(Tensor v);

// Elementwise (shapes must match exactly; no broadcasting).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var sigmoid(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var clamp(const Var& a, double lo, double hi);

Var sum(const Var& a);  // -> {1}

// Structural ops on {N,C,H,W}.
Var concat_ch(const Var& a, const Var& b);
Var slice_ch(const Var& a, int c0, int c1);
Var select_item(const Var& a, int n);  // -> {C,H,W}
Var diff_y(const Var& a);              // forward differences along H: {N,C,H-1,W}
Var diff_x(const Var& a);
/// Multiplies every (n,c) plane elementwise by a constant {H,W} grid.
Var mul_plane(const Var& a, Tensor hw);
/// Per-channel scalar multiply ({N,C,H,W}, scales.size() == C).
Var scale_channels(const Var& a, std::vector<double> scales);

// Neural-net ops on {N,C,H,W}.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum, double eps = 1e-5);
Var bilinear_resize(const Var& x, int out_h, int out_w);
/// Bilinear warp of x by displacement field disp {N,2,H,W} (dy, dx planes):
/// out(n,c,y,x) = x(n,c, y+dy, x+dx). Differentiable in both arguments.
Var warp(const Var& x, const Var& disp, Boundary boundary);

/// Runs reverse-mode accumulation from a scalar loss ({1}).
void backward(const Var& loss);

/// Factory for custom ops defined outside the engine: requires_grad is
/// inherited from the parents; backprop reads node.grad and accumulates into
/// the parents via grad_of.
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop);
Tensor& grad_of(const Var& v);  // allocates zeros on first use

}  // namespace gwreg::ad
