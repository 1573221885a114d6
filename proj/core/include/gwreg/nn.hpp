#pragma once

#include <memory>
#include <string>
#include <vector>

#include "gwreg/autodiff.hpp"
#include "gwreg/rng.hpp"
#include "gwreg/tensor.hpp"

namespace gwreg::nn {

/// Ordered store of trainable parameters and non-trainable buffers (BN
/// running statistics). Insertion order is the checkpoint layout order;
/// names follow `{module}.{level}.{layer}.{param}` with per-modality
/// normalization banks at `...{layer}.bn.{modality}.{param}`.
class ParamRegistry {
 public:
  ad::Var add_param(const std::string& name, Tensor init);
  Tensor* add_buffer(const std::string& name, Tensor init);

  struct ParamEntry {
    std::string name;
    ad::Var var;
  };
  struct BufferEntry {
    std::string name;
    std::unique_ptr<Tensor> tensor;
  };

  std::vector<ParamEntry>& params() { return params_; }
  const std::vector<ParamEntry>& params() const { return params_; }
  std::vector<BufferEntry>& buffers() { return buffers_; }
  const std::vector<BufferEntry>& buffers() const { return buffers_; }

  ad::Var find_param(const std::string& name) const;  // throws if absent
  Tensor* find_buffer(const std::string& name) const;
  int64_t num_scalars() const;

 private:
  std::vector<ParamEntry> params_;
  std::vector<BufferEntry> buffers_;
};

/// He-normal initialized convolution. zero_init makes weight and bias zero
/// (identity-start output heads).
struct Conv2d {
  Conv2d(ParamRegistry& reg, const std::string& prefix, int cin, int cout, int ksize, int stride,
         int pad, Rng& rng, bool zero_init = false);

  ad::Var w, b;
  int stride, pad;

  ad::Var operator()(const ad::Var& x) const { return ad::conv2d(x, w, b, stride, pad); }
};

/// Batch normalization with per-modality parameter banks: convolutions are
/// shared across modalities, normalization statistics and affine parameters
/// are not.
struct BatchNormBanks {
  BatchNormBanks(ParamRegistry& reg, const std::string& prefix, int channels, int banks,
                 double momentum);

  std::vector<ad::Var> gamma, beta;
  std::vector<Tensor*> run_mean, run_var;
  double momentum;

  ad::Var operator()(const ad::Var& x, int bank, bool training) const;
};

/// Conv-BN-LeakyReLU sub-block (slope 0.2).
struct ConvBnLRelu {
  ConvBnLRelu(ParamRegistry& reg, const std::string& prefix, int cin, int cout, int ksize,
              int stride, int pad, int banks, double momentum, Rng& rng);

  Conv2d conv;
  BatchNormBanks bn;

  ad::Var operator()(const ad::Var& x, int bank, bool training) const;
};

/// C_k block: k Conv-BN-LeakyReLU sub-blocks named `{prefix}{1..k}`.
struct ConvBlock {
  ConvBlock(ParamRegistry& reg, const std::string& prefix, int depth, int cin, int cout, int ksize,
            int banks, double momentum, Rng& rng);

  std::vector<ConvBnLRelu> subs;

  ad::Var operator()(ad::Var x, int bank, bool training) const;
};

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamRegistry& reg);
  static void zero_grad(ParamRegistry& reg);

  int64_t step_count() const { return t_; }
  void set_learning_rate(double lr) { lr_ = lr; }

  // Exposed for checkpoint resume.
  std::vector<Tensor>& moment1() { return m_; }
  std::vector<Tensor>& moment2() { return v_; }
  void restore_step_count(int64_t t) { t_ = t; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace gwreg::nn
