#pragma once

#include <array>
#include <vector>

#include "gwreg/autodiff.hpp"
#include "gwreg/nn.hpp"
#include "gwreg/tensor.hpp"

namespace gwreg::baseline {

/// Parzen-window mutual information estimator settings. Intensities live in
/// [0,1]; kernel_sigma is in bin units.
struct HistogramMIConfig {
  int num_bins = 32;
  double kernel_sigma = 1.0;

  void validate() const;
};

/// Gaussian-kernel joint histogram, normalized to total mass 1. Inputs are
/// same-shape intensity grids in [0,1]; the result is {num_bins, num_bins}
/// with rows indexing a's bins.
Tensor soft_joint_histogram(const Tensor& a, const Tensor& b, const HistogramMIConfig& cfg);

/// MI over the soft joint histogram, with a 1e-10 floor inside logarithms.
double mutual_information(const Tensor& a, const Tensor& b, const HistogramMIConfig& cfg);

/// Entropy of the soft marginal histogram of one image.
double soft_entropy(const Tensor& a, const HistogramMIConfig& cfg);

/// Accumulated pairwise estimates: -(2/(M(M-1))) * sum over unordered pairs
/// of MI. Lower is better.
double ape_loss(const std::vector<Tensor>& warped, const HistogramMIConfig& cfg);

// Differentiable variants; tensors may have any (matching) shape.
ad::Var mutual_information_ad(const ad::Var& a, const ad::Var& b, const HistogramMIConfig& cfg);
ad::Var ape_loss_ad(const std::vector<ad::Var>& warped, const HistogramMIConfig& cfg);

/// Residual U-Net producing one stationary velocity field per modality from
/// the channel-concatenated image group.
struct ResUNetConfig {
  int levels = 5;
  int base_channels = 16;
  int num_modalities = 3;
  std::array<int, 2> image_size{64, 64};
  int integration_steps = 7;
  double bn_momentum = 0.01;

  void finalize();
};

class ResUNet {
 public:
  ResUNet(ResUNetConfig cfg, uint64_t seed);

  const ResUNetConfig& config() const { return cfg_; }
  nn::ParamRegistry& params() { return reg_; }
  const nn::ParamRegistry& params() const { return reg_; }

  /// group_images is {N, M, H, W}; returns M velocity fields {N,2,H,W}.
  std::vector<ad::Var> forward(const Tensor& group_images, bool training);

 private:
  struct ResBlock {
    ResBlock(nn::ParamRegistry& reg, const std::string& prefix, int channels, double momentum,
             Rng& rng);
    nn::ConvBnLRelu conv1;
    nn::Conv2d conv2;
    nn::BatchNormBanks bn2;
    ad::Var operator()(const ad::Var& x, bool training) const;
  };

  ResUNetConfig cfg_;
  nn::ParamRegistry reg_;
  std::vector<nn::ConvBnLRelu> stem_;  // single entry
  std::vector<ResBlock> enc_res_;
  std::vector<nn::ConvBnLRelu> down_;
  std::vector<nn::ConvBnLRelu> up_;
  std::vector<nn::ConvBnLRelu> fuse_;
  std::vector<ResBlock> dec_res_;
  std::vector<nn::Conv2d> head_;  // single entry, zero-initialized
};

}  // namespace gwreg::baseline
