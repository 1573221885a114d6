#pragma once

#include <array>
#include <string>
#include <vector>

#include "gwreg/autodiff.hpp"
#include "gwreg/diffeo.hpp"
#include "gwreg/fusion.hpp"
#include "gwreg/nn.hpp"
#include "gwreg/rng.hpp"

namespace gwreg::model {

/// Architecture hyperparameters. Levels are indexed 1..L in parameter names
/// (level 1 the coarsest, level L the finest / full resolution); code uses
/// 0-based indices with 0 = coarsest. Level l lives at spatial resolution
/// (H/2^(L-l), W/2^(L-l)).
struct ModelConfig {
  int num_levels = 3;
  int num_modalities = 3;
  int base_channels = 16;
  std::vector<int> channels_per_level;  // coarsest first; derived from base_channels if empty
  std::array<int, 2> image_size{64, 64};
  int conv_depth = 2;
  std::vector<int> latent_channels_per_level;  // coarsest first; defaults to 4 per level
  int integration_steps = 7;
  double bn_momentum = 0.01;

  /// Fills derived defaults and validates; throws ConfigError on bad values.
  void finalize();

  int level_h(int li) const { return image_size[0] >> (num_levels - 1 - li); }
  int level_w(int li) const { return image_size[1] >> (num_levels - 1 - li); }
};

/// Everything produced by one forward pass, as graph handles. Outer index is
/// the modality for per-modality fields; per-level vectors are coarsest
/// first.
struct ModelOutput {
  std::vector<std::vector<fusion::GaussVar>> velocity_posteriors;  // [m][l], {N,2,h_l,w_l}
  std::vector<std::vector<ad::Var>> velocities;                    // sampled, level resolution
  std::vector<ad::Var> forward_transforms;                         // [m], {N,2,H,W}
  std::vector<ad::Var> inverse_transforms;                         // [m], {N,2,H,W}
  std::vector<ad::Var> warped_images;                              // [m], x_m o phi_m
  std::vector<std::vector<fusion::GaussVar>> unimodal_posteriors;  // [m][l] from warped images
  std::vector<fusion::GaussVar> joint_posteriors;                  // [l]
  std::vector<ad::Var> latents;                                    // [l] sampled z
  std::vector<ad::Var> common_recons;                              // [m], decoded in common space
  std::vector<ad::Var> image_recons;                               // [m], x_hat o phi^-1

  /// Extracts item n of a batched {N,2,H,W} transform as a plain field.
  static diffeo::TransformField transform_item(const ad::Var& t, int n);
};

/// Per-forward sampling noise; zeros give the deterministic posterior-mean
/// pass used at inference.
struct NoiseBundle {
  std::vector<std::vector<Tensor>> velocity;  // [m][l], {N,2,h_l,w_l}
  std::vector<Tensor> structure;              // [l], {N,latent_l,h_l,w_l}
};

/// Hierarchical disentangling VAE: a shared-convolution encoder with
/// per-modality batch-norm banks produces multilevel structural codes;
/// per-level registration heads infer stationary-velocity posteriors
/// coarse-to-fine; the codes of the warped images are fused into the joint
/// structure posterior; a 1x1-conv decoder reconstructs each modality.
class HierarchicalVae {
 public:
  HierarchicalVae(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  nn::ParamRegistry& params() { return reg_; }
  const nn::ParamRegistry& params() const { return reg_; }

  NoiseBundle zero_noise(int batch) const;
  NoiseBundle sample_noise(int batch, Rng& rng) const;

  /// images[m] is {N,1,H,W}, min-max normalized to [0,1].
  ModelOutput forward(const std::vector<Tensor>& images, const NoiseBundle& noise, bool training);

  /// Structural codes of one modality, coarsest first.
  std::vector<fusion::GaussVar> encode(const ad::Var& x, int modality, bool training) const;

  /// Decoder pass for one modality from given latents.
  ad::Var decode(const std::vector<ad::Var>& latents, int modality, bool training) const;

 private:
  ModelConfig cfg_;
  nn::ParamRegistry reg_;

  // encoder (index 0 = coarsest level)
  std::vector<nn::ConvBlock> enc_block_;
  std::vector<nn::ConvBnLRelu> enc_down_;  // enc_down_[li] feeds level li from li+1
  std::vector<nn::Conv2d> code_head_;
  // registration heads
  std::vector<nn::ConvBlock> reg_block_;
  std::vector<nn::Conv2d> reg_out_;
  // decoder
  std::vector<nn::ConvBlock> dec_block_;  // dec_block_[0] at the coarsest level
  std::vector<nn::ConvBnLRelu> dec_up_;   // dec_up_[li-1] brings level li-1 -> li
  std::vector<nn::Conv2d> dec_head_;      // single final 1x1 conv (vector to delay init)
};

/// Initial log-variance of the velocity posteriors (added to the
/// zero-initialized head output so identity-start models begin with small
/// sampling noise instead of unit variance).
inline constexpr double kVelocityLogVarInit = -4.0;

}  // namespace gwreg::model
