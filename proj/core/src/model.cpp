#include "gwreg/model.hpp"

#include <algorithm>
#include <cmath>

#include "gwreg/error.hpp"

namespace gwreg::model {

void ModelConfig::finalize() {
  if (num_levels < 2) throw ConfigError("model.num_levels must be >= 2");
  if (num_modalities < 2) throw ConfigError("model.num_modalities must be >= 2");
  if (base_channels < 1) throw ConfigError("model.base_channels must be positive");
  if (conv_depth < 1) throw ConfigError("model.conv_depth must be positive");
  if (integration_steps < 1) throw ConfigError("model.integration_steps must be >= 1");
  const int div = 1 << num_levels;
  if (image_size[0] <= 0 || image_size[1] <= 0 || image_size[0] % div != 0 ||
      image_size[1] % div != 0)
    throw ConfigError("model.image_size must be positive and divisible by 2^num_levels");
  if (channels_per_level.empty()) {
    channels_per_level.resize(num_levels);
    for (int li = 0; li < num_levels; ++li)
      channels_per_level[li] = std::min(base_channels << (num_levels - 1 - li), 64);
  }
  if (latent_channels_per_level.empty()) latent_channels_per_level.assign(num_levels, 4);
  if (int(channels_per_level.size()) != num_levels ||
      int(latent_channels_per_level.size()) != num_levels)
    throw ConfigError("model channel lists must have num_levels entries");
  for (int c : channels_per_level)
    if (c < 1) throw ConfigError("model.channels_per_level entries must be positive");
  for (int c : latent_channels_per_level)
    if (c < 1) throw ConfigError("model.latent_channels_per_level entries must be positive");
  if (bn_momentum <= 0.0 || bn_momentum >= 1.0)
    throw ConfigError("model.bn_momentum must be in (0,1)");
}

diffeo::TransformField ModelOutput::transform_item(const ad::Var& t, int n) {
  const auto& s = t.val().shape();
  const int h = s[2], w = s[3];
  Tensor d({2, h, w});
  const int64_t item = int64_t(2) * h * w;
  std::copy_n(t.val().data() + int64_t(n) * item, item, d.data());
  return diffeo::TransformField(std::move(d));
}

HierarchicalVae::HierarchicalVae(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.finalize();
  Rng rng(seed);
  const int L = cfg_.num_levels;
  const int M = cfg_.num_modalities;
  const double mom = cfg_.bn_momentum;
  const auto& ch = cfg_.channels_per_level;
  const auto& lat = cfg_.latent_channels_per_level;
  auto lvl = [](int li) { return std::to_string(li + 1); };

  // Encoder, finest level first (data-flow order). enc_block_/code_head_ are
  // later indexed coarsest-first, so build into temporaries and reverse.
  std::vector<nn::ConvBlock> blocks;
  std::vector<nn::ConvBnLRelu> downs;
  std::vector<nn::Conv2d> codes;
  blocks.emplace_back(reg_, "encoder." + lvl(L - 1) + ".block", cfg_.conv_depth, 1, ch[L - 1], 3,
                      M, mom, rng);
  codes.emplace_back(reg_, "encoder." + lvl(L - 1) + ".code", ch[L - 1], 2 * lat[L - 1], 3, 1, 1,
                     rng);
  for (int li = L - 2; li >= 0; --li) {
    downs.emplace_back(reg_, "encoder." + lvl(li) + ".down", ch[li + 1], ch[li], 3, 2, 1, M, mom,
                       rng);
    blocks.emplace_back(reg_, "encoder." + lvl(li) + ".block", cfg_.conv_depth, ch[li], ch[li], 3,
                        M, mom, rng);
    codes.emplace_back(reg_, "encoder." + lvl(li) + ".code", ch[li], 2 * lat[li], 3, 1, 1, rng);
  }
  enc_block_ = std::move(blocks);
  code_head_ = std::move(codes);
  enc_down_ = std::move(downs);
  std::reverse(enc_block_.begin(), enc_block_.end());
  std::reverse(code_head_.begin(), code_head_.end());
  std::reverse(enc_down_.begin(), enc_down_.end());

  // Registration heads, coarsest first.
  for (int li = 0; li < L; ++li) {
    reg_block_.emplace_back(reg_, "reg." + lvl(li) + ".block", cfg_.conv_depth, 2 * lat[li],
                            ch[li], 3, M, mom, rng);
    reg_out_.emplace_back(reg_, "reg." + lvl(li) + ".out", ch[li], 4, 3, 1, 1, rng,
                          /*zero_init=*/true);
  }

  // Decoder: 1x1 convolutions throughout.
  dec_block_.emplace_back(reg_, "decoder.1.block", cfg_.conv_depth, lat[0], ch[0], 1, M, mom, rng);
  for (int li = 1; li < L; ++li) {
    dec_up_.emplace_back(reg_, "decoder." + lvl(li) + ".up", ch[li - 1], ch[li], 1, 1, 0, M, mom,
                         rng);
    dec_block_.emplace_back(reg_, "decoder." + lvl(li) + ".block", cfg_.conv_depth,
                            ch[li] + lat[li], ch[li], 1, M, mom, rng);
  }
  dec_head_.emplace_back(reg_, "decoder." + lvl(L - 1) + ".head", ch[L - 1], 1, 1, 1, 0, rng);
}

NoiseBundle HierarchicalVae::zero_noise(int batch) const {
  NoiseBundle nb;
  const int L = cfg_.num_levels;
  nb.velocity.resize(cfg_.num_modalities);
  for (int m = 0; m < cfg_.num_modalities; ++m)
    for (int li = 0; li < L; ++li)
      nb.velocity[m].push_back(Tensor({batch, 2, cfg_.level_h(li), cfg_.level_w(li)}));
  for (int li = 0; li < L; ++li)
    nb.structure.push_back(Tensor(
        {batch, cfg_.latent_channels_per_level[li], cfg_.level_h(li), cfg_.level_w(li)}));
  return nb;
}

NoiseBundle HierarchicalVae::sample_noise(int batch, Rng& rng) const {
  NoiseBundle nb = zero_noise(batch);
  for (auto& per_mod : nb.velocity)
    for (auto& t : per_mod) rng.fill_normal(t);
  for (auto& t : nb.structure) rng.fill_normal(t);
  return nb;
}

std::vector<fusion::GaussVar> HierarchicalVae::encode(const ad::Var& x, int modality,
                                                      bool training) const {
  if (modality < 0 || modality >= cfg_.num_modalities)
    throw InvalidInput("encode: unknown modality index " + std::to_string(modality));
  const int L = cfg_.num_levels;
  std::vector<fusion::GaussVar> out(L);
  ad::Var feat = enc_block_[L - 1](x, modality, training);
  for (int li = L - 1; li >= 0; --li) {
    if (li < L - 1) feat = enc_block_[li](enc_down_[li](feat, modality, training), modality,
                                          training);
    ad::Var code = code_head_[li](feat);
    const int lat = cfg_.latent_channels_per_level[li];
    out[li] = fusion::make_gauss(ad::slice_ch(code, 0, lat), ad::slice_ch(code, lat, 2 * lat));
  }
  return out;
}

ad::Var HierarchicalVae::decode(const std::vector<ad::Var>& latents, int modality,
                                bool training) const {
  const int L = cfg_.num_levels;
  ad::Var d = dec_block_[0](latents[0], modality, training);
  for (int li = 1; li < L; ++li) {
    d = ad::bilinear_resize(d, cfg_.level_h(li), cfg_.level_w(li));
    d = dec_up_[li - 1](d, modality, training);
    d = dec_block_[li](ad::concat_ch(d, latents[li]), modality, training);
  }
  return ad::sigmoid(dec_head_[0](d));
}

ModelOutput HierarchicalVae::forward(const std::vector<Tensor>& images, const NoiseBundle& noise,
                                     bool training) {
  const int M = cfg_.num_modalities;
  const int L = cfg_.num_levels;
  if (int(images.size()) != M) throw InvalidInput("forward: expected one image tensor per modality");
  const int H = cfg_.image_size[0], W = cfg_.image_size[1];
  for (const auto& img : images)
    if (img.rank() != 4 || img.dim(1) != 1 || img.dim(2) != H || img.dim(3) != W)
      throw InvalidInput("forward: images must be {N,1,H,W} matching the configured size");
  const int N = images[0].dim(0);

  ModelOutput out;
  out.velocity_posteriors.resize(M);
  out.velocities.resize(M);

  // Multilevel structural codes of the original images.
  std::vector<ad::Var> x_vars;
  std::vector<std::vector<fusion::GaussVar>> codes(M);
  for (int m = 0; m < M; ++m) {
    x_vars.push_back(ad::constant(images[m]));
    codes[m] = encode(x_vars[m], m, training);
  }

  // Bottom-up velocity inference, coarsest level first.
  std::vector<ad::Var> comp_fwd(M), comp_inv(M);
  for (int m = 0; m < M; ++m) {
    comp_fwd[m] = ad::constant(Tensor({N, 2, H, W}));
    comp_inv[m] = ad::constant(Tensor({N, 2, H, W}));
  }
  for (int li = 0; li < L; ++li) {
    const int h = cfg_.level_h(li), w = cfg_.level_w(li);
    std::vector<fusion::GaussVar> warped_codes(M);
    for (int m = 0; m < M; ++m) {
      ad::Var comp_l = diffeo::resize_flow_ad(comp_fwd[m], h, w);
      warped_codes[m] = {ad::warp(codes[m][li].mean, comp_l, Boundary::clamp),
                         ad::warp(codes[m][li].log_var, comp_l, Boundary::clamp)};
    }
    // Variance-weighted group average of the warped mean codes.
    fusion::GaussVar group_avg = fusion::fuse_geometric_ad(warped_codes);
    for (int m = 0; m < M; ++m) {
      ad::Var head = reg_out_[li](
          reg_block_[li](ad::concat_ch(warped_codes[m].mean, group_avg.mean), m, training));
      fusion::GaussVar q_v = fusion::make_gauss(
          ad::slice_ch(head, 0, 2),
          ad::add_scalar(ad::slice_ch(head, 2, 4), kVelocityLogVarInit));
      ad::Var v = fusion::sample_reparameterized_ad(q_v, noise.velocity[m][li]);
      ad::Var v_full = diffeo::resize_flow_ad(v, H, W);
      ad::Var phi = diffeo::integrate_velocity_ad(v_full, cfg_.integration_steps);
      ad::Var phi_inv =
          diffeo::integrate_velocity_ad(ad::neg(v_full), cfg_.integration_steps);
      comp_fwd[m] = diffeo::compose_ad(comp_fwd[m], phi);
      comp_inv[m] = diffeo::compose_ad(phi_inv, comp_inv[m]);
      out.velocity_posteriors[m].push_back(std::move(q_v));
      out.velocities[m].push_back(std::move(v));
    }
  }
  out.forward_transforms = comp_fwd;
  out.inverse_transforms = comp_inv;

  // Top-down structure inference from the warped images.
  out.unimodal_posteriors.resize(M);
  for (int m = 0; m < M; ++m) {
    out.warped_images.push_back(ad::warp(x_vars[m], comp_fwd[m], Boundary::clamp));
    out.unimodal_posteriors[m] = encode(out.warped_images[m], m, training);
  }
  for (int li = 0; li < L; ++li) {
    std::vector<fusion::GaussVar> uni(M);
    for (int m = 0; m < M; ++m) uni[m] = out.unimodal_posteriors[m][li];
    fusion::GaussVar joint = fusion::fuse_geometric_ad(uni);
    out.latents.push_back(fusion::sample_reparameterized_ad(joint, noise.structure[li]));
    out.joint_posteriors.push_back(std::move(joint));
  }

  // Disentangled reconstruction per modality.
  for (int m = 0; m < M; ++m) {
    ad::Var xhat = decode(out.latents, m, training);
    out.image_recons.push_back(ad::warp(xhat, comp_inv[m], Boundary::clamp));
    out.common_recons.push_back(std::move(xhat));
  }
  return out;
}

}  // namespace gwreg::model
