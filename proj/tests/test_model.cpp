#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "gwreg/error.hpp"
#include "gwreg/model.hpp"
#include "gwreg/rng.hpp"

using namespace gwreg;
using namespace gwreg::model;

namespace {

Tensor smooth_image(int n, int h, int w, uint64_t seed) {
  Rng rng(seed);
  Tensor img({n, 1, h, w});
  // low-frequency random mixture, values in [0,1]
  for (int i = 0; i < n; ++i) {
    const double fy = rng.uniform(1.0, 3.0), fx = rng.uniform(1.0, 3.0);
    const double py = rng.uniform(0.0, 6.28), px = rng.uniform(0.0, 6.28);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        img.at4(i, 0, y, x) =
            0.5 + 0.25 * std::sin(2 * M_PI * fy * y / h + py) * std::cos(2 * M_PI * fx * x / w + px) +
            0.15 * std::sin(2 * M_PI * (y + x) / (h + w));
  }
  return img;
}

ModelConfig small_config(int levels = 3, int modalities = 3, int size = 32) {
  ModelConfig cfg;
  cfg.num_levels = levels;
  cfg.num_modalities = modalities;
  cfg.base_channels = 4;
  cfg.image_size = {size, size};
  cfg.latent_channels_per_level.assign(levels, 2);
  return cfg;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig bad = small_config();
  bad.image_size = {30, 32};  // not divisible by 2^L
  CHECK_THROWS_AS(bad.finalize(), ConfigError);
  ModelConfig bad2 = small_config();
  bad2.num_levels = 1;
  CHECK_THROWS_AS(bad2.finalize(), ConfigError);

  ModelConfig def;
  def.finalize();
  CHECK(def.channels_per_level == std::vector<int>{64, 32, 16});
  CHECK(def.latent_channels_per_level == std::vector<int>{4, 4, 4});
}

TEST_CASE("forward output inventory and shape contract") {
  HierarchicalVae vae(small_config(), 1);
  const auto& cfg = vae.config();
  const int N = 2, M = 3, L = 3;
  std::vector<Tensor> images;
  for (int m = 0; m < M; ++m) images.push_back(smooth_image(N, 32, 32, 10 + m));
  ModelOutput out = vae.forward(images, vae.zero_noise(N), false);

  REQUIRE(int(out.velocity_posteriors.size()) == M);
  REQUIRE(int(out.joint_posteriors.size()) == L);
  REQUIRE(int(out.forward_transforms.size()) == M);
  REQUIRE(int(out.image_recons.size()) == M);
  for (int m = 0; m < M; ++m) {
    REQUIRE(int(out.velocity_posteriors[m].size()) == L);
    REQUIRE(int(out.unimodal_posteriors[m].size()) == L);
    for (int li = 0; li < L; ++li) {
      const auto& vshape = out.velocity_posteriors[m][li].mean.val().shape();
      CHECK(vshape == std::vector<int>{N, 2, cfg.level_h(li), cfg.level_w(li)});
      const auto& zshape = out.unimodal_posteriors[m][li].mean.val().shape();
      CHECK(zshape ==
            std::vector<int>{N, cfg.latent_channels_per_level[li], cfg.level_h(li),
                             cfg.level_w(li)});
    }
    CHECK(out.forward_transforms[m].val().shape() == std::vector<int>{N, 2, 32, 32});
    CHECK(out.inverse_transforms[m].val().shape() == std::vector<int>{N, 2, 32, 32});
  }
}

TEST_CASE("zero-initialized heads give exactly identity transforms") {
  HierarchicalVae vae(small_config(), 2);
  const int N = 1, M = 3;
  std::vector<Tensor> images;
  for (int m = 0; m < M; ++m) images.push_back(smooth_image(N, 32, 32, 20 + m));
  ModelOutput out = vae.forward(images, vae.zero_noise(N), false);
  for (int m = 0; m < M; ++m) {
    for (int64_t i = 0; i < out.forward_transforms[m].val().numel(); ++i) {
      CHECK(out.forward_transforms[m].val()[i] == 0.0);
      CHECK(out.inverse_transforms[m].val()[i] == 0.0);
    }
    // warped images equal inputs, and image-space recon equals common-space
    for (int64_t i = 0; i < images[m].numel(); ++i) {
      CHECK(out.warped_images[m].val()[i] == images[m][i]);
      CHECK(out.image_recons[m].val()[i] == out.common_recons[m].val()[i]);
    }
    // velocity posterior means are zero, log-variance at the init offset
    for (int li = 0; li < 3; ++li) {
      for (int64_t i = 0; i < out.velocity_posteriors[m][li].mean.val().numel(); ++i) {
        CHECK(out.velocity_posteriors[m][li].mean.val()[i] == 0.0);
        CHECK(out.velocity_posteriors[m][li].log_var.val()[i] == kVelocityLogVarInit);
      }
    }
  }
}

TEST_CASE("decoder output lies in (0,1)") {
  HierarchicalVae vae(small_config(), 3);
  std::vector<Tensor> images;
  for (int m = 0; m < 3; ++m) images.push_back(smooth_image(2, 32, 32, 30 + m));
  Rng rng(31);
  ModelOutput out = vae.forward(images, vae.sample_noise(2, rng), true);
  for (int m = 0; m < 3; ++m)
    for (int64_t i = 0; i < out.common_recons[m].val().numel(); ++i) {
      CHECK(out.common_recons[m].val()[i] > 0.0);
      CHECK(out.common_recons[m].val()[i] < 1.0);
    }
}

TEST_CASE("identical inputs and banks give identical velocity posteriors across modalities") {
  HierarchicalVae vae(small_config(), 4);
  Tensor img = smooth_image(2, 32, 32, 40);
  std::vector<Tensor> images = {img, img, img};
  ModelOutput out = vae.forward(images, vae.zero_noise(2), false);
  for (int li = 0; li < 3; ++li)
    for (int m = 1; m < 3; ++m)
      for (int64_t i = 0; i < out.velocity_posteriors[0][li].mean.val().numel(); ++i) {
        CHECK(out.velocity_posteriors[m][li].mean.val()[i] ==
              out.velocity_posteriors[0][li].mean.val()[i]);
        CHECK(out.velocity_posteriors[m][li].log_var.val()[i] ==
              out.velocity_posteriors[0][li].log_var.val()[i]);
      }
}

TEST_CASE("modality-specific normalization differentiates codes and reconstructions") {
  HierarchicalVae vae(small_config(), 5);
  // emulate a trained state: perturb the BN affine banks per modality
  Rng rng(51);
  for (auto& e : vae.params().params()) {
    if (e.name.find(".bn.") != std::string::npos) {
      Tensor& t = e.var.val_mut();
      for (int64_t i = 0; i < t.numel(); ++i) t[i] += rng.uniform(-0.3, 0.3);
    }
  }
  Tensor img = smooth_image(1, 32, 32, 52);
  ad::Var x = ad::constant(img);
  auto codes0 = vae.encode(x, 0, false);
  auto codes1 = vae.encode(x, 1, false);
  double diff = 0.0;
  for (int64_t i = 0; i < codes0[0].mean.val().numel(); ++i)
    diff += std::abs(codes0[0].mean.val()[i] - codes1[0].mean.val()[i]);
  CHECK(diff > 1e-3);

  // same latents decoded under different modality indices differ
  std::vector<Tensor> images = {img, img, img};
  ModelOutput out = vae.forward(images, vae.zero_noise(1), false);
  double rdiff = 0.0;
  for (int64_t i = 0; i < out.common_recons[0].val().numel(); ++i)
    rdiff += std::abs(out.common_recons[0].val()[i] - out.common_recons[1].val()[i]);
  CHECK(rdiff > 1e-3);
}

TEST_CASE("encode rejects unknown modality") {
  HierarchicalVae vae(small_config(), 6);
  ad::Var x = ad::constant(smooth_image(1, 32, 32, 60));
  CHECK_THROWS_AS(vae.encode(x, 5, false), InvalidInput);
}

TEST_CASE("structural codes are translation-equivariant (frozen statistics)") {
  ModelConfig cfg = small_config(3, 2, 64);
  HierarchicalVae vae(cfg, 7);
  const int h = 64, w = 64, shift = 4;
  Tensor img = smooth_image(1, h, w, 70);
  Tensor shifted({1, 1, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      shifted.at4(0, 0, y, x) =
          img.at4(0, 0, std::max(y - shift, 0), std::max(x - shift, 0));

  auto codes = vae.encode(ad::constant(img), 0, false);
  auto codes_shifted = vae.encode(ad::constant(shifted), 0, false);
  for (int li = 0; li < 3; ++li) {
    const int stride = 1 << (3 - 1 - li);
    const int s = shift / stride;
    const auto& a = codes[li].mean.val();
    const auto& b = codes_shifted[li].mean.val();
    const int lh = a.dim(2), lw = a.dim(3);
    double num = 0.0, den = 0.0;
    for (int c = 0; c < a.dim(1); ++c)
      for (int y = 4 + s; y < lh - 4; ++y)
        for (int x = 4 + s; x < lw - 4; ++x) {
          const double ref = a.at4(0, c, y - s, x - s);
          const double got = b.at4(0, c, y, x);
          num += (got - ref) * (got - ref);
          den += ref * ref;
        }
    INFO("level ", li);
    CHECK(std::sqrt(num / den) < 0.15);
  }
}

TEST_CASE("convolution weights are shared across modalities; only BN banks differ") {
  HierarchicalVae vae(small_config(), 8);
  int conv_params = 0, bn_bank_params = 0;
  std::set<std::string> bn_base_names;
  for (const auto& e : vae.params().params()) {
    if (e.name.find(".conv.") != std::string::npos) {
      ++conv_params;
      // conv parameters must not be modality-indexed
      CHECK(e.name.find(".bn.") == std::string::npos);
    } else {
      const auto pos = e.name.find(".bn.");
      REQUIRE(pos != std::string::npos);
      ++bn_bank_params;
      // strip the modality index to count distinct layers
      std::string base = e.name.substr(0, pos);
      std::string tail = e.name.substr(pos + 4);
      bn_base_names.insert(base + "." + tail.substr(tail.find('.') + 1));
    }
  }
  CHECK(conv_params > 0);
  // each de-indexed BN parameter name (layer + gamma/beta) appears once per
  // modality bank
  CHECK(bn_bank_params == int(bn_base_names.size()) * 3);
}

TEST_CASE("forward is deterministic given the seed") {
  auto run = [](uint64_t model_seed, uint64_t noise_seed) {
    HierarchicalVae vae(small_config(), model_seed);
    std::vector<Tensor> images;
    for (int m = 0; m < 3; ++m) images.push_back(smooth_image(2, 32, 32, 90 + m));
    Rng rng(noise_seed);
    ModelOutput out = vae.forward(images, vae.sample_noise(2, rng), true);
    return out.image_recons[2].val();
  };
  Tensor a = run(9, 10);
  Tensor b = run(9, 10);
  REQUIRE(a.numel() == b.numel());
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("joint posterior is permutation-invariant over modality order") {
  HierarchicalVae vae(small_config(), 11);
  std::vector<Tensor> images;
  for (int m = 0; m < 3; ++m) images.push_back(smooth_image(1, 32, 32, 110 + m));
  ModelOutput out = vae.forward(images, vae.zero_noise(1), false);
  for (int li = 0; li < 3; ++li) {
    std::vector<fusion::GaussVar> order1, order2;
    for (int m : {0, 1, 2}) order1.push_back(out.unimodal_posteriors[m][li]);
    for (int m : {2, 0, 1}) order2.push_back(out.unimodal_posteriors[m][li]);
    fusion::GaussVar f1 = fusion::fuse_geometric_ad(order1);
    fusion::GaussVar f2 = fusion::fuse_geometric_ad(order2);
    for (int64_t i = 0; i < f1.mean.val().numel(); ++i) {
      CHECK(f1.mean.val()[i] == doctest::Approx(f2.mean.val()[i]).epsilon(1e-12));
      CHECK(f1.log_var.val()[i] == doctest::Approx(f2.log_var.val()[i]).epsilon(1e-12));
    }
  }
}
