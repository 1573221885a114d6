#include <cmath>
#include <vector>

#include "doctest.h"
#include "gwreg/error.hpp"
#include "gwreg/model.hpp"
#include "gwreg/objective.hpp"
#include "gwreg/rng.hpp"

using namespace gwreg;
using namespace gwreg::objective;

namespace {

Tensor smooth_image(int n, int h, int w, uint64_t seed) {
  Rng rng(seed);
  Tensor img({n, 1, h, w});
  for (int i = 0; i < n; ++i) {
    const double fy = rng.uniform(1.0, 3.0), fx = rng.uniform(1.0, 3.0);
    const double p = rng.uniform(0.0, 6.28);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        img.at4(i, 0, y, x) =
            0.5 + 0.3 * std::sin(2 * M_PI * fy * y / h + p) * std::cos(2 * M_PI * fx * x / w);
  }
  return img;
}

fusion::DiagGaussianField make_field(const Tensor& mean, const Tensor& lv) {
  return fusion::DiagGaussianField(mean, lv);
}

}  // namespace

TEST_CASE("reconstruction loss analytic values") {
  const int n = 1, h = 4, w = 5;
  const double sigma_x2 = 0.01;
  Tensor x({n, 1, h, w});
  Rng rng(1);
  rng.fill_uniform(x, 0.0, 1.0);

  // perfect reconstruction -> constant term only
  const double expect_const = h * w * 0.5 * std::log(2.0 * M_PI * sigma_x2);
  CHECK(reconstruction_loss({x}, {x}, sigma_x2) ==
        doctest::Approx(expect_const).epsilon(1e-12));

  // constant offset delta raises the loss by N*delta^2/(2 sigma^2)
  const double delta = 0.1;
  Tensor shifted = x;
  for (int64_t i = 0; i < shifted.numel(); ++i) shifted[i] += delta;
  CHECK(reconstruction_loss({x}, {shifted}, sigma_x2) ==
        doctest::Approx(expect_const + h * w * delta * delta / (2 * sigma_x2)).epsilon(1e-9));

  CHECK_THROWS_AS(reconstruction_loss({x}, {Tensor({1, 1, 2, 2})}, sigma_x2), InvalidInput);
}

TEST_CASE("reconstruction loss gradient is (recon - x)/sigma^2") {
  const double sigma_x2 = 0.04;
  Tensor x({1, 1, 3, 3});
  Tensor r({1, 1, 3, 3});
  Rng rng(2);
  rng.fill_uniform(x, 0.0, 1.0);
  rng.fill_uniform(r, 0.0, 1.0);
  ad::Var recon = ad::param(r);
  ad::Var loss = reconstruction_loss_ad({recon}, {x}, sigma_x2);
  ad::backward(loss);
  for (int64_t i = 0; i < r.numel(); ++i)
    CHECK(recon.grad()[i] == doctest::Approx((r[i] - x[i]) / sigma_x2).epsilon(1e-9));
}

TEST_CASE("velocity KL analytic cases") {
  const int h = 5, w = 6;
  const double lambda = 10.0;
  Tensor deg = degree_grid(h, w);
  double deg_sum = 0.0;
  for (int64_t i = 0; i < deg.numel(); ++i) deg_sum += deg[i];

  // mu = 0, sigma^2 = 1: only the degree term survives (both channels)
  std::vector<std::vector<fusion::DiagGaussianField>> posts(1);
  posts[0].push_back(make_field(Tensor({1, 2, h, w}), Tensor({1, 2, h, w})));
  CHECK(velocity_kl(posts, lambda) ==
        doctest::Approx(0.5 * lambda * 2.0 * deg_sum).epsilon(1e-12));

  // constant nonzero mean: smoothness term vanishes
  Tensor mu = Tensor::full({1, 2, h, w}, 1.7);
  std::vector<std::vector<fusion::DiagGaussianField>> posts2(1);
  posts2[0].push_back(make_field(mu, Tensor({1, 2, h, w})));
  CHECK(velocity_kl(posts2, lambda) ==
        doctest::Approx(0.5 * lambda * 2.0 * deg_sum).epsilon(1e-12));

  // lambda-proportional terms scale linearly; the entropy term does not
  Rng rng(3);
  Tensor mu3({1, 2, h, w}), lv3({1, 2, h, w});
  rng.fill_uniform(mu3, -1.0, 1.0);
  rng.fill_uniform(lv3, -1.0, 1.0);
  std::vector<std::vector<fusion::DiagGaussianField>> posts3(1);
  posts3[0].push_back(make_field(mu3, lv3));
  const double v0 = velocity_kl(posts3, 0.0);
  const double v1 = velocity_kl(posts3, lambda);
  const double v2 = velocity_kl(posts3, 2.0 * lambda);
  CHECK(v2 - v0 == doctest::Approx(2.0 * (v1 - v0)).epsilon(1e-9));

  // lambda = 0 leaves the pure entropy-like term
  double lv_sum = 0.0;
  for (int64_t i = 0; i < lv3.numel(); ++i) lv_sum += lv3[i];
  CHECK(v0 == doctest::Approx(-0.5 * lv_sum).epsilon(1e-9));
}

TEST_CASE("structure KL analytic cases and permutation invariance") {
  Rng rng(4);
  Tensor mean({1, 2, 3, 3}), lv({1, 2, 3, 3});
  rng.fill_uniform(mean, -1.0, 1.0);
  rng.fill_uniform(lv, -1.0, 1.0);
  auto g = make_field(mean, lv);
  std::vector<std::vector<fusion::DiagGaussianField>> identical = {{g}, {g}, {g}};
  CHECK(structure_kl(identical, 1.0) == doctest::Approx(0.0).epsilon(1e-12));

  // M=2 single site N(0,1), N(2,1) at one level -> beta * 0.5
  auto a = make_field(Tensor({1, 1, 1, 1}, {0.0}), Tensor({1, 1, 1, 1}));
  auto b = make_field(Tensor({1, 1, 1, 1}, {2.0}), Tensor({1, 1, 1, 1}));
  std::vector<std::vector<fusion::DiagGaussianField>> pair = {{a}, {b}};
  CHECK(structure_kl(pair, 1.0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(structure_kl(pair, 2.5) == doctest::Approx(1.25).epsilon(1e-12));

  Tensor m2({1, 2, 3, 3}), l2({1, 2, 3, 3});
  rng.fill_uniform(m2, -1.0, 1.0);
  rng.fill_uniform(l2, -1.0, 1.0);
  auto h2 = make_field(m2, l2);
  std::vector<std::vector<fusion::DiagGaussianField>> ord1 = {{g}, {h2}};
  std::vector<std::vector<fusion::DiagGaussianField>> ord2 = {{h2}, {g}};
  CHECK(structure_kl(ord1, 1.0) == doctest::Approx(structure_kl(ord2, 1.0)).epsilon(1e-12));
}

TEST_CASE("elbo components sum to the total and respect zero weights") {
  model::ModelConfig cfg;
  cfg.num_levels = 2;
  cfg.num_modalities = 2;
  cfg.base_channels = 4;
  cfg.image_size = {8, 8};
  cfg.latent_channels_per_level = {2, 2};
  model::HierarchicalVae vae(cfg, 5);
  std::vector<Tensor> images = {smooth_image(1, 8, 8, 50), smooth_image(1, 8, 8, 51)};
  Rng rng(52);
  model::ModelOutput out = vae.forward(images, vae.sample_noise(1, rng), true);

  LossWeights w;
  auto [total, parts] = elbo_ad(out, images, w);
  CHECK(parts.total == parts.reconstruction + parts.velocity_kl + parts.structure_kl);
  CHECK(parts.structure_kl >= 0.0);
  CHECK(total.val()[0] == parts.total);

  // lambda = beta = 0 with unit-variance velocity posteriors: total equals
  // the reconstruction term exactly (entropy term vanishes at log_var = 0).
  model::ModelOutput out2 = out;
  for (auto& per_mod : out2.velocity_posteriors)
    for (auto& q : per_mod)
      q.log_var = ad::constant(Tensor(q.log_var.val().shape()));
  LossWeights w0;
  w0.lambda_v = 0.0;
  w0.beta_z = 0.0;
  auto [total0, parts0] = elbo_ad(out2, images, w0);
  CHECK(parts0.velocity_kl == 0.0);
  CHECK(parts0.structure_kl == 0.0);
  CHECK(total0.val()[0] == parts0.reconstruction);

  LossWeights bad;
  bad.sigma_x2 = 0.0;
  CHECK_THROWS_AS(elbo_ad(out, images, bad), ConfigError);
}

TEST_CASE("end-to-end ELBO gradient matches finite differences") {
  // Spec-pinned: 8x8, L=2, M=2, 20 random parameters, rel. error < 1e-2.
  model::ModelConfig cfg;
  cfg.num_levels = 2;
  cfg.num_modalities = 2;
  cfg.base_channels = 4;
  cfg.image_size = {8, 8};
  cfg.latent_channels_per_level = {2, 2};
  model::HierarchicalVae vae(cfg, 6);
  std::vector<Tensor> images = {smooth_image(2, 8, 8, 60), smooth_image(2, 8, 8, 61)};
  Rng noise_rng(62);
  model::NoiseBundle noise = vae.sample_noise(2, noise_rng);
  LossWeights w;
  w.lambda_v = 5.0;

  auto loss_value = [&]() {
    model::ModelOutput out = vae.forward(images, noise, true);
    return elbo_ad(out, images, w);
  };

  auto [loss, parts] = loss_value();
  ad::backward(loss);

  // snapshot analytic grads, then probe 20 randomly chosen parameters
  auto& params = vae.params().params();
  Rng pick(63);
  const double eps = 1e-4;
  for (int probe = 0; probe < 20; ++probe) {
    const size_t pi = pick.next_u64() % params.size();
    Tensor& value = params[pi].var.val_mut();
    const int64_t ei = int64_t(pick.next_u64() % uint64_t(value.numel()));
    const double an = params[pi].var.has_grad() ? params[pi].var.grad()[ei] : 0.0;
    const double orig = value[ei];
    value[ei] = orig + eps;
    const double lp = loss_value().first.val()[0];
    value[ei] = orig - eps;
    const double lm = loss_value().first.val()[0];
    value[ei] = orig;
    const double fd = (lp - lm) / (2 * eps);
    const double scale = std::max({std::abs(fd), std::abs(an), 1e-8});
    INFO("param ", params[pi].name, "[", ei, "] fd=", fd, " an=", an);
    CHECK(std::abs(fd - an) / scale < 1e-2);
  }
}

TEST_CASE("one optimizer step on a fixed batch reduces the loss") {
  int improved = 0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    model::ModelConfig cfg;
    cfg.num_levels = 2;
    cfg.num_modalities = 2;
    cfg.base_channels = 4;
    cfg.image_size = {16, 16};
    cfg.latent_channels_per_level = {2, 2};
    model::HierarchicalVae vae(cfg, derive_seed(70, 0, seed));
    std::vector<Tensor> images = {smooth_image(2, 16, 16, derive_seed(70, 1, seed)),
                                  smooth_image(2, 16, 16, derive_seed(70, 2, seed))};
    Rng noise_rng(derive_seed(70, 3, seed));
    model::NoiseBundle noise = vae.sample_noise(2, noise_rng);
    LossWeights w;
    nn::Adam opt(1e-3);

    model::ModelOutput out = vae.forward(images, noise, true);
    auto [loss, parts] = elbo_ad(out, images, w);
    nn::Adam::zero_grad(vae.params());
    ad::backward(loss);
    opt.step(vae.params());

    model::ModelOutput out2 = vae.forward(images, noise, true);
    auto [loss2, parts2] = elbo_ad(out2, images, w);
    if (loss2.val()[0] < loss.val()[0]) ++improved;
  }
  CHECK(improved >= 9);
}
