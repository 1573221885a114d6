#include "gwreg/baseline.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <memory>

#include "gwreg/error.hpp"

namespace gwreg::baseline {

namespace {

constexpr double kLogFloor = 1e-10;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void check_intensities(const Tensor& t, const char* op) {
  for (int64_t i = 0; i < t.numel(); ++i)
    if (!(t[i] >= 0.0 && t[i] <= 1.0))
      throw InvalidInput(std::string(op) + ": intensities must lie in [0,1]");
}

/// Per-pixel normalized Gaussian bin weights and their intensity derivative.
struct PixelWeights {
  RowMat w;   // {P, B}
  RowMat dw;  // {P, B}
};

PixelWeights pixel_weights(const Tensor& img, const HistogramMIConfig& cfg) {
  const int b = cfg.num_bins;
  const int64_t p = img.numel();
  const double sigma = cfg.kernel_sigma / b;
  const double inv_s2 = 1.0 / (sigma * sigma);
  PixelWeights out{RowMat(p, b), RowMat(p, b)};
  for (int64_t i = 0; i < p; ++i) {
    const double x = img[i];
    double z = 0.0, dz = 0.0;
    for (int k = 0; k < b; ++k) {
      const double c = (k + 0.5) / b;
      const double t = std::exp(-0.5 * (x - c) * (x - c) * inv_s2);
      const double dt = t * (c - x) * inv_s2;
      out.w(i, k) = t;
      out.dw(i, k) = dt;
      z += t;
      dz += dt;
    }
    const double inv_z = 1.0 / z;
    for (int k = 0; k < b; ++k) {
      const double w = out.w(i, k) * inv_z;
      out.dw(i, k) = out.dw(i, k) * inv_z - w * dz * inv_z;
      out.w(i, k) = w;
    }
  }
  return out;
}

RowMat joint_from_weights(const RowMat& wa, const RowMat& wb) {
  RowMat joint = wa.transpose() * wb;
  joint *= 1.0 / double(wa.rows());
  return joint;
}

double mi_from_joint(const RowMat& joint) {
  const int b = int(joint.rows());
  Eigen::VectorXd pa = joint.rowwise().sum();
  Eigen::VectorXd pb = joint.colwise().sum();
  double mi = 0.0;
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < b; ++j) {
      const double p = joint(i, j);
      mi += p * (std::log(std::max(p, kLogFloor)) - std::log(std::max(pa[i], kLogFloor)) -
                 std::log(std::max(pb[j], kLogFloor)));
    }
  return mi;
}

/// dMI/d joint, accounting for the marginals' dependence on the joint.
RowMat mi_joint_gradient(const RowMat& joint) {
  const int b = int(joint.rows());
  Eigen::VectorXd pa = joint.rowwise().sum();
  Eigen::VectorXd pb = joint.colwise().sum();
  RowMat g(b, b);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < b; ++j) {
      const double p = joint(i, j);
      double v = std::log(std::max(p, kLogFloor)) - std::log(std::max(pa[i], kLogFloor)) -
                 std::log(std::max(pb[j], kLogFloor));
      if (p > kLogFloor) v += 1.0;
      if (pa[i] > kLogFloor) v -= 1.0;
      if (pb[j] > kLogFloor) v -= 1.0;
      g(i, j) = v;
    }
  return g;
}

}  // namespace

void HistogramMIConfig::validate() const {
  if (num_bins < 2) throw ConfigError("mi.num_bins must be >= 2");
  if (kernel_sigma <= 0.0) throw ConfigError("mi.kernel_sigma must be positive");
}

Tensor soft_joint_histogram(const Tensor& a, const Tensor& b, const HistogramMIConfig& cfg) {
  cfg.validate();
  if (!(a.shape() == b.shape())) throw InvalidInput("soft_joint_histogram: shape mismatch");
  check_intensities(a, "soft_joint_histogram");
  check_intensities(b, "soft_joint_histogram");
  PixelWeights wa = pixel_weights(a, cfg);
  PixelWeights wb = pixel_weights(b, cfg);
  RowMat joint = joint_from_weights(wa.w, wb.w);
  Tensor out({cfg.num_bins, cfg.num_bins});
  for (int i = 0; i < cfg.num_bins; ++i)
    for (int j = 0; j < cfg.num_bins; ++j) out[int64_t(i) * cfg.num_bins + j] = joint(i, j);
  return out;
}

double mutual_information(const Tensor& a, const Tensor& b, const HistogramMIConfig& cfg) {
  cfg.validate();
  if (!(a.shape() == b.shape())) throw InvalidInput("mutual_information: shape mismatch");
  check_intensities(a, "mutual_information");
  check_intensities(b, "mutual_information");
  PixelWeights wa = pixel_weights(a, cfg);
  PixelWeights wb = pixel_weights(b, cfg);
  return mi_from_joint(joint_from_weights(wa.w, wb.w));
}

double soft_entropy(const Tensor& a, const HistogramMIConfig& cfg) {
  cfg.validate();
  check_intensities(a, "soft_entropy");
  PixelWeights wa = pixel_weights(a, cfg);
  Eigen::VectorXd marginal = wa.w.colwise().sum() / double(wa.w.rows());
  double h = 0.0;
  for (int k = 0; k < cfg.num_bins; ++k)
    h -= marginal[k] * std::log(std::max(marginal[k], kLogFloor));
  return h;
}

double ape_loss(const std::vector<Tensor>& warped, const HistogramMIConfig& cfg) {
  const int m = int(warped.size());
  if (m < 2) throw InvalidInput("ape_loss: needs at least two images");
  double acc = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) acc += mutual_information(warped[i], warped[j], cfg);
  return -2.0 / (double(m) * (m - 1)) * acc;
}

ad::Var mutual_information_ad(const ad::Var& a, const ad::Var& b, const HistogramMIConfig& cfg) {
  cfg.validate();
  if (!(a.val().shape() == b.val().shape()))
    throw InvalidInput("mutual_information_ad: shape mismatch");
  check_intensities(a.val(), "mutual_information_ad");
  check_intensities(b.val(), "mutual_information_ad");
  auto wa = std::make_shared<PixelWeights>(pixel_weights(a.val(), cfg));
  auto wb = std::make_shared<PixelWeights>(pixel_weights(b.val(), cfg));
  auto joint = std::make_shared<RowMat>(joint_from_weights(wa->w, wb->w));
  const double mi = mi_from_joint(*joint);
  return ad::make_node(
      Tensor::scalar(mi), {a, b}, [a, b, wa, wb, joint](ad::Node& self) {
        const double g_out = self.grad[0];
        RowMat g = mi_joint_gradient(*joint);
        const int64_t pixels = wa->w.rows();
        const double scale = g_out / double(pixels);
        if (a.requires_grad()) {
          Tensor& ga = ad::grad_of(a);
          RowMat v = wb->w * g.transpose();  // {P,B}, v(p,i) = sum_j wb(p,j) g(i,j)
          for (int64_t p = 0; p < pixels; ++p)
            ga[p] += scale * wa->dw.row(p).dot(v.row(p));
        }
        if (b.requires_grad()) {
          Tensor& gb = ad::grad_of(b);
          RowMat u = wa->w * g;  // {P,B}, u(p,j) = sum_i wa(p,i) g(i,j)
          for (int64_t p = 0; p < pixels; ++p)
            gb[p] += scale * wb->dw.row(p).dot(u.row(p));
        }
      });
}

ad::Var ape_loss_ad(const std::vector<ad::Var>& warped, const HistogramMIConfig& cfg) {
  const int m = int(warped.size());
  if (m < 2) throw InvalidInput("ape_loss_ad: needs at least two images");
  ad::Var acc;
  bool first = true;
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      ad::Var mi = mutual_information_ad(warped[i], warped[j], cfg);
      acc = first ? mi : ad::add(acc, mi);
      first = false;
    }
  return ad::mul_scalar(acc, -2.0 / (double(m) * (m - 1)));
}

void ResUNetConfig::finalize() {
  if (levels < 2) throw ConfigError("baseline.levels must be >= 2");
  if (base_channels < 1) throw ConfigError("baseline.base_channels must be positive");
  if (num_modalities < 2) throw ConfigError("baseline.num_modalities must be >= 2");
  const int div = 1 << (levels - 1);
  if (image_size[0] % div != 0 || image_size[1] % div != 0)
    throw ConfigError("baseline.image_size must be divisible by 2^(levels-1)");
}

ResUNet::ResBlock::ResBlock(nn::ParamRegistry& reg, const std::string& prefix, int channels,
                            double momentum, Rng& rng)
    : conv1(reg, prefix + ".conv1", channels, channels, 3, 1, 1, 1, momentum, rng),
      conv2(reg, prefix + ".conv2", channels, channels, 3, 1, 1, rng),
      bn2(reg, prefix + ".conv2", channels, 1, momentum) {}

ad::Var ResUNet::ResBlock::operator()(const ad::Var& x, bool training) const {
  ad::Var h = conv1(x, 0, training);
  h = bn2(conv2(h), 0, training);
  return ad::leaky_relu(ad::add(h, x), 0.2);
}

ResUNet::ResUNet(ResUNetConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.finalize();
  Rng rng(seed);
  const int levels = cfg_.levels;
  const double mom = cfg_.bn_momentum;
  auto ch = [&](int i) { return std::min(cfg_.base_channels << i, 64); };

  stem_.emplace_back(reg_, "unet.enc1.stem", cfg_.num_modalities, ch(0), 3, 1, 1, 1, mom, rng);
  for (int i = 0; i < levels; ++i) {
    enc_res_.emplace_back(reg_, "unet.enc" + std::to_string(i + 1) + ".res", ch(i), mom, rng);
    if (i < levels - 1)
      down_.emplace_back(reg_, "unet.enc" + std::to_string(i + 2) + ".down", ch(i), ch(i + 1), 3,
                         2, 1, 1, mom, rng);
  }
  for (int i = levels - 2; i >= 0; --i) {
    up_.emplace_back(reg_, "unet.dec" + std::to_string(i + 1) + ".up", ch(i + 1), ch(i), 3, 1, 1,
                     1, mom, rng);
    fuse_.emplace_back(reg_, "unet.dec" + std::to_string(i + 1) + ".fuse", 2 * ch(i), ch(i), 3, 1,
                       1, 1, mom, rng);
    dec_res_.emplace_back(reg_, "unet.dec" + std::to_string(i + 1) + ".res", ch(i), mom, rng);
  }
  head_.emplace_back(reg_, "unet.head", ch(0), 2 * cfg_.num_modalities, 3, 1, 1, rng,
                     /*zero_init=*/true);
}

std::vector<ad::Var> ResUNet::forward(const Tensor& group_images, bool training) {
  if (group_images.rank() != 4 || group_images.dim(1) != cfg_.num_modalities ||
      group_images.dim(2) != cfg_.image_size[0] || group_images.dim(3) != cfg_.image_size[1])
    throw InvalidInput("ResUNet::forward: expected {N,M,H,W} matching the configured size");
  const int levels = cfg_.levels;
  ad::Var feat = stem_[0](ad::constant(group_images), 0, training);
  std::vector<ad::Var> skips;
  for (int i = 0; i < levels; ++i) {
    feat = enc_res_[i](feat, training);
    if (i < levels - 1) {
      skips.push_back(feat);
      feat = down_[i](feat, 0, training);
    }
  }
  for (int i = levels - 2; i >= 0; --i) {
    const int h = cfg_.image_size[0] >> i, w = cfg_.image_size[1] >> i;
    feat = ad::bilinear_resize(feat, h, w);
    const int di = levels - 2 - i;
    feat = up_[di](feat, 0, training);
    feat = fuse_[di](ad::concat_ch(feat, skips[i]), 0, training);
    feat = dec_res_[di](feat, training);
  }
  ad::Var head = head_[0](feat);
  std::vector<ad::Var> velocities;
  for (int m = 0; m < cfg_.num_modalities; ++m)
    velocities.push_back(ad::slice_ch(head, 2 * m, 2 * m + 2));
  return velocities;
}

}  // namespace gwreg::baseline
