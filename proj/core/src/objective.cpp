#include "gwreg/objective.hpp"

#include <cmath>

#include "gwreg/error.hpp"

namespace gwreg::objective {

void LossWeights::validate() const {
  if (lambda_v < 0.0 || beta_z < 0.0) throw ConfigError("loss weights must be nonnegative");
  if (sigma_x2 <= 0.0) throw ConfigError("loss.sigma_x2 must be positive");
}

Tensor degree_grid(int h, int w) {
  Tensor deg({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int d = 4;
      if (y == 0 || y == h - 1) --d;
      if (x == 0 || x == w - 1) --d;
      deg[int64_t(y) * w + x] = d;
    }
  return deg;
}

ad::Var reconstruction_loss_ad(const std::vector<ad::Var>& image_recons,
                               const std::vector<Tensor>& originals, double sigma_x2) {
  if (image_recons.size() != originals.size())
    throw InvalidInput("reconstruction_loss: modality count mismatch");
  ad::Var acc;
  int64_t pixels = 0;
  for (size_t m = 0; m < image_recons.size(); ++m) {
    if (!(image_recons[m].val().shape() == originals[m].shape()))
      throw InvalidInput("reconstruction_loss: shape mismatch");
    pixels += originals[m].numel();
    ad::Var sq = ad::sum(ad::square(ad::sub(image_recons[m], ad::constant(originals[m]))));
    acc = m == 0 ? sq : ad::add(acc, sq);
  }
  const double inv2s = 1.0 / (2.0 * sigma_x2);
  const double log_term = 0.5 * std::log(2.0 * M_PI * sigma_x2);
  return ad::add_scalar(ad::mul_scalar(acc, inv2s), double(pixels) * log_term);
}

ad::Var velocity_kl_ad(const std::vector<std::vector<fusion::GaussVar>>& posteriors,
                       double lambda_v) {
  ad::Var acc;
  bool first = true;
  for (const auto& per_mod : posteriors) {
    for (const auto& q : per_mod) {
      const auto& s = q.mean.val().shape();
      Tensor deg = degree_grid(s[2], s[3]);
      ad::Var sigma2 = ad::exp(q.log_var);
      // (lambda/2) * [sum of squared neighbor differences + sum deg*sigma^2]
      ad::Var smooth = ad::add(ad::sum(ad::square(ad::diff_y(q.mean))),
                               ad::sum(ad::square(ad::diff_x(q.mean))));
      ad::Var tr = ad::sum(ad::mul_plane(sigma2, deg));
      ad::Var term = ad::sub(ad::mul_scalar(ad::add(smooth, tr), 0.5 * lambda_v),
                             ad::mul_scalar(ad::sum(q.log_var), 0.5));
      acc = first ? term : ad::add(acc, term);
      first = false;
    }
  }
  if (first) throw InvalidInput("velocity_kl: no posteriors");
  return acc;
}

ad::Var structure_kl_ad(const std::vector<std::vector<fusion::GaussVar>>& unimodal_per_mod,
                        double beta_z) {
  if (unimodal_per_mod.empty()) throw InvalidInput("structure_kl: no posteriors");
  const size_t levels = unimodal_per_mod.front().size();
  for (const auto& per_mod : unimodal_per_mod)
    if (per_mod.size() != levels) throw InvalidInput("structure_kl: ragged level lists");
  ad::Var acc;
  for (size_t li = 0; li < levels; ++li) {
    std::vector<fusion::GaussVar> at_level;
    for (const auto& per_mod : unimodal_per_mod) at_level.push_back(per_mod[li]);
    ad::Var bound = fusion::structure_kl_bound_ad(at_level);
    acc = li == 0 ? bound : ad::add(acc, bound);
  }
  return ad::mul_scalar(acc, beta_z);
}

std::pair<ad::Var, ElboParts> elbo_ad(const model::ModelOutput& output,
                                      const std::vector<Tensor>& originals,
                                      const LossWeights& weights) {
  weights.validate();
  ad::Var rec = reconstruction_loss_ad(output.image_recons, originals, weights.sigma_x2);
  ad::Var vkl = velocity_kl_ad(output.velocity_posteriors, weights.lambda_v);
  ad::Var skl = structure_kl_ad(output.unimodal_posteriors, weights.beta_z);
  ad::Var total = ad::add(ad::add(rec, vkl), skl);
  ElboParts parts;
  parts.reconstruction = rec.val()[0];
  parts.velocity_kl = vkl.val()[0];
  parts.structure_kl = skl.val()[0];
  parts.total = total.val()[0];
  return {total, parts};
}

double reconstruction_loss(const std::vector<Tensor>& originals,
                           const std::vector<Tensor>& image_recons, double sigma_x2) {
  std::vector<ad::Var> recs;
  for (const auto& t : image_recons) recs.push_back(ad::constant(t));
  return reconstruction_loss_ad(recs, originals, sigma_x2).val()[0];
}

namespace {

std::vector<std::vector<fusion::GaussVar>> to_vars(
    const std::vector<std::vector<fusion::DiagGaussianField>>& fields) {
  std::vector<std::vector<fusion::GaussVar>> out(fields.size());
  for (size_t i = 0; i < fields.size(); ++i)
    for (const auto& g : fields[i]) {
      // shape bookkeeping: losses expect {N,C,H,W}
      out[i].push_back({ad::constant(g.mean), ad::constant(g.log_var)});
    }
  return out;
}

}  // namespace

double velocity_kl(const std::vector<std::vector<fusion::DiagGaussianField>>& posteriors,
                   double lambda_v) {
  return velocity_kl_ad(to_vars(posteriors), lambda_v).val()[0];
}

double structure_kl(const std::vector<std::vector<fusion::DiagGaussianField>>& unimodal_per_mod,
                    double beta_z) {
  return structure_kl_ad(to_vars(unimodal_per_mod), beta_z).val()[0];
}

}  // namespace gwreg::objective
