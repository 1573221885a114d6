#include "gwreg/fusion.hpp"

#include <algorithm>
#include <cmath>

#include "gwreg/error.hpp"

namespace gwreg::fusion {

DiagGaussianField::DiagGaussianField(Tensor mean_, Tensor log_var_)
    : mean(std::move(mean_)), log_var(std::move(log_var_)) {
  if (!(mean.shape() == log_var.shape()))
    throw InvalidInput("DiagGaussianField: mean/log_var shape mismatch");
  if (!mean.all_finite() || !log_var.all_finite())
    throw InvalidInput("DiagGaussianField: non-finite values");
  for (int64_t i = 0; i < log_var.numel(); ++i)
    log_var[i] = std::clamp(log_var[i], kLogVarMin, kLogVarMax);
}

namespace {

void check_family(const std::vector<DiagGaussianField>& fields, const char* op) {
  if (fields.empty()) throw InvalidInput(std::string(op) + ": empty posterior list");
  for (const auto& f : fields)
    if (!(f.mean.shape() == fields.front().mean.shape()))
      throw InvalidInput(std::string(op) + ": shape mismatch across posteriors");
}

}  // namespace

DiagGaussianField fuse_geometric(const std::vector<DiagGaussianField>& posteriors) {
  check_family(posteriors, "fuse_geometric");
  const int m = static_cast<int>(posteriors.size());
  const int64_t n = posteriors.front().mean.numel();
  Tensor acc_prec(posteriors.front().mean.shape());
  Tensor acc_num(posteriors.front().mean.shape());
  for (int j = 0; j < m; ++j) {
    const auto& g = posteriors[j];
    for (int64_t i = 0; i < n; ++i) {
      const double prec = std::exp(-g.log_var[i]);
      acc_prec[i] += prec;
      acc_num[i] += g.mean[i] * prec;
    }
  }
  Tensor mean(posteriors.front().mean.shape());
  Tensor log_var(posteriors.front().mean.shape());
  const double inv_m = 1.0 / m;
  for (int64_t i = 0; i < n; ++i) {
    mean[i] = acc_num[i] / acc_prec[i];
    log_var[i] = -std::log(acc_prec[i] * inv_m);
  }
  return DiagGaussianField(std::move(mean), std::move(log_var));
}

double kl_diag_gaussian(const DiagGaussianField& q, const DiagGaussianField& p) {
  if (!(q.mean.shape() == p.mean.shape()))
    throw InvalidInput("kl_diag_gaussian: shape mismatch");
  // (sigma_q^2 + d^2)/sigma_p^2 is split as exp(lv_q - lv_p) + d^2*exp(-lv_p)
  // so that q == p yields exactly zero.
  double acc = 0.0;
  for (int64_t i = 0; i < q.mean.numel(); ++i) {
    const double d = q.mean[i] - p.mean[i];
    const double t =
        std::exp(q.log_var[i] - p.log_var[i]) + d * d * std::exp(-p.log_var[i]);
    acc += 0.5 * (((p.log_var[i] - q.log_var[i]) + t) - 1.0);
  }
  return acc;
}

double structure_kl_bound(const std::vector<DiagGaussianField>& unimodals) {
  check_family(unimodals, "structure_kl_bound");
  const DiagGaussianField fused = fuse_geometric(unimodals);
  double acc = 0.0;
  for (const auto& g : unimodals) acc += kl_diag_gaussian(fused, g);
  return acc * (1.0 / unimodals.size());
}

Tensor sample_reparameterized(const DiagGaussianField& g, const Tensor& noise) {
  if (!(noise.shape() == g.mean.shape()))
    throw InvalidInput("sample_reparameterized: noise shape mismatch");
  Tensor out(g.mean.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = g.mean[i] + std::exp(0.5 * g.log_var[i]) * noise[i];
  return out;
}

GaussVar make_gauss(ad::Var mean, ad::Var log_var_raw) {
  return {std::move(mean), ad::clamp(log_var_raw, kLogVarMin, kLogVarMax)};
}

GaussVar fuse_geometric_ad(const std::vector<GaussVar>& posteriors) {
  if (posteriors.empty()) throw InvalidInput("fuse_geometric_ad: empty posterior list");
  const int m = static_cast<int>(posteriors.size());
  ad::Var acc_prec, acc_num;
  for (int j = 0; j < m; ++j) {
    ad::Var prec = ad::exp(ad::neg(posteriors[j].log_var));
    ad::Var num = ad::mul(posteriors[j].mean, prec);
    acc_prec = j == 0 ? prec : ad::add(acc_prec, prec);
    acc_num = j == 0 ? num : ad::add(acc_num, num);
  }
  ad::Var mean = ad::div(acc_num, acc_prec);
  ad::Var log_var = ad::neg(ad::log(ad::mul_scalar(acc_prec, 1.0 / m)));
  return {std::move(mean), std::move(log_var)};
}

ad::Var kl_diag_gaussian_ad(const GaussVar& q, const GaussVar& p) {
  ad::Var d = ad::sub(q.mean, p.mean);
  ad::Var t = ad::add(ad::exp(ad::sub(q.log_var, p.log_var)),
                      ad::mul(ad::square(d), ad::exp(ad::neg(p.log_var))));
  ad::Var per_site =
      ad::mul_scalar(ad::add_scalar(ad::add(ad::sub(p.log_var, q.log_var), t), -1.0), 0.5);
  return ad::sum(per_site);
}

ad::Var structure_kl_bound_ad(const std::vector<GaussVar>& unimodals) {
  if (unimodals.empty()) throw InvalidInput("structure_kl_bound_ad: empty posterior list");
  const GaussVar fused = fuse_geometric_ad(unimodals);
  ad::Var acc;
  for (size_t j = 0; j < unimodals.size(); ++j) {
    ad::Var kl = kl_diag_gaussian_ad(fused, unimodals[j]);
    acc = j == 0 ? kl : ad::add(acc, kl);
  }
  return ad::mul_scalar(acc, 1.0 / unimodals.size());
}

ad::Var sample_reparameterized_ad(const GaussVar& g, Tensor noise) {
  if (!(noise.shape() == g.mean.val().shape()))
    throw InvalidInput("sample_reparameterized_ad: noise shape mismatch");
  ad::Var eps = ad::constant(std::move(noise));
  return ad::add(g.mean, ad::mul(ad::exp(ad::mul_scalar(g.log_var, 0.5)), eps));
}

}  // namespace gwreg::fusion
