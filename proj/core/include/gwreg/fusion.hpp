#pragma once

#include <vector>

#include "gwreg/autodiff.hpp"
#include "gwreg/tensor.hpp"

namespace gwreg::fusion {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

/// Factorized Gaussian over an arbitrary latent grid: per-site mean and
/// log-variance. log_var is clamped to [kLogVarMin, kLogVarMax] on
/// construction.
struct DiagGaussianField {
  Tensor mean;
  Tensor log_var;

  DiagGaussianField() = default;
  DiagGaussianField(Tensor mean_, Tensor log_var_);
};

/// Geometric-mean (product-of-experts) fusion of factorized Gaussians:
/// fused precision = arithmetic mean of precisions, fused mean =
/// precision-weighted mean.
DiagGaussianField fuse_geometric(const std::vector<DiagGaussianField>& posteriors);

/// Closed-form KL(q || p) summed over all sites.
double kl_diag_gaussian(const DiagGaussianField& q, const DiagGaussianField& p);

/// Convexity upper bound on KL(fused || arithmetic-mean mixture):
/// (1/M) * sum_m KL(fuse_geometric(unimodals) || unimodals[m]).
double structure_kl_bound(const std::vector<DiagGaussianField>& unimodals);

/// mean + exp(0.5*log_var) * noise.
Tensor sample_reparameterized(const DiagGaussianField& g, const Tensor& noise);

// ---- Differentiable variants (same arithmetic, graph-building) ----

struct GaussVar {
  ad::Var mean;
  ad::Var log_var;
};

/// Applies the construction-time log-variance clamp.
GaussVar make_gauss(ad::Var mean, ad::Var log_var_raw);

GaussVar fuse_geometric_ad(const std::vector<GaussVar>& posteriors);
ad::Var kl_diag_gaussian_ad(const GaussVar& q, const GaussVar& p);
ad::Var structure_kl_bound_ad(const std::vector<GaussVar>& unimodals);
ad::Var sample_reparameterized_ad(const GaussVar& g, Tensor noise);

}  // namespace gwreg::fusion
