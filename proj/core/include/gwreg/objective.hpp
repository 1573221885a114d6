#pragma once

#include <vector>

#include "gwreg/autodiff.hpp"
#include "gwreg/fusion.hpp"
#include "gwreg/model.hpp"
#include "gwreg/tensor.hpp"

namespace gwreg::objective {

struct LossWeights {
  double lambda_v = 10.0;  // velocity regularization strength
  double beta_z = 1.0;     // structure KL weight
  double sigma_x2 = 0.01;  // Gaussian likelihood variance

  void validate() const;
};

struct ElboParts {
  double total = 0.0;
  double reconstruction = 0.0;
  double velocity_kl = 0.0;
  double structure_kl = 0.0;
};

/// Negative Gaussian log-likelihood, summed over modalities, batch items and
/// pixels: sum (x - recon)^2 / (2 sigma^2) + 0.5 log(2 pi sigma^2) per pixel.
ad::Var reconstruction_loss_ad(const std::vector<ad::Var>& image_recons,
                               const std::vector<Tensor>& originals, double sigma_x2);

/// Smoothness-inducing velocity prior KL, summed over modalities and levels:
/// (lambda/2) sum_edges ||mu_i - mu_j||^2 + (lambda/2) sum_i deg(i) sigma_i^2
/// - (1/2) sum_i log sigma_i^2, with 4-neighborhood adjacency per component
/// plane and additive constants dropped.
ad::Var velocity_kl_ad(const std::vector<std::vector<fusion::GaussVar>>& posteriors,
                       double lambda_v);

/// beta_z * sum over levels of the convexity bound on the structure KL.
ad::Var structure_kl_ad(const std::vector<std::vector<fusion::GaussVar>>& unimodal_per_mod,
                        double beta_z);

/// Assembles the (negated) ELBO to minimize and reports its components.
std::pair<ad::Var, ElboParts> elbo_ad(const model::ModelOutput& output,
                                      const std::vector<Tensor>& originals,
                                      const LossWeights& weights);

// Plain-value wrappers used by tests and tooling.
double reconstruction_loss(const std::vector<Tensor>& originals,
                           const std::vector<Tensor>& image_recons, double sigma_x2);
double velocity_kl(const std::vector<std::vector<fusion::DiagGaussianField>>& posteriors,
                   double lambda_v);
double structure_kl(const std::vector<std::vector<fusion::DiagGaussianField>>& unimodal_per_mod,
                    double beta_z);

/// Precomputed 4-neighborhood degree grid (4 interior, 3 edges, 2 corners).
Tensor degree_grid(int h, int w);

}  // namespace gwreg::objective
