#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "rhpo/fastops.h"
#include "rhpo/rng.h"
#include "rhpo/tensor.h"

namespace rhpo {

// Diagonal Gaussian: covariance is chol * chol^T with positive diagonal
// Cholesky entries (softplus enforces positivity upstream).
struct DiagGaussian {
  Tensor mean;  // 1 x D
  Tensor chol;  // 1 x D
  int dim() const { return mean.cols(); }
};

struct Categorical {
  Tensor logits;  // 1 x M
  int size() const { return logits.cols(); }
  Tensor probs() const;
  Tensor log_probs() const;
  int sample(Rng& rng) const;
};

// Mixture with a switching categorical over M aligned diagonal Gaussians.
struct MixtureGaussian {
  Categorical weights;
  std::vector<DiagGaussian> components;
  int M() const { return static_cast<int>(components.size()); }
  int action_dim() const { return components.at(0).dim(); }
};

double gaussian_log_prob(const DiagGaussian& d, const Tensor& a);
double mixture_log_prob(const MixtureGaussian& m, const Tensor& a);
// Ancestral sample: component from the categorical, then action from it.
std::pair<Tensor, int> sample(const MixtureGaussian& m, Rng& rng);

double kl_gaussian(const DiagGaussian& p, const DiagGaussian& q);
double kl_categorical(const Categorical& p, const Categorical& q);

// Decoupled policy distance: the categorical KL plus the per-component
// Gaussian KL split into a mean-only part (new means under old covariances)
// and a covariance-only part, each averaged 1/M over aligned components.
struct DistanceT {
  double t_h = 0.0;
  double t_l_mean = 0.0;
  double t_l_cov = 0.0;
};
DistanceT distance_T(const MixtureGaussian& old_pi, const MixtureGaussian& new_pi);

double bhattacharyya(const Categorical& p, const Categorical& q);
// Closed-form Bhattacharyya distance between diagonal Gaussians (used to
// measure component specialization).
double bhattacharyya_gaussian(const DiagGaussian& p, const DiagGaussian& q);

constexpr double kProbFloor = 1e-8;
constexpr double kLog2Pi = 1.8378770664093453;

// ---- batched, differentiable row-wise forms -------------------------------
// Rows are batch entries; shapes B x D (Gaussian parameters / actions) or
// B x M (logits). Constants enter as plain tensors via cx.constant.

template <class Ctx>
typename Ctx::V gaussian_log_prob_rows(Ctx& cx, typename Ctx::V mean,
                                       typename Ctx::V chol, typename Ctx::V a) {
  const int D = cx.value(mean).cols();
  auto z = cx.div(cx.sub(a, mean), chol);
  auto quad = cx.sum_rows(cx.square(z));
  auto logdet = cx.sum_rows(cx.log_(chol));
  return cx.add_const(cx.sub(cx.scale(quad, -0.5), logdet), -0.5 * D * kLog2Pi);
}

// KL(p_old || softmax(logits_new)) per row with p_old held fixed.
template <class Ctx>
typename Ctx::V kl_categorical_rows(Ctx& cx, const Tensor& probs_old,
                                    typename Ctx::V logits_new) {
  Tensor entropy_part = probs_old;  // sum_j p ln p, computed once
  for (std::int64_t i = 0; i < entropy_part.size(); ++i) {
    const double p = probs_old[i];
    entropy_part[i] = p > 0.0 ? p * std::log(p) : 0.0;
  }
  auto cross = cx.sum_rows(cx.mul(cx.constant(probs_old), cx.log_softmax_rows(logits_new)));
  Tensor ent = fastops::sum_rows(entropy_part);
  return cx.sub(cx.constant(ent), cross);
}

// KL(N(mean_old, chol_old) || N(mean_new, chol_old)) per row: the mean-only
// intermediate-policy distance.
template <class Ctx>
typename Ctx::V kl_gaussian_mean_rows(Ctx& cx, const Tensor& mean_old,
                                      const Tensor& chol_old,
                                      typename Ctx::V mean_new) {
  Tensor inv_two_var = chol_old;
  for (std::int64_t i = 0; i < inv_two_var.size(); ++i)
    inv_two_var[i] = 1.0 / (2.0 * chol_old[i] * chol_old[i]);
  auto d2 = cx.square(cx.sub(mean_new, cx.constant(mean_old)));
  return cx.sum_rows(cx.mul(d2, cx.constant(inv_two_var)));
}

// KL(N(mean_old, chol_old) || N(mean_old, chol_new)) per row: the
// covariance-only intermediate-policy distance.
template <class Ctx>
typename Ctx::V kl_gaussian_cov_rows(Ctx& cx, const Tensor& chol_old,
                                     typename Ctx::V chol_new) {
  Tensor log_old = chol_old;
  Tensor var_old_half = chol_old;
  for (std::int64_t i = 0; i < chol_old.size(); ++i) {
    log_old[i] = std::log(chol_old[i]);
    var_old_half[i] = 0.5 * chol_old[i] * chol_old[i];
  }
  auto log_ratio = cx.sub(cx.log_(chol_new), cx.constant(log_old));
  auto trace = cx.div(cx.constant(var_old_half), cx.square(chol_new));
  const int D = chol_old.cols();
  return cx.add_const(cx.sum_rows(cx.add(log_ratio, trace)), -0.5 * D);
}

}  // namespace rhpo
