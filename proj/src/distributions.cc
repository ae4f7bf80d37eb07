#include "rhpo/distributions.h"

#include <algorithm>
#include <cmath>

#include "rhpo/errors.h"

namespace rhpo {

Tensor Categorical::probs() const { return fastops::softmax_rows(logits); }

Tensor Categorical::log_probs() const { return fastops::log_softmax_rows(logits); }

int Categorical::sample(Rng& rng) const {
  const Tensor p = probs();
  const double u = rng.uniform();
  double acc = 0.0;
  for (int j = 0; j < p.cols(); ++j) {
    acc += p.at(0, j);
    if (u < acc) return j;
  }
  return p.cols() - 1;
}

double gaussian_log_prob(const DiagGaussian& d, const Tensor& a) {
  if (a.cols() != d.dim() || a.rows() != 1)
    throw DimError("action " + a.shape_str() + " vs gaussian dim " +
                   std::to_string(d.dim()));
  double quad = 0.0, logdet = 0.0;
  for (int j = 0; j < d.dim(); ++j) {
    const double z = (a.at(0, j) - d.mean.at(0, j)) / d.chol.at(0, j);
    quad += z * z;
    logdet += std::log(d.chol.at(0, j));
  }
  return -0.5 * quad - logdet - 0.5 * d.dim() * kLog2Pi;
}

double mixture_log_prob(const MixtureGaussian& m, const Tensor& a) {
  if (m.M() < 1) throw ContractError("mixture needs at least one component");
  const Tensor la = m.weights.log_probs();
  Tensor terms(1, m.M(), 0.0);
  for (int j = 0; j < m.M(); ++j)
    terms.at(0, j) = la.at(0, j) + gaussian_log_prob(m.components[j], a);
  return fastops::logsumexp_rows(terms)[0];
}

std::pair<Tensor, int> sample(const MixtureGaussian& m, Rng& rng) {
  const int j = m.weights.sample(rng);
  const DiagGaussian& c = m.components.at(j);
  Tensor a(1, c.dim(), 0.0);
  for (int d = 0; d < c.dim(); ++d)
    a.at(0, d) = c.mean.at(0, d) + c.chol.at(0, d) * rng.normal();
  return {std::move(a), j};
}

double kl_gaussian(const DiagGaussian& p, const DiagGaussian& q) {
  if (p.dim() != q.dim()) throw DimError("gaussian KL dim mismatch");
  double out = 0.0;
  for (int j = 0; j < p.dim(); ++j) {
    const double sp = p.chol.at(0, j), sq = q.chol.at(0, j);
    const double dm = p.mean.at(0, j) - q.mean.at(0, j);
    out += std::log(sq / sp) + (sp * sp + dm * dm) / (2.0 * sq * sq) - 0.5;
  }
  return out;
}

double kl_categorical(const Categorical& p, const Categorical& q) {
  if (p.size() != q.size()) throw DimError("categorical KL size mismatch");
  const Tensor pp = p.probs();
  const Tensor qp = q.probs();
  double out = 0.0;
  for (int j = 0; j < p.size(); ++j) {
    if (pp.at(0, j) <= 0.0) continue;
    out += pp.at(0, j) * std::log(pp.at(0, j) / std::max(qp.at(0, j), kProbFloor));
  }
  return out;
}

DistanceT distance_T(const MixtureGaussian& old_pi, const MixtureGaussian& new_pi) {
  if (old_pi.M() != new_pi.M())
    throw ContractError("distance_T needs equal component counts, got " +
                        std::to_string(old_pi.M()) + " vs " +
                        std::to_string(new_pi.M()));
  DistanceT out;
  out.t_h = kl_categorical(old_pi.weights, new_pi.weights);
  const int M = old_pi.M();
  for (int j = 0; j < M; ++j) {
    const DiagGaussian& o = old_pi.components[j];
    const DiagGaussian& n = new_pi.components[j];
    if (o.dim() != n.dim()) throw DimError("distance_T component dim mismatch");
    for (int d = 0; d < o.dim(); ++d) {
      const double so = o.chol.at(0, d), sn = n.chol.at(0, d);
      const double dm = n.mean.at(0, d) - o.mean.at(0, d);
      out.t_l_mean += dm * dm / (2.0 * so * so);
      out.t_l_cov += std::log(sn / so) + (so * so) / (2.0 * sn * sn) - 0.5;
    }
  }
  out.t_l_mean /= M;
  out.t_l_cov /= M;
  return out;
}

double bhattacharyya(const Categorical& p, const Categorical& q) {
  if (p.size() != q.size()) throw DimError("bhattacharyya size mismatch");
  const Tensor pp = p.probs();
  const Tensor qp = q.probs();
  double coeff = 0.0;
  for (int j = 0; j < p.size(); ++j)
    coeff += std::max(std::sqrt(pp.at(0, j) * qp.at(0, j)), kProbFloor);
  return -std::log(coeff);
}

double bhattacharyya_gaussian(const DiagGaussian& p, const DiagGaussian& q) {
  if (p.dim() != q.dim()) throw DimError("bhattacharyya dim mismatch");
  double out = 0.0;
  for (int j = 0; j < p.dim(); ++j) {
    const double vp = p.chol.at(0, j) * p.chol.at(0, j);
    const double vq = q.chol.at(0, j) * q.chol.at(0, j);
    const double vm = 0.5 * (vp + vq);
    const double dm = p.mean.at(0, j) - q.mean.at(0, j);
    out += 0.125 * dm * dm / vm + 0.5 * std::log(vm / std::sqrt(vp * vq));
  }
  return out;
}

}  // namespace rhpo
