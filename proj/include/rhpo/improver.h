#pragma once

#include <map>
#include <string>
#include <vector>

#include "rhpo/critic.h"
#include "rhpo/distributions.h"
#include "rhpo/netctx.h"
#include "rhpo/policy.h"
#include "rhpo/replay.h"

namespace rhpo {

struct DualConfig {
  double eps = 0.1;         // E-step KL bound
  double eps_mu = 5e-4;     // mean trust region
  double eps_sigma = 1e-5;  // covariance trust region
  double eps_alpha = 1e-4;  // categorical trust region
  double eta_init = 1.0;
  double lambda_init = 1.0;
  double eta_floor = 1e-6;
};

// Temperature and Lagrange multipliers, held in log space inside the store
// so one Adam step can never push them out of the positive orthant.
class DualState {
 public:
  explicit DualState(DualConfig cfg, std::string prefix = "dual");

  void init(ParamStore& store) const;

  double eta(const ParamStore& store) const;
  double lambda_mu(const ParamStore& store) const;
  double lambda_sigma(const ParamStore& store) const;
  double lambda_alpha(const ParamStore& store) const;

  // Pull the temperature back above its floor after an update.
  void project(ParamStore& store) const;

  const DualConfig& config() const { return cfg_; }
  std::string name_eta() const { return prefix_ + "/log_eta"; }
  std::string name_lambda_mu() const { return prefix_ + "/log_lambda_mu"; }
  std::string name_lambda_sigma() const { return prefix_ + "/log_lambda_sigma"; }
  std::string name_lambda_alpha() const { return prefix_ + "/log_lambda_alpha"; }

 private:
  DualConfig cfg_;
  std::string prefix_;
};

// Self-normalized E-step weights: per state (row), w_j proportional to
// exp(Qhat_j / eta), summing to one over the sampled actions.
Tensor estep_weights(const Tensor& qvals, double eta);

// Sample-based dual g(eta) = eta*eps + eta * mean_s log mean_j exp(Q_j/eta),
// differentiable in the log-space temperature. A temperature under the
// floor is clamped (with a warning) and contributes no gradient that step.
Var dual_loss(TapeCtx& cx, const ParamStore& store, const DualState& duals,
              const Tensor& qvals);

struct MStepBatch {
  Tensor states;           // B x S
  std::vector<int> tasks;  // B
  Tensor actions;          // (B*Ns) x A, rows grouped by state
  Tensor weights;          // B x Ns
};

struct MStepResult {
  Var loss;
  DistanceT measured;       // batch-averaged distances to the snapshot
  double neg_loglik = 0.0;  // weighted likelihood part of the loss value
};

// Weighted mixture maximum likelihood on the marginal density (component
// assignments never enter) plus the three decoupled trust-region penalties
// against the snapshot, with the multipliers held constant.
MStepResult mstep_loss(TapeCtx& cx, const ParamStore& store,
                       const HierarchicalPolicy& policy, const MStepBatch& batch,
                       const std::map<std::string, Tensor>& snapshot,
                       const DualState& duals);

// Flat-baseline variant: weighted Gaussian maximum likelihood under the
// mean and covariance trust regions only. There is no categorical, so the
// measured T_H is zero and lambda_alpha never enters.
MStepResult mstep_loss_flat(TapeCtx& cx, const ParamStore& store,
                            const FlatPolicy& policy, const MStepBatch& batch,
                            const std::map<std::string, Tensor>& snapshot,
                            const DualState& duals);

// One inner-minimization gradient for the multipliers: each log-multiplier
// descends along lambda * (eps - T), so a violated constraint grows its
// multiplier and slack shrinks it.
GradMap multiplier_grads(const ParamStore& store, const DualState& duals,
                         const DistanceT& measured);
void multiplier_step(ParamStore& store, const DualState& duals,
                     const DistanceT& measured, double lr);

struct ImproverConfig {
  int batch_snippets = 16;
  int num_action_samples = 20;  // N_s
  double lr = 2e-4;
  std::vector<int> active_tasks;  // empty = uniform over all policy tasks
};

struct ImprovementDiagnostics {
  double dual_value = 0.0;
  double eta = 0.0;
  double lambda_mu = 0.0;
  double lambda_sigma = 0.0;
  double lambda_alpha = 0.0;
  DistanceT measured;
  double weight_entropy = 0.0;
  double mstep_value = 0.0;
};

// One full policy-improvement pass: sample snippet states and uniform
// tasks, draw N_s actions from the snapshot policy, score them with the
// target critic, then apply a single merged Adam step built from the
// M-step, dual and multiplier gradients (plus optional extra gradients,
// e.g. the critic loss, so the learner performs one update per iteration).
ImprovementDiagnostics improvement_step(ParamStore& store, const HierarchicalPolicy& policy,
                                        const QEnsemble& critic, const ReplayBuffer& replay,
                                        const std::map<std::string, Tensor>& snapshot,
                                        const DualState& duals, const ImproverConfig& cfg,
                                        Rng& rng, const GradMap* extra_grads = nullptr);

// Same pass for the flat baselines; only the mean and covariance
// multipliers receive gradients.
ImprovementDiagnostics improvement_step_flat(ParamStore& store, const FlatPolicy& policy,
                                             const QEnsemble& critic,
                                             const ReplayBuffer& replay,
                                             const std::map<std::string, Tensor>& snapshot,
                                             const DualState& duals,
                                             const ImproverConfig& cfg, Rng& rng,
                                             const GradMap* extra_grads = nullptr);

struct SvgConfig {
  int num_action_samples = 1;  // reparameterization draws per state
  double kl_mult = 0.05;
  double gumbel_temperature = 1.0;
  bool straight_through = false;
  double lr = 2e-4;
};

// Reparameterized value objective -mean Q(s, g(s, zeta)) plus the
// KL-to-snapshot regularizer. Noise enters as constants so gradients can be
// checked under frozen draws.
Var svg_loss_flat(TapeCtx& cx, const FlatPolicy& policy, const QEnsemble& critic,
                  const Tensor& states, const std::vector<int>& tasks, const Tensor& zeta,
                  const std::map<std::string, Tensor>& snapshot, double kl_mult);

// Hierarchical variant: the component choice is relaxed with Gumbel-softmax
// weights (optionally straight-through) and the action is the convex
// combination of the per-component reparameterized samples.
Var svg_loss_hierarchical(TapeCtx& cx, const HierarchicalPolicy& policy,
                          const QEnsemble& critic, const Tensor& states,
                          const std::vector<int>& tasks, const std::vector<Tensor>& zeta,
                          const Tensor& gumbel,
                          const std::map<std::string, Tensor>& snapshot,
                          const SvgConfig& cfg);

void svg_step_flat(ParamStore& store, const FlatPolicy& policy, const QEnsemble& critic,
                   const Tensor& states, const std::vector<int>& tasks,
                   const std::map<std::string, Tensor>& snapshot, const SvgConfig& cfg,
                   Rng& rng);
void svg_step_hierarchical(ParamStore& store, const HierarchicalPolicy& policy,
                           const QEnsemble& critic, const Tensor& states,
                           const std::vector<int>& tasks,
                           const std::map<std::string, Tensor>& snapshot,
                           const SvgConfig& cfg, Rng& rng);

// Standard Gumbel(0, 1) draws.
Tensor sample_gumbel(int rows, int cols, Rng& rng);

}  // namespace rhpo
