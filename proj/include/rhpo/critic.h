#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rhpo/distributions.h"
#include "rhpo/netctx.h"
#include "rhpo/policy.h"
#include "rhpo/replay.h"

namespace rhpo {

struct CriticConfig {
  int state_dim = 0;
  int action_dim = 0;
  int num_tasks = 1;
  TorsoSpec torso{{400, 400}, true, 1e-6};
  int head_hidden = 300;
  bool tanh_squash_action = true;
};

struct RetraceConfig {
  double gamma = 0.99;
  int num_action_samples = 20;  // N_s, shared with the policy improvement step
};

// State-conditional policy density/sampler used for retrace corrections and
// the bootstrap expectation. Kept as a callable so the critic works against
// hierarchical policies, flat baselines, and tabular test stubs alike.
using PolicyFn = std::function<MixtureGaussian(const Tensor& state, int task)>;

// Task-conditional Q function: shared torso over (state, squashed action),
// one two-layer head per task, plus a frozen target copy of every parameter.
class QEnsemble {
 public:
  QEnsemble(CriticConfig cfg, std::string prefix = "q");

  // Creates parameters in the store and syncs the initial target copy.
  void init(ParamStore& store, Rng& rng);

  template <class Ctx>
  typename Ctx::V features(Ctx& cx, typename Ctx::V states, typename Ctx::V actions) const {
    auto a = cfg_.tanh_squash_action ? cx.tanh_(actions) : actions;
    return torso_forward(cx, cx.concat_cols(states, a), prefix_ + "/torso", cfg_.torso);
  }

  template <class Ctx>
  typename Ctx::V head(Ctx& cx, typename Ctx::V feats, int task) const {
    check_task(task);
    return head_forward(cx, feats, head_prefix(task));
  }

  template <class Ctx>
  typename Ctx::V forward(Ctx& cx, typename Ctx::V states, typename Ctx::V actions,
                          const std::vector<int>& tasks) const {
    auto f = features(cx, states, actions);
    return detail::grouped_heads(cx, f, tasks,
                                 [&](typename Ctx::V x, int t) { return head(cx, x, t); });
  }

  // Batched value-only evaluation; rows of states/actions pair up with tasks.
  Tensor q_values(const ParamStore& store, const Tensor& states, const Tensor& actions,
                  const std::vector<int>& tasks, bool use_target) const;
  double q_value(const ParamStore& store, const Tensor& state, const Tensor& action,
                 int task, bool use_target) const;

  // phi' <- phi, bitwise.
  void update_target(const ParamStore& store);
  int target_copy_count() const { return copies_; }
  const std::map<std::string, Tensor>& target_values() const { return target_; }
  void load_target(std::map<std::string, Tensor> values) { target_ = std::move(values); }

  const CriticConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }
  std::string head_prefix(int task) const;

 private:
  void check_task(int task) const;
  void copy_target(const ParamStore& store);

  CriticConfig cfg_;
  std::string prefix_;
  std::map<std::string, Tensor> target_;
  int copies_ = 0;
};

// Clipped importance weights c_k = min(1, pi(a_k|s_k,i) / b(a_k|s_k)) for
// the steps of one snippet; c_0 is 1 by convention (the first step of every
// partial sum is uncorrected).
std::vector<double> retrace_weights(const TrajectorySnippet& snippet, int task,
                                    const PolicyFn& pi);

// Truncated retrace targets for one snippet under task i, one value per
// step, evaluated entirely on the target network. The bootstrap expectation
// E_pi[Q'(s,.,i)] is a fresh-sample Monte Carlo estimate.
Tensor retrace_targets(const QEnsemble& e, const ParamStore& store,
                       const TrajectorySnippet& snippet, int task, const PolicyFn& pi,
                       const RetraceConfig& cfg, Rng& rng);

// Mean squared error between the live Q and stop-gradient retrace targets,
// summed over the given tasks. Every snippet contributes to every task head
// via its hindsight reward vector.
Var critic_loss(TapeCtx& cx, const QEnsemble& e, const ParamStore& store,
                const std::vector<TrajectorySnippet>& batch, const std::vector<int>& tasks,
                const PolicyFn& pi, const RetraceConfig& cfg, Rng& rng);

}  // namespace rhpo
