#include "rhpo/critic.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "rhpo/errors.h"

namespace rhpo {

QEnsemble::QEnsemble(CriticConfig cfg, std::string prefix)
    : cfg_(cfg), prefix_(std::move(prefix)) {
  if (cfg_.state_dim <= 0 || cfg_.action_dim <= 0)
    throw ContractError("critic needs positive state and action dims");
  if (cfg_.num_tasks < 1) throw ContractError("critic needs at least one task");
}

std::string QEnsemble::head_prefix(int task) const {
  return prefix_ + "/task" + std::to_string(task);
}

void QEnsemble::check_task(int task) const {
  if (task < 0 || task >= cfg_.num_tasks)
    throw ContractError("task id " + std::to_string(task) + " out of range [0, " +
                        std::to_string(cfg_.num_tasks) + ")");
}

void QEnsemble::init(ParamStore& store, Rng& rng) {
  const int in = cfg_.state_dim + cfg_.action_dim;
  init_torso(store, prefix_ + "/torso", in, cfg_.torso, rng);
  for (int i = 0; i < cfg_.num_tasks; ++i)
    init_head(store, head_prefix(i), cfg_.torso.out_dim(), cfg_.head_hidden, 1, rng);
  copy_target(store);
}

void QEnsemble::copy_target(const ParamStore& store) {
  target_.clear();
  for (const auto& name : store.names_with_prefix(prefix_ + "/"))
    target_[name] = store.get(name);
}

void QEnsemble::update_target(const ParamStore& store) {
  copy_target(store);
  ++copies_;
}

Tensor QEnsemble::q_values(const ParamStore& store, const Tensor& states,
                           const Tensor& actions, const std::vector<int>& tasks,
                           bool use_target) const {
  if (states.rows() != actions.rows() ||
      states.rows() != static_cast<int>(tasks.size()))
    throw DimError("q_values row mismatch: states " + states.shape_str() +
                   ", actions " + actions.shape_str() + ", tasks " +
                   std::to_string(tasks.size()));
  if (states.cols() != cfg_.state_dim || actions.cols() != cfg_.action_dim)
    throw DimError("q_values column mismatch: states " + states.shape_str() +
                   ", actions " + actions.shape_str());
  for (int t : tasks) check_task(t);
  if (use_target) {
    FastCtx cx(target_);
    return forward(cx, states, actions, tasks);
  }
  FastCtx cx(store);
  return forward(cx, states, actions, tasks);
}

double QEnsemble::q_value(const ParamStore& store, const Tensor& state,
                          const Tensor& action, int task, bool use_target) const {
  return q_values(store, state, action, {task}, use_target)[0];
}

namespace {

Tensor stack_rows(const std::vector<const Tensor*>& rows) {
  const int n = static_cast<int>(rows.size());
  const int c = rows[0]->cols();
  Tensor out = Tensor::zeros(n, c);
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < c; ++j) out.at(r, j) = rows[r]->at(0, j);
  return out;
}

}  // namespace

std::vector<double> retrace_weights(const TrajectorySnippet& snippet, int task,
                                    const PolicyFn& pi) {
  const int T = snippet.length();
  std::vector<double> c(T, 1.0);
  for (int k = 1; k < T; ++k) {
    const TrajectoryStep& st = snippet.steps[k];
    if (!std::isfinite(st.behavior_log_prob))
      throw ContractError("snippet step " + std::to_string(k) +
                          " is missing a finite behavior log-prob");
    const double log_pi = mixture_log_prob(pi(st.state, task), st.action);
    c[k] = std::min(1.0, std::exp(log_pi - st.behavior_log_prob));
  }
  return c;
}

Tensor retrace_targets(const QEnsemble& e, const ParamStore& store,
                       const TrajectorySnippet& snippet, int task, const PolicyFn& pi,
                       const RetraceConfig& cfg, Rng& rng) {
  const int T = snippet.length();
  if (T < 1) throw ContractError("retrace needs a non-empty snippet");
  if (cfg.gamma <= 0.0 || cfg.gamma >= 1.0)
    throw ContractError("retrace discount must lie in (0, 1)");
  if (cfg.num_action_samples < 1)
    throw ContractError("retrace needs at least one expectation sample");
  const int num_tasks = e.config().num_tasks;
  if (task < 0 || task >= num_tasks)
    throw ContractError("retrace task id out of range");
  for (int t = 0; t < T; ++t) {
    const TrajectoryStep& st = snippet.steps[t];
    if (!std::isfinite(st.behavior_log_prob))
      throw ContractError("snippet step " + std::to_string(t) +
                          " is missing a finite behavior log-prob");
    if (st.reward_vector.size() != num_tasks)
      throw ContractError("snippet step " + std::to_string(t) +
                          " reward vector has length " +
                          std::to_string(st.reward_vector.size()) + ", expected " +
                          std::to_string(num_tasks));
  }

  std::vector<const Tensor*> state_rows(T), action_rows(T);
  for (int t = 0; t < T; ++t) {
    state_rows[t] = &snippet.steps[t].state;
    action_rows[t] = &snippet.steps[t].action;
  }
  const Tensor qhat = e.q_values(store, stack_rows(state_rows), stack_rows(action_rows),
                                 std::vector<int>(T, task), /*use_target=*/true);

  // States s_1 .. s_T seen by the bootstrap expectation; s_T is the snippet's
  // bootstrap state and contributes V = 0 on true terminals.
  const int jmax = snippet.terminal ? T - 1 : T;
  const int ns = cfg.num_action_samples;
  std::vector<double> v(T + 1, 0.0);
  if (jmax >= 1) {
    std::vector<Tensor> sampled;
    std::vector<const Tensor*> exp_states, exp_actions;
    sampled.reserve(static_cast<size_t>(jmax) * ns);
    for (int j = 1; j <= jmax; ++j) {
      const Tensor& s = j < T ? snippet.steps[j].state : snippet.bootstrap_state;
      const MixtureGaussian mix = pi(s, task);
      for (int n = 0; n < ns; ++n) {
        sampled.push_back(sample(mix, rng).first);
        exp_states.push_back(&s);
        exp_actions.push_back(&sampled.back());
      }
    }
    const Tensor qexp =
        e.q_values(store, stack_rows(exp_states), stack_rows(exp_actions),
                   std::vector<int>(jmax * ns, task), /*use_target=*/true);
    for (int j = 1; j <= jmax; ++j) {
      double acc = 0.0;
      for (int n = 0; n < ns; ++n) acc += qexp[(j - 1) * ns + n];
      v[j] = acc / ns;
    }
  }

  std::vector<double> delta(T);
  for (int t = 0; t < T; ++t)
    delta[t] = snippet.steps[t].reward_vector[task] + cfg.gamma * v[t + 1] - qhat[t];

  const std::vector<double> c = retrace_weights(snippet, task, pi);

  Tensor out = Tensor::zeros(T, 1);
  double g = 0.0;
  for (int t = T - 1; t >= 0; --t) {
    g = delta[t] + (t + 1 < T ? cfg.gamma * c[t + 1] * g : 0.0);
    out.at(t, 0) = qhat[t] + g;
  }
  return out;
}

Var critic_loss(TapeCtx& cx, const QEnsemble& e, const ParamStore& store,
                const std::vector<TrajectorySnippet>& batch, const std::vector<int>& tasks,
                const PolicyFn& pi, const RetraceConfig& cfg, Rng& rng) {
  if (batch.empty()) throw ContractError("critic loss needs a non-empty batch");
  if (tasks.empty()) throw ContractError("critic loss needs at least one task");

  std::vector<const Tensor*> state_rows, action_rows;
  for (const auto& snip : batch)
    for (const auto& st : snip.steps) {
      state_rows.push_back(&st.state);
      action_rows.push_back(&st.action);
    }
  const int n = static_cast<int>(state_rows.size());
  if (n == 0) throw ContractError("critic loss batch has no steps");

  auto feats = e.features(cx, cx.input(stack_rows(state_rows)),
                          cx.input(stack_rows(action_rows)));

  bool first = true;
  Var total;
  for (int i : tasks) {
    Tensor targets = Tensor::zeros(n, 1);
    int row = 0;
    for (const auto& snip : batch) {
      const Tensor t = retrace_targets(e, store, snip, i, pi, cfg, rng);
      for (int k = 0; k < t.rows(); ++k) targets.at(row++, 0) = t[k];
    }
    auto pred = e.head(cx, feats, i);
    auto mse = cx.mean_all(cx.square(cx.sub(pred, cx.constant(targets))));
    total = first ? mse : cx.add(total, mse);
    first = false;
  }
  return total;
}

}  // namespace rhpo
