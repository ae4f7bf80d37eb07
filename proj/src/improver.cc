#include "rhpo/improver.h"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <utility>

namespace rhpo {

namespace {

std::vector<int> repeat_each(const std::vector<int>& xs, int k) {
  std::vector<int> out;
  out.reserve(xs.size() * static_cast<size_t>(k));
  for (int x : xs)
    for (int i = 0; i < k; ++i) out.push_back(x);
  return out;
}

MixtureGaussian mixture_row(const MixtureRows<Tensor>& rows, int b) {
  MixtureGaussian m;
  const int M = static_cast<int>(rows.mean.size());
  const int A = rows.mean[0].cols();
  Tensor lg(1, M, 0.0);
  for (int j = 0; j < M; ++j) lg.at(0, j) = rows.logits.at(b, j);
  m.weights.logits = std::move(lg);
  for (int j = 0; j < M; ++j) {
    DiagGaussian d{Tensor(1, A, 0.0), Tensor(1, A, 0.0)};
    for (int c = 0; c < A; ++c) {
      d.mean.at(0, c) = rows.mean[j].at(b, c);
      d.chol.at(0, c) = rows.chol[j].at(b, c);
    }
    m.components.push_back(std::move(d));
  }
  return m;
}

void merge_into(GradMap& dst, const GradMap& src) {
  for (const auto& [name, g] : src) {
    auto it = dst.find(name);
    if (it == dst.end()) {
      dst.emplace(name, g);
      continue;
    }
    if (!it->second.same_shape(g))
      throw DimError("gradient shape clash on '" + name + "'");
    it->second = fastops::add(it->second, g);
  }
}

int draw_task(const ImproverConfig& cfg, int num_tasks, Rng& rng) {
  if (cfg.active_tasks.empty()) return rng.uniform_int(num_tasks);
  const int pick = static_cast<int>(cfg.active_tasks.size());
  const int task = cfg.active_tasks[rng.uniform_int(pick)];
  if (task < 0 || task >= num_tasks)
    throw ContractError("active task " + std::to_string(task) +
                        " outside [0, " + std::to_string(num_tasks) + ")");
  return task;
}

}  // namespace

DualState::DualState(DualConfig cfg, std::string prefix)
    : cfg_(cfg), prefix_(std::move(prefix)) {
  if (!(cfg.eps > 0.0) || !(cfg.eps_mu > 0.0) || !(cfg.eps_sigma > 0.0) ||
      !(cfg.eps_alpha > 0.0))
    throw ContractError("trust-region bounds must be positive");
  if (!(cfg.eta_init > 0.0) || !(cfg.lambda_init > 0.0) || !(cfg.eta_floor > 0.0))
    throw ContractError("dual initial values and the temperature floor must be positive");
}

void DualState::init(ParamStore& store) const {
  auto ensure = [&](const std::string& name, double v) {
    if (!store.has(name)) store.create(name, Tensor::scalar(std::log(v)));
  };
  ensure(name_eta(), cfg_.eta_init);
  ensure(name_lambda_mu(), cfg_.lambda_init);
  ensure(name_lambda_sigma(), cfg_.lambda_init);
  ensure(name_lambda_alpha(), cfg_.lambda_init);
}

double DualState::eta(const ParamStore& store) const {
  return std::exp(store.get(name_eta())[0]);
}
double DualState::lambda_mu(const ParamStore& store) const {
  return std::exp(store.get(name_lambda_mu())[0]);
}
double DualState::lambda_sigma(const ParamStore& store) const {
  return std::exp(store.get(name_lambda_sigma())[0]);
}
double DualState::lambda_alpha(const ParamStore& store) const {
  return std::exp(store.get(name_lambda_alpha())[0]);
}

void DualState::project(ParamStore& store) const {
  Tensor& t = store.get(name_eta());
  t[0] = std::max(t[0], std::log(cfg_.eta_floor));
}

Tensor estep_weights(const Tensor& qvals, double eta) {
  if (qvals.rows() < 1 || qvals.cols() < 1)
    throw DimError("E-step needs a B x Ns value matrix, got " + qvals.shape_str());
  if (!qvals.all_finite()) throw NumericalError("non-finite action values in the E-step");
  if (!std::isfinite(eta) || eta <= 0.0)
    throw ContractError("temperature must be positive and finite");
  return fastops::softmax_rows(fastops::scale(qvals, 1.0 / eta));
}

Var dual_loss(TapeCtx& cx, const ParamStore& store, const DualState& duals,
              const Tensor& qvals) {
  if (qvals.rows() < 1 || qvals.cols() < 1)
    throw DimError("dual needs a B x Ns value matrix, got " + qvals.shape_str());
  if (!qvals.all_finite()) throw NumericalError("non-finite action values in the dual");
  const DualConfig& dc = duals.config();
  const double log_eta = store.get(duals.name_eta())[0];
  Var eta;
  if (log_eta < std::log(dc.eta_floor)) {
    std::cerr << "temperature " << std::exp(log_eta) << " is under the floor "
              << dc.eta_floor << "; using the floor as a constant this step\n";
    eta = cx.constant(Tensor::scalar(dc.eta_floor));
  } else {
    eta = cx.exp_(cx.param(duals.name_eta()));
  }
  auto lse = cx.logsumexp_rows(cx.div(cx.constant(qvals), eta));
  auto mean_lme = cx.mean_all(cx.add_const(lse, -std::log(static_cast<double>(qvals.cols()))));
  return cx.add(cx.scale(eta, dc.eps), cx.mul(eta, mean_lme));
}

MStepResult mstep_loss(TapeCtx& cx, const ParamStore& store,
                       const HierarchicalPolicy& policy, const MStepBatch& batch,
                       const std::map<std::string, Tensor>& snapshot,
                       const DualState& duals) {
  const int B = batch.states.rows();
  if (B < 1) throw DimError("empty M-step batch");
  if (static_cast<int>(batch.tasks.size()) != B)
    throw DimError("task list and state rows disagree");
  if (batch.weights.rows() != B || batch.weights.cols() < 1)
    throw DimError("weights must be B x Ns, got " + batch.weights.shape_str());
  const int Ns = batch.weights.cols();
  if (batch.actions.rows() != B * Ns || batch.actions.cols() != policy.config().action_dim)
    throw DimError("actions must be (B*Ns) x A, got " + batch.actions.shape_str());
  if (!batch.weights.all_finite() || !batch.actions.all_finite())
    throw NumericalError("non-finite M-step batch");

  const int M = policy.config().num_components;
  auto mix = policy.forward(cx, batch.states, batch.tasks);
  FastCtx snap(snapshot);
  auto old = policy.forward(snap, batch.states, batch.tasks);

  // Weighted maximum likelihood of the marginal mixture density; component
  // assignments of the sampled actions never enter.
  auto a = cx.constant(batch.actions);
  auto rep_logw = cx.repeat_rows(cx.log_softmax_rows(mix.logits), Ns);
  Var comp_cols;
  for (int j = 0; j < M; ++j) {
    auto lp = gaussian_log_prob_rows(cx, cx.repeat_rows(mix.mean[j], Ns),
                                     cx.repeat_rows(mix.chol[j], Ns), a);
    comp_cols = j == 0 ? lp : cx.concat_cols(comp_cols, lp);
  }
  auto logmix = cx.logsumexp_rows(cx.add(rep_logw, comp_cols));
  Tensor wflat(B * Ns, 1, 0.0);
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < Ns; ++n) wflat.at(b * Ns + n, 0) = batch.weights.at(b, n);
  auto nll = cx.scale(cx.sum_all(cx.mul(logmix, cx.constant(wflat))), -1.0 / B);

  Tensor probs_old = fastops::softmax_rows(old.logits);
  auto t_h = cx.mean_all(kl_categorical_rows(cx, probs_old, mix.logits));
  Var t_mean, t_cov;
  for (int j = 0; j < M; ++j) {
    auto tm = cx.mean_all(kl_gaussian_mean_rows(cx, old.mean[j], old.chol[j], mix.mean[j]));
    auto tc = cx.mean_all(kl_gaussian_cov_rows(cx, old.chol[j], mix.chol[j]));
    t_mean = j == 0 ? tm : cx.add(t_mean, tm);
    t_cov = j == 0 ? tc : cx.add(t_cov, tc);
  }
  t_mean = cx.scale(t_mean, 1.0 / M);
  t_cov = cx.scale(t_cov, 1.0 / M);

  // Multipliers are constants here; they optimize against the measured
  // distances separately.
  const DualConfig& dc = duals.config();
  auto pen = cx.add(
      cx.scale(cx.add_const(t_mean, -dc.eps_mu), duals.lambda_mu(store)),
      cx.add(cx.scale(cx.add_const(t_cov, -dc.eps_sigma), duals.lambda_sigma(store)),
             cx.scale(cx.add_const(t_h, -dc.eps_alpha), duals.lambda_alpha(store))));

  MStepResult out;
  out.loss = cx.add(nll, pen);
  out.measured.t_h = cx.value(t_h)[0];
  out.measured.t_l_mean = cx.value(t_mean)[0];
  out.measured.t_l_cov = cx.value(t_cov)[0];
  out.neg_loglik = cx.value(nll)[0];
  return out;
}

MStepResult mstep_loss_flat(TapeCtx& cx, const ParamStore& store,
                            const FlatPolicy& policy, const MStepBatch& batch,
                            const std::map<std::string, Tensor>& snapshot,
                            const DualState& duals) {
  const int B = batch.states.rows();
  if (B < 1) throw DimError("empty M-step batch");
  if (static_cast<int>(batch.tasks.size()) != B)
    throw DimError("task list and state rows disagree");
  if (batch.weights.rows() != B || batch.weights.cols() < 1)
    throw DimError("weights must be B x Ns, got " + batch.weights.shape_str());
  const int Ns = batch.weights.cols();
  if (batch.actions.rows() != B * Ns || batch.actions.cols() != policy.config().action_dim)
    throw DimError("actions must be (B*Ns) x A, got " + batch.actions.shape_str());
  if (!batch.weights.all_finite() || !batch.actions.all_finite())
    throw NumericalError("non-finite M-step batch");

  auto live = policy.forward(cx, batch.states, batch.tasks);
  FastCtx snap(snapshot);
  auto old = policy.forward(snap, batch.states, batch.tasks);

  auto a = cx.constant(batch.actions);
  auto lp = gaussian_log_prob_rows(cx, cx.repeat_rows(live.mean, Ns),
                                   cx.repeat_rows(live.chol, Ns), a);
  Tensor wflat(B * Ns, 1, 0.0);
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < Ns; ++n) wflat.at(b * Ns + n, 0) = batch.weights.at(b, n);
  auto nll = cx.scale(cx.sum_all(cx.mul(lp, cx.constant(wflat))), -1.0 / B);

  auto t_mean = cx.mean_all(kl_gaussian_mean_rows(cx, old.mean, old.chol, live.mean));
  auto t_cov = cx.mean_all(kl_gaussian_cov_rows(cx, old.chol, live.chol));

  const DualConfig& dc = duals.config();
  auto pen =
      cx.add(cx.scale(cx.add_const(t_mean, -dc.eps_mu), duals.lambda_mu(store)),
             cx.scale(cx.add_const(t_cov, -dc.eps_sigma), duals.lambda_sigma(store)));

  MStepResult out;
  out.loss = cx.add(nll, pen);
  out.measured.t_h = 0.0;
  out.measured.t_l_mean = cx.value(t_mean)[0];
  out.measured.t_l_cov = cx.value(t_cov)[0];
  out.neg_loglik = cx.value(nll)[0];
  return out;
}

GradMap multiplier_grads(const ParamStore& store, const DualState& duals,
                         const DistanceT& measured) {
  if (!std::isfinite(measured.t_h) || !std::isfinite(measured.t_l_mean) ||
      !std::isfinite(measured.t_l_cov))
    throw NumericalError("non-finite policy distances");
  const DualConfig& dc = duals.config();
  GradMap g;
  g[duals.name_lambda_mu()] =
      Tensor::scalar(duals.lambda_mu(store) * (dc.eps_mu - measured.t_l_mean));
  g[duals.name_lambda_sigma()] =
      Tensor::scalar(duals.lambda_sigma(store) * (dc.eps_sigma - measured.t_l_cov));
  g[duals.name_lambda_alpha()] =
      Tensor::scalar(duals.lambda_alpha(store) * (dc.eps_alpha - measured.t_h));
  return g;
}

void multiplier_step(ParamStore& store, const DualState& duals,
                     const DistanceT& measured, double lr) {
  store.adam_step(multiplier_grads(store, duals, measured), lr);
}

ImprovementDiagnostics improvement_step(ParamStore& store, const HierarchicalPolicy& policy,
                                        const QEnsemble& critic, const ReplayBuffer& replay,
                                        const std::map<std::string, Tensor>& snapshot,
                                        const DualState& duals, const ImproverConfig& cfg,
                                        Rng& rng, const GradMap* extra_grads) {
  if (cfg.batch_snippets < 1) throw ContractError("batch_snippets must be >= 1");
  if (cfg.num_action_samples < 1) throw ContractError("num_action_samples must be >= 1");
  if (!(cfg.lr > 0.0)) throw ContractError("learning rate must be positive");
  auto batch = replay.sample(cfg.batch_snippets, rng);
  if (batch.empty()) throw ContractError("replay buffer has no snippets yet");

  const int S = policy.config().state_dim;
  const int A = policy.config().action_dim;
  int N = 0;
  for (const auto& sn : batch) N += sn.length();
  Tensor states(N, S, 0.0);
  int r = 0;
  for (const auto& sn : batch)
    for (const auto& st : sn.steps) {
      for (int c = 0; c < S; ++c) states.at(r, c) = st.state.at(0, c);
      ++r;
    }
  std::vector<int> tasks(N);
  for (int b = 0; b < N; ++b) tasks[b] = draw_task(cfg, policy.config().num_tasks, rng);

  // Actions come from the stale snapshot policy and are never clipped: both
  // the E-step and the dual see the unsquashed proposal distribution.
  FastCtx snap(snapshot);
  auto old = policy.forward(snap, states, tasks);
  const int Ns = cfg.num_action_samples;
  Tensor actions(N * Ns, A, 0.0);
  for (int b = 0; b < N; ++b) {
    MixtureGaussian m = mixture_row(old, b);
    for (int n = 0; n < Ns; ++n) {
      Tensor a = sample(m, rng).first;
      for (int c = 0; c < A; ++c) actions.at(b * Ns + n, c) = a.at(0, c);
    }
  }

  Tensor q_flat = critic.q_values(store, fastops::repeat_rows(states, Ns), actions,
                                  repeat_each(tasks, Ns), /*use_target=*/true);
  Tensor qvals(N, Ns, 0.0);
  for (int b = 0; b < N; ++b)
    for (int n = 0; n < Ns; ++n) qvals.at(b, n) = q_flat.at(b * Ns + n, 0);

  ImprovementDiagnostics d;
  const DualConfig& dc = duals.config();
  d.eta = std::max(duals.eta(store), dc.eta_floor);
  d.lambda_mu = duals.lambda_mu(store);
  d.lambda_sigma = duals.lambda_sigma(store);
  d.lambda_alpha = duals.lambda_alpha(store);
  Tensor weights = estep_weights(qvals, d.eta);
  double ent = 0.0;
  for (int b = 0; b < N; ++b)
    for (int n = 0; n < Ns; ++n) {
      const double w = weights.at(b, n);
      if (w > 0.0) ent -= w * std::log(w);
    }
  d.weight_entropy = ent / N;

  Tape mtape;
  TapeCtx mcx(mtape, store);
  MStepBatch mb{states, tasks, std::move(actions), std::move(weights)};
  MStepResult res = mstep_loss(mcx, store, policy, mb, snapshot, duals);
  d.measured = res.measured;
  d.mstep_value = mcx.value(res.loss)[0];
  GradMap grads = mtape.backward(res.loss);

  Tape dtape;
  TapeCtx dcx(dtape, store);
  Var dual = dual_loss(dcx, store, duals, qvals);
  d.dual_value = dcx.value(dual)[0];
  merge_into(grads, dtape.backward(dual));
  merge_into(grads, multiplier_grads(store, duals, res.measured));
  if (extra_grads) merge_into(grads, *extra_grads);

  store.adam_step(grads, cfg.lr);
  duals.project(store);
  return d;
}

ImprovementDiagnostics improvement_step_flat(ParamStore& store, const FlatPolicy& policy,
                                             const QEnsemble& critic,
                                             const ReplayBuffer& replay,
                                             const std::map<std::string, Tensor>& snapshot,
                                             const DualState& duals,
                                             const ImproverConfig& cfg, Rng& rng,
                                             const GradMap* extra_grads) {
  if (cfg.batch_snippets < 1) throw ContractError("batch_snippets must be >= 1");
  if (cfg.num_action_samples < 1) throw ContractError("num_action_samples must be >= 1");
  if (!(cfg.lr > 0.0)) throw ContractError("learning rate must be positive");
  auto batch = replay.sample(cfg.batch_snippets, rng);
  if (batch.empty()) throw ContractError("replay buffer has no snippets yet");

  const int S = policy.config().state_dim;
  const int A = policy.config().action_dim;
  int N = 0;
  for (const auto& sn : batch) N += sn.length();
  Tensor states(N, S, 0.0);
  int r = 0;
  for (const auto& sn : batch)
    for (const auto& st : sn.steps) {
      for (int c = 0; c < S; ++c) states.at(r, c) = st.state.at(0, c);
      ++r;
    }
  std::vector<int> tasks(N);
  for (int b = 0; b < N; ++b) tasks[b] = draw_task(cfg, policy.config().num_tasks, rng);

  FastCtx snap(snapshot);
  auto old = policy.forward(snap, states, tasks);
  const int Ns = cfg.num_action_samples;
  Tensor actions(N * Ns, A, 0.0);
  for (int b = 0; b < N; ++b)
    for (int n = 0; n < Ns; ++n)
      for (int c = 0; c < A; ++c)
        actions.at(b * Ns + n, c) = old.mean.at(b, c) + old.chol.at(b, c) * rng.normal();

  Tensor q_flat = critic.q_values(store, fastops::repeat_rows(states, Ns), actions,
                                  repeat_each(tasks, Ns), /*use_target=*/true);
  Tensor qvals(N, Ns, 0.0);
  for (int b = 0; b < N; ++b)
    for (int n = 0; n < Ns; ++n) qvals.at(b, n) = q_flat.at(b * Ns + n, 0);

  ImprovementDiagnostics d;
  const DualConfig& dc = duals.config();
  d.eta = std::max(duals.eta(store), dc.eta_floor);
  d.lambda_mu = duals.lambda_mu(store);
  d.lambda_sigma = duals.lambda_sigma(store);
  d.lambda_alpha = duals.lambda_alpha(store);
  Tensor weights = estep_weights(qvals, d.eta);
  double ent = 0.0;
  for (int b = 0; b < N; ++b)
    for (int n = 0; n < Ns; ++n) {
      const double w = weights.at(b, n);
      if (w > 0.0) ent -= w * std::log(w);
    }
  d.weight_entropy = ent / N;

  Tape mtape;
  TapeCtx mcx(mtape, store);
  MStepBatch mb{states, tasks, std::move(actions), std::move(weights)};
  MStepResult res = mstep_loss_flat(mcx, store, policy, mb, snapshot, duals);
  d.measured = res.measured;
  d.mstep_value = mcx.value(res.loss)[0];
  GradMap grads = mtape.backward(res.loss);

  Tape dtape;
  TapeCtx dcx(dtape, store);
  Var dual = dual_loss(dcx, store, duals, qvals);
  d.dual_value = dcx.value(dual)[0];
  merge_into(grads, dtape.backward(dual));

  GradMap mg;
  mg[duals.name_lambda_mu()] =
      Tensor::scalar(d.lambda_mu * (dc.eps_mu - res.measured.t_l_mean));
  mg[duals.name_lambda_sigma()] =
      Tensor::scalar(d.lambda_sigma * (dc.eps_sigma - res.measured.t_l_cov));
  merge_into(grads, mg);
  if (extra_grads) merge_into(grads, *extra_grads);

  store.adam_step(grads, cfg.lr);
  duals.project(store);
  return d;
}

Var svg_loss_flat(TapeCtx& cx, const FlatPolicy& policy, const QEnsemble& critic,
                  const Tensor& states, const std::vector<int>& tasks, const Tensor& zeta,
                  const std::map<std::string, Tensor>& snapshot, double kl_mult) {
  const int B = states.rows();
  if (B < 1) throw DimError("empty batch");
  if (static_cast<int>(tasks.size()) != B) throw DimError("task list and state rows disagree");
  if (zeta.rows() < B || zeta.rows() % B != 0 || zeta.cols() != policy.config().action_dim)
    throw DimError("noise must be (B*K) x A, got " + zeta.shape_str());
  const int K = zeta.rows() / B;

  auto g = policy.forward(cx, states, tasks);
  auto a = cx.add(cx.repeat_rows(g.mean, K),
                  cx.mul(cx.repeat_rows(g.chol, K), cx.constant(zeta)));
  auto qs = critic.forward(cx, cx.constant(fastops::repeat_rows(states, K)), a,
                           repeat_each(tasks, K));
  auto loss = cx.neg(cx.mean_all(qs));

  FastCtx snap(snapshot);
  auto old = policy.forward(snap, states, tasks);
  auto t_mean = cx.mean_all(kl_gaussian_mean_rows(cx, old.mean, old.chol, g.mean));
  auto t_cov = cx.mean_all(kl_gaussian_cov_rows(cx, old.chol, g.chol));
  return cx.add(loss, cx.scale(cx.add(t_mean, t_cov), kl_mult));
}

Var svg_loss_hierarchical(TapeCtx& cx, const HierarchicalPolicy& policy,
                          const QEnsemble& critic, const Tensor& states,
                          const std::vector<int>& tasks, const std::vector<Tensor>& zeta,
                          const Tensor& gumbel,
                          const std::map<std::string, Tensor>& snapshot,
                          const SvgConfig& cfg) {
  const int B = states.rows();
  const int M = policy.config().num_components;
  const int A = policy.config().action_dim;
  if (B < 1) throw DimError("empty batch");
  if (static_cast<int>(tasks.size()) != B) throw DimError("task list and state rows disagree");
  if (!(cfg.gumbel_temperature > 0.0))
    throw ContractError("gumbel temperature must be positive");
  if (static_cast<int>(zeta.size()) != M) throw DimError("need one noise tensor per component");
  if (gumbel.rows() < B || gumbel.rows() % B != 0 || gumbel.cols() != M)
    throw DimError("gumbel noise must be (B*K) x M, got " + gumbel.shape_str());
  const int K = gumbel.rows() / B;
  for (const auto& z : zeta)
    if (z.rows() != B * K || z.cols() != A)
      throw DimError("noise must be (B*K) x A, got " + z.shape_str());

  auto mix = policy.forward(cx, states, tasks);
  auto y = cx.softmax_rows(cx.scale(cx.add(cx.repeat_rows(mix.logits, K), cx.constant(gumbel)),
                                    1.0 / cfg.gumbel_temperature));
  auto h = y;
  if (cfg.straight_through) {
    // Forward sees the hard one-hot, backward the relaxed weights.
    const Tensor& yv = cx.value(y);
    Tensor delta = Tensor::zeros(B * K, M);
    for (int row = 0; row < B * K; ++row) {
      int arg = 0;
      for (int j = 1; j < M; ++j)
        if (yv.at(row, j) > yv.at(row, arg)) arg = j;
      for (int j = 0; j < M; ++j) delta.at(row, j) = (j == arg ? 1.0 : 0.0) - yv.at(row, j);
    }
    h = cx.add(y, cx.constant(delta));
  }

  Var action;
  for (int j = 0; j < M; ++j) {
    Tensor pick(1, M, 0.0);
    pick.at(0, j) = 1.0;
    auto sel = cx.sum_rows(cx.mul(h, cx.constant(pick)));
    auto aj = cx.add(cx.repeat_rows(mix.mean[j], K),
                     cx.mul(cx.repeat_rows(mix.chol[j], K), cx.constant(zeta[j])));
    auto term = cx.mul(sel, aj);
    action = j == 0 ? term : cx.add(action, term);
  }

  auto qs = critic.forward(cx, cx.constant(fastops::repeat_rows(states, K)), action,
                           repeat_each(tasks, K));
  auto loss = cx.neg(cx.mean_all(qs));

  FastCtx snap(snapshot);
  auto old = policy.forward(snap, states, tasks);
  Tensor probs_old = fastops::softmax_rows(old.logits);
  auto reg = cx.mean_all(kl_categorical_rows(cx, probs_old, mix.logits));
  Var t_mean, t_cov;
  for (int j = 0; j < M; ++j) {
    auto tm = cx.mean_all(kl_gaussian_mean_rows(cx, old.mean[j], old.chol[j], mix.mean[j]));
    auto tc = cx.mean_all(kl_gaussian_cov_rows(cx, old.chol[j], mix.chol[j]));
    t_mean = j == 0 ? tm : cx.add(t_mean, tm);
    t_cov = j == 0 ? tc : cx.add(t_cov, tc);
  }
  reg = cx.add(reg, cx.add(cx.scale(t_mean, 1.0 / M), cx.scale(t_cov, 1.0 / M)));
  return cx.add(loss, cx.scale(reg, cfg.kl_mult));
}

namespace {

void adam_policy_only(ParamStore& store, Tape& tape, Var loss,
                      const std::string& policy_prefix, double lr) {
  GradMap grads = tape.backward(loss);
  GradMap mine;
  const std::string pre = policy_prefix + "/";
  for (auto& [name, g] : grads)
    if (name.rfind(pre, 0) == 0) mine.emplace(name, std::move(g));
  store.adam_step(mine, lr);
}

}  // namespace

void svg_step_flat(ParamStore& store, const FlatPolicy& policy, const QEnsemble& critic,
                   const Tensor& states, const std::vector<int>& tasks,
                   const std::map<std::string, Tensor>& snapshot, const SvgConfig& cfg,
                   Rng& rng) {
  if (cfg.num_action_samples < 1) throw ContractError("num_action_samples must be >= 1");
  if (!(cfg.lr > 0.0)) throw ContractError("learning rate must be positive");
  Tensor zeta(states.rows() * cfg.num_action_samples, policy.config().action_dim, 0.0);
  for (auto& v : zeta.raw()) v = rng.normal();
  Tape tape;
  TapeCtx cx(tape, store);
  Var loss = svg_loss_flat(cx, policy, critic, states, tasks, zeta, snapshot, cfg.kl_mult);
  adam_policy_only(store, tape, loss, policy.prefix(), cfg.lr);
}

void svg_step_hierarchical(ParamStore& store, const HierarchicalPolicy& policy,
                           const QEnsemble& critic, const Tensor& states,
                           const std::vector<int>& tasks,
                           const std::map<std::string, Tensor>& snapshot,
                           const SvgConfig& cfg, Rng& rng) {
  if (cfg.num_action_samples < 1) throw ContractError("num_action_samples must be >= 1");
  if (!(cfg.lr > 0.0)) throw ContractError("learning rate must be positive");
  const int rows = states.rows() * cfg.num_action_samples;
  std::vector<Tensor> zeta;
  for (int j = 0; j < policy.config().num_components; ++j) {
    Tensor z(rows, policy.config().action_dim, 0.0);
    for (auto& v : z.raw()) v = rng.normal();
    zeta.push_back(std::move(z));
  }
  Tensor gumbel = sample_gumbel(rows, policy.config().num_components, rng);
  Tape tape;
  TapeCtx cx(tape, store);
  Var loss =
      svg_loss_hierarchical(cx, policy, critic, states, tasks, zeta, gumbel, snapshot, cfg);
  adam_policy_only(store, tape, loss, policy.prefix(), cfg.lr);
}

Tensor sample_gumbel(int rows, int cols, Rng& rng) {
  if (rows < 1 || cols < 1) throw DimError("gumbel noise needs positive dimensions");
  Tensor g(rows, cols, 0.0);
  for (auto& v : g.raw())
    v = -std::log(-std::log(std::max(rng.uniform(), 1e-300)));
  return g;
}

}  // namespace rhpo
