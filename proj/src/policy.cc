#include "rhpo/policy.h"

#include <algorithm>
#include <cmath>

#include "rhpo/errors.h"

namespace rhpo {
namespace {

// softplus(x) + floor == target
double inv_softplus(double target) {
  if (target <= 0.0) throw ContractError("initial scale must be positive");
  return target > 30.0 ? target : std::log(std::expm1(target));
}

std::vector<double> constant_bias(int n, double v) { return std::vector<double>(n, v); }

}  // namespace

Tensor clip_action(Tensor a, double lo, double hi) {
  for (std::int64_t i = 0; i < a.size(); ++i) a[i] = std::clamp(a[i], lo, hi);
  return a;
}

HierarchicalPolicy::HierarchicalPolicy(PolicyConfig cfg, std::string prefix)
    : cfg_(std::move(cfg)), prefix_(std::move(prefix)) {
  if (cfg_.num_components < 1) throw ContractError("M must be >= 1");
  if (cfg_.num_tasks < 1) throw ContractError("need at least one task");
  if (cfg_.num_components > cfg_.max_components)
    throw ContractError("M exceeds configured maximum");
}

std::string HierarchicalPolicy::comp_prefix(int j) const {
  return prefix_ + "/comp" + std::to_string(j);
}

std::string HierarchicalPolicy::cat_prefix(int i) const {
  return prefix_ + "/cat" + std::to_string(i);
}

void HierarchicalPolicy::check_batch(const Tensor& states,
                                     const std::vector<int>& tasks) const {
  if (states.cols() != cfg_.state_dim)
    throw DimError("state width " + std::to_string(states.cols()) + ", expected " +
                   std::to_string(cfg_.state_dim));
  if (static_cast<int>(tasks.size()) != states.rows())
    throw DimError("task list length does not match batch");
  for (int t : tasks)
    if (t < 0 || t >= cfg_.num_tasks)
      throw ContractError("task id " + std::to_string(t) + " out of range");
}

void HierarchicalPolicy::init(ParamStore& store, Rng& rng) {
  init_torso(store, prefix_ + "/torso", cfg_.state_dim, cfg_.torso, rng);
  const int T = cfg_.torso.out_dim();
  const int A = cfg_.action_dim;
  const double chol_bias = inv_softplus(cfg_.init_chol - cfg_.chol_floor);
  for (int j = 0; j < cfg_.num_components; ++j) {
    init_linear(store, comp_prefix(j) + "/h0", T, cfg_.head_hidden, rng);
    double mean_bias = 0.0;
    if (cfg_.init == InitScheme::kDistinct && cfg_.num_components > 1)
      mean_bias = cfg_.action_low + (cfg_.action_high - cfg_.action_low) * j /
                                        (cfg_.num_components - 1);
    const auto mb = constant_bias(A, mean_bias);
    init_linear(store, comp_prefix(j) + "/mean", cfg_.head_hidden, A, rng,
                WeightInit::kZero, &mb);
    const auto cb = constant_bias(A, chol_bias);
    init_linear(store, comp_prefix(j) + "/chol", cfg_.head_hidden, A, rng,
                WeightInit::kZero, &cb);
  }
  for (int i = 0; i < cfg_.num_tasks; ++i)
    init_head(store, cat_prefix(i), T, cfg_.head_hidden, cfg_.num_components, rng,
              WeightInit::kZero);
}

MixtureGaussian HierarchicalPolicy::distribution(FastCtx& cx, const Tensor& state,
                                                 int task) const {
  Tensor s = state;
  if (s.rows() != 1) throw DimError("distribution expects a single state row");
  auto rows = forward(cx, s, {task});
  MixtureGaussian m;
  m.weights.logits = rows.logits;
  for (int j = 0; j < cfg_.num_components; ++j)
    m.components.push_back({rows.mean[j], rows.chol[j]});
  return m;
}

Tensor HierarchicalPolicy::act(FastCtx& cx, const Tensor& state, int task, Rng& rng,
                               bool stochastic) const {
  MixtureGaussian m = distribution(cx, state, task);
  if (stochastic)
    return clip_action(sample(m, rng).first, cfg_.action_low, cfg_.action_high);
  const Tensor probs = m.weights.probs();
  int best = 0;
  for (int j = 1; j < m.M(); ++j)
    if (probs.at(0, j) > probs.at(0, best)) best = j;
  return clip_action(m.components[best].mean, cfg_.action_low, cfg_.action_high);
}

void HierarchicalPolicy::freeze_components(ParamStore& store) {
  for (const auto& name : store.names_with_prefix(prefix_ + "/torso"))
    store.set_trainable(name, false);
  for (int j = 0; j < cfg_.num_components; ++j)
    for (const auto& name : store.names_with_prefix(comp_prefix(j)))
      store.set_trainable(name, false);
  for (int i = 0; i < cfg_.num_tasks; ++i)
    for (const auto& name : store.names_with_prefix(cat_prefix(i)))
      store.set_trainable(name, false);
}

void HierarchicalPolicy::add_task_head(ParamStore& store, Rng& rng) {
  const int i = cfg_.num_tasks;
  init_head(store, cat_prefix(i), cfg_.torso.out_dim(), cfg_.head_hidden,
            cfg_.num_components, rng, WeightInit::kZero);
  ++cfg_.num_tasks;
}

void HierarchicalPolicy::extend_with_new_component(ParamStore& store, Rng& rng) {
  if (cfg_.num_components + 1 > cfg_.max_components)
    throw ContractError("cannot extend past max_components = " +
                        std::to_string(cfg_.max_components));
  const int j = cfg_.num_components;
  const int T = cfg_.torso.out_dim();
  const int A = cfg_.action_dim;
  init_linear(store, comp_prefix(j) + "/h0", T, cfg_.head_hidden, rng);
  const auto mb = constant_bias(A, 0.0);
  init_linear(store, comp_prefix(j) + "/mean", cfg_.head_hidden, A, rng,
              WeightInit::kZero, &mb);
  const auto cb = constant_bias(A, inv_softplus(cfg_.init_chol - cfg_.chol_floor));
  init_linear(store, comp_prefix(j) + "/chol", cfg_.head_hidden, A, rng,
              WeightInit::kZero, &cb);

  // Existing categorical heads gain one output column. The new logit bias is
  // pushed so far down that softmax underflows it to an exact zero weight:
  // old tasks keep their old distributions bit for bit.
  for (int i = 0; i < cfg_.num_tasks; ++i) {
    const std::string wname = cat_prefix(i) + "/h1/W";
    const std::string bname = cat_prefix(i) + "/h1/b";
    const Tensor& W = store.get(wname);
    const Tensor& b = store.get(bname);
    Tensor W2(W.rows(), W.cols() + 1, 0.0);
    for (int r = 0; r < W.rows(); ++r)
      for (int c = 0; c < W.cols(); ++c) W2.at(r, c) = W.at(r, c);
    Tensor b2(1, b.cols() + 1, 0.0);
    for (int c = 0; c < b.cols(); ++c) b2.at(0, c) = b.at(0, c);
    b2.at(0, b.cols()) = -800.0;
    const bool was_trainable = store.trainable(wname);
    store.replace(wname, std::move(W2));
    store.replace(bname, std::move(b2));
    store.set_trainable(wname, was_trainable);
    store.set_trainable(bname, was_trainable);
  }
  ++cfg_.num_components;
}

nlohmann::json HierarchicalPolicy::meta() const {
  return {{"kind", "hierarchical"},
          {"state_dim", cfg_.state_dim},
          {"action_dim", cfg_.action_dim},
          {"num_tasks", cfg_.num_tasks},
          {"num_components", cfg_.num_components},
          {"torso_widths", cfg_.torso.widths},
          {"tanh_after_ln", cfg_.torso.tanh_after_ln},
          {"head_hidden", cfg_.head_hidden},
          {"init_scheme", cfg_.init == InitScheme::kDistinct ? "distinct" : "homogeneous"},
          {"action_low", cfg_.action_low},
          {"action_high", cfg_.action_high},
          {"init_chol", cfg_.init_chol},
          {"chol_floor", cfg_.chol_floor},
          {"prefix", prefix_}};
}

HierarchicalPolicy HierarchicalPolicy::from_meta(const nlohmann::json& meta) {
  PolicyConfig cfg;
  cfg.state_dim = meta.at("state_dim");
  cfg.action_dim = meta.at("action_dim");
  cfg.num_tasks = meta.at("num_tasks");
  cfg.num_components = meta.at("num_components");
  cfg.torso.widths = meta.at("torso_widths").get<std::vector<int>>();
  cfg.torso.tanh_after_ln = meta.at("tanh_after_ln");
  cfg.head_hidden = meta.at("head_hidden");
  cfg.init = meta.at("init_scheme") == "distinct" ? InitScheme::kDistinct
                                                  : InitScheme::kHomogeneous;
  cfg.action_low = meta.at("action_low");
  cfg.action_high = meta.at("action_high");
  cfg.init_chol = meta.at("init_chol");
  cfg.chol_floor = meta.at("chol_floor");
  return HierarchicalPolicy(cfg, meta.value("prefix", "pi"));
}

FlatPolicy::FlatPolicy(PolicyConfig cfg, FlatKind kind, std::string prefix)
    : cfg_(std::move(cfg)), kind_(kind), prefix_(std::move(prefix)) {
  if (cfg_.num_tasks < 1) throw ContractError("need at least one task");
}

std::string FlatPolicy::head_prefix(int i) const {
  return prefix_ + "/head" + std::to_string(i);
}

void FlatPolicy::check_batch(const Tensor& states, const std::vector<int>& tasks) const {
  if (states.cols() != cfg_.state_dim)
    throw DimError("state width " + std::to_string(states.cols()) + ", expected " +
                   std::to_string(cfg_.state_dim));
  if (static_cast<int>(tasks.size()) != states.rows())
    throw DimError("task list length does not match batch");
  for (int t : tasks)
    if (t < 0 || t >= cfg_.num_tasks)
      throw ContractError("task id " + std::to_string(t) + " out of range");
}

Tensor FlatPolicy::augment(const Tensor& states, const std::vector<int>& tasks) const {
  Tensor out(states.rows(), states.cols() + cfg_.num_tasks, 0.0);
  for (int r = 0; r < states.rows(); ++r) {
    for (int c = 0; c < states.cols(); ++c) out.at(r, c) = states.at(r, c);
    out.at(r, states.cols() + tasks[r]) = 1.0;
  }
  return out;
}

void FlatPolicy::init(ParamStore& store, Rng& rng) {
  const int A = cfg_.action_dim;
  const double chol_bias = inv_softplus(cfg_.init_chol - cfg_.chol_floor);
  const auto cb = constant_bias(A, chol_bias);
  const auto mb = constant_bias(A, 0.0);
  if (kind_ == FlatKind::kMonolithic) {
    init_torso(store, prefix_ + "/torso", cfg_.state_dim + cfg_.num_tasks, cfg_.torso, rng);
    const int T = cfg_.torso.out_dim();
    init_linear(store, prefix_ + "/mono/h0", T, cfg_.head_hidden, rng);
    init_linear(store, prefix_ + "/mono/mean", cfg_.head_hidden, A, rng,
                WeightInit::kZero, &mb);
    init_linear(store, prefix_ + "/mono/chol", cfg_.head_hidden, A, rng,
                WeightInit::kZero, &cb);
    return;
  }
  init_torso(store, prefix_ + "/torso", cfg_.state_dim, cfg_.torso, rng);
  const int T = cfg_.torso.out_dim();
  for (int i = 0; i < cfg_.num_tasks; ++i) {
    init_linear(store, head_prefix(i) + "/h0", T, cfg_.head_hidden, rng);
    init_linear(store, head_prefix(i) + "/mean", cfg_.head_hidden, A, rng,
                WeightInit::kZero, &mb);
    init_linear(store, head_prefix(i) + "/chol", cfg_.head_hidden, A, rng,
                WeightInit::kZero, &cb);
  }
}

DiagGaussian FlatPolicy::distribution(FastCtx& cx, const Tensor& state, int task) const {
  if (state.rows() != 1) throw DimError("distribution expects a single state row");
  auto rows = forward(cx, state, {task});
  return DiagGaussian{rows.mean, rows.chol};
}

Tensor FlatPolicy::act(FastCtx& cx, const Tensor& state, int task, Rng& rng,
                       bool stochastic) const {
  DiagGaussian d = distribution(cx, state, task);
  if (!stochastic) return clip_action(d.mean, cfg_.action_low, cfg_.action_high);
  Tensor a(1, d.dim(), 0.0);
  for (int j = 0; j < d.dim(); ++j)
    a.at(0, j) = d.mean.at(0, j) + d.chol.at(0, j) * rng.normal();
  return clip_action(std::move(a), cfg_.action_low, cfg_.action_high);
}

}  // namespace rhpo
