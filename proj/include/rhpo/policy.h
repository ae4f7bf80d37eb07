#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rhpo/distributions.h"
#include "rhpo/netctx.h"

namespace rhpo {

enum class InitScheme { kHomogeneous, kDistinct };
enum class FlatKind { kMonolithic, kIndependent };

struct PolicyConfig {
  int state_dim = 0;
  int action_dim = 0;
  int num_tasks = 1;
  int num_components = 1;  // M
  TorsoSpec torso{{400, 200}, true, 1e-6};
  int head_hidden = 100;
  InitScheme init = InitScheme::kDistinct;
  double action_low = -1.0;
  double action_high = 1.0;
  int max_components = 64;
  double init_chol = 0.5;   // component scale at step 0 (output weights start at zero)
  double chol_floor = 1e-6;
};

// Batched mixture parameters; one tensor per component, rows = batch.
template <class V>
struct MixtureRows {
  V logits;             // B x M
  std::vector<V> mean;  // M entries, B x A
  std::vector<V> chol;  // M entries, B x A
};

template <class V>
struct GaussRows {
  V mean;  // B x A
  V chol;  // B x A
};

namespace detail {

// Run a per-task head over a batch with mixed task ids: rows are grouped by
// task, each group goes through its own head, and the results are permuted
// back into batch order.
template <class Ctx, class Fn>
typename Ctx::V grouped_heads(Ctx& cx, typename Ctx::V shared,
                              const std::vector<int>& tasks, Fn&& head) {
  bool uniform = true;
  for (int t : tasks)
    if (t != tasks[0]) {
      uniform = false;
      break;
    }
  if (uniform) return head(shared, tasks[0]);

  std::map<int, std::vector<int>> groups;
  for (size_t r = 0; r < tasks.size(); ++r) groups[tasks[r]].push_back(static_cast<int>(r));
  std::vector<typename Ctx::V> parts;
  std::vector<int> stacked_row_of(tasks.size());
  int pos = 0;
  for (const auto& [t, rows] : groups) {
    parts.push_back(head(cx.gather_rows(shared, rows), t));
    for (int r : rows) stacked_row_of[r] = pos++;
  }
  return cx.gather_rows(cx.concat_rows(parts), stacked_row_of);
}

}  // namespace detail

// Mixture-of-Gaussians policy: shared torso, M shared component heads that
// see the state only, and one categorical head per task. Task identity can
// influence nothing but the mixture weights.
class HierarchicalPolicy {
 public:
  HierarchicalPolicy(PolicyConfig cfg, std::string prefix = "pi");

  void init(ParamStore& store, Rng& rng);

  template <class Ctx>
  MixtureRows<typename Ctx::V> forward(Ctx& cx, const Tensor& states,
                                       const std::vector<int>& tasks) const {
    check_batch(states, tasks);
    auto h = torso_forward(cx, cx.input(states), prefix_ + "/torso", cfg_.torso);
    MixtureRows<typename Ctx::V> out;
    for (int j = 0; j < cfg_.num_components; ++j) {
      const std::string cp = comp_prefix(j);
      auto hc = cx.elu(cx.linear(h, cp + "/h0"));
      out.mean.push_back(cx.linear(hc, cp + "/mean"));
      out.chol.push_back(
          cx.add_const(cx.softplus(cx.linear(hc, cp + "/chol")), cfg_.chol_floor));
    }
    out.logits = detail::grouped_heads(cx, h, tasks, [&](typename Ctx::V x, int t) {
      return head_forward(cx, x, cat_prefix(t));
    });
    return out;
  }

  // Single-state mixture for actors and analysis.
  MixtureGaussian distribution(FastCtx& cx, const Tensor& state, int task) const;
  // Stochastic: ancestral sample clipped to the action bounds.
  // Deterministic: mean of the highest-weight component (rng unused).
  Tensor act(FastCtx& cx, const Tensor& state, int task, Rng& rng, bool stochastic) const;

  // Sequential transfer: torso, components and existing categorical heads
  // stop training; a fresh head (and optionally component) picks up the new
  // task.
  void freeze_components(ParamStore& store);
  void add_task_head(ParamStore& store, Rng& rng);
  void extend_with_new_component(ParamStore& store, Rng& rng);

  const PolicyConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }
  std::string comp_prefix(int j) const;
  std::string cat_prefix(int i) const;

  nlohmann::json meta() const;
  static HierarchicalPolicy from_meta(const nlohmann::json& meta);

 private:
  void check_batch(const Tensor& states, const std::vector<int>& tasks) const;

  PolicyConfig cfg_;
  std::string prefix_;
};

// Flat Gaussian baselines. Monolithic: one shared head, task id appended to
// the torso input as a one-hot. Independent: per-task heads on the shared
// torso.
class FlatPolicy {
 public:
  FlatPolicy(PolicyConfig cfg, FlatKind kind, std::string prefix = "pi");

  void init(ParamStore& store, Rng& rng);

  template <class Ctx>
  GaussRows<typename Ctx::V> forward(Ctx& cx, const Tensor& states,
                                     const std::vector<int>& tasks) const {
    check_batch(states, tasks);
    GaussRows<typename Ctx::V> out;
    if (kind_ == FlatKind::kMonolithic) {
      auto h = torso_forward(cx, cx.input(augment(states, tasks)),
                             prefix_ + "/torso", cfg_.torso);
      auto hc = cx.elu(cx.linear(h, prefix_ + "/mono/h0"));
      out.mean = cx.linear(hc, prefix_ + "/mono/mean");
      out.chol = cx.add_const(cx.softplus(cx.linear(hc, prefix_ + "/mono/chol")),
                              cfg_.chol_floor);
      return out;
    }
    auto h = torso_forward(cx, cx.input(states), prefix_ + "/torso", cfg_.torso);
    auto head_pair = [&](typename Ctx::V x, int t) {
      auto hc = cx.elu(cx.linear(x, head_prefix(t) + "/h0"));
      return std::pair{cx.linear(hc, head_prefix(t) + "/mean"),
                       cx.add_const(cx.softplus(cx.linear(hc, head_prefix(t) + "/chol")),
                                    cfg_.chol_floor)};
    };
    bool uniform = true;
    for (int t : tasks)
      if (t != tasks[0]) {
        uniform = false;
        break;
      }
    if (uniform) {
      std::tie(out.mean, out.chol) = head_pair(h, tasks[0]);
      return out;
    }
    std::map<int, std::vector<int>> groups;
    for (size_t r = 0; r < tasks.size(); ++r) groups[tasks[r]].push_back(static_cast<int>(r));
    std::vector<typename Ctx::V> means, chols;
    std::vector<int> stacked_row_of(tasks.size());
    int pos = 0;
    for (const auto& [t, rows] : groups) {
      auto [m, c] = head_pair(cx.gather_rows(h, rows), t);
      means.push_back(m);
      chols.push_back(c);
      for (int r : rows) stacked_row_of[r] = pos++;
    }
    out.mean = cx.gather_rows(cx.concat_rows(means), stacked_row_of);
    out.chol = cx.gather_rows(cx.concat_rows(chols), stacked_row_of);
    return out;
  }

  DiagGaussian distribution(FastCtx& cx, const Tensor& state, int task) const;
  Tensor act(FastCtx& cx, const Tensor& state, int task, Rng& rng, bool stochastic) const;

  const PolicyConfig& config() const { return cfg_; }
  FlatKind kind() const { return kind_; }
  const std::string& prefix() const { return prefix_; }
  std::string head_prefix(int i) const;

 private:
  void check_batch(const Tensor& states, const std::vector<int>& tasks) const;
  Tensor augment(const Tensor& states, const std::vector<int>& tasks) const;

  PolicyConfig cfg_;
  FlatKind kind_;
  std::string prefix_;
};

Tensor clip_action(Tensor a, double lo, double hi);

}  // namespace rhpo
