#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "rhpo/policy.h"
#include "rhpo/tape.h"

using namespace rhpo;

namespace {

PolicyConfig small_cfg(int M, InitScheme init = InitScheme::kDistinct) {
  PolicyConfig cfg;
  cfg.state_dim = 3;
  cfg.action_dim = 2;
  cfg.num_tasks = 3;
  cfg.num_components = M;
  cfg.torso.widths = {8, 6};
  cfg.head_hidden = 5;
  cfg.init = init;
  return cfg;
}

Tensor random_states(Rng& rng, int rows, int cols) {
  Tensor t(rows, cols, 0.0);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.5, 1.5);
  return t;
}

}  // namespace

TEST_CASE("task id reaches only the mixture weights") {
  Rng rng(1);
  HierarchicalPolicy pi(small_cfg(3));
  ParamStore store;
  pi.init(store, rng);
  // move the output weights off zero so the components actually vary with s
  for (int j = 0; j < 3; ++j) {
    Tensor& W = store.get(pi.comp_prefix(j) + "/mean/W");
    for (std::int64_t i = 0; i < W.size(); ++i) W[i] = rng.uniform(-0.3, 0.3);
  }

  const Tensor states = random_states(rng, 4, 3);
  FastCtx cx(store);
  auto a = pi.forward(cx, states, {0, 0, 0, 0});
  auto b = pi.forward(cx, states, {2, 2, 2, 2});
  auto mixed = pi.forward(cx, states, {0, 1, 2, 1});

  bool weights_differ = false;
  for (std::int64_t i = 0; i < a.logits.size(); ++i)
    if (a.logits[i] != b.logits[i]) weights_differ = true;
  (void)weights_differ;  // zero-init categorical output: equal until trained
  for (int j = 0; j < 3; ++j)
    for (std::int64_t i = 0; i < a.mean[j].size(); ++i) {
      CHECK(a.mean[j][i] == b.mean[j][i]);
      CHECK(a.chol[j][i] == b.chol[j][i]);
      CHECK(a.mean[j][i] == mixed.mean[j][i]);
      CHECK(a.chol[j][i] == mixed.chol[j][i]);
    }

  // trained heads: perturb task 1's head and check tasks 0/2 are unaffected
  Tensor& hw = store.get(pi.cat_prefix(1) + "/h1/W");
  for (std::int64_t i = 0; i < hw.size(); ++i) hw[i] = rng.uniform(-1.0, 1.0);
  auto a2 = pi.forward(cx, states, {0, 0, 0, 0});
  auto m2 = pi.forward(cx, states, {0, 1, 2, 1});
  for (std::int64_t i = 0; i < a2.logits.size(); ++i) CHECK(a2.logits[i] == a.logits[i]);
  for (int c = 0; c < 3; ++c) {
    CHECK(m2.logits.at(0, c) == a2.logits.at(0, c));
    CHECK(m2.logits.at(2, c) == a2.logits.at(2, c));
  }
  bool head1_changed = false;
  for (int c = 0; c < 3; ++c)
    if (m2.logits.at(1, c) != mixed.logits.at(1, c)) head1_changed = true;
  CHECK(head1_changed);
}

TEST_CASE("mixture weights are a valid categorical for every task") {
  Rng rng(2);
  HierarchicalPolicy pi(small_cfg(4));
  ParamStore store;
  pi.init(store, rng);
  FastCtx cx(store);
  const Tensor states = random_states(rng, 5, 3);
  for (int t = 0; t < 3; ++t) {
    auto out = pi.forward(cx, states, std::vector<int>(5, t));
    Tensor probs = fastops::softmax_rows(out.logits);
    for (int r = 0; r < 5; ++r) {
      double s = 0.0;
      for (int j = 0; j < 4; ++j) {
        CHECK(probs.at(r, j) > 0.0);
        s += probs.at(r, j);
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    for (int j = 0; j < 4; ++j)
      for (std::int64_t i = 0; i < out.chol[j].size(); ++i) CHECK(out.chol[j][i] > 0.0);
  }
}

TEST_CASE("distinct init pins component means to evenly spaced biases") {
  Rng rng(3);
  HierarchicalPolicy pi(small_cfg(3));
  ParamStore store;
  pi.init(store, rng);
  FastCtx cx(store);
  const Tensor states = random_states(rng, 6, 3);
  auto out = pi.forward(cx, states, std::vector<int>(6, 0));
  const double expected[3] = {-1.0, 0.0, 1.0};
  for (int j = 0; j < 3; ++j)
    for (int r = 0; r < 6; ++r)
      for (int d = 0; d < 2; ++d) {
        CHECK(out.mean[j].at(r, d) == expected[j]);
        CHECK(out.chol[j].at(r, d) == doctest::Approx(0.5).epsilon(1e-12));
      }
}

TEST_CASE("homogeneous init makes all components identical at step 0") {
  Rng rng(4);
  HierarchicalPolicy pi(small_cfg(3, InitScheme::kHomogeneous));
  ParamStore store;
  pi.init(store, rng);
  FastCtx cx(store);
  const Tensor states = random_states(rng, 4, 3);
  auto out = pi.forward(cx, states, std::vector<int>(4, 1));
  for (int j = 1; j < 3; ++j)
    for (std::int64_t i = 0; i < out.mean[0].size(); ++i) {
      CHECK(out.mean[j][i] == out.mean[0][i]);
      CHECK(out.chol[j][i] == out.chol[0][i]);
    }
}

TEST_CASE("single-component policy degenerates to its Gaussian") {
  Rng rng(5);
  HierarchicalPolicy pi(small_cfg(1));
  ParamStore store;
  pi.init(store, rng);
  FastCtx cx(store);
  const Tensor s = random_states(rng, 1, 3);
  for (int t = 0; t < 3; ++t) {
    MixtureGaussian m = pi.distribution(cx, s, t);
    REQUIRE(m.M() == 1);
    Tensor a = Tensor::vector({0.3, -0.4});
    a.set_rank(2);
    CHECK(mixture_log_prob(m, a) ==
          doctest::Approx(gaussian_log_prob(m.components[0], a)).epsilon(1e-12));
  }
}

TEST_CASE("hierarchical forward gradients survive mixed-task batching") {
  Rng rng(6);
  HierarchicalPolicy pi(small_cfg(2));
  ParamStore store;
  pi.init(store, rng);
  const Tensor states = random_states(rng, 5, 3);
  const std::vector<int> tasks = {0, 2, 1, 2, 0};

  Rng prng(7);
  Tensor proj_logits = random_states(prng, 5, 2);
  Tensor proj_mean = random_states(prng, 5, 2);

  auto loss_of = [&](ParamStore& st, GradMap* grads) {
    Tape t;
    TapeCtx cx(t, st);
    auto out = pi.forward(cx, states, tasks);
    Var loss = t.sum_all(t.mul(out.logits, t.constant(proj_logits)));
    loss = t.add(loss, t.sum_all(t.mul(out.mean[1], t.constant(proj_mean))));
    loss = t.add(loss, t.sum_all(out.chol[0]));
    if (grads) *grads = t.backward(loss);
    return loss.value()[0];
  };

  GradMap grads;
  loss_of(store, &grads);
  const double h = 1e-3;
  int checked = 0;
  for (const auto& name : store.names()) {
    const Tensor& base = store.get(name);
    for (std::int64_t i = 0; i < base.size(); i += std::max<std::int64_t>(1, base.size() / 7)) {
      ParamStore probe;
      for (const auto& n2 : store.names()) probe.create(n2, store.get(n2));
      probe.get(name)[i] = base[i] + h;
      const double up = loss_of(probe, nullptr);
      probe.get(name)[i] = base[i] - h;
      const double dn = loss_of(probe, nullptr);
      const double fd = (up - dn) / (2 * h);
      INFO(name, " entry ", i);
      CHECK(std::abs(grads.at(name)[i] - fd) / std::max(1.0, std::abs(fd)) < 1e-4);
      ++checked;
    }
  }
  CHECK(checked > 50);
}

TEST_CASE("deterministic action ignores the rng and respects bounds") {
  Rng rng(8);
  HierarchicalPolicy pi(small_cfg(3));
  ParamStore store;
  pi.init(store, rng);
  FastCtx cx(store);
  const Tensor s = random_states(rng, 1, 3);
  Rng r1(123), r2(98765);
  Tensor a1 = pi.act(cx, s, 0, r1, false);
  Tensor a2 = pi.act(cx, s, 0, r2, false);
  for (std::int64_t i = 0; i < a1.size(); ++i) CHECK(a1[i] == a2[i]);

  Rng r3(5);
  for (int k = 0; k < 500; ++k) {
    Tensor a = pi.act(cx, s, k % 3, r3, true);
    for (std::int64_t i = 0; i < a.size(); ++i) {
      CHECK(a[i] >= -1.0);
      CHECK(a[i] <= 1.0);
    }
  }
}

TEST_CASE("stochastic actions average to the mixture mean") {
  Rng rng(9);
  PolicyConfig cfg = small_cfg(2);
  cfg.action_low = -4.0;
  cfg.action_high = 4.0;
  cfg.init_chol = 0.3;
  HierarchicalPolicy pi(cfg);
  ParamStore store;
  pi.init(store, rng);
  // place the component means well inside the bounds
  store.get(pi.comp_prefix(0) + "/mean/b").at(0, 0) = 0.6;
  store.get(pi.comp_prefix(0) + "/mean/b").at(0, 1) = -0.2;
  store.get(pi.comp_prefix(1) + "/mean/b").at(0, 0) = -0.5;
  store.get(pi.comp_prefix(1) + "/mean/b").at(0, 1) = 0.1;
  store.get(pi.cat_prefix(0) + "/h1/b").at(0, 0) = 0.7;

  FastCtx cx(store);
  const Tensor s = random_states(rng, 1, 3);
  MixtureGaussian m = pi.distribution(cx, s, 0);
  const Tensor alpha = m.weights.probs();
  double want[2] = {0.0, 0.0};
  double second[2] = {0.0, 0.0};
  for (int j = 0; j < 2; ++j)
    for (int d = 0; d < 2; ++d) {
      want[d] += alpha.at(0, j) * m.components[j].mean.at(0, d);
      second[d] += alpha.at(0, j) *
                   (std::pow(m.components[j].chol.at(0, d), 2) +
                    std::pow(m.components[j].mean.at(0, d), 2));
    }

  Rng sampler(31);
  const int n = 20000;
  double got[2] = {0.0, 0.0};
  for (int k = 0; k < n; ++k) {
    Tensor a = pi.act(cx, s, 0, sampler, true);
    got[0] += a[0];
    got[1] += a[1];
  }
  for (int d = 0; d < 2; ++d) {
    got[d] /= n;
    const double sd = std::sqrt(second[d] - want[d] * want[d]);
    CHECK(std::abs(got[d] - want[d]) <= 3.0 * sd / std::sqrt(static_cast<double>(n)));
  }
}

TEST_CASE("independent flat heads: other tasks' parameters are inert") {
  Rng rng(10);
  PolicyConfig cfg = small_cfg(1);
  FlatPolicy pi(cfg, FlatKind::kIndependent);
  ParamStore store;
  pi.init(store, rng);
  FastCtx cx(store);
  const Tensor states = random_states(rng, 4, 3);
  auto before = pi.forward(cx, states, {0, 0, 0, 0});

  Tensor& W = store.get(pi.head_prefix(2) + "/mean/W");
  for (std::int64_t i = 0; i < W.size(); ++i) W[i] = rng.uniform(-2.0, 2.0);
  auto after = pi.forward(cx, states, {0, 0, 0, 0});
  for (std::int64_t i = 0; i < before.mean.size(); ++i) {
    CHECK(before.mean[i] == after.mean[i]);
    CHECK(before.chol[i] == after.chol[i]);
  }
  auto t2 = pi.forward(cx, states, {2, 2, 2, 2});
  bool differs = false;
  for (std::int64_t i = 0; i < t2.mean.size(); ++i)
    if (t2.mean[i] != before.mean[i]) differs = true;
  CHECK(differs);
}

TEST_CASE("monolithic flat policy reacts to the task one-hot") {
  Rng rng(11);
  FlatPolicy pi(small_cfg(1), FlatKind::kMonolithic);
  ParamStore store;
  pi.init(store, rng);
  // off-zero output weights; at init the mean is pinned to its bias
  Tensor& W = store.get("pi/mono/mean/W");
  for (std::int64_t i = 0; i < W.size(); ++i) W[i] = rng.uniform(-0.5, 0.5);
  FastCtx cx(store);
  const Tensor states = random_states(rng, 3, 3);
  auto a = pi.forward(cx, states, {0, 0, 0});
  auto b = pi.forward(cx, states, {1, 1, 1});
  bool differs = false;
  for (std::int64_t i = 0; i < a.mean.size(); ++i)
    if (a.mean[i] != b.mean[i]) differs = true;
  CHECK(differs);
}

TEST_CASE("flat policy gradients match finite differences") {
  Rng rng(12);
  FlatPolicy pi(small_cfg(1), FlatKind::kMonolithic);
  ParamStore store;
  pi.init(store, rng);
  const Tensor states = random_states(rng, 3, 3);
  const std::vector<int> tasks = {1, 0, 2};
  Rng prng(13);
  const Tensor proj = random_states(prng, 3, 2);

  auto loss_of = [&](ParamStore& st, GradMap* grads) {
    Tape t;
    TapeCtx cx(t, st);
    auto out = pi.forward(cx, states, tasks);
    Var loss = t.sum_all(t.mul(out.mean, t.constant(proj)));
    loss = t.add(loss, t.sum_all(out.chol));
    if (grads) *grads = t.backward(loss);
    return loss.value()[0];
  };
  GradMap grads;
  loss_of(store, &grads);
  const double h = 1e-3;
  for (const auto& name : store.names()) {
    const Tensor& base = store.get(name);
    for (std::int64_t i = 0; i < base.size(); i += std::max<std::int64_t>(1, base.size() / 5)) {
      ParamStore probe;
      for (const auto& n2 : store.names()) probe.create(n2, store.get(n2));
      probe.get(name)[i] = base[i] + h;
      const double up = loss_of(probe, nullptr);
      probe.get(name)[i] = base[i] - h;
      const double dn = loss_of(probe, nullptr);
      const double fd = (up - dn) / (2 * h);
      INFO(name, " entry ", i);
      CHECK(std::abs(grads.at(name)[i] - fd) / std::max(1.0, std::abs(fd)) < 1e-4);
    }
  }
}

TEST_CASE("freezing components blocks their gradients and adam updates") {
  Rng rng(14);
  HierarchicalPolicy pi(small_cfg(2));
  ParamStore store;
  pi.init(store, rng);
  pi.freeze_components(store);
  pi.add_task_head(store, rng);

  const Tensor states = random_states(rng, 3, 3);
  Tape t;
  TapeCtx cx(t, store);
  auto out = pi.forward(cx, states, {3, 3, 3});
  Var loss = t.sum_all(out.logits);
  for (int j = 0; j < 2; ++j) {
    loss = t.add(loss, t.sum_all(out.mean[j]));
    loss = t.add(loss, t.sum_all(out.chol[j]));
  }
  GradMap grads = t.backward(loss);

  for (int j = 0; j < 2; ++j)
    for (const auto& name : store.names_with_prefix(pi.comp_prefix(j)))
      CHECK(grads.count(name) == 0);
  for (const auto& name : store.names_with_prefix("pi/torso"))
    CHECK(grads.count(name) == 0);
  int new_head_grads = 0;
  for (const auto& name : store.names_with_prefix(pi.cat_prefix(3)))
    new_head_grads += grads.count(name);
  CHECK(new_head_grads == 4);

  const Tensor frozen_before = store.get(pi.comp_prefix(0) + "/mean/b");
  store.adam_step(grads, 1e-2);
  const Tensor& frozen_after = store.get(pi.comp_prefix(0) + "/mean/b");
  for (std::int64_t i = 0; i < frozen_before.size(); ++i)
    CHECK(frozen_before[i] == frozen_after[i]);
}

TEST_CASE("transfer head is the only trainable parameter block") {
  Rng rng(15);
  PolicyConfig cfg = small_cfg(3);
  HierarchicalPolicy pi(cfg);
  ParamStore store;
  pi.init(store, rng);
  pi.freeze_components(store);
  pi.add_task_head(store, rng);

  std::int64_t trainable = 0;
  for (const auto& name : store.names())
    if (store.trainable(name)) trainable += store.get(name).size();
  const int T = cfg.torso.out_dim(), H = cfg.head_hidden, M = cfg.num_components;
  const std::int64_t head_size = (T * H + H) + (H * M + M);
  CHECK(trainable == head_size);
}

TEST_CASE("a new component with zero weight preserves old task distributions") {
  Rng rng(16);
  HierarchicalPolicy pi(small_cfg(2));
  ParamStore store;
  pi.init(store, rng);
  // make the old policy non-trivial
  for (int j = 0; j < 2; ++j) {
    Tensor& W = store.get(pi.comp_prefix(j) + "/mean/W");
    for (std::int64_t i = 0; i < W.size(); ++i) W[i] = rng.uniform(-0.4, 0.4);
  }
  Tensor& cw = store.get(pi.cat_prefix(0) + "/h1/W");
  for (std::int64_t i = 0; i < cw.size(); ++i) cw[i] = rng.uniform(-0.8, 0.8);

  FastCtx cx(store);
  const Tensor s = random_states(rng, 1, 3);
  Tensor probe = Tensor::vector({0.2, -0.6});
  probe.set_rank(2);
  std::vector<double> before;
  for (int t = 0; t < 3; ++t)
    before.push_back(mixture_log_prob(pi.distribution(cx, s, t), probe));

  pi.freeze_components(store);
  pi.extend_with_new_component(store, rng);
  pi.add_task_head(store, rng);
  CHECK(pi.config().num_components == 3);
  CHECK(pi.config().num_tasks == 4);

  FastCtx cx2(store);
  for (int t = 0; t < 3; ++t) {
    MixtureGaussian m = pi.distribution(cx2, s, t);
    REQUIRE(m.M() == 3);
    CHECK(m.weights.probs().at(0, 2) == 0.0);
    CHECK(mixture_log_prob(m, probe) == doctest::Approx(before[t]).epsilon(1e-12));
  }

  PolicyConfig capped = small_cfg(2);
  capped.max_components = 2;
  HierarchicalPolicy pc(capped);
  ParamStore store2;
  pc.init(store2, rng);
  CHECK_THROWS_AS(pc.extend_with_new_component(store2, rng), ContractError);
}

TEST_CASE("policy metadata round-trips") {
  PolicyConfig cfg = small_cfg(3);
  cfg.init = InitScheme::kHomogeneous;
  HierarchicalPolicy pi(cfg, "actor");
  HierarchicalPolicy back = HierarchicalPolicy::from_meta(pi.meta());
  CHECK(back.config().state_dim == cfg.state_dim);
  CHECK(back.config().action_dim == cfg.action_dim);
  CHECK(back.config().num_tasks == cfg.num_tasks);
  CHECK(back.config().num_components == cfg.num_components);
  CHECK(back.config().torso.widths == cfg.torso.widths);
  CHECK(back.config().init == InitScheme::kHomogeneous);
  CHECK(back.prefix() == "actor");
}

TEST_CASE("task range violations throw") {
  Rng rng(17);
  HierarchicalPolicy pi(small_cfg(2));
  ParamStore store;
  pi.init(store, rng);
  FastCtx cx(store);
  const Tensor s = random_states(rng, 1, 3);
  CHECK_THROWS_AS((void)pi.distribution(cx, s, 3), ContractError);
  CHECK_THROWS_AS((void)pi.distribution(cx, s, -1), ContractError);
  Tensor bad = random_states(rng, 1, 5);
  CHECK_THROWS_AS((void)pi.distribution(cx, bad, 0), DimError);
}
