#pragma once

#include <map>
#include <string>
#include <vector>

#include "rhpo/fastops.h"
#include "rhpo/param_store.h"
#include "rhpo/rng.h"
#include "rhpo/tape.h"

namespace rhpo {

// Shared trunk: linear -> layer_norm -> optional tanh -> linear+elu (one
// pair per remaining width).
struct TorsoSpec {
  std::vector<int> widths{400, 200};
  bool tanh_after_ln = true;
  double var_floor = 1e-6;

  int out_dim() const { return widths.back(); }
};

// Gradient-recording execution context. Parameters are registered as tape
// leaves named after their store keys, so backward() gradients line up with
// adam_step.
class TapeCtx {
 public:
  using V = Var;

  TapeCtx(Tape& tape, const ParamStore& store) : tape_(tape), store_(store) {}

  V input(Tensor t) { return tape_.constant(std::move(t)); }
  V constant(Tensor t) { return tape_.constant(std::move(t)); }
  // Frozen parameters enter the graph as constants, so backward() never
  // produces a gradient for them.
  V param(const std::string& name) {
    if (!store_.trainable(name)) return tape_.constant(store_.get(name));
    return tape_.leaf(name, store_.get(name));
  }

  V linear(V x, const std::string& prefix) {
    return tape_.add(tape_.matmul(x, param(prefix + "/W")), param(prefix + "/b"));
  }
  V layer_norm(V x, const std::string& prefix, double var_floor) {
    return tape_.layer_norm(x, param(prefix + "/g"), param(prefix + "/o"), var_floor);
  }

  V add(V a, V b) { return tape_.add(a, b); }
  V sub(V a, V b) { return tape_.sub(a, b); }
  V mul(V a, V b) { return tape_.mul(a, b); }
  V div(V a, V b) { return tape_.div(a, b); }
  V matmul(V a, V b) { return tape_.matmul(a, b); }
  V neg(V x) { return tape_.neg(x); }
  V scale(V x, double c) { return tape_.scale(x, c); }
  V add_const(V x, double c) { return tape_.add_const(x, c); }
  V exp_(V x) { return tape_.exp_(x); }
  V log_(V x) { return tape_.log_(x); }
  V tanh_(V x) { return tape_.tanh_(x); }
  V elu(V x) { return tape_.elu(x); }
  V softplus(V x) { return tape_.softplus(x); }
  V square(V x) { return tape_.square(x); }
  V sum_all(V x) { return tape_.sum_all(x); }
  V mean_all(V x) { return tape_.mean_all(x); }
  V sum_rows(V x) { return tape_.sum_rows(x); }
  V sum_cols(V x) { return tape_.sum_cols(x); }
  V logsumexp_rows(V x) { return tape_.logsumexp_rows(x); }
  V softmax_rows(V x) { return tape_.softmax_rows(x); }
  V log_softmax_rows(V x) { return tape_.log_softmax_rows(x); }
  V concat_cols(V a, V b) { return tape_.concat_cols(a, b); }
  V concat_rows(const std::vector<V>& parts) { return tape_.concat_rows(parts); }
  V gather_rows(V x, std::vector<int> idx) { return tape_.gather_rows(x, std::move(idx)); }
  V repeat_rows(V x, int k) { return tape_.repeat_rows(x, k); }
  V stop_gradient(V x) { return tape_.stop_gradient(x); }

  const Tensor& value(V v) const { return v.value(); }
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  const ParamStore& store_;
};

// Value-only context over a parameter snapshot or a live store. Same layer
// interface as TapeCtx so nets are written once.
class FastCtx {
 public:
  using V = Tensor;

  explicit FastCtx(const std::map<std::string, Tensor>& snapshot) : snap_(&snapshot) {}
  explicit FastCtx(const ParamStore& store) : store_(&store) {}

  const Tensor& lookup(const std::string& name) const {
    if (store_) return store_->get(name);
    auto it = snap_->find(name);
    if (it == snap_->end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  V input(Tensor t) { return t; }
  V constant(Tensor t) { return t; }
  V param(const std::string& name) { return lookup(name); }

  V linear(V x, const std::string& prefix) {
    return fastops::linear(x, lookup(prefix + "/W"), lookup(prefix + "/b"));
  }
  V layer_norm(V x, const std::string& prefix, double var_floor) {
    return fastops::layer_norm(x, lookup(prefix + "/g"), lookup(prefix + "/o"), var_floor);
  }

  V add(V a, V b) { return fastops::add(a, b); }
  V sub(V a, V b) { return fastops::sub(a, b); }
  V mul(V a, V b) { return fastops::mul(a, b); }
  V div(V a, V b) { return fastops::div(a, b); }
  V matmul(V a, V b) { return fastops::matmul(a, b); }
  V neg(V x) { return fastops::scale(x, -1.0); }
  V scale(V x, double c) { return fastops::scale(x, c); }
  V add_const(V x, double c) { return fastops::add_const(x, c); }
  V exp_(V x) { return fastops::exp(x); }
  V log_(V x) { return fastops::log(x); }
  V tanh_(V x) { return fastops::tanh(x); }
  V elu(V x) { return fastops::elu(x); }
  V softplus(V x) { return fastops::softplus(x); }
  V square(V x) { return fastops::square(x); }
  V sum_all(V x) { return Tensor::scalar(fastops::sum_all(x)); }
  V mean_all(V x) { return Tensor::scalar(fastops::mean_all(x)); }
  V sum_rows(V x) { return fastops::sum_rows(x); }
  V sum_cols(V x) { return fastops::sum_cols(x); }
  V logsumexp_rows(V x) { return fastops::logsumexp_rows(x); }
  V softmax_rows(V x) { return fastops::softmax_rows(x); }
  V log_softmax_rows(V x) { return fastops::log_softmax_rows(x); }
  V concat_cols(V a, V b) { return fastops::concat_cols(a, b); }
  V concat_rows(const std::vector<V>& parts) { return fastops::concat_rows(parts); }
  V gather_rows(V x, std::vector<int> idx) { return fastops::gather_rows(x, idx); }
  V repeat_rows(V x, int k) { return fastops::repeat_rows(x, k); }
  V stop_gradient(V x) { return x; }

  const Tensor& value(const V& v) const { return v; }

 private:
  const std::map<std::string, Tensor>* snap_ = nullptr;
  const ParamStore* store_ = nullptr;
};

template <class Ctx>
typename Ctx::V torso_forward(Ctx& cx, typename Ctx::V x, const std::string& prefix,
                              const TorsoSpec& spec) {
  auto h = cx.linear(x, prefix + "/l0");
  h = cx.layer_norm(h, prefix + "/ln", spec.var_floor);
  if (spec.tanh_after_ln) h = cx.tanh_(h);
  for (size_t k = 1; k < spec.widths.size(); ++k) {
    h = cx.linear(h, prefix + "/l" + std::to_string(k));
    h = cx.elu(h);
  }
  return h;
}

// Two fully connected layers; the second produces the head outputs.
template <class Ctx>
typename Ctx::V head_forward(Ctx& cx, typename Ctx::V x, const std::string& prefix) {
  auto h = cx.elu(cx.linear(x, prefix + "/h0"));
  return cx.linear(h, prefix + "/h1");
}

enum class WeightInit { kFanInUniform, kZero };

void init_linear(ParamStore& store, const std::string& prefix, int in, int out,
                 Rng& rng, WeightInit kind = WeightInit::kFanInUniform,
                 const std::vector<double>* bias = nullptr);
void init_torso(ParamStore& store, const std::string& prefix, int in,
                const TorsoSpec& spec, Rng& rng);
// Output layer weights optionally zeroed so fresh heads emit exactly their
// bias (the init schemes pin component means this way).
void init_head(ParamStore& store, const std::string& prefix, int in, int hidden,
               int out, Rng& rng, WeightInit out_kind = WeightInit::kFanInUniform,
               const std::vector<double>* out_bias = nullptr);

}  // namespace rhpo
