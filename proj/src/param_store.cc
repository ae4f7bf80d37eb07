#include "rhpo/param_store.h"

#include <cmath>

#include "rhpo/errors.h"

namespace rhpo {

Tensor& ParamStore::create(const std::string& name, Tensor init) {
  if (params_.count(name)) throw ContractError("parameter '" + name + "' already exists");
  if (!init.all_finite()) throw NumericalError("non-finite init for '" + name + "'");
  Slot s;
  s.m = Tensor::zeros_like(init);
  s.v = Tensor::zeros_like(init);
  s.value = std::move(init);
  auto [it, ok] = params_.emplace(name, std::move(s));
  (void)ok;
  return it->second.value;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second.value;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second.value;
}

void ParamStore::replace(const std::string& name, Tensor value) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  if (!value.all_finite()) throw NumericalError("non-finite value for '" + name + "'");
  it->second.m = Tensor::zeros_like(value);
  it->second.v = Tensor::zeros_like(value);
  it->second.value = std::move(value);
}

void ParamStore::set_trainable(const std::string& name, bool flag) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  it->second.trainable = flag;
}

bool ParamStore::trainable(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second.trainable;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [k, _] : params_) out.push_back(k);
  return out;
}

std::vector<std::string> ParamStore::names_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [k, _] : params_)
    if (k.rfind(prefix, 0) == 0) out.push_back(k);
  return out;
}

void ParamStore::adam_step(const GradMap& grads, double lr) {
  for (const auto& [name, g] : grads) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("gradient for unknown parameter '" + name + "'");
    if (!it->second.value.same_shape(g))
      throw DimError("gradient shape " + g.shape_str() + " for '" + name + "' " +
                     it->second.value.shape_str());
    if (it->second.trainable && !g.all_finite())
      throw NumericalError("non-finite gradient for '" + name + "', step rejected");
  }

  ++step_;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
  for (auto& [name, slot] : params_) {
    if (!slot.trainable) continue;
    auto git = grads.find(name);
    for (std::int64_t i = 0; i < slot.value.size(); ++i) {
      const double g = git == grads.end() ? 0.0 : git->second[i];
      slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
      slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      slot.value[i] -= lr * mhat / (std::sqrt(vhat) + adam_eps);
    }
  }
}

std::map<std::string, Tensor> ParamStore::snapshot() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, slot] : params_) out.emplace(name, slot.value);
  return out;
}

void ParamStore::load_values(const std::map<std::string, Tensor>& values) {
  for (const auto& [name, t] : values) {
    Tensor& dst = get(name);
    if (!dst.same_shape(t))
      throw DimError("load shape " + t.shape_str() + " for '" + name + "' " + dst.shape_str());
    dst = t;
  }
}

}  // namespace rhpo
