#include "rhpo/netctx.h"

#include <cmath>

namespace rhpo {

void init_linear(ParamStore& store, const std::string& prefix, int in, int out,
                 Rng& rng, WeightInit kind, const std::vector<double>* bias) {
  if (in < 1 || out < 1) throw ContractError("linear dims must be positive");
  Tensor W(in, out, 0.0);
  if (kind == WeightInit::kFanInUniform) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (std::int64_t i = 0; i < W.size(); ++i) W[i] = rng.uniform(-bound, bound);
  }
  Tensor b(1, out, 0.0);
  if (bias) {
    if (static_cast<int>(bias->size()) != out)
      throw DimError("bias length " + std::to_string(bias->size()) + " for out " +
                     std::to_string(out));
    for (int j = 0; j < out; ++j) b.at(0, j) = (*bias)[j];
  }
  store.create(prefix + "/W", std::move(W));
  store.create(prefix + "/b", std::move(b));
}

void init_torso(ParamStore& store, const std::string& prefix, int in,
                const TorsoSpec& spec, Rng& rng) {
  if (spec.widths.empty()) throw ContractError("torso needs at least one layer");
  init_linear(store, prefix + "/l0", in, spec.widths[0], rng);
  store.create(prefix + "/ln/g", Tensor::full(1, spec.widths[0], 1.0));
  store.create(prefix + "/ln/o", Tensor::zeros(1, spec.widths[0]));
  for (size_t k = 1; k < spec.widths.size(); ++k)
    init_linear(store, prefix + "/l" + std::to_string(k),
                spec.widths[k - 1], spec.widths[k], rng);
}

void init_head(ParamStore& store, const std::string& prefix, int in, int hidden,
               int out, Rng& rng, WeightInit out_kind,
               const std::vector<double>* out_bias) {
  init_linear(store, prefix + "/h0", in, hidden, rng);
  init_linear(store, prefix + "/h1", hidden, out, rng, out_kind, out_bias);
}

}  // namespace rhpo
