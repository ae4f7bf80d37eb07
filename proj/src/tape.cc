#include "rhpo/tape.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rhpo/fastops.h"

namespace rhpo {
namespace {

bool broadcastable(int a, int b) { return a == b || a == 1 || b == 1; }

int out_dim(int a, int b) { return std::max(a, b); }

double pick(const Tensor& t, int i, int j) {
  return t.at(t.rows() == 1 ? 0 : i, t.cols() == 1 ? 0 : j);
}

template <class F>
Tensor broadcast_apply(const Tensor& a, const Tensor& b, F&& f) {
  if (!broadcastable(a.rows(), b.rows()) || !broadcastable(a.cols(), b.cols()))
    throw DimError("broadcast mismatch " + a.shape_str() + " vs " + b.shape_str());
  const int r = out_dim(a.rows(), b.rows());
  const int c = out_dim(a.cols(), b.cols());
  Tensor out(r, c, 0.0);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) = f(pick(a, i, j), pick(b, i, j));
  return out;
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

Var Tape::push(Tensor value,
               std::function<void(const Tensor&, std::vector<Tensor>&)> back) {
  Node n;
  n.value = std::move(value);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1, this};
}

Var Tape::constant(Tensor value) { return push(std::move(value), nullptr); }

Var Tape::leaf(const std::string& name, Tensor value) {
  auto it = leaf_ids_.find(name);
  if (it != leaf_ids_.end()) {
    if (!nodes_[it->second].value.same_shape(value))
      throw DimError("leaf '" + name + "' re-registered with shape " +
                     value.shape_str() + ", had " +
                     nodes_[it->second].value.shape_str());
    return Var{it->second, this};
  }
  Var v = push(std::move(value), nullptr);
  nodes_[v.id].leaf_index = static_cast<int>(leaf_names_.size());
  leaf_names_.push_back(name);
  leaf_ids_[name] = v.id;
  return v;
}

void Tape::accum(std::vector<Tensor>& grads, int id, const Tensor& g,
                 const Tensor& like) {
  if (grads[id].empty() && like.size() > 0) grads[id] = Tensor::zeros_like(like);
  if (!grads[id].same_shape(g))
    throw DimError("gradient shape " + g.shape_str() + " into slot " +
                   grads[id].shape_str());
  for (std::int64_t i = 0; i < g.size(); ++i) grads[id][i] += g[i];
}

Tensor Tape::reduce_to(const Tensor& g, int rows, int cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  Tensor out(rows, cols, 0.0);
  if (!broadcastable(rows, g.rows()) || !broadcastable(cols, g.cols()) ||
      rows > g.rows() || cols > g.cols())
    throw DimError("cannot reduce grad " + g.shape_str());
  for (int i = 0; i < g.rows(); ++i)
    for (int j = 0; j < g.cols(); ++j)
      out.at(rows == 1 ? 0 : i, cols == 1 ? 0 : j) += g.at(i, j);
  return out;
}

GradMap Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("loss var from another tape");
  const Tensor& lv = nodes_[loss.id].value;
  if (lv.size() != 1) throw DimError("backward needs a scalar loss, got " + lv.shape_str());

  std::vector<Tensor> grads(nodes_.size());
  grads[loss.id] = Tensor::full(1, 1, 1.0);
  for (int id = loss.id; id >= 0; --id) {
    if (grads[id].empty()) continue;
    if (!grads[id].all_finite())
      throw NumericalError("non-finite gradient at node " + std::to_string(id));
    if (nodes_[id].back) nodes_[id].back(grads[id], grads);
  }

  GradMap out;
  for (const auto& [name, id] : leaf_ids_) {
    out[name] = grads[id].empty() ? Tensor::zeros_like(nodes_[id].value)
                                  : std::move(grads[id]);
  }
  return out;
}

Var Tape::add(Var a, Var b) {
  Tensor v = broadcast_apply(a.value(), b.value(), [](double x, double y) { return x + y; });
  const int ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    accum(grads, a.id, reduce_to(g, ar, ac), nodes_[a.id].value);
    accum(grads, b.id, reduce_to(g, br, bc), nodes_[b.id].value);
  });
}

Var Tape::sub(Var a, Var b) {
  Tensor v = broadcast_apply(a.value(), b.value(), [](double x, double y) { return x - y; });
  const int ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    accum(grads, a.id, reduce_to(g, ar, ac), nodes_[a.id].value);
    Tensor gn = g;
    for (std::int64_t i = 0; i < gn.size(); ++i) gn[i] = -gn[i];
    accum(grads, b.id, reduce_to(gn, br, bc), nodes_[b.id].value);
  });
}

Var Tape::mul(Var a, Var b) {
  Tensor v = broadcast_apply(a.value(), b.value(), [](double x, double y) { return x * y; });
  const int ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& av = nodes_[a.id].value;
    const Tensor& bv = nodes_[b.id].value;
    Tensor ga(g.rows(), g.cols(), 0.0), gb(g.rows(), g.cols(), 0.0);
    for (int i = 0; i < g.rows(); ++i)
      for (int j = 0; j < g.cols(); ++j) {
        ga.at(i, j) = g.at(i, j) * pick(bv, i, j);
        gb.at(i, j) = g.at(i, j) * pick(av, i, j);
      }
    accum(grads, a.id, reduce_to(ga, ar, ac), av);
    accum(grads, b.id, reduce_to(gb, br, bc), bv);
  });
}

Var Tape::div(Var a, Var b) {
  Tensor v = broadcast_apply(a.value(), b.value(), [](double x, double y) { return x / y; });
  const int ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& av = nodes_[a.id].value;
    const Tensor& bv = nodes_[b.id].value;
    Tensor ga(g.rows(), g.cols(), 0.0), gb(g.rows(), g.cols(), 0.0);
    for (int i = 0; i < g.rows(); ++i)
      for (int j = 0; j < g.cols(); ++j) {
        const double bij = pick(bv, i, j);
        ga.at(i, j) = g.at(i, j) / bij;
        gb.at(i, j) = -g.at(i, j) * pick(av, i, j) / (bij * bij);
      }
    accum(grads, a.id, reduce_to(ga, ar, ac), av);
    accum(grads, b.id, reduce_to(gb, br, bc), bv);
  });
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows())
    throw DimError("matmul " + av.shape_str() + " x " + bv.shape_str());
  Tensor v(av.rows(), bv.cols(), 0.0);
  v.map().noalias() = av.map() * bv.map();
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& A = nodes_[a.id].value;
    const Tensor& B = nodes_[b.id].value;
    Tensor ga(A.rows(), A.cols(), 0.0);
    Tensor gb(B.rows(), B.cols(), 0.0);
    ga.map().noalias() = g.map() * B.map().transpose();
    gb.map().noalias() = A.map().transpose() * g.map();
    accum(grads, a.id, ga, A);
    accum(grads, b.id, gb, B);
  });
}

Var Tape::neg(Var x) { return scale(x, -1.0); }

Var Tape::scale(Var x, double c) {
  Tensor v = x.value();
  for (std::int64_t i = 0; i < v.size(); ++i) v[i] *= c;
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    Tensor gx = g;
    for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] *= c;
    accum(grads, x.id, gx, nodes_[x.id].value);
  });
}

Var Tape::add_const(Var x, double c) {
  Tensor v = x.value();
  for (std::int64_t i = 0; i < v.size(); ++i) v[i] += c;
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    accum(grads, x.id, g, nodes_[x.id].value);
  });
}

Var Tape::exp_(Var x) {
  Tensor v = x.value();
  for (std::int64_t i = 0; i < v.size(); ++i) v[i] = std::exp(v[i]);
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& y = nodes_[id].value;
    Tensor gx = g;
    for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] *= y[i];
    accum(grads, x.id, gx, nodes_[x.id].value);
  });
}

Var Tape::log_(Var x) {
  Tensor v = x.value();
  for (std::int64_t i = 0; i < v.size(); ++i) v[i] = std::log(v[i]);
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& xv = nodes_[x.id].value;
    Tensor gx = g;
    for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] /= xv[i];
    accum(grads, x.id, gx, xv);
  });
}

Var Tape::tanh_(Var x) {
  Tensor v = x.value();
  for (std::int64_t i = 0; i < v.size(); ++i) v[i] = fastops::tanh1(v[i]);
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& y = nodes_[id].value;
    Tensor gx = g;
    for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] *= 1.0 - y[i] * y[i];
    accum(grads, x.id, gx, nodes_[x.id].value);
  });
}

Var Tape::elu(Var x) {
  Tensor v = x.value();
  for (std::int64_t i = 0; i < v.size(); ++i)
    v[i] = v[i] > 0.0 ? v[i] : std::expm1(v[i]);
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& xv = nodes_[x.id].value;
    Tensor gx = g;
    for (std::int64_t i = 0; i < gx.size(); ++i)
      gx[i] *= xv[i] > 0.0 ? 1.0 : std::exp(xv[i]);
    accum(grads, x.id, gx, xv);
  });
}

Var Tape::softplus(Var x) {
  Tensor v = x.value();
  for (std::int64_t i = 0; i < v.size(); ++i) v[i] = fastops::softplus1(v[i]);
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& xv = nodes_[x.id].value;
    Tensor gx = g;
    for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] *= sigmoid(xv[i]);
    accum(grads, x.id, gx, xv);
  });
}

Var Tape::square(Var x) {
  Tensor v = x.value();
  for (std::int64_t i = 0; i < v.size(); ++i) v[i] *= v[i];
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& xv = nodes_[x.id].value;
    Tensor gx = g;
    for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] *= 2.0 * xv[i];
    accum(grads, x.id, gx, xv);
  });
}

Var Tape::sum_all(Var x) {
  double s = 0.0;
  const Tensor& xv = x.value();
  for (std::int64_t i = 0; i < xv.size(); ++i) s += xv[i];
  return push(Tensor::full(1, 1, s), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& v = nodes_[x.id].value;
    accum(grads, x.id, Tensor::full(v.rows(), v.cols(), g[0]).set_rank(v.rank()), v);
  });
}

Var Tape::mean_all(Var x) {
  const Tensor& xv = x.value();
  if (xv.empty()) throw DimError("mean of empty tensor");
  double s = 0.0;
  for (std::int64_t i = 0; i < xv.size(); ++i) s += xv[i];
  const double inv = 1.0 / static_cast<double>(xv.size());
  return push(Tensor::full(1, 1, s * inv),
              [=, this](const Tensor& g, std::vector<Tensor>& grads) {
                const Tensor& v = nodes_[x.id].value;
                accum(grads, x.id,
                      Tensor::full(v.rows(), v.cols(), g[0] * inv).set_rank(v.rank()), v);
              });
}

Var Tape::sum_rows(Var x) {
  const Tensor& xv = x.value();
  Tensor v(xv.rows(), 1, 0.0);
  for (int i = 0; i < xv.rows(); ++i)
    for (int j = 0; j < xv.cols(); ++j) v.at(i, 0) += xv.at(i, j);
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& val = nodes_[x.id].value;
    Tensor gx(val.rows(), val.cols(), 0.0);
    for (int i = 0; i < val.rows(); ++i)
      for (int j = 0; j < val.cols(); ++j) gx.at(i, j) = g.at(i, 0);
    accum(grads, x.id, gx, val);
  });
}

Var Tape::sum_cols(Var x) {
  const Tensor& xv = x.value();
  Tensor v(1, xv.cols(), 0.0);
  for (int i = 0; i < xv.rows(); ++i)
    for (int j = 0; j < xv.cols(); ++j) v.at(0, j) += xv.at(i, j);
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& val = nodes_[x.id].value;
    Tensor gx(val.rows(), val.cols(), 0.0);
    for (int i = 0; i < val.rows(); ++i)
      for (int j = 0; j < val.cols(); ++j) gx.at(i, j) = g.at(0, j);
    accum(grads, x.id, gx, val);
  });
}

Var Tape::logsumexp_rows(Var x) {
  const Tensor& xv = x.value();
  if (xv.cols() < 1) throw DimError("logsumexp over empty rows");
  Tensor v(xv.rows(), 1, 0.0);
  for (int i = 0; i < xv.rows(); ++i) {
    double m = xv.at(i, 0);
    for (int j = 1; j < xv.cols(); ++j) m = std::max(m, xv.at(i, j));
    if (m == -std::numeric_limits<double>::infinity()) {
      v.at(i, 0) = m;  // empty mixture slice
      continue;
    }
    double s = 0.0;
    for (int j = 0; j < xv.cols(); ++j) s += std::exp(xv.at(i, j) - m);
    v.at(i, 0) = m + std::log(s);
  }
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& val = nodes_[x.id].value;
    const Tensor& lse = nodes_[id].value;
    Tensor gx(val.rows(), val.cols(), 0.0);
    for (int i = 0; i < val.rows(); ++i) {
      if (lse.at(i, 0) == -std::numeric_limits<double>::infinity()) continue;
      for (int j = 0; j < val.cols(); ++j)
        gx.at(i, j) = g.at(i, 0) * std::exp(val.at(i, j) - lse.at(i, 0));
    }
    accum(grads, x.id, gx, val);
  });
}

Var Tape::softmax_rows(Var x) {
  const Tensor& xv = x.value();
  Tensor v = Tensor::zeros_like(xv);
  for (int i = 0; i < xv.rows(); ++i) {
    double m = xv.at(i, 0);
    for (int j = 1; j < xv.cols(); ++j) m = std::max(m, xv.at(i, j));
    double s = 0.0;
    for (int j = 0; j < xv.cols(); ++j) {
      v.at(i, j) = std::exp(xv.at(i, j) - m);
      s += v.at(i, j);
    }
    for (int j = 0; j < xv.cols(); ++j) v.at(i, j) /= s;
  }
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& y = nodes_[id].value;
    Tensor gx = Tensor::zeros_like(y);
    for (int i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (int j = 0; j < y.cols(); ++j) dot += g.at(i, j) * y.at(i, j);
      for (int j = 0; j < y.cols(); ++j)
        gx.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
    }
    accum(grads, x.id, gx, nodes_[x.id].value);
  });
}

Var Tape::log_softmax_rows(Var x) {
  const Tensor& xv = x.value();
  Tensor v = Tensor::zeros_like(xv);
  for (int i = 0; i < xv.rows(); ++i) {
    double m = xv.at(i, 0);
    for (int j = 1; j < xv.cols(); ++j) m = std::max(m, xv.at(i, j));
    double s = 0.0;
    for (int j = 0; j < xv.cols(); ++j) s += std::exp(xv.at(i, j) - m);
    const double lse = m + std::log(s);
    for (int j = 0; j < xv.cols(); ++j) v.at(i, j) = xv.at(i, j) - lse;
  }
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& y = nodes_[id].value;
    Tensor gx = Tensor::zeros_like(y);
    for (int i = 0; i < y.rows(); ++i) {
      double gsum = 0.0;
      for (int j = 0; j < y.cols(); ++j) gsum += g.at(i, j);
      for (int j = 0; j < y.cols(); ++j)
        gx.at(i, j) = g.at(i, j) - std::exp(y.at(i, j)) * gsum;
    }
    accum(grads, x.id, gx, nodes_[x.id].value);
  });
}

Var Tape::layer_norm(Var x, Var gain, Var offset, double var_floor) {
  const Tensor& xv = x.value();
  const Tensor& gv = gain.value();
  const Tensor& ov = offset.value();
  if (gv.rows() != 1 || gv.cols() != xv.cols() || ov.rows() != 1 ||
      ov.cols() != xv.cols())
    throw DimError("layer_norm gain/offset must be 1x" + std::to_string(xv.cols()));
  const int R = xv.rows(), C = xv.cols();
  Tensor v(R, C, 0.0);
  Tensor xhat(R, C, 0.0);
  std::vector<double> inv_std(R);
  std::vector<char> floored(R);
  for (int i = 0; i < R; ++i) {
    double mu = 0.0;
    for (int j = 0; j < C; ++j) mu += xv.at(i, j);
    mu /= C;
    double var = 0.0;
    for (int j = 0; j < C; ++j) {
      const double d = xv.at(i, j) - mu;
      var += d * d;
    }
    var /= C;
    floored[i] = var < var_floor;
    const double s = std::sqrt(std::max(var, var_floor));
    inv_std[i] = 1.0 / s;
    for (int j = 0; j < C; ++j) {
      xhat.at(i, j) = (xv.at(i, j) - mu) * inv_std[i];
      v.at(i, j) = gv.at(0, j) * xhat.at(i, j) + ov.at(0, j);
    }
  }
  return push(std::move(v),
              [=, this, xhat = std::move(xhat), inv_std = std::move(inv_std),
               floored = std::move(floored)](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& xval = nodes_[x.id].value;
    const Tensor& gval = nodes_[gain.id].value;
    Tensor gx(R, C, 0.0), gg(1, C, 0.0), go(1, C, 0.0);
    for (int i = 0; i < R; ++i) {
      double mean_dxh = 0.0, mean_dxh_xh = 0.0;
      for (int j = 0; j < C; ++j) {
        const double dxh = g.at(i, j) * gval.at(0, j);
        mean_dxh += dxh;
        mean_dxh_xh += dxh * xhat.at(i, j);
        gg.at(0, j) += g.at(i, j) * xhat.at(i, j);
        go.at(0, j) += g.at(i, j);
      }
      mean_dxh /= C;
      mean_dxh_xh /= C;
      for (int j = 0; j < C; ++j) {
        const double dxh = g.at(i, j) * gval.at(0, j);
        double t = dxh - mean_dxh;
        if (!floored[i]) t -= xhat.at(i, j) * mean_dxh_xh;
        gx.at(i, j) = inv_std[i] * t;
      }
    }
    accum(grads, x.id, gx, xval);
    accum(grads, gain.id, gg, gval);
    accum(grads, offset.id, go, nodes_[offset.id].value);
  });
}

Var Tape::concat_cols(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rows() != bv.rows())
    throw DimError("concat_cols rows " + av.shape_str() + " vs " + bv.shape_str());
  Tensor v(av.rows(), av.cols() + bv.cols(), 0.0);
  for (int i = 0; i < av.rows(); ++i) {
    for (int j = 0; j < av.cols(); ++j) v.at(i, j) = av.at(i, j);
    for (int j = 0; j < bv.cols(); ++j) v.at(i, av.cols() + j) = bv.at(i, j);
  }
  const int ac = av.cols(), bc = bv.cols();
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    Tensor ga(g.rows(), ac, 0.0), gb(g.rows(), bc, 0.0);
    for (int i = 0; i < g.rows(); ++i) {
      for (int j = 0; j < ac; ++j) ga.at(i, j) = g.at(i, j);
      for (int j = 0; j < bc; ++j) gb.at(i, j) = g.at(i, ac + j);
    }
    accum(grads, a.id, ga, nodes_[a.id].value);
    accum(grads, b.id, gb, nodes_[b.id].value);
  });
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  const int C = parts[0].cols();
  int R = 0;
  for (const Var& p : parts) {
    if (p.cols() != C) throw DimError("concat_rows column mismatch");
    R += p.rows();
  }
  Tensor v(R, C, 0.0);
  std::vector<int> offsets;
  int r0 = 0;
  for (const Var& p : parts) {
    offsets.push_back(r0);
    const Tensor& pv = p.value();
    for (int i = 0; i < pv.rows(); ++i)
      for (int j = 0; j < C; ++j) v.at(r0 + i, j) = pv.at(i, j);
    r0 += pv.rows();
  }
  return push(std::move(v), [=, this, offsets = std::move(offsets)](
                                const Tensor& g, std::vector<Tensor>& grads) {
    for (size_t k = 0; k < parts.size(); ++k) {
      const Tensor& pv = nodes_[parts[k].id].value;
      Tensor gp(pv.rows(), pv.cols(), 0.0);
      for (int i = 0; i < pv.rows(); ++i)
        for (int j = 0; j < C; ++j) gp.at(i, j) = g.at(offsets[k] + i, j);
      accum(grads, parts[k].id, gp, pv);
    }
  });
}

Var Tape::gather_rows(Var x, std::vector<int> idx) {
  const Tensor& xv = x.value();
  Tensor v(static_cast<int>(idx.size()), xv.cols(), 0.0);
  for (size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= xv.rows())
      throw ContractError("gather_rows index " + std::to_string(idx[r]) +
                          " out of " + std::to_string(xv.rows()));
    for (int j = 0; j < xv.cols(); ++j)
      v.at(static_cast<int>(r), j) = xv.at(idx[r], j);
  }
  return push(std::move(v), [=, this, idx = std::move(idx)](
                                const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& val = nodes_[x.id].value;
    Tensor gx = Tensor::zeros_like(val);
    for (size_t r = 0; r < idx.size(); ++r)
      for (int j = 0; j < val.cols(); ++j)
        gx.at(idx[r], j) += g.at(static_cast<int>(r), j);
    accum(grads, x.id, gx, val);
  });
}

Var Tape::repeat_rows(Var x, int k) {
  if (k < 1) throw ContractError("repeat_rows k < 1");
  const Tensor& xv = x.value();
  Tensor v(xv.rows() * k, xv.cols(), 0.0);
  for (int i = 0; i < xv.rows(); ++i)
    for (int t = 0; t < k; ++t)
      for (int j = 0; j < xv.cols(); ++j) v.at(i * k + t, j) = xv.at(i, j);
  return push(std::move(v), [=, this](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& val = nodes_[x.id].value;
    Tensor gx = Tensor::zeros_like(val);
    for (int i = 0; i < val.rows(); ++i)
      for (int t = 0; t < k; ++t)
        for (int j = 0; j < val.cols(); ++j) gx.at(i, j) += g.at(i * k + t, j);
    accum(grads, x.id, gx, val);
  });
}

Var Tape::stop_gradient(Var x) { return push(x.value(), nullptr); }

}  // namespace rhpo
