#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "rhpo/errors.h"
#include "rhpo/tensor.h"

// Plain forward math on tensors. Used by the gradient-free execution
// context (actors, target networks, retrace sweeps); the tape records the
// same formulas with backward closures.
namespace rhpo::fastops {

inline bool broadcastable(int a, int b) { return a == b || a == 1 || b == 1; }

inline double pick(const Tensor& t, int i, int j) {
  return t.at(t.rows() == 1 ? 0 : i, t.cols() == 1 ? 0 : j);
}

template <class F>
Tensor broadcast_apply(const Tensor& a, const Tensor& b, F&& f) {
  if (!broadcastable(a.rows(), b.rows()) || !broadcastable(a.cols(), b.cols()))
    throw DimError("broadcast mismatch " + a.shape_str() + " vs " + b.shape_str());
  const int r = std::max(a.rows(), b.rows());
  const int c = std::max(a.cols(), b.cols());
  Tensor out(r, c, 0.0);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) = f(pick(a, i, j), pick(b, i, j));
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return broadcast_apply(a, b, [](double x, double y) { return x + y; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return broadcast_apply(a, b, [](double x, double y) { return x - y; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return broadcast_apply(a, b, [](double x, double y) { return x * y; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return broadcast_apply(a, b, [](double x, double y) { return x / y; });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw DimError("matmul " + a.shape_str() + " x " + b.shape_str());
  Tensor out(a.rows(), b.cols(), 0.0);
  out.map().noalias() = a.map() * b.map();
  return out;
}

// y = x W + b with W (in x out), b (1 x out).
inline Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b) {
  if (x.cols() != W.rows())
    throw DimError("linear " + x.shape_str() + " x " + W.shape_str());
  Tensor out(x.rows(), W.cols(), 0.0);
  out.map().noalias() = x.map() * W.map();
  for (int i = 0; i < out.rows(); ++i)
    for (int j = 0; j < out.cols(); ++j) out.at(i, j) += b.at(0, j);
  return out;
}

template <class F>
Tensor unary(const Tensor& x, F&& f) {
  Tensor out = Tensor::zeros_like(x);
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

inline Tensor scale(const Tensor& x, double c) {
  return unary(x, [c](double v) { return v * c; });
}
inline Tensor add_const(const Tensor& x, double c) {
  return unary(x, [c](double v) { return v + c; });
}
inline Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); });
}
inline Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); });
}
// std::tanh rounds to exactly +-1 past |x| ~ 19 and softplus underflows to 0
// past x ~ -745; both are nudged one representable value back inside so the
// open-interval invariants hold for any finite input.
inline double tanh1(double v) {
  const double y = std::tanh(v);
  constexpr double lim = 1.0 - 1.1102230246251565e-16;
  if (y >= 1.0) return lim;
  if (y <= -1.0) return -lim;
  return y;
}
inline double softplus1(double v) {
  const double y = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
  return y > 0.0 ? y : 1e-300;
}

inline Tensor tanh(const Tensor& x) {
  return unary(x, [](double v) { return tanh1(v); });
}
inline Tensor elu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : std::expm1(v); });
}
inline Tensor softplus(const Tensor& x) {
  return unary(x, [](double v) { return softplus1(v); });
}
inline Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; });
}

inline Tensor sum_rows(const Tensor& x) {
  Tensor out(x.rows(), 1, 0.0);
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < x.cols(); ++j) out.at(i, 0) += x.at(i, j);
  return out;
}

inline Tensor sum_cols(const Tensor& x) {
  Tensor out(1, x.cols(), 0.0);
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < x.cols(); ++j) out.at(0, j) += x.at(i, j);
  return out;
}

inline double sum_all(const Tensor& x) {
  double s = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) s += x[i];
  return s;
}

inline double mean_all(const Tensor& x) {
  if (x.empty()) throw DimError("mean of empty tensor");
  return sum_all(x) / static_cast<double>(x.size());
}

inline Tensor logsumexp_rows(const Tensor& x) {
  if (x.cols() < 1) throw DimError("logsumexp over empty rows");
  Tensor out(x.rows(), 1, 0.0);
  for (int i = 0; i < x.rows(); ++i) {
    double m = x.at(i, 0);
    for (int j = 1; j < x.cols(); ++j) m = std::max(m, x.at(i, j));
    if (m == -std::numeric_limits<double>::infinity()) {
      out.at(i, 0) = m;
      continue;
    }
    double s = 0.0;
    for (int j = 0; j < x.cols(); ++j) s += std::exp(x.at(i, j) - m);
    out.at(i, 0) = m + std::log(s);
  }
  return out;
}

inline Tensor softmax_rows(const Tensor& x) {
  Tensor out = Tensor::zeros_like(x);
  for (int i = 0; i < x.rows(); ++i) {
    double m = x.at(i, 0);
    for (int j = 1; j < x.cols(); ++j) m = std::max(m, x.at(i, j));
    double s = 0.0;
    for (int j = 0; j < x.cols(); ++j) {
      out.at(i, j) = std::exp(x.at(i, j) - m);
      s += out.at(i, j);
    }
    for (int j = 0; j < x.cols(); ++j) out.at(i, j) /= s;
  }
  return out;
}

inline Tensor log_softmax_rows(const Tensor& x) {
  Tensor lse = logsumexp_rows(x);
  Tensor out = Tensor::zeros_like(x);
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < x.cols(); ++j) out.at(i, j) = x.at(i, j) - lse.at(i, 0);
  return out;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset,
                         double var_floor) {
  if (gain.rows() != 1 || gain.cols() != x.cols() || offset.rows() != 1 ||
      offset.cols() != x.cols())
    throw DimError("layer_norm gain/offset must be 1x" + std::to_string(x.cols()));
  Tensor out = Tensor::zeros_like(x);
  const int C = x.cols();
  for (int i = 0; i < x.rows(); ++i) {
    double mu = 0.0;
    for (int j = 0; j < C; ++j) mu += x.at(i, j);
    mu /= C;
    double var = 0.0;
    for (int j = 0; j < C; ++j) {
      const double d = x.at(i, j) - mu;
      var += d * d;
    }
    var /= C;
    const double inv = 1.0 / std::sqrt(std::max(var, var_floor));
    for (int j = 0; j < C; ++j)
      out.at(i, j) = gain.at(0, j) * ((x.at(i, j) - mu) * inv) + offset.at(0, j);
  }
  return out;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows())
    throw DimError("concat_cols rows " + a.shape_str() + " vs " + b.shape_str());
  Tensor out(a.rows(), a.cols() + b.cols(), 0.0);
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < a.cols(); ++j) out.at(i, j) = a.at(i, j);
    for (int j = 0; j < b.cols(); ++j) out.at(i, a.cols() + j) = b.at(i, j);
  }
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  const int C = parts[0].cols();
  int R = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != C) throw DimError("concat_rows column mismatch");
    R += p.rows();
  }
  Tensor out(R, C, 0.0);
  int r0 = 0;
  for (const Tensor& p : parts) {
    for (int i = 0; i < p.rows(); ++i)
      for (int j = 0; j < C; ++j) out.at(r0 + i, j) = p.at(i, j);
    r0 += p.rows();
  }
  return out;
}

inline Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
  Tensor out(static_cast<int>(idx.size()), x.cols(), 0.0);
  for (size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= x.rows())
      throw ContractError("gather_rows index out of range");
    for (int j = 0; j < x.cols(); ++j)
      out.at(static_cast<int>(r), j) = x.at(idx[r], j);
  }
  return out;
}

inline Tensor repeat_rows(const Tensor& x, int k) {
  if (k < 1) throw ContractError("repeat_rows k < 1");
  Tensor out(x.rows() * k, x.cols(), 0.0);
  for (int i = 0; i < x.rows(); ++i)
    for (int t = 0; t < k; ++t)
      for (int j = 0; j < x.cols(); ++j) out.at(i * k + t, j) = x.at(i, j);
  return out;
}

}  // namespace rhpo::fastops
