#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rhpo/tensor.h"

namespace rhpo {

class Tape;

// Handle to a node on a gradient tape. Cheap to copy; valid for the
// lifetime of the tape that produced it.
struct Var {
  int id = -1;
  Tape* tape = nullptr;

  const Tensor& value() const;
  int rows() const { return value().rows(); }
  int cols() const { return value().cols(); }
};

using GradMap = std::map<std::string, Tensor>;

// Reverse-mode tape over dense tensors. Single-writer: one thread records
// and differentiates; parameter snapshots are plain value copies.
class Tape {
 public:
  Var constant(Tensor value);
  // Named leaf. Repeated requests for the same name return the same node so
  // gradients accumulate into one slot.
  Var leaf(const std::string& name, Tensor value);

  const Tensor& value(int id) const { return nodes_[id].value; }
  size_t size() const { return nodes_.size(); }

  // Gradients of a scalar node w.r.t. every named leaf. Leaves not reached
  // by the backward sweep get zero gradients.
  GradMap backward(Var loss);

  // -- recorded primitives ------------------------------------------------
  // Binary ops broadcast over matching shapes, a 1x1 scalar, a 1xC row or
  // an Rx1 column.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var matmul(Var a, Var b);

  Var neg(Var x);
  Var scale(Var x, double c);
  Var add_const(Var x, double c);
  Var exp_(Var x);
  Var log_(Var x);
  Var tanh_(Var x);
  Var elu(Var x);
  Var softplus(Var x);
  Var square(Var x);

  Var sum_all(Var x);    // -> 1x1
  Var mean_all(Var x);   // -> 1x1
  Var sum_rows(Var x);   // row-wise reduce over columns -> Rx1
  Var sum_cols(Var x);   // column-wise reduce over rows -> 1xC
  Var logsumexp_rows(Var x);  // -> Rx1, max-shifted
  Var softmax_rows(Var x);
  Var log_softmax_rows(Var x);

  Var layer_norm(Var x, Var gain, Var offset, double var_floor);

  Var concat_cols(Var a, Var b);
  Var concat_rows(const std::vector<Var>& parts);
  Var gather_rows(Var x, std::vector<int> idx);
  Var repeat_rows(Var x, int k);  // each row repeated k times, consecutive

  Var stop_gradient(Var x);

 private:
  struct Node {
    Tensor value;
    // Backward: given this node's output gradient, scatter into parents.
    std::function<void(const Tensor& g, std::vector<Tensor>& grads)> back;
    int leaf_index = -1;  // >= 0 for named leaves
  };

  Var push(Tensor value,
           std::function<void(const Tensor&, std::vector<Tensor>&)> back);
  static void accum(std::vector<Tensor>& grads, int id, const Tensor& g,
                    const Tensor& like);
  // Reduce a full-shape gradient back onto a (possibly broadcast) operand.
  static Tensor reduce_to(const Tensor& g, int rows, int cols);

  std::vector<Node> nodes_;
  std::vector<std::string> leaf_names_;
  std::map<std::string, int> leaf_ids_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

}  // namespace rhpo
