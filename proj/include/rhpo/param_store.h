#pragma once

#include <map>
#include <string>
#include <vector>

#include "rhpo/tape.h"
#include "rhpo/tensor.h"

namespace rhpo {

// Named parameter tensors plus per-parameter Adam moments. Single-writer;
// snapshot() hands out value-only copies for concurrent readers.
class ParamStore {
 public:
  Tensor& create(const std::string& name, Tensor init);
  bool has(const std::string& name) const { return params_.count(name) > 0; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;

  // Swap in a new value, possibly with a different shape (head extension
  // during transfer); optimizer moments reset to zero.
  void replace(const std::string& name, Tensor value);

  // Non-trainable parameters keep their values through adam_step (used for
  // frozen components during transfer).
  void set_trainable(const std::string& name, bool flag);
  bool trainable(const std::string& name) const;

  std::vector<std::string> names() const;
  std::vector<std::string> names_with_prefix(const std::string& prefix) const;
  size_t size() const { return params_.size(); }

  // Standard Adam with bias correction. Grad keys must be a subset of the
  // parameter names; missing keys are treated as zero gradient (moments
  // still decay). A non-finite gradient on any trainable parameter rejects
  // the whole step and leaves parameters and moments untouched.
  void adam_step(const GradMap& grads, double lr);

  std::int64_t step_count() const { return step_; }

  // Value-only copy of every parameter (moments and step not included).
  std::map<std::string, Tensor> snapshot() const;
  // Overwrite values from a snapshot; shapes must match, unknown names throw.
  void load_values(const std::map<std::string, Tensor>& values);

  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

 private:
  struct Slot {
    Tensor value;
    Tensor m;  // first moment
    Tensor v;  // second moment
    bool trainable = true;
  };
  std::map<std::string, Slot> params_;
  std::int64_t step_ = 0;
};

}  // namespace rhpo
