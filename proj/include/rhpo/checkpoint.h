#pragma once

#include <map>
#include <string>

#include <json.hpp>

#include "rhpo/tensor.h"

namespace rhpo {

// On-disk format: 8-byte magic "RHPOCKPT", u32 version, u64 manifest length,
// JSON manifest (tensor name -> shape/dtype/offset plus free-form metadata),
// then raw little-endian tensor data. f64 payloads round-trip bit-exactly.
struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  nlohmann::json meta;
};

void save_checkpoint(const std::string& path,
                     const std::map<std::string, Tensor>& tensors,
                     const nlohmann::json& meta, const std::string& dtype = "f64");

Checkpoint load_checkpoint(const std::string& path);

}  // namespace rhpo
