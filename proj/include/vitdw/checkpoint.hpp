#pragma once

#include <string>

#include "vitdw/model.hpp"

namespace vitdw {

// Versioned little-endian binary checkpoint:
//   magic "VDWC" | u32 version | u64 config_len | config JSON (UTF-8)
//   u64 tensor_count | per tensor: u64 name_len | name | u32 rank |
//   u64 dims[rank] | f32 data[numel]
// Tensors appear in registry order and include BatchNorm running buffers, so
// a round trip restores forward() bit-exactly.
void save_checkpoint(const Model<float>& model, const std::string& path);

// Rebuilds the model from the embedded config and loads every tensor.
// Truncated or malformed files raise a format/io error without producing a
// partial model. When `expected` is given, any differing config field raises
// an error naming that field.
Model<float> load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr);

}  // namespace vitdw
