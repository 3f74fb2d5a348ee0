#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vitdw/model.hpp"

namespace vitdw {

// Exact parameter and multiply-accumulate counts for a configuration, split
// into backbone and DW-bypass contributions. Counting conventions:
//   - params: every learnable tensor element; BatchNorm running statistics are
//     buffers and never counted. paper_convention additionally drops the DW
//     BatchNorm affine pairs.
//   - flops: one MAC = one FLOP. Linear layers and attention products only;
//     softmax, normalization, GELU and biases are excluded.
struct ComplexityReport {
  int64_t backbone_params = 0;
  int64_t dw_params = 0;
  int64_t total_params = 0;
  int64_t backbone_flops = 0;
  int64_t dw_flops = 0;
  int64_t total_flops = 0;
  bool paper_convention = false;
  std::vector<std::pair<std::string, int64_t>> param_terms;
  std::vector<std::pair<std::string, int64_t>> flop_terms;

  std::string to_text() const;
  std::string to_csv() const;
};

// Parameter-count side of the report.
ComplexityReport count_params(const ModelConfig& config, bool paper_convention = false);

// MAC-count side of the report.
ComplexityReport count_flops(const ModelConfig& config);

// Both sides combined.
ComplexityReport analyze_complexity(const ModelConfig& config, bool paper_convention = false);

}  // namespace vitdw
