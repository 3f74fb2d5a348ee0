#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vitdw/tensor.hpp"

namespace vitdw {

constexpr double kGradCheckTolerance = 1e-3;

struct GradCheckResult {
  std::string name;
  double max_error = 0.0;
  bool pass = false;
};

// Compares tape gradients of a scalar loss against central finite differences
// (64-bit, step h) for every element of every parameter. loss_fn must rebuild
// the loss from the current parameter values on each call. Error per element
// is relative, |a - fd| / max(|a|, |fd|), falling back to the absolute
// difference when both magnitudes are below 1e-6.
double max_fd_error(const std::function<Tensor<double>()>& loss_fn,
                    std::vector<Tensor<double>> params, double h = 1e-4);

// Finite-difference checks for every primitive op (and the composite blocks
// built from them) on random inputs in [-2, 2]. include_negative_control adds
// a fixture op with a deliberately corrupted backward rule, which must FAIL.
std::vector<GradCheckResult> gradcheck_ops(uint64_t seed = 7,
                                           bool include_negative_control = false);

// End-to-end check of a dim-8 / depth-2 / 4-patch-token model (class token and
// DW bypass enabled), differentiating the cross-entropy loss through the full
// forward in training mode.
GradCheckResult gradcheck_model(uint64_t seed = 7);

std::string format_gradcheck_report(const std::vector<GradCheckResult>& results);

inline bool gradcheck_all_pass(const std::vector<GradCheckResult>& results) {
  for (const auto& r : results)
    if (!r.pass) return false;
  return true;
}

}  // namespace vitdw
