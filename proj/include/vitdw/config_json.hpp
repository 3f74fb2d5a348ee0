#pragma once

#include <string>

#include "vitdw/model.hpp"

namespace vitdw {

// JSON round trip for ModelConfig. Unknown keys are rejected so config typos
// fail loudly. See README for the documented file layout.
std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

// First field whose value differs between the two configs, or empty when they
// are identical. Used for named-field checkpoint mismatch errors.
std::string first_config_difference(const ModelConfig& a, const ModelConfig& b);

}  // namespace vitdw
