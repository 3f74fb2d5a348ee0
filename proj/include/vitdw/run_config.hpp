#pragma once

#include <string>

#include "vitdw/data.hpp"
#include "vitdw/model.hpp"
#include "vitdw/train.hpp"

namespace vitdw {

// One experiment description: {"model": {...}, "train": {...}, "dataset": {...}}.
// See the README for a complete example. Unknown keys are rejected.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DatasetSpec dataset;
};

RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string run_config_to_json(const RunConfig& config);

}  // namespace vitdw
