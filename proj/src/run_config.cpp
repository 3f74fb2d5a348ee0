#include "vitdw/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "vitdw/config_json.hpp"

namespace vitdw {

using nlohmann::json;

namespace {

TrainConfig train_config_from_json(const json& j) {
  static const std::set<std::string> known = {
      "preset",      "base_lr", "weight_decay",    "beta1",         "beta2",
      "eps",         "epochs",  "warmup_epochs",   "min_lr",        "warmup_start_factor",
      "batch_size",  "seed",    "label_smoothing", "deterministic"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    check_config(known.count(key) > 0, "unknown train config key: " + key);
  }
  TrainConfig c;
  if (j.contains("preset")) {
    const std::string preset = j["preset"].get<std::string>();
    if (preset == "desk") {
      c = desk_train_config();
    } else if (preset == "reference") {
      c = TrainConfig{};  // 300 epochs, 20 warmup, batch 128
    } else {
      fail(ErrorKind::config, "unknown train preset: " + preset + " (expected desk or reference)");
    }
  }
  if (j.contains("base_lr")) c.base_lr = j["base_lr"].get<double>();
  if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
  if (j.contains("beta1")) c.beta1 = j["beta1"].get<double>();
  if (j.contains("beta2")) c.beta2 = j["beta2"].get<double>();
  if (j.contains("eps")) c.eps = j["eps"].get<double>();
  if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
  if (j.contains("warmup_epochs")) c.warmup_epochs = j["warmup_epochs"].get<int>();
  if (j.contains("min_lr")) c.min_lr = j["min_lr"].get<double>();
  if (j.contains("warmup_start_factor")) c.warmup_start_factor = j["warmup_start_factor"].get<double>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
  if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
  if (j.contains("label_smoothing")) c.label_smoothing = j["label_smoothing"].get<double>();
  if (j.contains("deterministic")) c.deterministic = j["deterministic"].get<bool>();
  c.validate();
  return c;
}

DatasetSpec dataset_spec_from_json(const json& j) {
  static const std::set<std::string> known = {
      "kind",        "root",         "subset_size", "val_subset_size", "augmentation",
      "seed",        "train_n",      "val_n",       "num_classes",     "image_size"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    check_config(known.count(key) > 0, "unknown dataset config key: " + key);
  }
  DatasetSpec s;
  if (j.contains("kind")) {
    const std::string kind = j["kind"].get<std::string>();
    if (kind == "cifar10_binary") {
      s.kind = DatasetKind::cifar10_binary;
    } else if (kind == "synthetic") {
      s.kind = DatasetKind::synthetic;
    } else {
      fail(ErrorKind::config, "dataset.kind must be cifar10_binary or synthetic, got " + kind);
    }
  }
  if (j.contains("root")) s.root = j["root"].get<std::string>();
  if (j.contains("subset_size")) s.subset_size = j["subset_size"].get<int64_t>();
  if (j.contains("val_subset_size")) s.val_subset_size = j["val_subset_size"].get<int64_t>();
  if (j.contains("augmentation")) {
    const std::string aug = j["augmentation"].get<std::string>();
    if (aug == "none") {
      s.augmentation = Augmentation::none;
    } else if (aug == "flip_crop") {
      s.augmentation = Augmentation::flip_crop;
    } else {
      fail(ErrorKind::config, "dataset.augmentation must be none or flip_crop, got " + aug);
    }
  }
  if (j.contains("seed")) s.seed = j["seed"].get<uint64_t>();
  if (j.contains("train_n")) s.synthetic_train_n = j["train_n"].get<int>();
  if (j.contains("val_n")) s.synthetic_val_n = j["val_n"].get<int>();
  if (j.contains("num_classes")) s.num_classes = j["num_classes"].get<int>();
  if (j.contains("image_size")) s.image_size = j["image_size"].get<int>();
  return s;
}

}  // namespace

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("run config JSON parse error: ") + e.what());
  }
  for (const auto& [key, value] : j.items()) {
    (void)value;
    check_config(key == "model" || key == "train" || key == "dataset",
                 "unknown run config section: " + key);
  }
  RunConfig c;
  try {
    c.model = j.contains("model") ? model_config_from_json(j["model"].dump()) : ModelConfig{};
    c.train = j.contains("train") ? train_config_from_json(j["train"]) : TrainConfig{};
    c.dataset = j.contains("dataset") ? dataset_spec_from_json(j["dataset"]) : DatasetSpec{};
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("run config JSON type error: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::io, "cannot open config file: " + path);
  std::ostringstream buffer;
  buffer << is.rdbuf();
  return run_config_from_json(buffer.str());
}

std::string run_config_to_json(const RunConfig& config) {
  json j;
  j["model"] = json::parse(model_config_to_json(config.model));
  j["train"] = {{"base_lr", config.train.base_lr},
                {"weight_decay", config.train.weight_decay},
                {"beta1", config.train.beta1},
                {"beta2", config.train.beta2},
                {"eps", config.train.eps},
                {"epochs", config.train.epochs},
                {"warmup_epochs", config.train.warmup_epochs},
                {"min_lr", config.train.min_lr},
                {"warmup_start_factor", config.train.warmup_start_factor},
                {"batch_size", config.train.batch_size},
                {"seed", config.train.seed},
                {"label_smoothing", config.train.label_smoothing},
                {"deterministic", config.train.deterministic}};
  j["dataset"] = {{"kind", config.dataset.kind == DatasetKind::cifar10_binary ? "cifar10_binary"
                                                                              : "synthetic"},
                  {"root", config.dataset.root},
                  {"subset_size", config.dataset.subset_size},
                  {"val_subset_size", config.dataset.val_subset_size},
                  {"augmentation",
                   config.dataset.augmentation == Augmentation::flip_crop ? "flip_crop" : "none"},
                  {"seed", config.dataset.seed},
                  {"train_n", config.dataset.synthetic_train_n},
                  {"val_n", config.dataset.synthetic_val_n},
                  {"num_classes", config.dataset.num_classes},
                  {"image_size", config.dataset.image_size}};
  return j.dump(2);
}

}  // namespace vitdw
