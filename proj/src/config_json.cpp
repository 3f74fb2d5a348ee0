#include "vitdw/config_json.hpp"

#include <set>

#include <json.hpp>

namespace vitdw {

using nlohmann::json;

std::string model_config_to_json(const ModelConfig& c) {
  json j;
  j["image_size"] = c.image_size;
  j["patch_size"] = c.patch_size;
  j["in_channels"] = c.in_channels;
  j["dim"] = c.dim;
  j["depth"] = c.depth;
  j["heads"] = c.heads;
  j["mlp_ratio"] = c.mlp_ratio;
  j["num_classes"] = c.num_classes;
  j["use_pos_embed"] = c.use_pos_embed;
  j["use_class_token"] = c.use_class_token;
  j["pooling"] = pooling_name(c.pooling);
  j["bypass"] = {{"kind", bypass_kind_name(c.bypass.kind)},
                 {"kernel_sizes", c.bypass.kernel_sizes},
                 {"group_size", c.bypass.group_size}};
  j["seed"] = c.seed;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("config JSON parse error: ") + e.what());
  }
  static const std::set<std::string> known = {
      "preset",          "image_size", "patch_size", "in_channels", "dim",
      "depth",           "heads",      "mlp_ratio",  "num_classes", "use_pos_embed",
      "use_class_token", "pooling",    "bypass",     "seed"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    check_config(known.count(key) > 0, "unknown model config key: " + key);
  }

  ModelConfig c;
  if (j.contains("preset")) {
    const std::string preset = j["preset"].get<std::string>();
    if (preset == "vit_tiny") {
      c = vit_tiny_config();
    } else if (preset == "vit_small") {
      c = vit_small_config();
    } else if (preset == "desk") {
      c = desk_config();
    } else {
      fail(ErrorKind::config, "unknown preset: " + preset +
                                  " (expected vit_tiny, vit_small or desk)");
    }
  }
  try {
    if (j.contains("image_size")) c.image_size = j["image_size"].get<int>();
    if (j.contains("patch_size")) c.patch_size = j["patch_size"].get<int>();
    if (j.contains("in_channels")) c.in_channels = j["in_channels"].get<int>();
    if (j.contains("dim")) c.dim = j["dim"].get<int>();
    if (j.contains("depth")) c.depth = j["depth"].get<int>();
    if (j.contains("heads")) c.heads = j["heads"].get<int>();
    if (j.contains("mlp_ratio")) c.mlp_ratio = j["mlp_ratio"].get<int>();
    if (j.contains("num_classes")) c.num_classes = j["num_classes"].get<int>();
    if (j.contains("use_pos_embed")) c.use_pos_embed = j["use_pos_embed"].get<bool>();
    if (j.contains("use_class_token")) c.use_class_token = j["use_class_token"].get<bool>();
    if (j.contains("pooling")) {
      const std::string p = j["pooling"].get<std::string>();
      if (p == "class_token") {
        c.pooling = Pooling::class_token;
      } else if (p == "mean") {
        c.pooling = Pooling::mean;
      } else {
        fail(ErrorKind::config, "pooling must be class_token or mean, got " + p);
      }
    }
    if (j.contains("bypass")) {
      const json& b = j["bypass"];
      if (b.contains("kind")) {
        const std::string kind = b["kind"].get<std::string>();
        if (kind == "none") {
          c.bypass.kind = BypassKind::none;
        } else if (kind == "identity") {
          c.bypass.kind = BypassKind::identity;
        } else if (kind == "dwconv") {
          c.bypass.kind = BypassKind::dwconv;
        } else {
          fail(ErrorKind::config, "bypass.kind must be none, identity or dwconv, got " + kind);
        }
      }
      if (b.contains("kernel_sizes")) c.bypass.kernel_sizes = b["kernel_sizes"].get<std::vector<int>>();
      if (b.contains("group_size")) c.bypass.group_size = b["group_size"].get<int>();
    }
    if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("config JSON type error: ") + e.what());
  }
  // Mean pooling is implied when the class token is disabled.
  if (!c.use_class_token) c.pooling = Pooling::mean;
  c.validate();
  return c;
}

std::string first_config_difference(const ModelConfig& a, const ModelConfig& b) {
  if (a.image_size != b.image_size) return "image_size";
  if (a.patch_size != b.patch_size) return "patch_size";
  if (a.in_channels != b.in_channels) return "in_channels";
  if (a.dim != b.dim) return "dim";
  if (a.depth != b.depth) return "depth";
  if (a.heads != b.heads) return "heads";
  if (a.mlp_ratio != b.mlp_ratio) return "mlp_ratio";
  if (a.num_classes != b.num_classes) return "num_classes";
  if (a.use_pos_embed != b.use_pos_embed) return "use_pos_embed";
  if (a.use_class_token != b.use_class_token) return "use_class_token";
  if (a.pooling != b.pooling) return "pooling";
  if (a.bypass.kind != b.bypass.kind) return "bypass.kind";
  if (a.bypass.kernel_sizes != b.bypass.kernel_sizes) return "bypass.kernel_sizes";
  if (a.bypass.group_size != b.bypass.group_size) return "bypass.group_size";
  if (a.seed != b.seed) return "seed";
  return "";
}

}  // namespace vitdw
