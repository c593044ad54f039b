// ModelConfig <-> JSON. Every key is optional; unknown keys are rejected so
// a misspelt ablation field cannot silently fall back to its default.
#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "mnx/model.hpp"

namespace mnx::inline MNX_ABI {

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {
      {"input_size", c.input_size},
      {"stage_widths", c.stage_widths},
      {"width_mult", c.width_mult},
      {"stage_depths", c.stage_depths},
      {"neck_mult", c.neck_mult},
      {"neck_depth", c.neck_depth},
      {"num_classes", c.num_classes},
      {"d_state", c.d_state},
      {"ssm_ratio", c.ssm_ratio},
      {"mlp_ratio", c.mlp_ratio},
      {"conv_dim", c.conv_dim},
      {"convnext_kernel", c.convnext_kernel},
      {"convnext_expand", c.convnext_expand},
      {"layer_scale", c.layer_scale},
      {"downsample_mode", to_string(c.downsample_mode)},
      {"block_mode", to_string(c.block_mode)},
      {"seed", c.seed},
      {"scan_chunk", c.scan_chunk},
  };
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  static const std::set<std::string> kKeys = {
      "input_size", "stage_widths",    "width_mult",      "stage_depths", "neck_mult",       "neck_depth",
      "num_classes", "d_state",        "ssm_ratio",       "mlp_ratio",    "conv_dim",        "convnext_kernel",
      "convnext_expand", "layer_scale", "downsample_mode", "block_mode",  "seed",            "scan_chunk"};
  std::string unknown;
  for (const auto& [k, v] : j.items()) {
    if (!kKeys.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
  }
  if (!unknown.empty()) throw ConfigError("config: unknown key(s): " + unknown);

  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config: field '") + key + "' has the wrong type: " + e.what());
    }
  };
  get("input_size", c.input_size);
  get("stage_widths", c.stage_widths);
  get("width_mult", c.width_mult);
  get("stage_depths", c.stage_depths);
  get("neck_mult", c.neck_mult);
  get("neck_depth", c.neck_depth);
  get("num_classes", c.num_classes);
  get("d_state", c.d_state);
  get("ssm_ratio", c.ssm_ratio);
  get("mlp_ratio", c.mlp_ratio);
  get("conv_dim", c.conv_dim);
  get("convnext_kernel", c.convnext_kernel);
  get("convnext_expand", c.convnext_expand);
  get("layer_scale", c.layer_scale);
  get("seed", c.seed);
  get("scan_chunk", c.scan_chunk);
  std::string mode;
  if (j.contains("downsample_mode")) {
    get("downsample_mode", mode);
    c.downsample_mode = parse_downsample_mode(mode);
  }
  if (j.contains("block_mode")) {
    get("block_mode", mode);
    c.block_mode = parse_block_mode(mode);
  }
  c.validate();
  return c;
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

inline void save_config(const ModelConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("config: cannot write '" + path + "'");
  out << config_to_json(c).dump(2) << "\n";
}

}  // namespace mnx
