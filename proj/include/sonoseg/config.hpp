#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sonoseg/common.hpp"
#include "sonoseg/distill.hpp"
#include "sonoseg/edge.hpp"
#include "sonoseg/encoder.hpp"
#include "sonoseg/losses.hpp"

namespace sonoseg {

namespace detail {

template <typename T, typename U>
void fill3(std::array<T, 3>& dst, const std::vector<U>& src, const char* key) {
  if (src.size() != 3)
    throw ConfigError(std::string(key) + " must have exactly 3 entries, got " +
                      std::to_string(src.size()));
  for (int i = 0; i < 3; ++i) dst[static_cast<size_t>(i)] = static_cast<T>(src[i]);
}

}  // namespace detail

// One JSON document drives a whole run; every key is known and typed, and
// anything unrecognized is an error rather than a silent no-op.
struct RunConfig {
  // model geometry
  int64_t image_size = 64;
  int64_t patch = 4;
  std::vector<int64_t> dims = {32, 64, 128};
  std::vector<int64_t> num_heads = {2, 2, 4};
  int64_t adapter_dim = 16;
  int64_t adapter_edge_dim = 16;
  std::vector<std::string> edge_directions = {"horizontal", "vertical", "right_diagonal",
                                              "left_diagonal"};
  bool prompt_at_block_input = false;

  // compressed-model geometry
  std::vector<int64_t> student_dims = {16, 32, 64};
  std::vector<int64_t> student_num_heads = {2, 2, 4};
  int64_t student_adapter_dim = 8;
  int64_t student_adapter_edge_dim = 8;

  // training
  uint64_t seed = 7;
  int64_t epochs = 200;
  int64_t batch_size = 4;
  double lr = 2e-3;
  double lr_decay = 0.99;
  double focal_weight = 20.0;
  double dice_weight = 1.0;
  int64_t box_jitter = 4;

  // distillation
  std::vector<std::string> distill_levels = {"integration", "block", "adapter"};
  int64_t distill_epochs = 100;
  double distill_lr = 1e-3;

  // data / output
  std::string data_dir;  // empty: generate n_images synthetically
  int64_t n_images = 10;
  std::string out_dir = "out";

  EncoderConfig teacher_encoder() const {
    EncoderConfig cfg;
    cfg.image_size = image_size;
    cfg.patch = patch;
    detail::fill3(cfg.dims, dims, "dims");
    detail::fill3(cfg.num_heads, num_heads, "num_heads");
    cfg.adapter_bottleneck = adapter_dim;
    cfg.adapter_edge_dim = adapter_edge_dim;
    cfg.edge_directions.clear();
    for (const std::string& d : edge_directions) cfg.edge_directions.push_back(parse_direction(d));
    cfg.prompt_at_block_input = prompt_at_block_input;
    cfg.validate();
    return cfg;
  }

  EncoderConfig student_encoder() const {
    EncoderConfig cfg = teacher_encoder();
    detail::fill3(cfg.dims, student_dims, "student_dims");
    detail::fill3(cfg.num_heads, student_num_heads, "student_num_heads");
    cfg.adapter_bottleneck = student_adapter_dim;
    cfg.adapter_edge_dim = student_adapter_edge_dim;
    cfg.validate();
    return cfg;
  }

  SegLossConfig loss_config() const {
    SegLossConfig cfg;
    cfg.focal_weight = focal_weight;
    cfg.dice_weight = dice_weight;
    return cfg;
  }

  DistillConfig distill_config() const {
    DistillConfig cfg;
    cfg.levels.clear();
    for (const std::string& s : distill_levels) cfg.levels.push_back(parse_tap_level(s));
    cfg.epochs = distill_epochs;
    cfg.lr = distill_lr;
    cfg.validate();
    return cfg;
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (lr <= 0) throw ConfigError("lr must be positive");
    if (lr_decay <= 0 || lr_decay > 1) throw ConfigError("lr_decay must be in (0, 1]");
    if (box_jitter < 0) throw ConfigError("box_jitter must be >= 0");
    if (n_images < 1) throw ConfigError("n_images must be >= 1");
    teacher_encoder();
    student_encoder();
    distill_config();
  }
};

namespace detail {

template <typename T>
T get_typed(const nlohmann::json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type (" + v.dump() + ")");
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  RunConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "image_size") cfg.image_size = detail::get_typed<int64_t>(value, key);
    else if (key == "patch") cfg.patch = detail::get_typed<int64_t>(value, key);
    else if (key == "dims") cfg.dims = detail::get_typed<std::vector<int64_t>>(value, key);
    else if (key == "num_heads") cfg.num_heads = detail::get_typed<std::vector<int64_t>>(value, key);
    else if (key == "adapter_dim") cfg.adapter_dim = detail::get_typed<int64_t>(value, key);
    else if (key == "adapter_edge_dim") cfg.adapter_edge_dim = detail::get_typed<int64_t>(value, key);
    else if (key == "edge_directions")
      cfg.edge_directions = detail::get_typed<std::vector<std::string>>(value, key);
    else if (key == "prompt_at_block_input")
      cfg.prompt_at_block_input = detail::get_typed<bool>(value, key);
    else if (key == "student_dims")
      cfg.student_dims = detail::get_typed<std::vector<int64_t>>(value, key);
    else if (key == "student_num_heads")
      cfg.student_num_heads = detail::get_typed<std::vector<int64_t>>(value, key);
    else if (key == "student_adapter_dim")
      cfg.student_adapter_dim = detail::get_typed<int64_t>(value, key);
    else if (key == "student_adapter_edge_dim")
      cfg.student_adapter_edge_dim = detail::get_typed<int64_t>(value, key);
    else if (key == "seed") cfg.seed = detail::get_typed<uint64_t>(value, key);
    else if (key == "epochs") cfg.epochs = detail::get_typed<int64_t>(value, key);
    else if (key == "batch_size") cfg.batch_size = detail::get_typed<int64_t>(value, key);
    else if (key == "lr") cfg.lr = detail::get_typed<double>(value, key);
    else if (key == "lr_decay") cfg.lr_decay = detail::get_typed<double>(value, key);
    else if (key == "focal_weight") cfg.focal_weight = detail::get_typed<double>(value, key);
    else if (key == "dice_weight") cfg.dice_weight = detail::get_typed<double>(value, key);
    else if (key == "box_jitter") cfg.box_jitter = detail::get_typed<int64_t>(value, key);
    else if (key == "distill_levels")
      cfg.distill_levels = detail::get_typed<std::vector<std::string>>(value, key);
    else if (key == "distill_epochs") cfg.distill_epochs = detail::get_typed<int64_t>(value, key);
    else if (key == "distill_lr") cfg.distill_lr = detail::get_typed<double>(value, key);
    else if (key == "data_dir") cfg.data_dir = detail::get_typed<std::string>(value, key);
    else if (key == "n_images") cfg.n_images = detail::get_typed<int64_t>(value, key);
    else if (key == "out_dir") cfg.out_dir = detail::get_typed<std::string>(value, key);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace sonoseg
