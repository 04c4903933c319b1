#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "dformer/attention.hpp"

namespace dformer {

// Every architectural hyperparameter. The builder and the analyzer both read
// only this struct, so the two stay in sync by construction.
struct ModelConfig {
  static constexpr int kStages = 4;

  // input volume, voxels
  std::size_t input_w = 128, input_h = 128, input_d = 64;
  std::size_t in_channels = 1;
  std::size_t num_classes = 9;

  std::size_t base_channels = 96;
  std::size_t patch_w = 4, patch_h = 4, patch_d = 2;
  std::array<std::size_t, 4> depths = {1, 1, 3, 1};  // LSM/GSM pairs per stage
  std::array<std::size_t, 4> heads = {3, 6, 12, 24};
  std::array<std::size_t, 4> unit_d = {4, 4, 4, 4};
  std::array<std::size_t, 4> unit_h = {4, 4, 4, 4};
  std::array<std::size_t, 4> unit_w = {4, 4, 4, 4};
  std::size_t mlp_ratio = 4;
  std::size_t dpe_kernel_d = 3, dpe_kernel_h = 3, dpe_kernel_w = 3;
  double ln_eps = 1e-5;
  std::size_t head_channels = 0;  // 0 -> base_channels

  void validate() const;  // throws ConfigurationError naming the violation

  GridDims stage_grid(int stage) const;       // stage in [0, 4)
  std::size_t stage_channels(int stage) const;
  UnitDims stage_unit(int stage) const;
  std::size_t head_width() const { return head_channels ? head_channels : base_channels; }
  GridDims grid_for_input(std::size_t in_d, std::size_t in_h, std::size_t in_w) const;
};

enum class ShapeKind { kSpheres, kBoxes, kNested };

std::string shape_kind_name(ShapeKind k);
ShapeKind shape_kind_from(const std::string& name);

// Model plus optimizer/schedule/data settings for one training run.
struct RunConfig {
  ModelConfig model;

  double lr0 = 0.01;
  double momentum = 0.99;
  double weight_decay = 3e-5;
  double poly_exponent = 0.9;
  std::size_t max_steps = 2000;
  std::size_t batch_size = 2;
  std::uint64_t seed = 1;

  std::size_t data_count = 24;  // training samples
  std::size_t val_count = 4;    // held-out samples
  ShapeKind data_kind = ShapeKind::kSpheres;
  double noise_level = 0.05;

  std::size_t eval_every = 50;
  double target_dsc = 0.0;  // stop once the held-out DSC reaches this; 0 = run all steps

  void validate() const;
};

// key = value text, '#' comments, unknown keys are configuration errors.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Canonical serialization of the model half (used as the checkpoint echo).
std::string serialize_model_config(const ModelConfig& cfg);
ModelConfig parse_model_config(const std::string& text);

}  // namespace dformer
