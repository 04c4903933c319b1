#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "dformer/blocks.hpp"
#include "dformer/config.hpp"

namespace dformer {

// Token tensor [d*h*w, C] plus the grid it lives on.
struct StageTensor {
  Tensor tokens;
  GridDims grid;
};

// The full parameterized network: an ordered list of named parameter
// tensors. Order is the creation order and fixes both initialization and
// checkpoint layout.
struct Model {
  ModelConfig cfg;
  std::uint64_t seed = 0;
  std::vector<std::string> names;
  std::vector<Tensor> values;
  std::unordered_map<std::string, std::size_t> index;

  void add_param(std::string name, Tensor t);
  const Tensor& param(const std::string& name) const;
  std::size_t param_count() const { return values.size(); }
  std::size_t census() const;  // total scalar parameter count
};

// Deterministic build: truncated normal (std 0.02) weights, zero biases,
// LayerNorm gamma 1 / beta 0, drawn from one seeded stream in creation order.
Model build_model(const ModelConfig& cfg, std::uint64_t seed);

StageTensor patch_embed(const Model& m, const Tensor& volume);  // [in_ch, D, H, W]
StageTensor downsample(const StageTensor& s, const Tensor& w, const Tensor& b);
StageTensor upsample(const StageTensor& s, const Tensor& w, const Tensor& b);
StageTensor skip_fuse(const StageTensor& dec, const StageTensor& enc, const Tensor& w,
                      const Tensor& b);
Tensor patch_expand_head(const Model& m, const StageTensor& s);  // -> [K, D, H, W]

// One D-Former block: DPE, then depths[stage] alternating LSM/GSM pairs.
Tensor run_block(const Model& m, const std::string& prefix, const StageTensor& s, int stage);

// Full pipeline: embed -> 4 encoder blocks with 3 downsamples -> 3 decoder
// blocks with upsample + skip fusion -> expand + segmentation head.
Tensor forward(const Model& m, const Tensor& volume);

// Per-stage grid/channel bookkeeping, shared by tests asserting the
// encoder/decoder symmetry.
struct StagePlan {
  GridDims grid;
  std::size_t channels = 0;
};
std::vector<StagePlan> encoder_plan(const ModelConfig& cfg);
std::vector<StagePlan> decoder_plan(const ModelConfig& cfg);  // in execution order

}  // namespace dformer
