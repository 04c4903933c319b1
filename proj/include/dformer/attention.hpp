#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dformer/tensor.hpp"

namespace dformer {

// Patch counts of the current feature map along depth, height, width.
struct GridDims {
  std::size_t d = 1, h = 1, w = 1;
  std::size_t count() const { return d * h * w; }
  bool operator==(const GridDims&) const = default;
};

// Patches per unit along each axis.
struct UnitDims {
  std::size_t d = 1, h = 1, w = 1;
  std::size_t count() const { return d * h * w; }
  bool operator==(const UnitDims&) const = default;
};

// Sampling strides of the dilated (global) grouping; grid = dilation * unit.
struct DilationDims {
  std::size_t d = 1, h = 1, w = 1;
};

// Checks the exact-division constraint and returns grid/unit per axis.
DilationDims dilation_for(const GridDims& grid, const UnitDims& unit);

enum class PartitionMode { kLocal, kGlobal };

// A bijection between flat patch indices and (unit, slot) pairs. Positions
// are packed as unit * slots + slot; units and slots are enumerated
// row-major over (d, h, w).
struct UnitPartition {
  PartitionMode mode = PartitionMode::kLocal;
  GridDims grid;
  UnitDims unit;
  std::size_t units = 0;
  std::size_t slots = 0;
  std::vector<std::size_t> forward_index;  // patch -> position
  std::vector<std::size_t> inverse_index;  // position -> patch

  std::size_t unit_of(std::size_t patch) const { return forward_index[patch] / slots; }
  std::size_t slot_of(std::size_t patch) const { return forward_index[patch] % slots; }
};

// Contiguous bricks of unit.d x unit.h x unit.w patches.
UnitPartition partition_local(const GridDims& grid, const UnitDims& unit);

// Dilated grouping: slot (i, j, k) of the unit at offset (od, oh, ow) is the
// patch (od + i*g_d, oh + j*g_h, ow + k*g_w). Unit count matches the local
// partition for the same unit dims.
UnitPartition partition_global(const GridDims& grid, const UnitDims& unit);

// Multi-head scaled dot-product attention parameter set; weights are [C, C]
// row-vector projections with [C] biases.
struct AttentionParams {
  std::size_t heads = 1;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

// softmax(Q K^T / sqrt(C/heads)) V per unit and head, heads concatenated and
// output-projected. No interaction across units, no positional term.
Tensor unit_attention(const Tensor& tokens, const AttentionParams& p);  // [U, S, C]

// Gather by the local partition, attend within units, scatter back.
Tensor ls_msa(const Tensor& x, const GridDims& grid, const UnitDims& unit,
              const AttentionParams& p);

// Same with the dilated partition; equals P^-1 . ls_msa . P for the dilation
// permutation P.
Tensor gs_msa(const Tensor& x, const GridDims& grid, const UnitDims& unit,
              const AttentionParams& p);

// Analytic multiply count of one attention application over the grid:
// dense (no unit): 4*dhw*C^2 + 2*(dhw)^2*C
// unit-scoped:     4*dhw*C^2 + 2*(u_d*u_h*u_w)*dhw*C
// The unit-scoped count is the same for local and global groupings.
std::uint64_t attention_complexity(const GridDims& grid, std::size_t channels,
                                   std::optional<UnitDims> unit = std::nullopt);

}  // namespace dformer
