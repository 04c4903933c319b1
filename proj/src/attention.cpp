#include "dformer/attention.hpp"

#include <cmath>

namespace dformer {

namespace {

void check_axis_divisible(std::size_t grid, std::size_t unit, const char* axis) {
  if (unit == 0 || grid == 0 || grid % unit != 0) {
    throw ConfigurationError(std::string("unit does not divide grid along ") + axis + ": " +
                             std::to_string(grid) + " / " + std::to_string(unit));
  }
}

}  // namespace

DilationDims dilation_for(const GridDims& grid, const UnitDims& unit) {
  check_axis_divisible(grid.d, unit.d, "depth");
  check_axis_divisible(grid.h, unit.h, "height");
  check_axis_divisible(grid.w, unit.w, "width");
  return DilationDims{grid.d / unit.d, grid.h / unit.h, grid.w / unit.w};
}

UnitPartition partition_local(const GridDims& grid, const UnitDims& unit) {
  DilationDims bricks = dilation_for(grid, unit);  // brick counts per axis
  UnitPartition p;
  p.mode = PartitionMode::kLocal;
  p.grid = grid;
  p.unit = unit;
  p.slots = unit.count();
  p.units = grid.count() / p.slots;
  p.forward_index.resize(grid.count());
  p.inverse_index.resize(grid.count());
  for (std::size_t pd = 0; pd < grid.d; ++pd) {
    for (std::size_t ph = 0; ph < grid.h; ++ph) {
      for (std::size_t pw = 0; pw < grid.w; ++pw) {
        std::size_t patch = (pd * grid.h + ph) * grid.w + pw;
        std::size_t u = ((pd / unit.d) * bricks.h + ph / unit.h) * bricks.w + pw / unit.w;
        std::size_t s = ((pd % unit.d) * unit.h + ph % unit.h) * unit.w + pw % unit.w;
        std::size_t pos = u * p.slots + s;
        p.forward_index[patch] = pos;
        p.inverse_index[pos] = patch;
      }
    }
  }
  return p;
}

UnitPartition partition_global(const GridDims& grid, const UnitDims& unit) {
  DilationDims g = dilation_for(grid, unit);
  UnitPartition p;
  p.mode = PartitionMode::kGlobal;
  p.grid = grid;
  p.unit = unit;
  p.slots = unit.count();
  p.units = grid.count() / p.slots;
  p.forward_index.resize(grid.count());
  p.inverse_index.resize(grid.count());
  for (std::size_t pd = 0; pd < grid.d; ++pd) {
    for (std::size_t ph = 0; ph < grid.h; ++ph) {
      for (std::size_t pw = 0; pw < grid.w; ++pw) {
        std::size_t patch = (pd * grid.h + ph) * grid.w + pw;
        std::size_t u = ((pd % g.d) * g.h + ph % g.h) * g.w + pw % g.w;
        std::size_t s = ((pd / g.d) * unit.h + ph / g.h) * unit.w + pw / g.w;
        std::size_t pos = u * p.slots + s;
        p.forward_index[patch] = pos;
        p.inverse_index[pos] = patch;
      }
    }
  }
  return p;
}

namespace {

void check_attention_params(std::size_t C, const AttentionParams& p) {
  if (p.heads == 0 || C % p.heads != 0) {
    throw ConfigurationError("attention heads (" + std::to_string(p.heads) +
                             ") must divide channels (" + std::to_string(C) + ")");
  }
  const Shape wshape{C, C};
  const Shape bshape{C};
  for (const Tensor* w : {&p.wq, &p.wk, &p.wv, &p.wo}) {
    if (w->shape() != wshape) {
      throw DimensionError("attention weight shape " + shape_str(w->shape()) + ", expected " +
                           shape_str(wshape));
    }
  }
  for (const Tensor* b : {&p.bq, &p.bk, &p.bv, &p.bo}) {
    if (b->shape() != bshape) {
      throw DimensionError("attention bias shape " + shape_str(b->shape()) + ", expected " +
                           shape_str(bshape));
    }
  }
}

Tensor scoped_attention(const Tensor& x, const UnitPartition& part, const AttentionParams& p) {
  std::size_t C = x.extent(1);
  Tensor grouped = gather_rows(x, part.inverse_index);  // position order
  Tensor y = unit_attention(reshape(grouped, {part.units, part.slots, C}), p);
  Tensor flat = reshape(y, {part.units * part.slots, C});
  return gather_rows(flat, part.forward_index);  // back to patch order
}

}  // namespace

Tensor unit_attention(const Tensor& tokens, const AttentionParams& p) {
  if (tokens.rank() != 3) {
    throw DimensionError("unit_attention: need [units, slots, C], got " +
                         shape_str(tokens.shape()));
  }
  std::size_t U = tokens.extent(0), S = tokens.extent(1), C = tokens.extent(2);
  check_attention_params(C, p);
  std::size_t hw = C / p.heads;

  Tensor flat = reshape(tokens, {U * S, C});
  Tensor q = add_rowvec(matmul(flat, p.wq), p.bq);
  Tensor k = add_rowvec(matmul(flat, p.wk), p.bk);
  Tensor v = add_rowvec(matmul(flat, p.wv), p.bv);

  // [U*S, C] -> [U, heads, S, hw]
  auto split_heads = [&](const Tensor& t) {
    return permute(reshape(t, {U, S, p.heads, hw}), {0, 2, 1, 3});
  };
  Tensor qh = split_heads(q);
  Tensor kh = split_heads(k);
  Tensor vh = split_heads(v);

  Tensor scores = scale(matmul(qh, permute(kh, {0, 1, 3, 2})), 1.0 / std::sqrt(double(hw)));
  Tensor weights = softmax_lastdim(scores);
  Tensor ctx = matmul(weights, vh);  // [U, heads, S, hw]

  Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {U * S, C});
  Tensor out = add_rowvec(matmul(merged, p.wo), p.bo);
  return reshape(out, {U, S, C});
}

Tensor ls_msa(const Tensor& x, const GridDims& grid, const UnitDims& unit,
              const AttentionParams& p) {
  if (x.rank() != 2 || x.extent(0) != grid.count()) {
    throw DimensionError("ls_msa: token tensor " + shape_str(x.shape()) +
                         " does not match grid of " + std::to_string(grid.count()) + " patches");
  }
  return scoped_attention(x, partition_local(grid, unit), p);
}

Tensor gs_msa(const Tensor& x, const GridDims& grid, const UnitDims& unit,
              const AttentionParams& p) {
  if (x.rank() != 2 || x.extent(0) != grid.count()) {
    throw DimensionError("gs_msa: token tensor " + shape_str(x.shape()) +
                         " does not match grid of " + std::to_string(grid.count()) + " patches");
  }
  return scoped_attention(x, partition_global(grid, unit), p);
}

std::uint64_t attention_complexity(const GridDims& grid, std::size_t channels,
                                   std::optional<UnitDims> unit) {
  if (channels == 0 || grid.count() == 0) {
    throw ParameterError("attention_complexity: arguments must be positive");
  }
  std::uint64_t n = grid.count();
  std::uint64_t c = channels;
  std::uint64_t projections = 4 * n * c * c;
  std::uint64_t scores = unit ? 2 * static_cast<std::uint64_t>(unit->count()) * n * c
                              : 2 * n * n * c;
  return projections + scores;
}

}  // namespace dformer
