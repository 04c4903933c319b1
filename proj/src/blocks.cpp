#include "dformer/blocks.hpp"

namespace dformer {

Tensor mlp_forward(const Tensor& x, const MlpParams& p) {
  if (x.rank() != 2) throw DimensionError("mlp_forward: need [N, C], got " + shape_str(x.shape()));
  std::size_t C = x.extent(1);
  std::size_t hidden = p.ratio * C;
  if (p.w1.shape() != Shape{C, hidden} || p.b1.shape() != Shape{hidden} ||
      p.w2.shape() != Shape{hidden, C} || p.b2.shape() != Shape{C}) {
    throw DimensionError("mlp_forward: parameter shapes do not match C=" + std::to_string(C) +
                         ", ratio=" + std::to_string(p.ratio));
  }
  Tensor h = add_rowvec(matmul(x, p.w1), p.b1);
  switch (p.activation) {
    case Activation::kGelu:
      h = gelu(h);
      break;
  }
  return add_rowvec(matmul(h, p.w2), p.b2);
}

namespace {

Tensor scope_forward(const Tensor& z, const GridDims& grid, const UnitDims& unit,
                     const ScopeModuleParams& p) {
  Tensor normed = layer_norm(z, p.norm1_gamma, p.norm1_beta, p.ln_eps);
  Tensor attended = p.scope == Scope::kLocal ? ls_msa(normed, grid, unit, p.attn)
                                             : gs_msa(normed, grid, unit, p.attn);
  Tensor z_hat = add(attended, z);
  Tensor normed2 = layer_norm(z_hat, p.norm2_gamma, p.norm2_beta, p.ln_eps);
  return add(mlp_forward(normed2, p.mlp), z_hat);
}

}  // namespace

Tensor lsm_forward(const Tensor& z, const GridDims& grid, const UnitDims& unit,
                   const ScopeModuleParams& p) {
  if (p.scope != Scope::kLocal) throw ContractError("lsm_forward: params are not local-scope");
  return scope_forward(z, grid, unit, p);
}

Tensor gsm_forward(const Tensor& z, const GridDims& grid, const UnitDims& unit,
                   const ScopeModuleParams& p) {
  if (p.scope != Scope::kGlobal) throw ContractError("gsm_forward: params are not global-scope");
  dilation_for(grid, unit);  // divisibility must hold for the dilated grouping
  return scope_forward(z, grid, unit, p);
}

Tensor dpe_forward(const Tensor& x, const GridDims& grid, const DpeParams& p) {
  if (x.rank() != 2 || x.extent(0) != grid.count()) {
    throw DimensionError("dpe_forward: token tensor " + shape_str(x.shape()) +
                         " does not match grid of " + std::to_string(grid.count()) + " patches");
  }
  std::size_t C = x.extent(1);
  if (p.kernel.rank() != 4 || p.kernel.extent(0) != C || p.bias.shape() != Shape{C}) {
    throw DimensionError("dpe_forward: kernel " + shape_str(p.kernel.shape()) + " / bias " +
                         shape_str(p.bias.shape()) + " do not match C=" + std::to_string(C));
  }
  std::array<std::size_t, 3> pad{(p.kernel.extent(1) - 1) / 2, (p.kernel.extent(2) - 1) / 2,
                                 (p.kernel.extent(3) - 1) / 2};
  Tensor volume = reshape(transpose2d(x), {C, grid.d, grid.h, grid.w});
  Tensor conv = depthwise_conv3d(volume, p.kernel, pad);
  Tensor tokens = transpose2d(reshape(conv, {C, grid.count()}));
  return add(add_rowvec(tokens, p.bias), x);
}

}  // namespace dformer
