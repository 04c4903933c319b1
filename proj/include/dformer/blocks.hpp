#pragma once

#include "dformer/attention.hpp"
#include "dformer/tensor.hpp"

namespace dformer {

enum class Activation { kGelu };

// Two-layer token-wise MLP with expansion ratio r (hidden width r*C).
struct MlpParams {
  std::size_t ratio = 4;
  Activation activation = Activation::kGelu;
  Tensor w1, b1, w2, b2;  // [C, rC], [rC], [rC, C], [C]
};

enum class Scope { kLocal, kGlobal };

// One scope module: LN -> (LS|GS)-MSA -> residual -> LN -> MLP -> residual.
struct ScopeModuleParams {
  Scope scope = Scope::kLocal;
  double ln_eps = 1e-5;
  Tensor norm1_gamma, norm1_beta;
  AttentionParams attn;
  Tensor norm2_gamma, norm2_beta;
  MlpParams mlp;
};

// Dynamic position encoding: residual depth-wise 3D convolution.
struct DpeParams {
  Tensor kernel;  // [C, kd, kh, kw], odd extents
  Tensor bias;    // [C]
};

Tensor mlp_forward(const Tensor& x, const MlpParams& p);

// z_hat = ls_msa(LN(z)) + z; return MLP(LN(z_hat)) + z_hat  (pre-norm order)
Tensor lsm_forward(const Tensor& z, const GridDims& grid, const UnitDims& unit,
                   const ScopeModuleParams& p);

// Same composition with gs_msa.
Tensor gsm_forward(const Tensor& z, const GridDims& grid, const UnitDims& unit,
                   const ScopeModuleParams& p);

// Tokens [N, C] reshaped to the [C, d, h, w] volume, depth-wise convolved
// with same-padding plus per-channel bias, reshaped back, added residually.
Tensor dpe_forward(const Tensor& x, const GridDims& grid, const DpeParams& p);

}  // namespace dformer
