#include "dformer/model.hpp"

#include "dformer/rng.hpp"

namespace dformer {

void Model::add_param(std::string name, Tensor t) {
  if (index.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
  index.emplace(name, values.size());
  names.push_back(std::move(name));
  values.push_back(std::move(t));
}

const Tensor& Model::param(const std::string& name) const {
  auto it = index.find(name);
  if (it == index.end()) throw ContractError("unknown parameter '" + name + "'");
  return values[it->second];
}

std::size_t Model::census() const {
  std::size_t total = 0;
  for (const Tensor& t : values) total += t.numel();
  return total;
}

// ---------------------------------------------------------------------------
// construction

namespace {

Tensor init_weight(Rng& rng, Shape shape, double std_dev = 0.02) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.next_trunc_normal(std_dev);
  return Tensor(std::move(shape), std::move(v));
}

// Variance-preserving scale for the plain linear layers outside the
// LayerNorm-guarded blocks. A flat 0.02 there attenuates the residual
// stream roughly fivefold per sampling layer and stalls training.
double fan_in_std(std::size_t fan_in) { return 1.0 / std::sqrt(double(fan_in)); }

void add_scope_module(Model& m, Rng& rng, const std::string& prefix, std::size_t c,
                      std::size_t ratio) {
  m.add_param(prefix + ".n1.g", Tensor::full({c}, 1.0));
  m.add_param(prefix + ".n1.b", Tensor::zeros({c}));
  for (const char* w : {"wq", "wk", "wv", "wo"}) {
    m.add_param(prefix + ".attn." + w, init_weight(rng, {c, c}));
  }
  for (const char* b : {"bq", "bk", "bv", "bo"}) {
    m.add_param(prefix + ".attn." + b, Tensor::zeros({c}));
  }
  m.add_param(prefix + ".n2.g", Tensor::full({c}, 1.0));
  m.add_param(prefix + ".n2.b", Tensor::zeros({c}));
  m.add_param(prefix + ".mlp.w1", init_weight(rng, {c, ratio * c}));
  m.add_param(prefix + ".mlp.b1", Tensor::zeros({ratio * c}));
  m.add_param(prefix + ".mlp.w2", init_weight(rng, {ratio * c, c}));
  m.add_param(prefix + ".mlp.b2", Tensor::zeros({c}));
}

void add_block(Model& m, Rng& rng, const std::string& prefix, int stage) {
  const ModelConfig& cfg = m.cfg;
  std::size_t c = cfg.stage_channels(stage);
  m.add_param(prefix + ".dpe.k",
              init_weight(rng, {c, cfg.dpe_kernel_d, cfg.dpe_kernel_h, cfg.dpe_kernel_w}));
  m.add_param(prefix + ".dpe.b", Tensor::zeros({c}));
  for (std::size_t p = 0; p < cfg.depths[stage]; ++p) {
    std::string pair = prefix + ".p" + std::to_string(p);
    add_scope_module(m, rng, pair + ".lsm", c, cfg.mlp_ratio);
    add_scope_module(m, rng, pair + ".gsm", c, cfg.mlp_ratio);
  }
}

}  // namespace

Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  m.seed = seed;
  Rng rng(seed);

  std::size_t c0 = cfg.base_channels;
  std::size_t patch_in = cfg.in_channels * cfg.patch_d * cfg.patch_h * cfg.patch_w;
  m.add_param("embed.w", init_weight(rng, {patch_in, c0}, fan_in_std(patch_in)));
  m.add_param("embed.b", Tensor::zeros({c0}));

  for (int s = 0; s < ModelConfig::kStages; ++s) {
    add_block(m, rng, "enc" + std::to_string(s + 1), s);
    if (s < 3) {
      std::size_t c = cfg.stage_channels(s);
      std::string d = "down" + std::to_string(s + 1);
      m.add_param(d + ".w", init_weight(rng, {8 * c, 2 * c}, fan_in_std(8 * c)));
      m.add_param(d + ".b", Tensor::zeros({2 * c}));
    }
  }

  for (int s = 2; s >= 0; --s) {
    std::size_t c = cfg.stage_channels(s);  // target width at this decoder level
    std::string id = std::to_string(s + 1);
    m.add_param("up" + id + ".w", init_weight(rng, {2 * c, 8 * c}, fan_in_std(2 * c)));
    m.add_param("up" + id + ".b", Tensor::zeros({8 * c}));
    m.add_param("fuse" + id + ".w", init_weight(rng, {2 * c, c}, fan_in_std(2 * c)));
    m.add_param("fuse" + id + ".b", Tensor::zeros({c}));
    add_block(m, rng, "dec" + id, s);
  }

  std::size_t patch_sp = cfg.patch_d * cfg.patch_h * cfg.patch_w;
  std::size_t ch = cfg.head_width();
  m.add_param("expand.w", init_weight(rng, {c0, patch_sp * ch}, fan_in_std(c0)));
  m.add_param("expand.b", Tensor::zeros({patch_sp * ch}));
  m.add_param("head.w", init_weight(rng, {ch, cfg.num_classes}, fan_in_std(ch)));
  m.add_param("head.b", Tensor::zeros({cfg.num_classes}));
  return m;
}

// ---------------------------------------------------------------------------
// layout helpers (all token orders are row-major over (d, h, w))

namespace {

// volume voxel (c, z, y, x) flat index for [in_ch, D, H, W]
std::vector<std::size_t> embed_gather_index(const ModelConfig& cfg, const GridDims& grid,
                                            std::size_t in_d, std::size_t in_h, std::size_t in_w) {
  std::vector<std::size_t> idx;
  idx.reserve(grid.count() * cfg.in_channels * cfg.patch_d * cfg.patch_h * cfg.patch_w);
  for (std::size_t gz = 0; gz < grid.d; ++gz) {
    for (std::size_t gy = 0; gy < grid.h; ++gy) {
      for (std::size_t gx = 0; gx < grid.w; ++gx) {
        for (std::size_t c = 0; c < cfg.in_channels; ++c) {
          for (std::size_t dz = 0; dz < cfg.patch_d; ++dz) {
            for (std::size_t dy = 0; dy < cfg.patch_h; ++dy) {
              for (std::size_t dx = 0; dx < cfg.patch_w; ++dx) {
                std::size_t z = gz * cfg.patch_d + dz;
                std::size_t y = gy * cfg.patch_h + dy;
                std::size_t x = gx * cfg.patch_w + dx;
                idx.push_back(((c * in_d + z) * in_h + y) * in_w + x);
              }
            }
          }
        }
      }
    }
  }
  return idx;
}

// 8 children of every coarse token, child slot (dz, dy, dx) row-major
std::vector<std::size_t> down_gather_index(const GridDims& g) {
  GridDims out{g.d / 2, g.h / 2, g.w / 2};
  std::vector<std::size_t> idx;
  idx.reserve(g.count());
  for (std::size_t oz = 0; oz < out.d; ++oz) {
    for (std::size_t oy = 0; oy < out.h; ++oy) {
      for (std::size_t ox = 0; ox < out.w; ++ox) {
        for (std::size_t dz = 0; dz < 2; ++dz) {
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              idx.push_back(((2 * oz + dz) * g.h + 2 * oy + dy) * g.w + 2 * ox + dx);
            }
          }
        }
      }
    }
  }
  return idx;
}

// fine position -> (parent, slot) row index into the [N*8, C] projection
std::vector<std::size_t> up_scatter_index(const GridDims& coarse) {
  GridDims fine{coarse.d * 2, coarse.h * 2, coarse.w * 2};
  std::vector<std::size_t> idx(fine.count());
  for (std::size_t z = 0; z < fine.d; ++z) {
    for (std::size_t y = 0; y < fine.h; ++y) {
      for (std::size_t x = 0; x < fine.w; ++x) {
        std::size_t parent = ((z / 2) * coarse.h + y / 2) * coarse.w + x / 2;
        std::size_t slot = ((z % 2) * 2 + y % 2) * 2 + x % 2;
        idx[(z * fine.h + y) * fine.w + x] = parent * 8 + slot;
      }
    }
  }
  return idx;
}

// voxel (z, y, x) -> (token, within-patch slot) row index into [N*P, C]
std::vector<std::size_t> expand_scatter_index(const ModelConfig& cfg, const GridDims& grid,
                                              std::size_t in_d, std::size_t in_h,
                                              std::size_t in_w) {
  std::size_t patch_sp = cfg.patch_d * cfg.patch_h * cfg.patch_w;
  std::vector<std::size_t> idx(in_d * in_h * in_w);
  for (std::size_t z = 0; z < in_d; ++z) {
    for (std::size_t y = 0; y < in_h; ++y) {
      for (std::size_t x = 0; x < in_w; ++x) {
        std::size_t token = ((z / cfg.patch_d) * grid.h + y / cfg.patch_h) * grid.w +
                            x / cfg.patch_w;
        std::size_t slot = ((z % cfg.patch_d) * cfg.patch_h + y % cfg.patch_h) * cfg.patch_w +
                           x % cfg.patch_w;
        idx[(z * in_h + y) * in_w + x] = token * patch_sp + slot;
      }
    }
  }
  return idx;
}

}  // namespace

StageTensor patch_embed(const Model& m, const Tensor& volume) {
  const ModelConfig& cfg = m.cfg;
  if (volume.rank() != 4 || volume.extent(0) != cfg.in_channels) {
    throw DimensionError("patch_embed: expected [in_ch, D, H, W], got " +
                         shape_str(volume.shape()));
  }
  std::size_t in_d = volume.extent(1), in_h = volume.extent(2), in_w = volume.extent(3);
  if (in_d % cfg.patch_d || in_h % cfg.patch_h || in_w % cfg.patch_w) {
    throw ConfigurationError("patch_embed: input " + shape_str(volume.shape()) +
                             " not divisible by patch size");
  }
  GridDims grid{in_d / cfg.patch_d, in_h / cfg.patch_h, in_w / cfg.patch_w};
  std::size_t patch_in = cfg.in_channels * cfg.patch_d * cfg.patch_h * cfg.patch_w;

  Tensor flat = reshape(volume, {volume.numel(), 1});
  Tensor gathered = gather_rows(flat, embed_gather_index(cfg, grid, in_d, in_h, in_w));
  Tensor patches = reshape(gathered, {grid.count(), patch_in});
  Tensor tokens = add_rowvec(matmul(patches, m.param("embed.w")), m.param("embed.b"));
  return StageTensor{tokens, grid};
}

StageTensor downsample(const StageTensor& s, const Tensor& w, const Tensor& b) {
  const GridDims& g = s.grid;
  if (g.d % 2 || g.h % 2 || g.w % 2) {
    throw ConfigurationError("downsample: grid " + std::to_string(g.d) + "x" +
                             std::to_string(g.h) + "x" + std::to_string(g.w) +
                             " has an odd extent");
  }
  std::size_t c = s.tokens.extent(1);
  GridDims out{g.d / 2, g.h / 2, g.w / 2};
  Tensor gathered = gather_rows(s.tokens, down_gather_index(g));
  Tensor merged = reshape(gathered, {out.count(), 8 * c});
  Tensor tokens = add_rowvec(matmul(merged, w), b);
  return StageTensor{tokens, out};
}

StageTensor upsample(const StageTensor& s, const Tensor& w, const Tensor& b) {
  std::size_t c = s.tokens.extent(1);
  if (c % 2) throw ConfigurationError("upsample: channel width must be even");
  GridDims out{s.grid.d * 2, s.grid.h * 2, s.grid.w * 2};
  Tensor projected = add_rowvec(matmul(s.tokens, w), b);  // [N, 8*(c/2)]
  Tensor children = reshape(projected, {s.grid.count() * 8, c / 2});
  Tensor tokens = gather_rows(children, up_scatter_index(s.grid));
  return StageTensor{tokens, out};
}

StageTensor skip_fuse(const StageTensor& dec, const StageTensor& enc, const Tensor& w,
                      const Tensor& b) {
  if (!(dec.grid == enc.grid) || dec.tokens.shape() != enc.tokens.shape()) {
    throw DimensionError("skip_fuse: decoder " + shape_str(dec.tokens.shape()) +
                         " and encoder " + shape_str(enc.tokens.shape()) + " do not match");
  }
  Tensor merged = concat_cols(dec.tokens, enc.tokens);
  Tensor tokens = add_rowvec(matmul(merged, w), b);
  return StageTensor{tokens, dec.grid};
}

Tensor patch_expand_head(const Model& m, const StageTensor& s) {
  const ModelConfig& cfg = m.cfg;
  std::size_t in_d = s.grid.d * cfg.patch_d;
  std::size_t in_h = s.grid.h * cfg.patch_h;
  std::size_t in_w = s.grid.w * cfg.patch_w;
  if (s.tokens.extent(1) != cfg.base_channels) {
    throw ContractError("patch_expand_head: expected stage-1 tokens of width " +
                        std::to_string(cfg.base_channels) + ", got " +
                        shape_str(s.tokens.shape()));
  }
  std::size_t patch_sp = cfg.patch_d * cfg.patch_h * cfg.patch_w;
  std::size_t ch = cfg.head_width();

  Tensor projected = add_rowvec(matmul(s.tokens, m.param("expand.w")), m.param("expand.b"));
  Tensor per_slot = reshape(projected, {s.grid.count() * patch_sp, ch});
  Tensor voxels = gather_rows(per_slot, expand_scatter_index(cfg, s.grid, in_d, in_h, in_w));
  Tensor logits = add_rowvec(matmul(voxels, m.param("head.w")), m.param("head.b"));
  return reshape(transpose2d(logits), {cfg.num_classes, in_d, in_h, in_w});
}

Tensor run_block(const Model& m, const std::string& prefix, const StageTensor& s, int stage) {
  const ModelConfig& cfg = m.cfg;
  UnitDims unit = cfg.stage_unit(stage);
  DpeParams dpe{m.param(prefix + ".dpe.k"), m.param(prefix + ".dpe.b")};
  Tensor t = dpe_forward(s.tokens, s.grid, dpe);
  auto scope_params = [&](const std::string& mod, Scope scope) {
    ScopeModuleParams p;
    p.scope = scope;
    p.ln_eps = cfg.ln_eps;
    p.norm1_gamma = m.param(mod + ".n1.g");
    p.norm1_beta = m.param(mod + ".n1.b");
    p.attn.heads = cfg.heads[stage];
    p.attn.wq = m.param(mod + ".attn.wq");
    p.attn.bq = m.param(mod + ".attn.bq");
    p.attn.wk = m.param(mod + ".attn.wk");
    p.attn.bk = m.param(mod + ".attn.bk");
    p.attn.wv = m.param(mod + ".attn.wv");
    p.attn.bv = m.param(mod + ".attn.bv");
    p.attn.wo = m.param(mod + ".attn.wo");
    p.attn.bo = m.param(mod + ".attn.bo");
    p.norm2_gamma = m.param(mod + ".n2.g");
    p.norm2_beta = m.param(mod + ".n2.b");
    p.mlp.ratio = cfg.mlp_ratio;
    p.mlp.w1 = m.param(mod + ".mlp.w1");
    p.mlp.b1 = m.param(mod + ".mlp.b1");
    p.mlp.w2 = m.param(mod + ".mlp.w2");
    p.mlp.b2 = m.param(mod + ".mlp.b2");
    return p;
  };
  for (std::size_t pair = 0; pair < cfg.depths[stage]; ++pair) {
    std::string base = prefix + ".p" + std::to_string(pair);
    t = lsm_forward(t, s.grid, unit, scope_params(base + ".lsm", Scope::kLocal));
    t = gsm_forward(t, s.grid, unit, scope_params(base + ".gsm", Scope::kGlobal));
  }
  return t;
}

Tensor forward(const Model& m, const Tensor& volume) {
  const ModelConfig& cfg = m.cfg;
  if (volume.rank() != 4 || volume.extent(0) != cfg.in_channels ||
      volume.extent(1) != cfg.input_d || volume.extent(2) != cfg.input_h ||
      volume.extent(3) != cfg.input_w) {
    throw DimensionError("forward: volume " + shape_str(volume.shape()) +
                         " does not match configured input");
  }
  StageTensor s = patch_embed(m, volume);
  std::vector<StageTensor> enc(ModelConfig::kStages);
  for (int stage = 0; stage < ModelConfig::kStages; ++stage) {
    std::string id = std::to_string(stage + 1);
    s.tokens = run_block(m, "enc" + id, s, stage);
    enc[stage] = s;
    if (stage < 3) {
      s = downsample(s, m.param("down" + id + ".w"), m.param("down" + id + ".b"));
    }
  }
  for (int stage = 2; stage >= 0; --stage) {
    std::string id = std::to_string(stage + 1);
    s = upsample(s, m.param("up" + id + ".w"), m.param("up" + id + ".b"));
    s = skip_fuse(s, enc[stage], m.param("fuse" + id + ".w"), m.param("fuse" + id + ".b"));
    s.tokens = run_block(m, "dec" + id, s, stage);
  }
  return patch_expand_head(m, s);
}

std::vector<StagePlan> encoder_plan(const ModelConfig& cfg) {
  std::vector<StagePlan> plan;
  for (int s = 0; s < ModelConfig::kStages; ++s) {
    plan.push_back({cfg.stage_grid(s), cfg.stage_channels(s)});
  }
  return plan;
}

std::vector<StagePlan> decoder_plan(const ModelConfig& cfg) {
  std::vector<StagePlan> plan;
  for (int s = 2; s >= 0; --s) {
    plan.push_back({cfg.stage_grid(s), cfg.stage_channels(s)});
  }
  return plan;
}

}  // namespace dformer
