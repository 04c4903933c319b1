#include "dformer/analyzer.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <sstream>

#include "dformer/attention.hpp"
#include "dformer/rng.hpp"

namespace dformer {

namespace {

struct Acc {
  ComplexityReport report;
  void add(std::string name, std::uint64_t params, std::uint64_t multiplies) {
    report.components.push_back({std::move(name), params, multiplies});
    report.total_params += params;
    report.total_multiplies += multiplies;
  }
};

std::uint64_t linear_params(std::uint64_t in, std::uint64_t out) { return in * out + out; }

// One scope module (LSM or GSM): two LayerNorms, attention, MLP.
void add_stage(Acc& acc, const std::string& prefix, const ModelConfig& cfg, int stage,
               const GridDims& grid) {
  std::uint64_t c = cfg.stage_channels(stage);
  std::uint64_t n = grid.count();
  std::uint64_t modules = 2 * cfg.depths[stage];  // LSM + GSM per pair
  std::uint64_t kvol = cfg.dpe_kernel_d * cfg.dpe_kernel_h * cfg.dpe_kernel_w;

  acc.add(prefix + ".dpe", c * kvol + c, c * n * kvol);
  acc.add(prefix + ".attn", modules * (4 * c * c + 4 * c),
          modules * attention_complexity(grid, c, cfg.stage_unit(stage)));
  acc.add(prefix + ".mlp",
          modules * (linear_params(c, cfg.mlp_ratio * c) + linear_params(cfg.mlp_ratio * c, c)),
          modules * 2 * cfg.mlp_ratio * n * c * c);
  acc.add(prefix + ".norm", modules * 4 * c, 0);
}

}  // namespace

ComplexityReport analyze_model(const ModelConfig& cfg) {
  return analyze_model(cfg, cfg.input_d, cfg.input_h, cfg.input_w);
}

ComplexityReport analyze_model(const ModelConfig& cfg, std::size_t in_d, std::size_t in_h,
                               std::size_t in_w) {
  cfg.validate();
  GridDims grid = cfg.grid_for_input(in_d, in_h, in_w);
  std::array<GridDims, 4> grids;
  for (int s = 0; s < 4; ++s) {
    grids[s] = grid;
    grid = GridDims{grid.d / 2, grid.h / 2, grid.w / 2};
  }
  // unit divisibility must hold at the analyzed input size as well
  for (int s = 0; s < 4; ++s) {
    UnitDims u = cfg.stage_unit(s);
    if (grids[s].d % u.d || grids[s].h % u.h || grids[s].w % u.w) {
      throw ConfigurationError("stage " + std::to_string(s + 1) + " grid at input " +
                               std::to_string(in_d) + "x" + std::to_string(in_h) + "x" +
                               std::to_string(in_w) + " is not divisible by its unit dims");
    }
  }

  Acc acc;
  std::uint64_t c0 = cfg.base_channels;
  std::uint64_t n0 = grids[0].count();
  std::uint64_t patch_in = cfg.in_channels * cfg.patch_d * cfg.patch_h * cfg.patch_w;
  acc.add("embed", linear_params(patch_in, c0), n0 * patch_in * c0);

  for (int s = 0; s < 4; ++s) {
    add_stage(acc, "enc" + std::to_string(s + 1), cfg, s, grids[s]);
    if (s < 3) {
      std::uint64_t c = cfg.stage_channels(s);
      std::uint64_t n_out = grids[s + 1].count();
      acc.add("down" + std::to_string(s + 1), linear_params(8 * c, 2 * c), n_out * 8 * c * 2 * c);
    }
  }
  for (int s = 2; s >= 0; --s) {
    std::uint64_t c = cfg.stage_channels(s);
    std::uint64_t n_in = grids[s + 1].count();
    std::string id = std::to_string(s + 1);
    acc.add("up" + id, linear_params(2 * c, 8 * c), n_in * 2 * c * 8 * c);
    acc.add("fuse" + id, linear_params(2 * c, c), grids[s].count() * 2 * c * c);
    add_stage(acc, "dec" + id, cfg, s, grids[s]);
  }

  std::uint64_t patch_sp = cfg.patch_d * cfg.patch_h * cfg.patch_w;
  std::uint64_t ch = cfg.head_width();
  std::uint64_t voxels = static_cast<std::uint64_t>(in_d) * in_h * in_w;
  acc.add("expand", linear_params(c0, patch_sp * ch), n0 * c0 * patch_sp * ch);
  acc.add("head", linear_params(ch, cfg.num_classes), voxels * ch * cfg.num_classes);
  return acc.report;
}

std::uint64_t count_params(const ModelConfig& cfg) { return analyze_model(cfg).total_params; }

std::uint64_t count_flops(const ModelConfig& cfg, std::size_t in_d, std::size_t in_h,
                          std::size_t in_w) {
  return analyze_model(cfg, in_d, in_h, in_w).total_multiplies;
}

std::string ComplexityReport::to_text() const {
  std::ostringstream os;
  char line[128];
  std::snprintf(line, sizeof line, "%-12s %16s %20s\n", "component", "params", "multiplies");
  os << line;
  for (const ComponentCount& c : components) {
    std::snprintf(line, sizeof line, "%-12s %16llu %20llu\n", c.name.c_str(),
                  static_cast<unsigned long long>(c.params),
                  static_cast<unsigned long long>(c.multiplies));
    os << line;
  }
  std::snprintf(line, sizeof line, "%-12s %16llu %20llu\n", "total",
                static_cast<unsigned long long>(total_params),
                static_cast<unsigned long long>(total_multiplies));
  os << line;
  return os.str();
}

// ---------------------------------------------------------------------------
// scaling bench

namespace {

AttentionParams random_attention_params(Rng& rng, std::size_t c, std::size_t heads) {
  auto weight = [&] {
    std::vector<double> v(c * c);
    for (double& x : v) x = rng.next_normal() * 0.05;
    return Tensor(Shape{c, c}, std::move(v));
  };
  AttentionParams p;
  p.heads = heads;
  p.wq = weight();
  p.wk = weight();
  p.wv = weight();
  p.wo = weight();
  p.bq = Tensor::zeros({c});
  p.bk = Tensor::zeros({c});
  p.bv = Tensor::zeros({c});
  p.bo = Tensor::zeros({c});
  return p;
}

Tensor random_tokens(Rng& rng, std::size_t n, std::size_t c) {
  std::vector<double> v(n * c);
  for (double& x : v) x = rng.next_normal();
  return Tensor(Shape{n, c}, std::move(v));
}

struct Measured {
  std::uint64_t multiplies = 0;
  double millis = 0.0;
};

Measured run_instrumented(const Tensor& x, const GridDims& grid, const UnitDims& unit,
                          const AttentionParams& p, int repeats) {
  FlopCounter& fc = FlopCounter::global();
  bool was_enabled = fc.enabled();
  fc.enable(true);
  fc.reset();
  (void)ls_msa(x, grid, unit, p);
  Measured m;
  m.multiplies = fc.multiplies();
  fc.enable(false);

  std::vector<double> times;
  times.reserve(repeats);
  for (int r = 0; r < repeats; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    (void)ls_msa(x, grid, unit, p);
    auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  m.millis = times[times.size() / 2];
  fc.enable(was_enabled);
  return m;
}

}  // namespace

std::vector<BenchRow> bench_attention(const std::vector<GridDims>& grids, const UnitDims& unit,
                                      std::size_t channels, int repeats, bool measure_dense) {
  if (repeats < 1) throw ParameterError("bench_attention: repeats must be >= 1");
  std::vector<BenchRow> rows;
  Rng rng(2024);
  for (const GridDims& grid : grids) {
    dilation_for(grid, unit);  // grids must divide evenly
    std::size_t heads = channels % 4 == 0 ? 4 : 1;
    AttentionParams p = random_attention_params(rng, channels, heads);
    Tensor x = random_tokens(rng, grid.count(), channels);

    BenchRow row;
    row.grid = grid;
    row.analytic_msa = attention_complexity(grid, channels);
    row.analytic_ls = attention_complexity(grid, channels, unit);
    Measured ls = run_instrumented(x, grid, unit, p, repeats);
    row.measured_ls = ls.multiplies;
    row.ls_millis = ls.millis;
    if (measure_dense) {
      UnitDims dense{grid.d, grid.h, grid.w};
      Measured msa = run_instrumented(x, grid, dense, p, repeats);
      row.measured_msa = msa.multiplies;
      row.msa_millis = msa.millis;
    }
    rows.push_back(row);
  }
  return rows;
}

std::string bench_table(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  char line[192];
  std::snprintf(line, sizeof line, "%-10s %8s %14s %14s %14s %14s %10s %10s\n", "grid", "patches",
                "msa_analytic", "ls_analytic", "ls_measured", "msa_measured", "ls_ms", "msa_ms");
  os << line;
  for (const BenchRow& r : rows) {
    char grid[32];
    std::snprintf(grid, sizeof grid, "%zux%zux%zu", r.grid.d, r.grid.h, r.grid.w);
    std::snprintf(line, sizeof line, "%-10s %8zu %14llu %14llu %14llu %14llu %10.3f %10.3f\n",
                  grid, r.grid.count(), static_cast<unsigned long long>(r.analytic_msa),
                  static_cast<unsigned long long>(r.analytic_ls),
                  static_cast<unsigned long long>(r.measured_ls),
                  static_cast<unsigned long long>(r.measured_msa), r.ls_millis, r.msa_millis);
    os << line;
  }
  return os.str();
}

}  // namespace dformer
