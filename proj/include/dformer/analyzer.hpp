#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dformer/config.hpp"

namespace dformer {

struct ComponentCount {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t multiplies = 0;
};

// Exact parameter census and forward multiply count, broken down per
// component. Component sums equal the totals by construction (integer
// arithmetic over shapes only; nothing is allocated).
struct ComplexityReport {
  std::vector<ComponentCount> components;
  std::uint64_t total_params = 0;
  std::uint64_t total_multiplies = 0;

  std::string to_text() const;
};

// Multiply counts follow the instrumented convention: one unit per
// multiply-accumulate in linear/attention/convolution work; softmax,
// normalization, and activations are excluded.
ComplexityReport analyze_model(const ModelConfig& cfg);
ComplexityReport analyze_model(const ModelConfig& cfg, std::size_t in_d, std::size_t in_h,
                               std::size_t in_w);

std::uint64_t count_params(const ModelConfig& cfg);
std::uint64_t count_flops(const ModelConfig& cfg, std::size_t in_d, std::size_t in_h,
                          std::size_t in_w);

struct BenchRow {
  GridDims grid;
  std::uint64_t analytic_msa = 0;      // dense attention multiplies
  std::uint64_t analytic_ls = 0;       // unit-scoped attention multiplies
  std::uint64_t measured_ls = 0;       // instrumented ls_msa
  std::uint64_t measured_msa = 0;      // instrumented dense (unit == grid), 0 if skipped
  double ls_millis = 0.0;              // median wall clock over repeats
  double msa_millis = 0.0;
};

// Runs instrumented attention over each grid and tabulates analytic vs
// measured multiplies plus median wall-clock time.
std::vector<BenchRow> bench_attention(const std::vector<GridDims>& grids, const UnitDims& unit,
                                      std::size_t channels, int repeats, bool measure_dense);

std::string bench_table(const std::vector<BenchRow>& rows);

}  // namespace dformer
