#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "dformer/attention.hpp"
#include "dformer/gradcheck.hpp"
#include "dformer/rng.hpp"
#include "oracles.hpp"

using namespace dformer;
using oracles::max_abs_diff;
using oracles::random_tensor;

namespace {

// P: x laid out so that local bricks hold the dilated groups; P^-1 undoes it.
void dilation_permutation(const GridDims& grid, const UnitDims& unit,
                          std::vector<std::size_t>& fwd, std::vector<std::size_t>& inv) {
  UnitPartition loc = partition_local(grid, unit);
  UnitPartition glob = partition_global(grid, unit);
  fwd.resize(grid.count());
  inv.resize(grid.count());
  for (std::size_t i = 0; i < grid.count(); ++i) {
    fwd[i] = glob.inverse_index[loc.forward_index[i]];
    inv[i] = loc.inverse_index[glob.forward_index[i]];
  }
}

void check_bijection(const UnitPartition& p) {
  REQUIRE(p.forward_index.size() == p.grid.count());
  REQUIRE(p.units * p.slots == p.grid.count());
  std::vector<std::size_t> fill(p.units, 0);
  for (std::size_t i = 0; i < p.grid.count(); ++i) {
    CHECK(p.inverse_index[p.forward_index[i]] == i);
    fill[p.unit_of(i)]++;
  }
  for (std::size_t u = 0; u < p.units; ++u) CHECK(fill[u] == p.slots);
}

}  // namespace

TEST_CASE("local partition layout") {
  GridDims grid{6, 6, 6};
  UnitDims unit{3, 3, 3};
  UnitPartition p = partition_local(grid, unit);
  CHECK(p.units == 8);
  CHECK(p.slots == 27);
  CHECK(p.unit_of(0) == 0);
  CHECK(p.slot_of(0) == 0);
  check_bijection(p);

  // degenerate: one unit holding everything in row-major order
  UnitPartition whole = partition_local(grid, UnitDims{6, 6, 6});
  CHECK(whole.units == 1);
  for (std::size_t i = 0; i < grid.count(); ++i) CHECK(whole.forward_index[i] == i);

  // grid 4x2x2, unit 2x2x2: patch (2,0,0) lands in unit 1 slot 0
  UnitPartition two = partition_local(GridDims{4, 2, 2}, UnitDims{2, 2, 2});
  CHECK(two.units == 2);
  std::size_t patch = (2 * 2 + 0) * 2 + 0;
  CHECK(two.unit_of(patch) == 1);
  CHECK(two.slot_of(patch) == 0);

  CHECK_THROWS_WITH_AS(partition_local(GridDims{5, 4, 4}, UnitDims{2, 2, 2}),
                       doctest::Contains("depth"), ConfigurationError);
}

TEST_CASE("global partition layout") {
  GridDims grid{6, 6, 6};
  UnitDims unit{3, 3, 3};
  UnitPartition p = partition_global(grid, unit);
  CHECK(p.units == 8);
  // unit 0 holds the patches at all-even coordinates
  for (std::size_t pd = 0; pd < 6; ++pd) {
    for (std::size_t ph = 0; ph < 6; ++ph) {
      for (std::size_t pw = 0; pw < 6; ++pw) {
        std::size_t patch = (pd * 6 + ph) * 6 + pw;
        bool all_even = pd % 2 == 0 && ph % 2 == 0 && pw % 2 == 0;
        CHECK((p.unit_of(patch) == 0) == all_even);
      }
    }
  }
  check_bijection(p);

  // dilation 1 degenerates to the local partition
  UnitPartition g1 = partition_global(grid, UnitDims{6, 6, 6});
  UnitPartition l1 = partition_local(grid, UnitDims{6, 6, 6});
  CHECK(g1.forward_index == l1.forward_index);

  // grid 4x4x4, unit 2x2x2: patches (0,0,0) and (2,0,0) share unit 0, slots 0 and 4
  UnitPartition q = partition_global(GridDims{4, 4, 4}, UnitDims{2, 2, 2});
  CHECK(q.unit_of(0) == 0);
  CHECK(q.slot_of(0) == 0);
  std::size_t patch = (2 * 4 + 0) * 4 + 0;
  CHECK(q.unit_of(patch) == 0);
  CHECK(q.slot_of(patch) == 4);

  CHECK_THROWS_AS(partition_global(GridDims{4, 4, 4}, UnitDims{3, 2, 2}), ConfigurationError);
}

TEST_CASE("partition bijectivity over random valid configs") {
  Rng rng(55);
  for (int trial = 0; trial < 40; ++trial) {
    UnitDims unit{1 + rng.next_below(3), 1 + rng.next_below(3), 1 + rng.next_below(3)};
    GridDims grid{unit.d * (1 + rng.next_below(3)), unit.h * (1 + rng.next_below(3)),
                  unit.w * (1 + rng.next_below(3))};
    check_bijection(partition_local(grid, unit));
    check_bijection(partition_global(grid, unit));
  }
}

TEST_CASE("unit_attention collapses on single slots and equal tokens") {
  Rng rng(20);
  std::size_t c = 4;
  AttentionParams p = oracles::random_attention_params(rng, c, 2);

  // one slot per unit: softmax over a 1x1 score is 1, so out = (x Wv + bv) Wo + bo
  Tensor tokens = random_tensor(rng, {3, 1, c});
  Tensor got = unit_attention(tokens, p);
  Tensor flat = reshape(tokens, {3, c});
  Tensor expected = add_rowvec(matmul(add_rowvec(matmul(flat, p.wv), p.bv), p.wo), p.bo);
  CHECK(max_abs_diff(reshape(got, {3, static_cast<std::size_t>(c)}), expected) < 1e-12);

  // identity projections, zero biases, equal tokens: attention averages equals
  AttentionParams ident;
  ident.heads = 1;
  std::vector<double> eye(c * c, 0.0);
  for (std::size_t i = 0; i < c; ++i) eye[i * c + i] = 1.0;
  ident.wq = Tensor(Shape{c, c}, eye);
  ident.wk = Tensor(Shape{c, c}, eye);
  ident.wv = Tensor(Shape{c, c}, eye);
  ident.wo = Tensor(Shape{c, c}, eye);
  ident.bq = Tensor::zeros({c});
  ident.bk = Tensor::zeros({c});
  ident.bv = Tensor::zeros({c});
  ident.bo = Tensor::zeros({c});
  Tensor pairrow = random_tensor(rng, {1, 1, c});
  std::vector<double> duplicated;
  for (int rep = 0; rep < 2; ++rep) {
    duplicated.insert(duplicated.end(), pairrow.values().begin(), pairrow.values().end());
  }
  Tensor equal_tokens(Shape{1, 2, c}, duplicated);
  Tensor averaged = unit_attention(equal_tokens, ident);
  CHECK(max_abs_diff(averaged, equal_tokens) < 1e-12);

  AttentionParams bad = p;
  bad.heads = 3;  // does not divide 4
  CHECK_THROWS_AS(unit_attention(tokens, bad), ConfigurationError);
}

TEST_CASE("unit_attention matches dense per-head loop oracle") {
  Rng rng(21);
  std::size_t c = 4, slots = 3, units = 2;
  AttentionParams p = oracles::random_attention_params(rng, c, 2);
  Tensor tokens = random_tensor(rng, {units, slots, c});
  Tensor got = unit_attention(tokens, p);

  // all tokens in one flat sequence; allowed iff same unit
  Tensor flat = reshape(tokens, {units * slots, c});
  Tensor ref = oracles::masked_dense_msa(flat, p, [&](std::size_t t, std::size_t s) {
    return t / slots == s / slots;
  });
  CHECK(max_abs_diff(reshape(got, {units * slots, c}), ref) < 1e-10);
}

TEST_CASE("unit_attention is equivariant to slot permutations") {
  Rng rng(22);
  std::size_t c = 6, slots = 4;
  AttentionParams p = oracles::random_attention_params(rng, c, 3);
  Tensor tokens = random_tensor(rng, {2, slots, c});
  Tensor base = unit_attention(tokens, p);

  std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<std::size_t> rows;
  for (std::size_t u = 0; u < 2; ++u) {
    for (std::size_t s : perm) rows.push_back(u * slots + s);
  }
  Tensor permuted_in = reshape(gather_rows(reshape(tokens, {2 * slots, c}), rows), {2, slots, c});
  Tensor permuted_out = unit_attention(permuted_in, p);
  Tensor expected = reshape(gather_rows(reshape(base, {2 * slots, c}), rows), {2, slots, c});
  CHECK(max_abs_diff(permuted_out, expected) < 1e-12);
}

TEST_CASE("ls_msa equals dense MSA when the unit covers the grid") {
  Rng rng(23);
  GridDims grid{2, 2, 2};
  std::size_t c = 4;
  AttentionParams p = oracles::random_attention_params(rng, c, 2);
  Tensor x = random_tensor(rng, {grid.count(), c});
  Tensor local = ls_msa(x, grid, UnitDims{2, 2, 2}, p);
  Tensor dense = oracles::masked_dense_msa(x, p, [](std::size_t, std::size_t) { return true; });
  CHECK(max_abs_diff(local, dense) < 1e-10);
}

TEST_CASE("ls_msa: independent bricks with identical content produce identical outputs") {
  Rng rng(24);
  GridDims grid{4, 2, 2};
  UnitDims unit{2, 2, 2};
  std::size_t c = 4;
  AttentionParams p = oracles::random_attention_params(rng, c, 2);
  UnitPartition part = partition_local(grid, unit);

  Tensor brick = random_tensor(rng, {8, c});
  std::vector<double> data(grid.count() * c);
  for (std::size_t i = 0; i < grid.count(); ++i) {
    std::size_t slot = part.slot_of(i);
    for (std::size_t j = 0; j < c; ++j) data[i * c + j] = brick.value_at(slot * c + j);
  }
  Tensor x(Shape{grid.count(), c}, data);
  Tensor y = ls_msa(x, grid, unit, p);
  for (std::size_t i = 0; i < grid.count(); ++i) {
    std::size_t twin = part.inverse_index[(1 - part.unit_of(i)) * part.slots + part.slot_of(i)];
    for (std::size_t j = 0; j < c; ++j) {
      CHECK(y.value_at(i * c + j) == doctest::Approx(y.value_at(twin * c + j)).epsilon(1e-13));
    }
  }
}

TEST_CASE("ls_msa equals block-diagonal masked dense MSA on random configs") {
  Rng rng(25);
  for (int trial = 0; trial < 10; ++trial) {
    UnitDims unit{1 + rng.next_below(2), 1 + rng.next_below(2), 1 + rng.next_below(2)};
    GridDims grid{unit.d * (1 + rng.next_below(2)), unit.h * (1 + rng.next_below(2)),
                  unit.w * (1 + rng.next_below(2))};
    std::size_t heads = 1 + rng.next_below(2);
    std::size_t c = heads * (2 + rng.next_below(2));
    AttentionParams p = oracles::random_attention_params(rng, c, heads);
    Tensor x = random_tensor(rng, {grid.count(), c});

    UnitPartition part = partition_local(grid, unit);
    Tensor got = ls_msa(x, grid, unit, p);
    Tensor ref = oracles::masked_dense_msa(
        x, p, [&](std::size_t t, std::size_t s) { return part.unit_of(t) == part.unit_of(s); });
    CHECK(max_abs_diff(got, ref) < 1e-10);
  }
}

TEST_CASE("gs_msa properties") {
  Rng rng(26);
  std::size_t c = 4;
  AttentionParams p = oracles::random_attention_params(rng, c, 2);

  // dilation 1: gs_msa equals ls_msa exactly
  GridDims small{2, 2, 2};
  Tensor xs = random_tensor(rng, {small.count(), c});
  CHECK(max_abs_diff(gs_msa(xs, small, UnitDims{2, 2, 2}, p),
                     ls_msa(xs, small, UnitDims{2, 2, 2}, p)) == 0.0);

  // permutation-composition oracle
  GridDims grid{4, 4, 4};
  UnitDims unit{2, 2, 2};
  Tensor x = random_tensor(rng, {grid.count(), c});
  std::vector<std::size_t> fwd, inv;
  dilation_permutation(grid, unit, fwd, inv);
  Tensor via_perm = gather_rows(ls_msa(gather_rows(x, fwd), grid, unit, p), inv);
  CHECK(max_abs_diff(gs_msa(x, grid, unit, p), via_perm) < 1e-12);

  // constant input stays constant across patches
  Tensor constant(Shape{grid.count(), c}, std::vector<double>(grid.count() * c, 0.37));
  Tensor out = gs_msa(constant, grid, unit, p);
  for (std::size_t i = 0; i < grid.count(); ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      CHECK(out.value_at(i * c + j) == doctest::Approx(out.value_at(j)).epsilon(1e-13));
    }
  }

  // independent masked-dense oracle over the dilated units
  UnitPartition part = partition_global(grid, unit);
  Tensor ref = oracles::masked_dense_msa(
      x, p, [&](std::size_t t, std::size_t s) { return part.unit_of(t) == part.unit_of(s); });
  CHECK(max_abs_diff(gs_msa(x, grid, unit, p), ref) < 1e-10);

  CHECK_THROWS_AS(gs_msa(x, GridDims{4, 4, 4}, UnitDims{3, 2, 2}, p), ConfigurationError);
}

TEST_CASE("attention complexity formulas") {
  CHECK(attention_complexity(GridDims{2, 2, 2}, 1) == 160);
  CHECK(attention_complexity(GridDims{2, 2, 2}, 1, UnitDims{2, 2, 2}) == 160);
  CHECK(attention_complexity(GridDims{4, 4, 4}, 2, UnitDims{2, 2, 2}) == 3072);

  // matches the instrumented counter, including head-count independence
  Rng rng(27);
  GridDims grid{4, 4, 4};
  UnitDims unit{2, 2, 2};
  for (std::size_t heads : {1ul, 2ul, 4ul}) {
    std::size_t c = 8;
    AttentionParams p = oracles::random_attention_params(rng, c, heads);
    Tensor x = random_tensor(rng, {grid.count(), c});
    FlopCounter& fc = FlopCounter::global();
    fc.enable(true);
    fc.reset();
    ls_msa(x, grid, unit, p);
    CHECK(fc.multiplies() == attention_complexity(grid, c, unit));
    fc.reset();
    gs_msa(x, grid, unit, p);
    CHECK(fc.multiplies() == attention_complexity(grid, c, unit));
    fc.enable(false);
  }
}

TEST_CASE("linear vs quadratic scaling ratios are exact") {
  UnitDims unit{2, 2, 2};
  std::size_t c = 8;
  GridDims g1{4, 4, 4};
  GridDims g2{8, 4, 4};  // doubled patch count
  std::uint64_t base = 4ull * g1.count() * c * c;
  std::uint64_t base2 = 4ull * g2.count() * c * c;
  std::uint64_t ls1 = attention_complexity(g1, c, unit) - base;
  std::uint64_t ls2 = attention_complexity(g2, c, unit) - base2;
  CHECK(ls2 == 2 * ls1);
  std::uint64_t msa1 = attention_complexity(g1, c) - base;
  std::uint64_t msa2 = attention_complexity(g2, c) - base2;
  CHECK(msa2 == 4 * msa1);
}

TEST_CASE("ls_msa dimension errors") {
  Rng rng(28);
  AttentionParams p = oracles::random_attention_params(rng, 4, 2);
  Tensor x = random_tensor(rng, {7, 4});
  CHECK_THROWS_AS(ls_msa(x, GridDims{2, 2, 2}, UnitDims{2, 2, 2}, p), DimensionError);
}

TEST_CASE("attention gradients flow through both partitions") {
  Rng rng(29);
  GridDims grid{2, 2, 2};
  UnitDims unit{1, 2, 2};
  std::size_t c = 4;
  AttentionParams base = oracles::random_attention_params(rng, c, 2);
  Tensor x0 = random_tensor(rng, {grid.count(), c});
  Tensor w = random_tensor(rng, {grid.count(), c});

  for (bool global_scope : {false, true}) {
    Tape tape;
    Tensor x = x0;
    AttentionParams p = base;
    tape.watch(x);
    tape.watch(p.wq);
    tape.watch(p.bv);
    Tensor out = global_scope ? gs_msa(x, grid, unit, p) : ls_msa(x, grid, unit, p);
    auto grads = tape.backward(sum_all(mul(w, out)));

    auto fd_for = [&](const Tensor& probe, int which) {
      AttentionParams q = base;
      Tensor xin = x0;
      if (which == 0) xin = probe;
      if (which == 1) q.wq = probe;
      if (which == 2) q.bv = probe;
      Tensor o = global_scope ? gs_msa(xin, grid, unit, q) : ls_msa(xin, grid, unit, q);
      return sum_all(mul(w, o)).scalar_value();
    };
    CHECK(max_rel_error(grads.at(x.node()),
                        finite_diff_oracle([&](const Tensor& t) { return fd_for(t, 0); }, x0)) <
          1e-4);
    CHECK(max_rel_error(grads.at(p.wq.node()),
                        finite_diff_oracle([&](const Tensor& t) { return fd_for(t, 1); },
                                           base.wq)) < 1e-4);
    CHECK(max_rel_error(grads.at(p.bv.node()),
                        finite_diff_oracle([&](const Tensor& t) { return fd_for(t, 2); },
                                           base.bv)) < 1e-4);
  }
}
