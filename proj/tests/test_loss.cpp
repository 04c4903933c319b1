#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dformer/gradcheck.hpp"
#include "dformer/loss.hpp"
#include "dformer/rng.hpp"
#include "oracles.hpp"

using namespace dformer;
using oracles::random_tensor;

namespace {

LabelVolume labels_from(std::size_t d, std::size_t h, std::size_t w,
                        std::vector<std::uint8_t> v) {
  LabelVolume out;
  out.d = d;
  out.h = h;
  out.w = w;
  out.v = std::move(v);
  return out;
}

// exact one-hot probabilities for the given labels
Tensor onehot_probs(const LabelVolume& labels, std::size_t k) {
  std::size_t vox = labels.count();
  std::vector<double> p(k * vox, 0.0);
  for (std::size_t v = 0; v < vox; ++v) p[labels.v[v] * vox + v] = 1.0;
  return Tensor(Shape{k, labels.d, labels.h, labels.w}, std::move(p));
}

}  // namespace

TEST_CASE("perfect prediction scores -1 up to the dice smoothing") {
  LabelVolume truth = labels_from(1, 2, 2, {0, 1, 1, 0});
  Tensor probs = onehot_probs(truth, 2);
  double loss = combined_loss(probs, truth, 2).scalar_value();
  CHECK(loss == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(loss >= -1.0);
}

TEST_CASE("confident wrong prediction stays finite through the clamp") {
  LabelVolume truth = labels_from(1, 1, 2, {1, 1});
  // prediction puts all mass on class 0 where truth is class 1
  Tensor probs(Shape{2, 1, 1, 2}, {1.0, 1.0, 0.0, 0.0});
  double loss = combined_loss(probs, truth, 2).scalar_value();
  CHECK(std::isfinite(loss));
  // CE term is 0.5 * log(1e-7) averaged over voxels and classes, negated
  double expected_ce = 0.5 * std::log(1e-7) / 2.0;
  double expected_dice = 0.0 / (2.0 + 0.0 + 1e-5);
  CHECK(loss == doctest::Approx(-(expected_ce + expected_dice)).epsilon(1e-10));
  CHECK(loss > 4.0);  // large, not infinite
}

TEST_CASE("hand-computed 2-class 2x2x1 example") {
  LabelVolume truth = labels_from(2, 2, 1, {1, 0, 1, 0});
  std::vector<double> p1{0.8, 0.2, 0.7, 0.4};
  std::vector<double> data(8);
  for (int v = 0; v < 4; ++v) {
    data[v] = 1.0 - p1[v];  // class 0 plane
    data[4 + v] = p1[v];    // class 1 plane
  }
  Tensor probs(Shape{2, 2, 2, 1}, data);
  double loss = combined_loss(probs, truth, 2).scalar_value();

  // scalar recomputation of the same quantity
  double ce = (std::log(0.8) + std::log(0.8) + std::log(0.7) + std::log(0.6)) / 8.0;
  double dice = 2.0 * (0.8 + 0.7) / (2.0 + (0.8 + 0.2 + 0.7 + 0.4) + 1e-5);
  CHECK(loss == doctest::Approx(-(0.5 * ce + dice)).epsilon(1e-12));
  CHECK(loss == doctest::Approx(-0.6495938030297094).epsilon(1e-12));
}

TEST_CASE("batch averaging and error contracts") {
  LabelVolume truth = labels_from(1, 2, 2, {0, 1, 1, 0});
  Tensor perfect = onehot_probs(truth, 2);
  LabelVolume truth2 = labels_from(1, 2, 2, {1, 1, 0, 0});
  Tensor perfect2 = onehot_probs(truth2, 2);
  double batch =
      combined_loss({perfect, perfect2}, {&truth, &truth2}, 2).scalar_value();
  double single = combined_loss(perfect, truth, 2).scalar_value();
  CHECK(batch == doctest::Approx(single).epsilon(1e-9));

  CHECK_THROWS_AS(combined_loss(perfect, truth, 1), ConfigurationError);
  LabelVolume wrong_dims = labels_from(1, 2, 1, {0, 1});
  CHECK_THROWS_AS(combined_loss(perfect, wrong_dims, 2), DimensionError);
  // probabilities that do not sum to one per voxel are rejected
  Tensor bad(Shape{2, 1, 2, 2}, {0.9, 1, 0, 0, 0.9, 0, 1, 1});
  CHECK_THROWS_AS(combined_loss(bad, truth, 2), NumericError);
}

TEST_CASE("loss decreases as probability mass moves to the correct class") {
  Rng rng(61);
  for (int trial = 0; trial < 5; ++trial) {
    std::size_t d = 2, h = 2, w = 2, vox = 8;
    std::vector<std::uint8_t> labels(vox);
    for (auto& l : labels) l = static_cast<std::uint8_t>(rng.next_below(2));
    LabelVolume truth = labels_from(d, h, w, labels);

    double prev = 1e9;
    for (double correct_mass : {0.5, 0.6, 0.75, 0.9, 0.99}) {
      std::vector<double> p(2 * vox);
      for (std::size_t v = 0; v < vox; ++v) {
        p[truth.v[v] * vox + v] = correct_mass;
        p[(1 - truth.v[v]) * vox + v] = 1.0 - correct_mass;
      }
      double loss = combined_loss(Tensor(Shape{2, d, h, w}, p), truth, 2).scalar_value();
      CHECK(loss < prev);
      CHECK(loss >= -1.0);
      prev = loss;
    }
  }
}

TEST_CASE("loss gradient w.r.t. logits matches finite differences") {
  Rng rng(62);
  LabelVolume truth = labels_from(1, 2, 2, {0, 1, 1, 0});
  Tensor logits0 = random_tensor(rng, {2, 1, 2, 2}, -1.0, 1.0);

  Tape tape;
  Tensor logits = logits0;
  tape.watch(logits);
  Tensor loss = combined_loss(class_softmax(logits), truth, 2);
  auto grads = tape.backward(loss);
  Tensor fd = finite_diff_oracle(
      [&](const Tensor& probe) {
        return combined_loss(class_softmax(probe), truth, 2).scalar_value();
      },
      logits0);
  CHECK(max_rel_error(grads.at(logits.node()), fd) < 1e-4);
}

TEST_CASE("class_softmax normalizes over the class axis") {
  Rng rng(63);
  Tensor logits = random_tensor(rng, {3, 2, 2, 2}, -2.0, 2.0);
  Tensor probs = class_softmax(logits);
  std::size_t vox = 8;
  for (std::size_t v = 0; v < vox; ++v) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 3; ++c) sum += probs.value_at(c * vox + v);
    CHECK(std::fabs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("dice_score set cases") {
  LabelVolume a = labels_from(1, 2, 4, {1, 1, 0, 0, 1, 0, 0, 0});
  CHECK(dice_score(a, a, 1, 2) == 1.0);

  LabelVolume b = labels_from(1, 2, 4, {0, 0, 1, 1, 0, 1, 1, 1});
  CHECK(dice_score(a, b, 1, 2) == 0.0);

  // |T| = 8, |P| = 4, P inside T -> 2*4/12
  LabelVolume t8 = labels_from(2, 2, 4, {1, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0});
  LabelVolume p4 = labels_from(2, 2, 4, {1, 1, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0});
  CHECK(dice_score(p4, t8, 1, 2) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

  // both empty -> 1 by convention
  LabelVolume zero = labels_from(1, 2, 4, {0, 0, 0, 0, 0, 0, 0, 0});
  CHECK(dice_score(zero, zero, 1, 2) == 1.0);

  CHECK_THROWS_AS(dice_score(a, b, 2, 2), ParameterError);
  CHECK_THROWS_AS(dice_score(a, labels_from(1, 2, 2, {0, 0, 0, 0}), 1, 2), DimensionError);
}

TEST_CASE("dice_score is symmetric and permutation invariant") {
  Rng rng(64);
  std::size_t vox = 16;
  std::vector<std::uint8_t> pa(vox), pb(vox);
  for (std::size_t i = 0; i < vox; ++i) {
    pa[i] = static_cast<std::uint8_t>(rng.next_below(3));
    pb[i] = static_cast<std::uint8_t>(rng.next_below(3));
  }
  LabelVolume a = labels_from(2, 2, 4, pa);
  LabelVolume b = labels_from(2, 2, 4, pb);
  for (std::size_t cls = 1; cls < 3; ++cls) {
    CHECK(dice_score(a, b, cls, 3) == dice_score(b, a, cls, 3));
  }

  // apply one permutation to both volumes
  std::vector<std::size_t> perm(vox);
  for (std::size_t i = 0; i < vox; ++i) perm[i] = i;
  for (std::size_t i = 0; i + 1 < vox; ++i) {
    std::size_t j = i + rng.next_below(vox - i);
    std::swap(perm[i], perm[j]);
  }
  std::vector<std::uint8_t> qa(vox), qb(vox);
  for (std::size_t i = 0; i < vox; ++i) {
    qa[i] = pa[perm[i]];
    qb[i] = pb[perm[i]];
  }
  LabelVolume a2 = labels_from(2, 2, 4, qa);
  LabelVolume b2 = labels_from(2, 2, 4, qb);
  for (std::size_t cls = 1; cls < 3; ++cls) {
    CHECK(dice_score(a2, b2, cls, 3) == dice_score(a, b, cls, 3));
  }
}

TEST_CASE("argmax_labels picks the highest class per voxel") {
  Tensor logits(Shape{3, 1, 1, 2}, {0.1, 5.0, 0.2, 5.0, 0.3, -1.0});
  LabelVolume got = argmax_labels(logits);
  CHECK(got.v[0] == 2);  // 0.3 beats 0.2 and 0.1
  CHECK(got.v[1] == 0);  // tie between class 0 and 1 resolves to the lower id
}
