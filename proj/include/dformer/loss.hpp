#pragma once

#include <cstdint>
#include <vector>

#include "dformer/tensor.hpp"

namespace dformer {

// Integer class index per voxel, row-major over (d, h, w).
struct LabelVolume {
  std::size_t d = 0, h = 0, w = 0;
  std::vector<std::uint8_t> v;
  std::size_t count() const { return d * h * w; }
};

// Softmax over the class axis of [K, D, H, W] logits.
Tensor class_softmax(const Tensor& logits);

struct LossOptions {
  double clamp_floor = 1e-7;  // probability floor inside the log
  double dice_eps = 1e-5;     // soft-Dice denominator smoothing
};

// Batch loss: -(1/N) sum_n ( 0.5 * CE_n + Dice_n ), where CE_n is the mean
// over voxels and classes of onehot(Y) * log(clamp(P)) and Dice_n is the soft
// Dice averaged over foreground classes. Lower is better; a perfect
// prediction approaches -1.
Tensor combined_loss(const std::vector<Tensor>& probs,
                     const std::vector<const LabelVolume*>& truths, std::size_t num_classes,
                     const LossOptions& opt = {});

Tensor combined_loss(const Tensor& probs, const LabelVolume& truth, std::size_t num_classes,
                     const LossOptions& opt = {});

// Hard-label Dice similarity 2|P^T| / (|P| + |T|); 1 when both sets are empty.
double dice_score(const LabelVolume& pred, const LabelVolume& truth, std::size_t class_id,
                  std::size_t num_classes);

// Per-voxel argmax over the class axis (lowest class wins ties).
LabelVolume argmax_labels(const Tensor& logits);

}  // namespace dformer
