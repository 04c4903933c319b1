#include "dformer/loss.hpp"

#include <cmath>

namespace dformer {

Tensor class_softmax(const Tensor& logits) {
  if (logits.rank() != 4) {
    throw DimensionError("class_softmax: need [K, D, H, W], got " + shape_str(logits.shape()));
  }
  std::size_t k = logits.extent(0);
  std::size_t vox = logits.numel() / k;
  Tensor per_voxel = transpose2d(reshape(logits, {k, vox}));  // [V, K]
  Tensor probs = softmax_lastdim(per_voxel);
  return reshape(transpose2d(probs), logits.shape());
}

namespace {

void check_pair(const Tensor& probs, const LabelVolume& truth, std::size_t num_classes) {
  if (probs.rank() != 4 || probs.extent(0) != num_classes) {
    throw DimensionError("combined_loss: probabilities " + shape_str(probs.shape()) +
                         " do not match K=" + std::to_string(num_classes));
  }
  if (probs.extent(1) != truth.d || probs.extent(2) != truth.h || probs.extent(3) != truth.w) {
    throw DimensionError("combined_loss: prediction " + shape_str(probs.shape()) +
                         " vs labels " + std::to_string(truth.d) + "x" + std::to_string(truth.h) +
                         "x" + std::to_string(truth.w));
  }
  for (std::uint8_t label : truth.v) {
    if (label >= num_classes) {
      throw ContractError("combined_loss: label " + std::to_string(label) + " >= K=" +
                          std::to_string(num_classes));
    }
  }
  // per-voxel probabilities must form a distribution
  std::size_t vox = truth.count();
  auto vals = probs.values();
  for (std::size_t vi = 0; vi < vox; ++vi) {
    double sum = 0.0;
    for (std::size_t c = 0; c < num_classes; ++c) sum += vals[c * vox + vi];
    if (std::fabs(sum - 1.0) > 1e-9) {
      throw NumericError("combined_loss: class probabilities sum to " + std::to_string(sum) +
                         " at voxel " + std::to_string(vi));
    }
  }
}

// 0.5 * CE + soft Dice for one sample, as a tape-recorded scalar.
Tensor sample_term(const Tensor& probs, const LabelVolume& truth, std::size_t num_classes,
                   const LossOptions& opt) {
  std::size_t vox = truth.count();
  Tensor flat = reshape(probs, {num_classes, vox});

  // CE = mean over voxels and classes of onehot * log(clamp(p))
  std::vector<double> onehot(num_classes * vox, 0.0);
  for (std::size_t vi = 0; vi < vox; ++vi) onehot[truth.v[vi] * vox + vi] = 1.0;
  Tensor mask(Shape{num_classes, vox}, std::move(onehot));
  Tensor log_p = log_elem(clamp_min(flat, opt.clamp_floor));
  Tensor ce = scale(sum_all(mul(mask, log_p)), 1.0 / double(num_classes * vox));

  // Dice = mean over foreground classes of 2|Y.P| / (|Y| + |P| + eps)
  Tensor dice_sum = Tensor::scalar(0.0);
  for (std::size_t c = 1; c < num_classes; ++c) {
    std::vector<double> class_mask(vox, 0.0);
    double truth_size = 0.0;
    for (std::size_t vi = 0; vi < vox; ++vi) {
      if (truth.v[vi] == c) {
        class_mask[vi] = 1.0;
        truth_size += 1.0;
      }
    }
    Tensor row = gather_rows(flat, std::vector<std::size_t>{c});  // [1, vox]
    Tensor mask_row(Shape{1, vox}, std::move(class_mask));
    Tensor intersection = sum_all(mul(row, mask_row));
    Tensor pred_size = sum_all(row);
    Tensor denom = add(pred_size, Tensor::scalar(truth_size + opt.dice_eps));
    dice_sum = add(dice_sum, div(scale(intersection, 2.0), denom));
  }
  Tensor dice = scale(dice_sum, 1.0 / double(num_classes - 1));
  return add(scale(ce, 0.5), dice);
}

}  // namespace

Tensor combined_loss(const std::vector<Tensor>& probs,
                     const std::vector<const LabelVolume*>& truths, std::size_t num_classes,
                     const LossOptions& opt) {
  if (num_classes < 2) throw ConfigurationError("combined_loss: K must be >= 2");
  if (probs.empty() || probs.size() != truths.size()) {
    throw DimensionError("combined_loss: batch of " + std::to_string(probs.size()) +
                         " predictions vs " + std::to_string(truths.size()) + " labels");
  }
  for (std::size_t i = 0; i < probs.size(); ++i) check_pair(probs[i], *truths[i], num_classes);

  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    total = add(total, sample_term(probs[i], *truths[i], num_classes, opt));
  }
  return scale(total, -1.0 / double(probs.size()));
}

Tensor combined_loss(const Tensor& probs, const LabelVolume& truth, std::size_t num_classes,
                     const LossOptions& opt) {
  return combined_loss(std::vector<Tensor>{probs}, {&truth}, num_classes, opt);
}

double dice_score(const LabelVolume& pred, const LabelVolume& truth, std::size_t class_id,
                  std::size_t num_classes) {
  if (class_id >= num_classes) {
    throw ParameterError("dice_score: class " + std::to_string(class_id) + " >= K=" +
                         std::to_string(num_classes));
  }
  if (pred.d != truth.d || pred.h != truth.h || pred.w != truth.w) {
    throw DimensionError("dice_score: volume dims differ");
  }
  std::size_t inter = 0, p = 0, t = 0;
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    bool in_p = pred.v[i] == class_id;
    bool in_t = truth.v[i] == class_id;
    inter += in_p && in_t;
    p += in_p;
    t += in_t;
  }
  if (p + t == 0) return 1.0;
  return 2.0 * double(inter) / double(p + t);
}

LabelVolume argmax_labels(const Tensor& logits) {
  if (logits.rank() != 4) {
    throw DimensionError("argmax_labels: need [K, D, H, W], got " + shape_str(logits.shape()));
  }
  std::size_t k = logits.extent(0);
  LabelVolume out;
  out.d = logits.extent(1);
  out.h = logits.extent(2);
  out.w = logits.extent(3);
  std::size_t vox = out.count();
  out.v.resize(vox);
  auto vals = logits.values();
  for (std::size_t vi = 0; vi < vox; ++vi) {
    std::size_t best = 0;
    double best_v = vals[vi];
    for (std::size_t c = 1; c < k; ++c) {
      double x = vals[c * vox + vi];
      if (x > best_v) {
        best_v = x;
        best = c;
      }
    }
    out.v[vi] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace dformer
