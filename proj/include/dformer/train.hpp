#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "dformer/data.hpp"
#include "dformer/model.hpp"

namespace dformer {

// lr0 * (1 - step/T)^p; defined on steps 0..T inclusive.
double poly_lr(std::size_t step, const RunConfig& run);

// Classical momentum with coupled decay:
//   v <- momentum*v + (g + weight_decay*theta);  theta <- theta - lr*v
// Parameters and velocities are replaced with fresh tensors.
void sgd_momentum_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                       std::vector<Tensor>& velocity, double lr, double momentum,
                       double weight_decay);

struct EvalClassRow {
  std::size_t case_id = 0;
  std::size_t class_id = 0;
  double dsc = 0.0;
};

struct EvalReport {
  std::vector<EvalClassRow> rows;           // one record per class per case
  std::vector<double> class_mean;           // indexed by class id; [0] unused
  double mean_foreground_dsc = 0.0;
  std::string to_text() const;
};

// Argmax labels per sample (inference batch of 1), hard Dice per foreground
// class, mean across samples then classes.
EvalReport evaluate(const Model& m, const std::vector<VolumeSample>& data);

// Aggregation half of evaluate, for pre-computed label predictions.
EvalReport evaluate_predictions(const std::vector<LabelVolume>& preds,
                                const std::vector<VolumeSample>& data, std::size_t num_classes);

struct TrainResult {
  Model final_model;
  Model best_model;
  double best_dsc = -1.0;
  std::size_t best_step = 0;
  std::size_t steps_run = 0;
  std::vector<std::string> log_lines;  // one record per step
};

// Deterministic loop: seeded shuffle batching, forward, combined loss,
// backward, SGD with the poly schedule. Writes metrics.log plus final and
// best checkpoints into out_dir when it is non-empty.
TrainResult train(const RunConfig& run, const std::vector<VolumeSample>& train_data,
                  const std::vector<VolumeSample>& val_data, const std::string& out_dir,
                  std::ostream* progress = nullptr);

// One metrics record; round-trips exactly through parse_metrics_line.
std::string format_metrics_line(std::size_t step, double lr, double loss);
bool parse_metrics_line(const std::string& line, std::size_t& step, double& lr, double& loss);

}  // namespace dformer
