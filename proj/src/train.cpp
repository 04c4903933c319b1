#include "dformer/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "dformer/checkpoint.hpp"
#include "dformer/rng.hpp"

namespace dformer {

double poly_lr(std::size_t step, const RunConfig& run) {
  if (step > run.max_steps) {
    throw ContractError("poly_lr: step " + std::to_string(step) + " beyond budget " +
                        std::to_string(run.max_steps));
  }
  double frac = 1.0 - double(step) / double(run.max_steps);
  return run.lr0 * std::pow(frac, run.poly_exponent);
}

void sgd_momentum_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                       std::vector<Tensor>& velocity, double lr, double momentum,
                       double weight_decay) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ContractError("sgd_momentum_step: mismatched list lengths");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& theta = params[i];
    const Tensor& g = grads[i];
    const Tensor& v = velocity[i];
    if (theta.shape() != g.shape() || theta.shape() != v.shape()) {
      throw DimensionError("sgd_momentum_step: shape mismatch at tensor " + std::to_string(i) +
                           ": " + shape_str(theta.shape()) + " vs " + shape_str(g.shape()));
    }
    std::size_t n = theta.numel();
    std::vector<double> new_v(n), new_theta(n);
    auto pt = theta.values();
    auto pg = g.values();
    auto pv = v.values();
    for (std::size_t j = 0; j < n; ++j) {
      new_v[j] = momentum * pv[j] + (pg[j] + weight_decay * pt[j]);
      new_theta[j] = pt[j] - lr * new_v[j];
    }
    velocity[i] = Tensor(v.shape(), std::move(new_v));
    params[i] = Tensor(theta.shape(), std::move(new_theta));
  }
}

// ---------------------------------------------------------------------------
// evaluation

std::string EvalReport::to_text() const {
  std::ostringstream os;
  char line[96];
  for (const EvalClassRow& r : rows) {
    std::snprintf(line, sizeof line, "case=%zu class=%zu dsc=%.6f\n", r.case_id, r.class_id,
                  r.dsc);
    os << line;
  }
  for (std::size_t c = 1; c < class_mean.size(); ++c) {
    std::snprintf(line, sizeof line, "class=%zu mean_dsc=%.6f\n", c, class_mean[c]);
    os << line;
  }
  std::snprintf(line, sizeof line, "mean_foreground_dsc=%.6f\n", mean_foreground_dsc);
  os << line;
  return os.str();
}

EvalReport evaluate_predictions(const std::vector<LabelVolume>& preds,
                                const std::vector<VolumeSample>& data, std::size_t num_classes) {
  if (data.empty() || preds.size() != data.size()) {
    throw ContractError("evaluate: prediction/dataset size mismatch");
  }
  EvalReport report;
  report.class_mean.assign(num_classes, 0.0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t c = 1; c < num_classes; ++c) {
      double dsc = dice_score(preds[i], data[i].labels, c, num_classes);
      report.rows.push_back({i, c, dsc});
      report.class_mean[c] += dsc;
    }
  }
  double total = 0.0;
  for (std::size_t c = 1; c < num_classes; ++c) {
    report.class_mean[c] /= double(data.size());
    total += report.class_mean[c];
  }
  report.mean_foreground_dsc = total / double(num_classes - 1);
  return report;
}

EvalReport evaluate(const Model& m, const std::vector<VolumeSample>& data) {
  if (data.empty()) throw ContractError("evaluate: empty dataset");
  std::vector<LabelVolume> preds;
  preds.reserve(data.size());
  for (const VolumeSample& sample : data) {
    preds.push_back(argmax_labels(forward(m, sample.image)));
  }
  return evaluate_predictions(preds, data, m.cfg.num_classes);
}

// ---------------------------------------------------------------------------
// metrics records

std::string format_metrics_line(std::size_t step, double lr, double loss) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "step=%zu lr=%.17g loss=%.17g", step, lr, loss);
  return buf;
}

bool parse_metrics_line(const std::string& line, std::size_t& step, double& lr, double& loss) {
  unsigned long long s = 0;
  if (std::sscanf(line.c_str(), "step=%llu lr=%lg loss=%lg", &s, &lr, &loss) != 3) return false;
  step = static_cast<std::size_t>(s);
  return true;
}

// ---------------------------------------------------------------------------
// training loop

namespace {

void check_dims(const ModelConfig& cfg, const std::vector<VolumeSample>& data, const char* which) {
  for (const VolumeSample& s : data) {
    if (s.labels.d != cfg.input_d || s.labels.h != cfg.input_h || s.labels.w != cfg.input_w) {
      throw DimensionError(std::string("train: ") + which + " sample dims " +
                           std::to_string(s.labels.d) + "x" + std::to_string(s.labels.h) + "x" +
                           std::to_string(s.labels.w) + " do not match the model config");
    }
  }
}

}  // namespace

TrainResult train(const RunConfig& run, const std::vector<VolumeSample>& train_data,
                  const std::vector<VolumeSample>& val_data, const std::string& out_dir,
                  std::ostream* progress) {
  run.validate();
  if (train_data.size() < run.batch_size) {
    throw ContractError("train: dataset smaller than one batch");
  }
  check_dims(run.model, train_data, "training");
  check_dims(run.model, val_data, "validation");

  TrainResult result;
  result.final_model = build_model(run.model, run.seed);
  Model& model = result.final_model;
  std::vector<Tensor> velocity;
  velocity.reserve(model.values.size());
  for (const Tensor& t : model.values) velocity.push_back(Tensor::zeros(t.shape()));

  Rng batch_rng(substream_seed(run.seed, 0x42a7c));
  std::vector<std::size_t> order(train_data.size());
  std::size_t cursor = order.size();  // forces a shuffle on first use
  auto next_index = [&]() {
    if (cursor >= order.size()) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (std::size_t i = 0; i + 1 < order.size(); ++i) {
        std::size_t j = i + batch_rng.next_below(order.size() - i);
        std::swap(order[i], order[j]);
      }
      cursor = 0;
    }
    return order[cursor++];
  };

  result.best_model = model;
  LossOptions loss_opt;
  for (std::size_t step = 0; step < run.max_steps; ++step) {
    double lr = poly_lr(step, run);

    Tape tape;
    for (Tensor& t : model.values) tape.watch(t);

    std::vector<Tensor> probs;
    std::vector<const LabelVolume*> truths;
    probs.reserve(run.batch_size);
    for (std::size_t b = 0; b < run.batch_size; ++b) {
      // batches may span an epoch boundary; the reshuffle keeps this deterministic
      const VolumeSample& sample = train_data[next_index()];
      Tensor logits = forward(model, sample.image);
      probs.push_back(class_softmax(logits));
      truths.push_back(&sample.labels);
    }

    Tensor loss = combined_loss(probs, truths, run.model.num_classes, loss_opt);
    double loss_value = loss.scalar_value();
    if (!std::isfinite(loss_value)) {
      throw NumericError("train: non-finite loss at step " + std::to_string(step));
    }

    auto grad_map = tape.backward(loss);
    std::vector<Tensor> grads;
    grads.reserve(model.values.size());
    for (const Tensor& t : model.values) grads.push_back(grad_map.at(t.node()));
    sgd_momentum_step(model.values, grads, velocity, lr, run.momentum, run.weight_decay);

    result.log_lines.push_back(format_metrics_line(step, lr, loss_value));
    result.steps_run = step + 1;

    bool last = step + 1 == run.max_steps;
    if ((step + 1) % run.eval_every == 0 || last) {
      EvalReport report = evaluate(model, val_data);
      if (report.mean_foreground_dsc > result.best_dsc) {
        result.best_dsc = report.mean_foreground_dsc;
        result.best_step = step + 1;
        result.best_model = model;  // tensors are immutable; a copy is a snapshot
      }
      if (progress) {
        *progress << "step " << step + 1 << "  lr " << lr << "  loss " << loss_value
                  << "  holdout_dsc " << report.mean_foreground_dsc << '\n';
      }
      if (run.target_dsc > 0.0 && result.best_dsc >= run.target_dsc) break;
    }
  }

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream log(out_dir + "/metrics.log", std::ios::binary);
    if (!log) throw FormatError("train: cannot write metrics log in '" + out_dir + "'");
    for (const std::string& line : result.log_lines) log << line << '\n';
    save_checkpoint(out_dir + "/final.ckpt", result.final_model);
    save_checkpoint(out_dir + "/best.ckpt", result.best_model);
  }
  return result;
}

}  // namespace dformer
