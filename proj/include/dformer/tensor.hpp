#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dformer/error.hpp"

namespace dformer {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Counts scalar multiply-accumulates performed by matmul and
// depthwise_conv3d. Softmax, normalization, activations, and plain
// elementwise arithmetic never touch the counter, so the measured number is
// directly comparable with the analytic attention formulas.
class FlopCounter {
 public:
  static FlopCounter& global();

  void reset() { multiplies_ = 0; }
  void enable(bool on) { enabled_ = on; }
  bool enabled() const { return enabled_; }
  std::uint64_t multiplies() const { return multiplies_; }
  void add(std::uint64_t n) {
    if (enabled_) multiplies_ += n;
  }

 private:
  std::uint64_t multiplies_ = 0;
  bool enabled_ = false;
};

class Tape;

// Dense row-major float64 tensor. Rank 0 is a scalar. Buffers are shared on
// copy and treated as immutable once an op has returned, so tensors are safe
// to share read-only.
class Tensor {
 public:
  Tensor();  // rank-0 scalar holding 0.0
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);
  Tensor(Shape shape, std::shared_ptr<std::vector<double>> values);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_->size(); }
  std::size_t extent(std::size_t axis) const;
  std::span<const double> values() const { return {data_->data(), data_->size()}; }
  double value_at(std::size_t flat) const { return (*data_)[flat]; }
  double scalar_value() const;

  bool grad_enabled() const { return node_ >= 0; }
  int node() const { return node_; }
  Tape* tape() const { return tape_; }

  const std::shared_ptr<std::vector<double>>& buffer() const { return data_; }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Reverse-mode tape. Nodes are appended in forward order, so every node's
// inputs precede it and one reverse sweep visits each node exactly once.
// A tape drives a single backward pass; it stops recording afterwards.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  using BackwardFn = std::function<void(const std::vector<double>& out_grad,
                                        const std::vector<std::vector<double>*>& in_grads)>;

  // Registers t as a differentiable leaf owned by this tape.
  void watch(Tensor& t);

  // Gradients of the scalar root w.r.t. every watched leaf, keyed by the
  // leaf's node id. Leaves the root does not reach get zero gradients.
  std::unordered_map<int, Tensor> backward(const Tensor& root);

  // Records an op result. `inputs` are node ids aligned with the backward
  // fn's in_grads slots; -1 marks an untracked input (its slot is null).
  void attach(Tensor& out, std::vector<int> inputs, BackwardFn fn);

  bool recording() const { return recording_; }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<int> inputs;
    Shape shape;
    bool leaf = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool recording_ = true;
};

// Elementwise / structural ops. All of them record onto the tape of any
// grad-enabled input; inputs from different tapes are a contract error.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_rowvec(const Tensor& x, const Tensor& v);   // x: [R, C], v: [C]
Tensor concat_cols(const Tensor& a, const Tensor& b);  // [R, Ca] ++ [R, Cb]
Tensor reshape(const Tensor& t, Shape shape);
Tensor permute(const Tensor& t, const std::vector<std::size_t>& axes);
Tensor transpose2d(const Tensor& t);
Tensor gather_rows(const Tensor& t, std::vector<std::size_t> idx);
Tensor gather_rows(const Tensor& t, std::shared_ptr<const std::vector<std::size_t>> idx);
Tensor sum_all(const Tensor& t);
Tensor log_elem(const Tensor& t);
Tensor clamp_min(const Tensor& t, double floor);
Tensor gelu(const Tensor& t);

// Batched matrix product. Shapes [B..., m, k] x [B..., k, n] with equal
// batch extents; adds prod(B)*m*k*n to the flop counter.
Tensor matmul(const Tensor& a, const Tensor& b);

// Row-wise softmax over the last dimension, max-subtracted.
Tensor softmax_lastdim(const Tensor& t);

// LayerNorm over the last dimension with affine (gamma, beta).
Tensor layer_norm(const Tensor& t, const Tensor& gamma, const Tensor& beta, double eps);

// Per-channel 3D correlation with zero padding. t: [C, d, h, w],
// kernels: [C, kd, kh, kw] with odd extents, padding fixed at (k-1)/2 so the
// spatial extents are preserved. Adds C*d*h*w*kd*kh*kw multiplies.
Tensor depthwise_conv3d(const Tensor& t, const Tensor& kernels,
                        const std::array<std::size_t, 3>& padding);

bool all_finite(const Tensor& t);

}  // namespace dformer
