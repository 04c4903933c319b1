#include "dformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace dformer {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

FlopCounter& FlopCounter::global() {
  static FlopCounter counter;
  return counter;
}

// ---------------------------------------------------------------------------
// Tensor

namespace {

std::shared_ptr<std::vector<double>> alloc_buffer(std::size_t n, double fill = 0.0) {
  return std::make_shared<std::vector<double>>(n, fill);
}

void validate_shape(const Shape& s) {
  for (std::size_t e : s) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(s));
  }
}

void check_finite_span(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(op) + ": non-finite value in result");
    }
  }
}

Shape row_major_strides(const Shape& s) {
  Shape st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Common recording tape of the grad-enabled inputs; nullptr when nothing to
// record. Inputs living on different tapes are a usage bug.
Tape* common_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t->grad_enabled()) continue;
    if (tape && t->tape() != tape) {
      throw ContractError("operation mixes tensors from two different tapes");
    }
    tape = t->tape();
  }
  if (tape && !tape->recording()) return nullptr;
  return tape;
}

}  // namespace

Tensor::Tensor() : shape_{}, data_(alloc_buffer(1)) {}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_ = alloc_buffer(shape_numel(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : Tensor(std::move(shape), std::make_shared<std::vector<double>>(std::move(values))) {}

Tensor::Tensor(Shape shape, std::shared_ptr<std::vector<double>> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  validate_shape(shape_);
  if (!data_) throw ContractError("tensor constructed with null buffer");
  if (data_->size() != shape_numel(shape_)) {
    throw DimensionError("buffer length " + std::to_string(data_->size()) +
                         " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, double v) {
  validate_shape(shape);
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, v));
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape_));
  }
  return shape_[axis];
}

double Tensor::scalar_value() const {
  if (numel() != 1) {
    throw ContractError("scalar_value on tensor of shape " + shape_str(shape_));
  }
  return (*data_)[0];
}

bool all_finite(const Tensor& t) {
  for (double x : t.values()) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Tape

void Tape::watch(Tensor& t) {
  if (!recording_) throw ContractError("watch on a consumed tape");
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{{}, t.shape(), true, nullptr});
}

void Tape::attach(Tensor& out, std::vector<int> inputs, BackwardFn fn) {
  if (!recording_) throw ContractError("attach on a consumed tape");
  out.tape_ = this;
  out.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{std::move(inputs), out.shape(), false, std::move(fn)});
}

std::unordered_map<int, Tensor> Tape::backward(const Tensor& root) {
  if (root.tape() != this || root.node() < 0) {
    throw ContractError("backward: root was not recorded on this tape");
  }
  if (root.numel() != 1) {
    throw ContractError("backward: root must be scalar, got shape " + shape_str(root.shape()));
  }
  if (nodes_.empty()) throw ContractError("backward: empty tape");

  std::vector<std::vector<double>> grads(nodes_.size());
  grads[root.node()] = {1.0};

  for (int i = root.node(); i >= 0; --i) {
    Node& node = nodes_[i];
    if (grads[i].empty() || node.leaf) continue;
    std::vector<std::vector<double>*> in_grads;
    in_grads.reserve(node.inputs.size());
    for (int id : node.inputs) {
      if (id < 0) {
        in_grads.push_back(nullptr);
        continue;
      }
      if (grads[id].empty()) grads[id].assign(shape_numel(nodes_[id].shape), 0.0);
      in_grads.push_back(&grads[id]);
    }
    node.backward(grads[i], in_grads);
    grads[i].clear();  // released as soon as it has been propagated
  }

  std::unordered_map<int, Tensor> result;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].leaf) continue;
    if (grads[i].empty()) grads[i].assign(shape_numel(nodes_[i].shape), 0.0);
    result.emplace(static_cast<int>(i), Tensor(nodes_[i].shape, std::move(grads[i])));
  }

  recording_ = false;
  nodes_.clear();
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::size_t n = a.numel();
  auto out = alloc_buffer(n);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out->data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  check_finite_span({po, n}, "add");
  Tensor r(a.shape(), out);
  if (Tape* tape = common_tape({&a, &b})) {
    tape->attach(r, {a.node(), b.node()},
                 [](const std::vector<double>& g, const std::vector<std::vector<double>*>& gi) {
                   for (int s = 0; s < 2; ++s) {
                     if (!gi[s]) continue;
                     for (std::size_t i = 0; i < g.size(); ++i) (*gi[s])[i] += g[i];
                   }
                 });
  }
  return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::size_t n = a.numel();
  auto out = alloc_buffer(n);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out->data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  check_finite_span({po, n}, "sub");
  Tensor r(a.shape(), out);
  if (Tape* tape = common_tape({&a, &b})) {
    tape->attach(r, {a.node(), b.node()},
                 [](const std::vector<double>& g, const std::vector<std::vector<double>*>& gi) {
                   if (gi[0]) {
                     for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                   }
                   if (gi[1]) {
                     for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i];
                   }
                 });
  }
  return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::size_t n = a.numel();
  auto out = alloc_buffer(n);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out->data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  check_finite_span({po, n}, "mul");
  Tensor r(a.shape(), out);
  if (Tape* tape = common_tape({&a, &b})) {
    Tensor sa = a, sb = b;
    tape->attach(
        r, {a.node(), b.node()},
        [sa, sb](const std::vector<double>& g, const std::vector<std::vector<double>*>& gi) {
          const double* va = sa.values().data();
          const double* vb = sb.values().data();
          if (gi[0]) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * vb[i];
          }
          if (gi[1]) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * va[i];
          }
        });
  }
  return r;
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  std::size_t n = a.numel();
  auto out = alloc_buffer(n);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out->data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
  check_finite_span({po, n}, "div");
  Tensor r(a.shape(), out);
  if (Tape* tape = common_tape({&a, &b})) {
    Tensor sb = b, so = r;
    tape->attach(
        r, {a.node(), b.node()},
        [sb, so](const std::vector<double>& g, const std::vector<std::vector<double>*>& gi) {
          const double* vb = sb.values().data();
          const double* vo = so.values().data();
          if (gi[0]) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] / vb[i];
          }
          if (gi[1]) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i] * vo[i] / vb[i];
          }
        });
  }
  return r;
}

Tensor scale(const Tensor& a, double c) {
  std::size_t n = a.numel();
  auto out = alloc_buffer(n);
  const double* pa = a.values().data();
  double* po = out->data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  check_finite_span({po, n}, "scale");
  Tensor r(a.shape(), out);
  if (Tape* tape = common_tape({&a})) {
    tape->attach(r, {a.node()},
                 [c](const std::vector<double>& g, const std::vector<std::vector<double>*>& gi) {
                   if (!gi[0]) return;
                   for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * c;
                 });
  }
  return r;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (x.rank() != 2 || v.rank() != 1 || x.extent(1) != v.extent(0)) {
    throw DimensionError("add_rowvec: shape mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(v.shape()));
  }
  std::size_t rows = x.extent(0), cols = x.extent(1);
  auto out = alloc_buffer(x.numel());
  const double* px = x.values().data();
  const double* pv = v.values().data();
  double* po = out->data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) po[r * cols + c] = px[r * cols + c] + pv[c];
  }
  check_finite_span({po, x.numel()}, "add_rowvec");
  Tensor r(x.shape(), out);
  if (Tape* tape = common_tape({&x, &v})) {
    tape->attach(r, {x.node(), v.node()},
                 [rows, cols](const std::vector<double>& g,
                              const std::vector<std::vector<double>*>& gi) {
                   if (gi[0]) {
                     for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                   }
                   if (gi[1]) {
                     for (std::size_t r2 = 0; r2 < rows; ++r2) {
                       for (std::size_t c = 0; c < cols; ++c) (*gi[1])[c] += g[r2 * cols + c];
                     }
                   }
                 });
  }
  return r;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(0) != b.extent(0)) {
    throw DimensionError("concat_cols: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::size_t rows = a.extent(0), ca = a.extent(1), cb = b.extent(1);
  auto out = alloc_buffer(rows * (ca + cb));
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out->data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::memcpy(po + r * (ca + cb), pa + r * ca, ca * sizeof(double));
    std::memcpy(po + r * (ca + cb) + ca, pb + r * cb, cb * sizeof(double));
  }
  Tensor r(Shape{rows, ca + cb}, out);
  if (Tape* tape = common_tape({&a, &b})) {
    tape->attach(r, {a.node(), b.node()},
                 [rows, ca, cb](const std::vector<double>& g,
                                const std::vector<std::vector<double>*>& gi) {
                   for (std::size_t r2 = 0; r2 < rows; ++r2) {
                     const double* gr = g.data() + r2 * (ca + cb);
                     if (gi[0]) {
                       for (std::size_t c = 0; c < ca; ++c) (*gi[0])[r2 * ca + c] += gr[c];
                     }
                     if (gi[1]) {
                       for (std::size_t c = 0; c < cb; ++c) (*gi[1])[r2 * cb + c] += gr[ca + c];
                     }
                   }
                 });
  }
  return r;
}

Tensor reshape(const Tensor& t, Shape shape) {
  validate_shape(shape);
  if (shape_numel(shape) != t.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(t.shape()) + " as " +
                         shape_str(shape));
  }
  Tensor r(std::move(shape), t.buffer());  // shares the buffer
  if (Tape* tape = common_tape({&t})) {
    tape->attach(r, {t.node()},
                 [](const std::vector<double>& g, const std::vector<std::vector<double>*>& gi) {
                   if (!gi[0]) return;
                   for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                 });
  }
  return r;
}

Tensor permute(const Tensor& t, const std::vector<std::size_t>& axes) {
  std::size_t rank = t.rank();
  if (axes.size() != rank) throw ContractError("permute: axes length != rank");
  std::vector<bool> seen(rank, false);
  for (std::size_t a : axes) {
    if (a >= rank || seen[a]) throw ContractError("permute: axes is not a permutation");
    seen[a] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = t.shape()[axes[i]];
  Shape in_strides = row_major_strides(t.shape());
  // stride to advance in the input when out coordinate i increments
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) step[i] = in_strides[axes[i]];

  std::size_t n = t.numel();
  auto out = alloc_buffer(n);
  const double* pin = t.values().data();
  double* po = out->data();
  std::vector<std::size_t> coord(rank, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    po[o] = pin[src];
    for (std::size_t i = rank; i-- > 0;) {
      if (++coord[i] < out_shape[i]) {
        src += step[i];
        break;
      }
      src -= step[i] * (out_shape[i] - 1);
      coord[i] = 0;
    }
  }
  Tensor r(out_shape, out);
  if (Tape* tape = common_tape({&t})) {
    tape->attach(r, {t.node()},
                 [out_shape, step, rank](const std::vector<double>& g,
                                         const std::vector<std::vector<double>*>& gi) {
                   if (!gi[0]) return;
                   std::vector<std::size_t> c(rank, 0);
                   std::size_t src = 0;
                   for (std::size_t o = 0; o < g.size(); ++o) {
                     (*gi[0])[src] += g[o];
                     for (std::size_t i = rank; i-- > 0;) {
                       if (++c[i] < out_shape[i]) {
                         src += step[i];
                         break;
                       }
                       src -= step[i] * (out_shape[i] - 1);
                       c[i] = 0;
                     }
                   }
                 });
  }
  return r;
}

Tensor transpose2d(const Tensor& t) {
  if (t.rank() != 2) throw DimensionError("transpose2d: need rank 2, got " + shape_str(t.shape()));
  return permute(t, {1, 0});
}

Tensor gather_rows(const Tensor& t, std::vector<std::size_t> idx) {
  return gather_rows(t, std::make_shared<const std::vector<std::size_t>>(std::move(idx)));
}

Tensor gather_rows(const Tensor& t, std::shared_ptr<const std::vector<std::size_t>> idx) {
  if (t.rank() < 2) throw DimensionError("gather_rows: need rank >= 2, got " + shape_str(t.shape()));
  std::size_t rows = t.extent(0);
  std::size_t width = t.numel() / rows;
  for (std::size_t i : *idx) {
    if (i >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(i) + " out of range for " +
                           shape_str(t.shape()));
    }
  }
  Shape out_shape = t.shape();
  out_shape[0] = idx->size();
  if (idx->empty()) throw DimensionError("gather_rows: empty index");
  auto out = alloc_buffer(idx->size() * width);
  const double* pin = t.values().data();
  double* po = out->data();
  for (std::size_t r = 0; r < idx->size(); ++r) {
    std::memcpy(po + r * width, pin + (*idx)[r] * width, width * sizeof(double));
  }
  Tensor r(out_shape, out);
  if (Tape* tape = common_tape({&t})) {
    tape->attach(r, {t.node()},
                 [idx, width](const std::vector<double>& g,
                              const std::vector<std::vector<double>*>& gi) {
                   if (!gi[0]) return;
                   for (std::size_t r2 = 0; r2 < idx->size(); ++r2) {
                     double* dst = gi[0]->data() + (*idx)[r2] * width;
                     const double* src = g.data() + r2 * width;
                     for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
                   }
                 });
  }
  return r;
}

Tensor sum_all(const Tensor& t) {
  double acc = 0.0;
  for (double x : t.values()) acc += x;
  if (!std::isfinite(acc)) throw NumericError("sum_all: non-finite result");
  Tensor r = Tensor::scalar(acc);
  if (Tape* tape = common_tape({&t})) {
    tape->attach(r, {t.node()},
                 [](const std::vector<double>& g, const std::vector<std::vector<double>*>& gi) {
                   if (!gi[0]) return;
                   for (double& x : *gi[0]) x += g[0];
                 });
  }
  return r;
}

Tensor log_elem(const Tensor& t) {
  std::size_t n = t.numel();
  auto out = alloc_buffer(n);
  const double* pt = t.values().data();
  double* po = out->data();
  for (std::size_t i = 0; i < n; ++i) po[i] = std::log(pt[i]);
  check_finite_span({po, n}, "log");
  Tensor r(t.shape(), out);
  if (Tape* tape = common_tape({&t})) {
    Tensor st = t;
    tape->attach(r, {t.node()},
                 [st](const std::vector<double>& g, const std::vector<std::vector<double>*>& gi) {
                   if (!gi[0]) return;
                   const double* v = st.values().data();
                   for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] / v[i];
                 });
  }
  return r;
}

Tensor clamp_min(const Tensor& t, double floor) {
  std::size_t n = t.numel();
  auto out = alloc_buffer(n);
  const double* pt = t.values().data();
  double* po = out->data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pt[i] < floor ? floor : pt[i];
  check_finite_span({po, n}, "clamp_min");
  Tensor r(t.shape(), out);
  if (Tape* tape = common_tape({&t})) {
    Tensor st = t;
    tape->attach(r, {t.node()},
                 [st, floor](const std::vector<double>& g,
                             const std::vector<std::vector<double>*>& gi) {
                   if (!gi[0]) return;
                   const double* v = st.values().data();
                   for (std::size_t i = 0; i < g.size(); ++i) {
                     if (v[i] >= floor) (*gi[0])[i] += g[i];
                   }
                 });
  }
  return r;
}

Tensor gelu(const Tensor& t) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  std::size_t n = t.numel();
  auto out = alloc_buffer(n);
  const double* pt = t.values().data();
  double* po = out->data();
  for (std::size_t i = 0; i < n; ++i) {
    po[i] = 0.5 * pt[i] * (1.0 + std::erf(pt[i] * kInvSqrt2));
  }
  check_finite_span({po, n}, "gelu");
  Tensor r(t.shape(), out);
  if (Tape* tape = common_tape({&t})) {
    Tensor st = t;
    tape->attach(r, {t.node()},
                 [st](const std::vector<double>& g, const std::vector<std::vector<double>*>& gi) {
                   if (!gi[0]) return;
                   const double* v = st.values().data();
                   for (std::size_t i = 0; i < g.size(); ++i) {
                     double x = v[i];
                     double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                     double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                     (*gi[0])[i] += g[i] * (cdf + x * pdf);
                   }
                 });
  }
  return r;
}

// ---------------------------------------------------------------------------
// matmul

namespace {

// C += A * B, row-major, no flop accounting (shared by forward and backward).
void matmul_kernel(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    double* c = C + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      double al = a[l];
      if (al == 0.0) continue;
      const double* b = B + l * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += al * b[j];
    }
  }
}

// dA += G * B^T
void matmul_grad_a(const double* G, const double* B, double* dA, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* g = G + i * n;
    double* da = dA + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double* b = B + l * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += g[j] * b[j];
      da[l] += acc;
    }
  }
}

// dB += A^T * G
void matmul_grad_b(const double* A, const double* G, double* dB, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    const double* g = G + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      double al = a[l];
      if (al == 0.0) continue;
      double* db = dB + l * n;
      for (std::size_t j = 0; j < n; ++j) db[j] += al * g[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank()) {
    throw DimensionError("matmul: incompatible ranks " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::size_t rank = a.rank();
  std::size_t m = a.shape()[rank - 2], k = a.shape()[rank - 1];
  std::size_t k2 = b.shape()[rank - 2], n = b.shape()[rank - 1];
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < rank; ++i) {
    if (a.shape()[i] != b.shape()[i]) {
      throw DimensionError("matmul: batch extents differ " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
    }
    batch *= a.shape()[i];
  }
  if (k != k2) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }

  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  auto out = alloc_buffer(batch * m * n);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out->data();
  for (std::size_t bt = 0; bt < batch; ++bt) {
    matmul_kernel(pa + bt * m * k, pb + bt * k * n, po + bt * m * n, m, k, n);
  }
  FlopCounter::global().add(static_cast<std::uint64_t>(batch) * m * k * n);
  check_finite_span({po, batch * m * n}, "matmul");

  Tensor r(std::move(out_shape), out);
  if (Tape* tape = common_tape({&a, &b})) {
    Tensor sa = a, sb = b;
    tape->attach(r, {a.node(), b.node()},
                 [sa, sb, batch, m, k, n](const std::vector<double>& g,
                                          const std::vector<std::vector<double>*>& gi) {
                   const double* va = sa.values().data();
                   const double* vb = sb.values().data();
                   for (std::size_t bt = 0; bt < batch; ++bt) {
                     const double* gb = g.data() + bt * m * n;
                     if (gi[0]) matmul_grad_a(gb, vb + bt * k * n, gi[0]->data() + bt * m * k, m, k, n);
                     if (gi[1]) matmul_grad_b(va + bt * m * k, gb, gi[1]->data() + bt * k * n, m, k, n);
                   }
                 });
  }
  return r;
}

// ---------------------------------------------------------------------------
// softmax / layer norm

Tensor softmax_lastdim(const Tensor& t) {
  if (t.rank() < 1) throw DimensionError("softmax_lastdim: need rank >= 1");
  std::size_t cols = t.shape().back();
  std::size_t rows = t.numel() / cols;
  auto out = alloc_buffer(t.numel());
  const double* pt = t.values().data();
  double* po = out->data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = pt + r * cols;
    double* y = po + r * cols;
    double mx = x[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      sum += y[c];
    }
    double inv = 1.0 / sum;
    for (std::size_t c = 0; c < cols; ++c) y[c] *= inv;
  }
  check_finite_span({po, t.numel()}, "softmax_lastdim");
  Tensor r(t.shape(), out);
  if (Tape* tape = common_tape({&t})) {
    Tensor sy = r;
    tape->attach(r, {t.node()},
                 [sy, rows, cols](const std::vector<double>& g,
                                  const std::vector<std::vector<double>*>& gi) {
                   if (!gi[0]) return;
                   const double* y = sy.values().data();
                   for (std::size_t r2 = 0; r2 < rows; ++r2) {
                     const double* yr = y + r2 * cols;
                     const double* gr = g.data() + r2 * cols;
                     double dot = 0.0;
                     for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
                     double* dst = gi[0]->data() + r2 * cols;
                     for (std::size_t c = 0; c < cols; ++c) dst[c] += yr[c] * (gr[c] - dot);
                   }
                 });
  }
  return r;
}

Tensor layer_norm(const Tensor& t, const Tensor& gamma, const Tensor& beta, double eps) {
  if (eps <= 0.0) throw ParameterError("layer_norm: eps must be positive");
  if (t.rank() < 1) throw DimensionError("layer_norm: need rank >= 1");
  std::size_t cols = t.shape().back();
  if (gamma.shape() != Shape{cols} || beta.shape() != Shape{cols}) {
    throw DimensionError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match last extent of " +
                         shape_str(t.shape()));
  }
  std::size_t rows = t.numel() / cols;
  auto out = alloc_buffer(t.numel());
  auto xhat = std::make_shared<std::vector<double>>(t.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* pt = t.values().data();
  const double* pg = gamma.values().data();
  const double* pb = beta.values().data();
  double* po = out->data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = pt + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += x[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      double d = x[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t c = 0; c < cols; ++c) {
      double xh = (x[c] - mean) * inv;
      (*xhat)[r * cols + c] = xh;
      po[r * cols + c] = pg[c] * xh + pb[c];
    }
  }
  check_finite_span({po, t.numel()}, "layer_norm");
  Tensor r(t.shape(), out);
  if (Tape* tape = common_tape({&t, &gamma, &beta})) {
    Tensor sg = gamma;
    tape->attach(
        r, {t.node(), gamma.node(), beta.node()},
        [sg, xhat, inv_std, rows, cols](const std::vector<double>& g,
                                        const std::vector<std::vector<double>*>& gi) {
          const double* pg2 = sg.values().data();
          double inv_n = 1.0 / static_cast<double>(cols);
          for (std::size_t r2 = 0; r2 < rows; ++r2) {
            const double* gr = g.data() + r2 * cols;
            const double* xh = xhat->data() + r2 * cols;
            if (gi[1]) {
              for (std::size_t c = 0; c < cols; ++c) (*gi[1])[c] += gr[c] * xh[c];
            }
            if (gi[2]) {
              for (std::size_t c = 0; c < cols; ++c) (*gi[2])[c] += gr[c];
            }
            if (gi[0]) {
              double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
              for (std::size_t c = 0; c < cols; ++c) {
                double dxh = gr[c] * pg2[c];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xh[c];
              }
              double* dst = gi[0]->data() + r2 * cols;
              double inv = (*inv_std)[r2];
              for (std::size_t c = 0; c < cols; ++c) {
                double dxh = gr[c] * pg2[c];
                dst[c] += inv * (dxh - inv_n * sum_dxhat - xh[c] * inv_n * sum_dxhat_xhat);
              }
            }
          }
        });
  }
  return r;
}

// ---------------------------------------------------------------------------
// depthwise 3D convolution

Tensor depthwise_conv3d(const Tensor& t, const Tensor& kernels,
                        const std::array<std::size_t, 3>& padding) {
  if (t.rank() != 4 || kernels.rank() != 4) {
    throw DimensionError("depthwise_conv3d: need [C,d,h,w] and [C,kd,kh,kw], got " +
                         shape_str(t.shape()) + " and " + shape_str(kernels.shape()));
  }
  std::size_t C = t.extent(0), d = t.extent(1), h = t.extent(2), w = t.extent(3);
  std::size_t kd = kernels.extent(1), kh = kernels.extent(2), kw = kernels.extent(3);
  if (kernels.extent(0) != C) {
    throw DimensionError("depthwise_conv3d: channel mismatch " + shape_str(t.shape()) + " vs " +
                         shape_str(kernels.shape()));
  }
  if (kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0) {
    throw ParameterError("depthwise_conv3d: kernel extents must be odd, got " +
                         shape_str(kernels.shape()));
  }
  if (padding != std::array<std::size_t, 3>{(kd - 1) / 2, (kh - 1) / 2, (kw - 1) / 2}) {
    throw ParameterError("depthwise_conv3d: padding must be (k-1)/2 per axis");
  }
  long rd = static_cast<long>(padding[0]), rh = static_cast<long>(padding[1]),
       rw = static_cast<long>(padding[2]);

  auto out = alloc_buffer(t.numel());
  const double* px = t.values().data();
  const double* pk = kernels.values().data();
  double* po = out->data();
  const long ld = static_cast<long>(d), lh = static_cast<long>(h), lw = static_cast<long>(w);
  for (std::size_t c = 0; c < C; ++c) {
    const double* xc = px + c * d * h * w;
    const double* kc = pk + c * kd * kh * kw;
    double* oc = po + c * d * h * w;
    for (long z = 0; z < ld; ++z) {
      for (long y = 0; y < lh; ++y) {
        for (long x = 0; x < lw; ++x) {
          double acc = 0.0;
          for (std::size_t a = 0; a < kd; ++a) {
            long zz = z + static_cast<long>(a) - rd;
            if (zz < 0 || zz >= ld) continue;
            for (std::size_t b = 0; b < kh; ++b) {
              long yy = y + static_cast<long>(b) - rh;
              if (yy < 0 || yy >= lh) continue;
              for (std::size_t e = 0; e < kw; ++e) {
                long xx = x + static_cast<long>(e) - rw;
                if (xx < 0 || xx >= lw) continue;
                acc += xc[(zz * lh + yy) * lw + xx] * kc[(a * kh + b) * kw + e];
              }
            }
          }
          oc[(z * lh + y) * lw + x] = acc;
        }
      }
    }
  }
  FlopCounter::global().add(static_cast<std::uint64_t>(C) * d * h * w * kd * kh * kw);
  check_finite_span({po, t.numel()}, "depthwise_conv3d");

  Tensor r(t.shape(), out);
  if (Tape* tape = common_tape({&t, &kernels})) {
    Tensor sx = t, sk = kernels;
    tape->attach(
        r, {t.node(), kernels.node()},
        [sx, sk, C, d, h, w, kd, kh, kw, rd, rh, rw](
            const std::vector<double>& g, const std::vector<std::vector<double>*>& gi) {
          const double* px2 = sx.values().data();
          const double* pk2 = sk.values().data();
          const long ld = static_cast<long>(d), lh = static_cast<long>(h),
                     lw = static_cast<long>(w);
          for (std::size_t c = 0; c < C; ++c) {
            const double* xc = px2 + c * d * h * w;
            const double* kc = pk2 + c * kd * kh * kw;
            const double* gc = g.data() + c * d * h * w;
            double* dxc = gi[0] ? gi[0]->data() + c * d * h * w : nullptr;
            double* dkc = gi[1] ? gi[1]->data() + c * kd * kh * kw : nullptr;
            for (long z = 0; z < ld; ++z) {
              for (long y = 0; y < lh; ++y) {
                for (long x = 0; x < lw; ++x) {
                  double gv = gc[(z * lh + y) * lw + x];
                  if (gv == 0.0) continue;
                  for (std::size_t a = 0; a < kd; ++a) {
                    long zz = z + static_cast<long>(a) - rd;
                    if (zz < 0 || zz >= ld) continue;
                    for (std::size_t b = 0; b < kh; ++b) {
                      long yy = y + static_cast<long>(b) - rh;
                      if (yy < 0 || yy >= lh) continue;
                      for (std::size_t e = 0; e < kw; ++e) {
                        long xx = x + static_cast<long>(e) - rw;
                        if (xx < 0 || xx >= lw) continue;
                        std::size_t xi = (zz * lh + yy) * lw + xx;
                        std::size_t ki = (a * kh + b) * kw + e;
                        if (dxc) dxc[xi] += gv * kc[ki];
                        if (dkc) dkc[ki] += gv * xc[xi];
                      }
                    }
                  }
                }
              }
            }
          }
        });
  }
  return r;
}

}  // namespace dformer
