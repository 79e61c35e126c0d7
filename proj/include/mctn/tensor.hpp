#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mctn/errors.hpp"

namespace mctn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

// Dense row-major tensor of 64-bit reals. Copies share the underlying
// buffer; `node` ties the value to the currently active Tape (see below).
// A tensor with no tape membership is plain immutable data.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(shape_numel(shape_), fill)) {}

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    if (shape_numel(shape_) != values.size())
      throw ShapeError(cat("tensor: ", values.size(), " values do not fill shape ", shape_str(shape_)));
    data_ = std::make_shared<std::vector<double>>(std::move(values));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  static Tensor ones(Shape s) { return Tensor(std::move(s), 1.0); }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  bool is_scalar() const { return size() == 1; }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  const std::vector<double>& values() const { return *data_; }
  std::vector<double>& values() { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double& operator[](std::size_t i) { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }

  double item() const {
    if (!is_scalar()) throw ShapeError(cat("item: tensor ", shape_str(shape_), " is not scalar"));
    return (*data_)[0];
  }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool v) {
    requires_grad_ = v;
    return *this;
  }

  int node() const { return node_; }
  void set_node(int id) { node_ = id; }

  // Identity of the underlying buffer; used to recognize shared parameters.
  const void* buffer_id() const { return data_.get(); }

  // Deep copy (fresh buffer, detached from any tape).
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    t.requires_grad_ = requires_grad_;
    return t;
  }

  bool all_finite() const {
    for (double v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  bool requires_grad_ = false;
  int node_ = -1;
};

enum class OpKind {
  leaf,
  matmul,
  add,
  sub,
  mul,
  scale,
  tanh,
  sigmoid,
  softmax,
  concat,
  stack_rows,
  slice,
  reshape,
  mse,
  mae,
  cross_entropy,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::tanh: return "tanh";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::softmax: return "softmax";
    case OpKind::concat: return "concat";
    case OpKind::stack_rows: return "stack_rows";
    case OpKind::slice: return "slice";
    case OpKind::reshape: return "reshape";
    case OpKind::mse: return "mse";
    case OpKind::mae: return "mae";
    case OpKind::cross_entropy: return "cross_entropy";
  }
  return "?";
}

// Reverse-mode tape. Nodes are appended in execution order, so parents
// always precede children and a single reverse sweep implements the chain
// rule. Gradient buffers accumulate additively (multi-consumer nodes).
class Tape {
 public:
  struct Node {
    OpKind kind;
    std::vector<int> parents;
    std::size_t out_size;
    // Receives this node's output gradient; pushes into parents via accumulate().
    std::function<void(Tape&, const std::vector<double>&)> backward;
  };

  int push(OpKind kind, std::vector<int> parents, std::size_t out_size,
           std::function<void(Tape&, const std::vector<double>&)> backward) {
    nodes_.push_back(Node{kind, std::move(parents), out_size, std::move(backward)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Node id for a requires-grad leaf tensor, creating it on first use.
  // Keyed by buffer identity so a parameter shared between two consumers
  // (or two models) owns exactly one gradient buffer.
  int leaf(const Tensor& t) {
    auto it = leaf_ids_.find(t.buffer_id());
    if (it != leaf_ids_.end()) return it->second;
    int id = push(OpKind::leaf, {}, t.size(), nullptr);
    leaf_ids_.emplace(t.buffer_id(), id);
    return id;
  }

  void accumulate(int id, const std::vector<double>& g) {
    auto& buf = grads_[static_cast<std::size_t>(id)];
    if (buf.empty()) buf.assign(nodes_[static_cast<std::size_t>(id)].out_size, 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
  }

  void backward(const Tensor& loss) {
    if (!loss.is_scalar())
      throw ShapeError(cat("backward: loss must be scalar, got ", shape_str(loss.shape())));
    if (loss.node() < 0)
      throw ValueError("backward: loss is detached (no tape ancestry)");
    grads_.assign(nodes_.size(), {});
    grads_[static_cast<std::size_t>(loss.node())] = {1.0};
    for (int id = loss.node(); id >= 0; --id) {
      auto& g = grads_[static_cast<std::size_t>(id)];
      if (g.empty()) continue;
      auto& n = nodes_[static_cast<std::size_t>(id)];
      if (n.backward) n.backward(*this, g);
    }
  }

  // Gradient of a leaf tensor after backward(); zeros if unreachable.
  Tensor grad(const Tensor& t) const {
    Tensor g(t.shape());
    auto it = leaf_ids_.find(t.buffer_id());
    if (it == leaf_ids_.end()) return g;
    const auto& buf = grads_[static_cast<std::size_t>(it->second)];
    if (!buf.empty()) g.values() = buf;
    return g;
  }

  bool has_grad(const Tensor& t) const {
    auto it = leaf_ids_.find(t.buffer_id());
    return it != leaf_ids_.end() && !grads_[static_cast<std::size_t>(it->second)].empty();
  }

  std::size_t node_count() const { return nodes_.size(); }

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

 private:
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::unordered_map<const void*, int> leaf_ids_;
};

// RAII activation of a tape on the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& t) : prev_(Tape::active()) { Tape::active() = &t; }
  ~TapeScope() { Tape::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

namespace detail {

inline void check_finite(const Tensor& t, OpKind k) {
  if (!t.all_finite())
    throw ValueError(cat(op_name(k), ": non-finite input value"));
}

// Tape id for an input: existing node id for intermediates, a lazily
// created leaf for requires-grad tensors, -1 for pure constants.
inline int input_id(Tape& tape, const Tensor& t) {
  if (t.node() >= 0) return t.node();
  if (t.requires_grad()) return tape.leaf(t);
  return -1;
}

inline bool wants_grad(const std::vector<const Tensor*>& ins) {
  if (Tape::active() == nullptr) return false;
  for (auto* t : ins)
    if (t->requires_grad() || t->node() >= 0) return true;
  return false;
}

// Record `out` as the result of `kind` over `ins` if grads are wanted.
// The backward callable gets (tape, upstream, parent ids).
inline void record(OpKind kind, const std::vector<const Tensor*>& ins, Tensor& out,
                   std::function<void(Tape&, const std::vector<double>&, const std::vector<int>&)> bw) {
  if (!wants_grad(ins)) return;
  Tape& tape = *Tape::active();
  std::vector<int> ids;
  ids.reserve(ins.size());
  for (auto* t : ins) ids.push_back(input_id(tape, *t));
  int id = tape.push(kind, ids, out.size(),
                     [bw = std::move(bw), ids](Tape& tp, const std::vector<double>& g) { bw(tp, g, ids); });
  out.set_node(id);
  out.set_requires_grad(true);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

// add: equal shapes, or matrix + row-bias ({L,d} + {d}).
inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_finite(a, OpKind::add);
  detail::check_finite(b, OpKind::add);
  const bool same = a.shape() == b.shape();
  const bool bias_row = a.ndim() == 2 && b.ndim() == 1 && a.cols() == b.shape()[0];
  if (!same && !bias_row)
    throw ShapeError(cat("add: shapes ", shape_str(a.shape()), " and ", shape_str(b.shape()), " do not conform"));
  Tensor out(a.shape());
  if (same) {
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  } else {
    const std::size_t d = b.size();
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i % d];
  }
  detail::record(OpKind::add, {&a, &b}, out,
                 [same, an = a.size(), bn = b.size()](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                   if (p[0] >= 0) tp.accumulate(p[0], g);
                   if (p[1] >= 0) {
                     if (same) {
                       tp.accumulate(p[1], g);
                     } else {
                       std::vector<double> gb(bn, 0.0);
                       for (std::size_t i = 0; i < an; ++i) gb[i % bn] += g[i];
                       tp.accumulate(p[1], gb);
                     }
                   }
                 });
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_finite(a, OpKind::sub);
  detail::check_finite(b, OpKind::sub);
  if (a.shape() != b.shape())
    throw ShapeError(cat("sub: shapes ", shape_str(a.shape()), " and ", shape_str(b.shape()), " differ"));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  detail::record(OpKind::sub, {&a, &b}, out,
                 [](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                   if (p[0] >= 0) tp.accumulate(p[0], g);
                   if (p[1] >= 0) {
                     std::vector<double> ng(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) ng[i] = -g[i];
                     tp.accumulate(p[1], ng);
                   }
                 });
  return out;
}

// Elementwise product, equal shapes only.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_finite(a, OpKind::mul);
  detail::check_finite(b, OpKind::mul);
  if (a.shape() != b.shape())
    throw ShapeError(cat("mul: shapes ", shape_str(a.shape()), " and ", shape_str(b.shape()), " differ"));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  detail::record(OpKind::mul, {&a, &b}, out,
                 [a, b](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                   if (p[0] >= 0) {
                     std::vector<double> ga(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * b[i];
                     tp.accumulate(p[0], ga);
                   }
                   if (p[1] >= 0) {
                     std::vector<double> gb(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * a[i];
                     tp.accumulate(p[1], gb);
                   }
                 });
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  detail::check_finite(a, OpKind::scale);
  if (!std::isfinite(c)) throw ValueError("scale: non-finite factor");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * c;
  detail::record(OpKind::scale, {&a}, out,
                 [c](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                   if (p[0] >= 0) {
                     std::vector<double> ga(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * c;
                     tp.accumulate(p[0], ga);
                   }
                 });
  return out;
}

// matmul: (m,k)x(k,n)->(m,n); (m,k)x(k)->(m); (k)x(k,n)->(n).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check_finite(a, OpKind::matmul);
  detail::check_finite(b, OpKind::matmul);
  const bool a_vec = a.ndim() == 1;
  const bool b_vec = b.ndim() == 1;
  if (a_vec && b_vec)
    throw ShapeError(cat("matmul: at least one operand must be a matrix, got ", shape_str(a.shape()), " and ",
                         shape_str(b.shape())));
  const std::size_t m = a_vec ? 1 : a.shape()[0];
  const std::size_t k = a_vec ? a.shape()[0] : a.shape()[1];
  const std::size_t k2 = b_vec ? b.shape()[0] : b.shape()[0];
  const std::size_t n = b_vec ? 1 : b.shape()[1];
  if (k != k2)
    throw ShapeError(cat("matmul: inner dims differ, ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  Shape out_shape;
  if (a_vec)
    out_shape = {n};
  else if (b_vec)
    out_shape = {m};
  else
    out_shape = {m, n};
  Tensor out(out_shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = av[i * k + kk];
      if (aik == 0.0) continue;
      const double* brow = bv.data() + kk * n;
      double* orow = ov.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  detail::record(OpKind::matmul, {&a, &b}, out,
                 [a, b, m, k, n](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                   const auto& av = a.values();
                   const auto& bv = b.values();
                   if (p[0] >= 0) {  // dA = G * B^T
                     std::vector<double> ga(m * k, 0.0);
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t kk = 0; kk < k; ++kk) {
                         double s = 0.0;
                         const double* gr = g.data() + i * n;
                         const double* br = bv.data() + kk * n;
                         for (std::size_t j = 0; j < n; ++j) s += gr[j] * br[j];
                         ga[i * k + kk] = s;
                       }
                     tp.accumulate(p[0], ga);
                   }
                   if (p[1] >= 0) {  // dB = A^T * G
                     std::vector<double> gb(k * n, 0.0);
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t kk = 0; kk < k; ++kk) {
                         const double aik = av[i * k + kk];
                         if (aik == 0.0) continue;
                         const double* gr = g.data() + i * n;
                         double* gbr = gb.data() + kk * n;
                         for (std::size_t j = 0; j < n; ++j) gbr[j] += aik * gr[j];
                       }
                     tp.accumulate(p[1], gb);
                   }
                 });
  return out;
}

inline Tensor tanh_t(const Tensor& a) {
  detail::check_finite(a, OpKind::tanh);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::tanh(a[i]);
  detail::record(OpKind::tanh, {&a}, out,
                 [out](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                   if (p[0] < 0) return;
                   std::vector<double> ga(g.size());
                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * (1.0 - out[i] * out[i]);
                   tp.accumulate(p[0], ga);
                 });
  return out;
}

inline Tensor sigmoid_t(const Tensor& a) {
  detail::check_finite(a, OpKind::sigmoid);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a[i]));
  detail::record(OpKind::sigmoid, {&a}, out,
                 [out](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                   if (p[0] < 0) return;
                   std::vector<double> ga(g.size());
                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * out[i] * (1.0 - out[i]);
                   tp.accumulate(p[0], ga);
                 });
  return out;
}

// Row-wise softmax; a vector is one row. Max-shifted for stability.
inline Tensor softmax(const Tensor& a) {
  detail::check_finite(a, OpKind::softmax);
  const std::size_t nrows = a.ndim() == 2 ? a.shape()[0] : 1;
  const std::size_t ncols = a.ndim() == 2 ? a.shape()[1] : a.size();
  if (ncols == 0) throw ShapeError("softmax: empty input");
  Tensor out(a.shape());
  for (std::size_t r = 0; r < nrows; ++r) {
    const double* x = a.values().data() + r * ncols;
    double* y = out.values().data() + r * ncols;
    double mx = x[0];
    for (std::size_t j = 1; j < ncols; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < ncols; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j < ncols; ++j) y[j] /= z;
  }
  detail::record(OpKind::softmax, {&a}, out,
                 [out, nrows, ncols](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                   if (p[0] < 0) return;
                   std::vector<double> ga(g.size());
                   for (std::size_t r = 0; r < nrows; ++r) {
                     const double* y = out.values().data() + r * ncols;
                     const double* gr = g.data() + r * ncols;
                     double dot = 0.0;
                     for (std::size_t j = 0; j < ncols; ++j) dot += gr[j] * y[j];
                     for (std::size_t j = 0; j < ncols; ++j) ga[r * ncols + j] = y[j] * (gr[j] - dot);
                   }
                   tp.accumulate(p[0], ga);
                 });
  return out;
}

// concat of two vectors, or of two matrices along axis 0 or 1.
inline Tensor concat(const Tensor& a, const Tensor& b, int axis = 0) {
  detail::check_finite(a, OpKind::concat);
  detail::check_finite(b, OpKind::concat);
  Tensor out;
  if (a.ndim() == 1 && b.ndim() == 1) {
    out = Tensor({a.size() + b.size()});
    std::copy(a.values().begin(), a.values().end(), out.values().begin());
    std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<long>(a.size()));
    detail::record(OpKind::concat, {&a, &b}, out,
                   [an = a.size(), bn = b.size()](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                     if (p[0] >= 0) tp.accumulate(p[0], std::vector<double>(g.begin(), g.begin() + static_cast<long>(an)));
                     if (p[1] >= 0) tp.accumulate(p[1], std::vector<double>(g.begin() + static_cast<long>(an), g.end()));
                   });
    return out;
  }
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError(cat("concat: ranks differ, ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  if (axis == 0) {
    if (a.cols() != b.cols())
      throw ShapeError(cat("concat axis 0: column counts differ, ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
    out = Tensor({a.rows() + b.rows(), a.cols()});
    std::copy(a.values().begin(), a.values().end(), out.values().begin());
    std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<long>(a.size()));
    detail::record(OpKind::concat, {&a, &b}, out,
                   [an = a.size(), bn = b.size()](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                     if (p[0] >= 0) tp.accumulate(p[0], std::vector<double>(g.begin(), g.begin() + static_cast<long>(an)));
                     if (p[1] >= 0) tp.accumulate(p[1], std::vector<double>(g.begin() + static_cast<long>(an), g.end()));
                   });
    return out;
  }
  if (a.rows() != b.rows())
    throw ShapeError(cat("concat axis 1: row counts differ, ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  const std::size_t ac = a.cols(), bc = b.cols(), r = a.rows();
  out = Tensor({r, ac + bc});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(a.values().data() + i * ac, ac, out.values().data() + i * (ac + bc));
    std::copy_n(b.values().data() + i * bc, bc, out.values().data() + i * (ac + bc) + ac);
  }
  detail::record(OpKind::concat, {&a, &b}, out,
                 [r, ac, bc](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                   if (p[0] >= 0) {
                     std::vector<double> ga(r * ac);
                     for (std::size_t i = 0; i < r; ++i)
                       std::copy_n(g.data() + i * (ac + bc), ac, ga.data() + i * ac);
                     tp.accumulate(p[0], ga);
                   }
                   if (p[1] >= 0) {
                     std::vector<double> gb(r * bc);
                     for (std::size_t i = 0; i < r; ++i)
                       std::copy_n(g.data() + i * (ac + bc) + ac, bc, gb.data() + i * bc);
                     tp.accumulate(p[1], gb);
                   }
                 });
  return out;
}

// Stack equal-length vectors into a matrix, one per row.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no rows");
  const std::size_t d = rows[0].size();
  std::vector<const Tensor*> ins;
  ins.reserve(rows.size());
  for (const auto& r : rows) {
    detail::check_finite(r, OpKind::stack_rows);
    if (r.ndim() != 1 || r.size() != d)
      throw ShapeError(cat("stack_rows: row shape ", shape_str(r.shape()), " does not match width ", d));
    ins.push_back(&r);
  }
  Tensor out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(rows[i].values().begin(), rows[i].values().end(), out.values().begin() + static_cast<long>(i * d));
  detail::record(OpKind::stack_rows, ins, out,
                 [d](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                   for (std::size_t i = 0; i < p.size(); ++i) {
                     if (p[i] < 0) continue;
                     tp.accumulate(p[i], std::vector<double>(g.begin() + static_cast<long>(i * d),
                                                             g.begin() + static_cast<long>((i + 1) * d)));
                   }
                 });
  return out;
}

// Rows [r0, r1) of a matrix; a single row comes back as a vector.
inline Tensor slice(const Tensor& a, std::size_t r0, std::size_t r1) {
  detail::check_finite(a, OpKind::slice);
  if (a.ndim() != 2) throw ShapeError(cat("slice: expected a matrix, got ", shape_str(a.shape())));
  if (r0 >= r1 || r1 > a.rows())
    throw ShapeError(cat("slice: rows [", r0, ",", r1, ") out of range for ", shape_str(a.shape())));
  const std::size_t d = a.cols();
  Tensor out(r1 - r0 == 1 ? Shape{d} : Shape{r1 - r0, d});
  std::copy_n(a.values().data() + r0 * d, (r1 - r0) * d, out.values().data());
  detail::record(OpKind::slice, {&a}, out,
                 [r0, d, total = a.size()](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                   if (p[0] < 0) return;
                   std::vector<double> ga(total, 0.0);
                   std::copy(g.begin(), g.end(), ga.begin() + static_cast<long>(r0 * d));
                   tp.accumulate(p[0], ga);
                 });
  return out;
}

inline Tensor reshape(const Tensor& a, Shape s) {
  if (shape_numel(s) != a.size())
    throw ShapeError(cat("reshape: ", shape_str(a.shape()), " cannot become ", shape_str(s)));
  Tensor out(std::move(s), a.values());
  detail::record(OpKind::reshape, {&a}, out,
                 [](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                   if (p[0] >= 0) tp.accumulate(p[0], g);
                 });
  return out;
}

// Mean squared error over all elements; scalar result.
inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::check_finite(a, OpKind::mse);
  detail::check_finite(b, OpKind::mse);
  if (a.shape() != b.shape())
    throw ShapeError(cat("mse: shapes ", shape_str(a.shape()), " and ", shape_str(b.shape()), " differ"));
  const std::size_t n = a.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  detail::record(OpKind::mse, {&a, &b}, out,
                 [a, b, n](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                   const double c = 2.0 * g[0] / static_cast<double>(n);
                   if (p[0] >= 0) {
                     std::vector<double> ga(n);
                     for (std::size_t i = 0; i < n; ++i) ga[i] = c * (a[i] - b[i]);
                     tp.accumulate(p[0], ga);
                   }
                   if (p[1] >= 0) {
                     std::vector<double> gb(n);
                     for (std::size_t i = 0; i < n; ++i) gb[i] = -c * (a[i] - b[i]);
                     tp.accumulate(p[1], gb);
                   }
                 });
  return out;
}

// Mean absolute error over all elements; scalar result.
inline Tensor mae(const Tensor& a, const Tensor& b) {
  detail::check_finite(a, OpKind::mae);
  detail::check_finite(b, OpKind::mae);
  if (a.shape() != b.shape())
    throw ShapeError(cat("mae: shapes ", shape_str(a.shape()), " and ", shape_str(b.shape()), " differ"));
  const std::size_t n = a.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(a[i] - b[i]);
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  detail::record(OpKind::mae, {&a, &b}, out,
                 [a, b, n](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                   const double c = g[0] / static_cast<double>(n);
                   auto sgn = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
                   if (p[0] >= 0) {
                     std::vector<double> ga(n);
                     for (std::size_t i = 0; i < n; ++i) ga[i] = c * sgn(a[i] - b[i]);
                     tp.accumulate(p[0], ga);
                   }
                   if (p[1] >= 0) {
                     std::vector<double> gb(n);
                     for (std::size_t i = 0; i < n; ++i) gb[i] = -c * sgn(a[i] - b[i]);
                     tp.accumulate(p[1], gb);
                   }
                 });
  return out;
}

// Categorical cross-entropy of probability rows against one-hot targets,
// averaged over rows. Probabilities below the clamp contribute a flat
// penalty with zero gradient.
inline Tensor cross_entropy(const Tensor& probs, const Tensor& onehot) {
  detail::check_finite(probs, OpKind::cross_entropy);
  detail::check_finite(onehot, OpKind::cross_entropy);
  if (probs.shape() != onehot.shape())
    throw ShapeError(cat("cross_entropy: shapes ", shape_str(probs.shape()), " and ", shape_str(onehot.shape()),
                         " differ"));
  constexpr double kClamp = 1e-12;
  const std::size_t nrows = probs.ndim() == 2 ? probs.shape()[0] : 1;
  const std::size_t n = probs.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (onehot[i] != 0.0) s -= onehot[i] * std::log(std::max(probs[i], kClamp));
  Tensor out = Tensor::scalar(s / static_cast<double>(nrows));
  detail::record(OpKind::cross_entropy, {&probs, &onehot}, out,
                 [probs, onehot, nrows, n](Tape& tp, const std::vector<double>& g, const std::vector<int>& p) {
                   if (p[0] < 0) return;
                   const double c = g[0] / static_cast<double>(nrows);
                   std::vector<double> gp(n, 0.0);
                   for (std::size_t i = 0; i < n; ++i)
                     if (onehot[i] != 0.0 && probs[i] > kClamp) gp[i] = -c * onehot[i] / probs[i];
                   tp.accumulate(p[0], gp);
                 });
  return out;
}

// Uniform dispatcher over the primitive set.
inline Tensor forward_op(OpKind kind, const std::vector<Tensor>& inputs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n)
      throw ShapeError(cat(op_name(kind), ": expected ", n, " inputs, got ", inputs.size()));
  };
  switch (kind) {
    case OpKind::matmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::add: need(2); return add(inputs[0], inputs[1]);
    case OpKind::sub: need(2); return sub(inputs[0], inputs[1]);
    case OpKind::mul: need(2); return mul(inputs[0], inputs[1]);
    case OpKind::tanh: need(1); return tanh_t(inputs[0]);
    case OpKind::sigmoid: need(1); return sigmoid_t(inputs[0]);
    case OpKind::softmax: need(1); return softmax(inputs[0]);
    case OpKind::concat: need(2); return concat(inputs[0], inputs[1]);
    case OpKind::stack_rows: return stack_rows(inputs);
    case OpKind::slice: need(1); return slice(inputs[0], 0, 1);
    case OpKind::reshape: need(1); return reshape(inputs[0], {inputs[0].size()});
    case OpKind::mse: need(2); return mse(inputs[0], inputs[1]);
    case OpKind::mae: need(2); return mae(inputs[0], inputs[1]);
    case OpKind::cross_entropy: need(2); return cross_entropy(inputs[0], inputs[1]);
    case OpKind::scale: need(1); return scale(inputs[0], 1.0);
    case OpKind::leaf: break;
  }
  throw ConfigError(cat("forward_op: kind ", op_name(kind), " is not dispatchable"));
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Max relative error between reverse-mode gradients of f and central finite
// differences, over every element of every parameter. f must be a pure
// function of the parameter values.
inline double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         std::vector<Tensor> params, double eps) {
  if (eps <= 0.0) throw ValueError("grad_check: eps must be positive");
  for (auto& p : params) p.set_requires_grad(true);

  const double base0 = f(params).item();
  const double base1 = f(params).item();
  if (base0 != base1)
    throw ValueError("grad_check: f is not deterministic (two evaluations differ)");

  Tape tape;
  std::vector<Tensor> analytic;
  {
    TapeScope scope(tape);
    Tensor loss = f(params);
    tape.backward(loss);
  }
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(tape.grad(p));

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double keep = p[i];
      p[i] = keep + eps;
      const double up = f(params).item();
      p[i] = keep - eps;
      const double dn = f(params).item();
      p[i] = keep;
      const double numeric = (up - dn) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace mctn
