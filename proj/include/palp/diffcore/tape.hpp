#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "palp/diffcore/kernels.hpp"
#include "palp/diffcore/tensor.hpp"

namespace palp {

class Tape;

/// Handle to a node recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAffine,
  kMatMul,
  kSilu,
  kTanh,
  kConcat,
  kEmbedMean,
  kSum,
  kMean,
  kMse,
  kDot,
  kCustom,
};

/// Backward rule for a user supplied op: given the upstream gradient and the
/// input values, return one gradient per input (same shapes as the inputs).
using CustomBackward = std::function<std::vector<Tensor>(
    const Tensor& upstream, const std::vector<const Tensor*>& inputs)>;

using IndexGroups = std::vector<std::vector<std::size_t>>;

/// Append-only record of primitive ops. Nodes are stored in creation order,
/// which is a topological order, so the reverse sweep is a single pass.
///
/// Leaves created with `leaf()` reference caller-owned tensors; those must
/// outlive the tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable leaf referencing an external tensor. Binding the same tensor
  /// twice returns the same node, so gradients from every use accumulate.
  Var leaf(const Tensor& t) { return push_external(t, true); }

  /// Frozen input referencing an external tensor (no copy, no gradient).
  Var frozen(const Tensor& t) { return push_external(t, false); }

  /// Owned constant.
  Var constant(Tensor t) {
    check_finite(t, "constant");
    Node n;
    n.kind = OpKind::kConstant;
    n.value = std::move(t);
    return push(std::move(n));
  }

  const Tensor& value(Var v) const {
    const Node& n = node(v);
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(Var v) const { return node(v).requires_grad; }
  OpKind kind(Var v) const { return node(v).kind; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse-mode gradient of a scalar root with respect to `leaves`.
  /// Leaves with no path to the root get a zero gradient.
  std::vector<Tensor> gradient(Var root, std::span<const Var> leaves) const;

  // Op recording; see the free functions below for the public surface.
  Var record(OpKind kind, std::vector<std::size_t> inputs, Tensor value, double scalar = 0.0,
             std::shared_ptr<const IndexGroups> groups = nullptr,
             CustomBackward custom = nullptr) {
    check_finite(value, op_name(kind));
    Node n;
    n.kind = kind;
    n.value = std::move(value);
    n.scalar = scalar;
    n.groups = std::move(groups);
    n.custom = std::move(custom);
    for (std::size_t in : inputs) n.requires_grad = n.requires_grad || nodes_.at(in).requires_grad;
    n.inputs = std::move(inputs);
    return push(std::move(n));
  }

  static const char* op_name(OpKind k) {
    switch (k) {
      case OpKind::kLeaf: return "leaf";
      case OpKind::kConstant: return "constant";
      case OpKind::kAdd: return "add";
      case OpKind::kSub: return "sub";
      case OpKind::kMul: return "mul";
      case OpKind::kScale: return "scale";
      case OpKind::kAffine: return "affine";
      case OpKind::kMatMul: return "matmul";
      case OpKind::kSilu: return "silu";
      case OpKind::kTanh: return "tanh";
      case OpKind::kConcat: return "concat";
      case OpKind::kEmbedMean: return "embed_mean";
      case OpKind::kSum: return "sum";
      case OpKind::kMean: return "mean";
      case OpKind::kMse: return "mse";
      case OpKind::kDot: return "dot";
      case OpKind::kCustom: return "custom";
    }
    return "?";
  }

 private:
  struct Node {
    OpKind kind = OpKind::kConstant;
    std::vector<std::size_t> inputs;
    Tensor value;
    const Tensor* external = nullptr;
    double scalar = 0.0;
    bool requires_grad = false;
    std::shared_ptr<const IndexGroups> groups;
    CustomBackward custom;
  };

  static void check_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + what);
  }

  Var push_external(const Tensor& t, bool trainable) {
    if (auto it = external_ids_.find(&t); it != external_ids_.end()) {
      if (nodes_[it->second].requires_grad != trainable) {
        throw Error("tensor bound both as trainable and frozen on one tape");
      }
      return Var{this, it->second};
    }
    check_finite(t, trainable ? "leaf" : "frozen input");
    Node n;
    n.kind = trainable ? OpKind::kLeaf : OpKind::kConstant;
    n.external = &t;
    n.requires_grad = trainable;
    const Var v = push(std::move(n));
    external_ids_.emplace(&t, v.id);
    return v;
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  const Node& node(Var v) const {
    if (v.tape != this) throw Error("variable belongs to a different tape");
    return nodes_.at(v.id);
  }

  const Tensor& val(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  void backward_node(std::size_t id, const Tensor& g, std::vector<Tensor>& grads,
                     std::vector<bool>& has) const;

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> external_ids_;
};

inline const Tensor& Var::value() const {
  if (!tape) throw Error("empty variable");
  return tape->value(*this);
}

inline bool Var::requires_grad() const { return tape && tape->requires_grad(*this); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (!a.tape || a.tape != b.tape) throw Error("operands recorded on different tapes");
  return *a.tape;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Logical [rows, cols] view of a rank-1 or rank-2 tensor.
inline std::pair<std::size_t, std::size_t> as_matrix(const Tensor& t) {
  if (t.rank() == 1) return {1, t.shape()[0]};
  if (t.rank() == 2) return {t.shape()[0], t.shape()[1]};
  throw ShapeError("expected rank 1 or 2 tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---- public op surface -----------------------------------------------------

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::require_same_shape(x, y, "add");
  Tensor out = x;
  out += y;
  return t.record(OpKind::kAdd, {a.id, b.id}, std::move(out));
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::require_same_shape(x, y, "sub");
  Tensor out = x;
  out -= y;
  return t.record(OpKind::kSub, {a.id, b.id}, std::move(out));
}

/// Elementwise product of same-shape tensors.
inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::require_same_shape(x, y, "mul");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return t.record(OpKind::kMul, {a.id, b.id}, std::move(out));
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  out *= s;
  return a.tape->record(OpKind::kScale, {a.id}, std::move(out), s);
}

/// x W^T (+ b). `x` is [in] or [n, in], `w` is [out, in], `b` is [out].
inline Var affine(Var x, Var w, const Var* b = nullptr) {
  Tape& t = detail::same_tape(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2) throw ShapeError("affine: weight must be rank 2");
  const auto [n, in] = detail::as_matrix(xv);
  const std::size_t out_dim = wv.shape()[0];
  if (wv.shape()[1] != in) {
    throw ShapeError("affine: input width " + std::to_string(in) + " vs weight " +
                     shape_str(wv.shape()));
  }
  Shape out_shape = xv.rank() == 1 ? Shape{out_dim} : Shape{n, out_dim};
  Tensor out(out_shape);
  kernels::gemm_nt(xv.data().data(), wv.data().data(), out.data().data(), n, in, out_dim);
  std::vector<std::size_t> inputs{x.id, w.id};
  if (b) {
    detail::same_tape(x, *b);
    const Tensor& bv = b->value();
    if (bv.shape() != Shape{out_dim}) throw ShapeError("affine: bias shape " + shape_str(bv.shape()));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out_dim; ++o) out[i * out_dim + o] += bv[o];
    inputs.push_back(b->id);
  }
  return t.record(OpKind::kAffine, std::move(inputs), std::move(out));
}

inline Var affine(Var x, Var w, Var b) { return affine(x, w, &b); }

/// Matrix product: [m,k] x [k,n] -> [m,n], or [m,k] x [k] -> [m].
inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || (bv.rank() != 1 && bv.rank() != 2))
    throw ShapeError("matmul: unsupported ranks " + shape_str(av.shape()) + " x " +
                     shape_str(bv.shape()));
  const std::size_t m = av.shape()[0], k = av.shape()[1];
  if (bv.shape()[0] != k)
    throw ShapeError("matmul: inner dimension mismatch " + shape_str(av.shape()) + " x " +
                     shape_str(bv.shape()));
  const std::size_t n = bv.rank() == 2 ? bv.shape()[1] : 1;
  Tensor out(bv.rank() == 2 ? Shape{m, n} : Shape{m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      kernels::axpy(out.data().data() + i * n, aip, bv.data().data() + p * n, n);
    }
  return t.record(OpKind::kMatMul, {a.id, b.id}, std::move(out));
}

/// x * sigmoid(x)
inline Var silu(Var a) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * detail::sigmoid(x[i]);
  return a.tape->record(OpKind::kSilu, {a.id}, std::move(out));
}

inline Var tanh(Var a) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  return a.tape->record(OpKind::kTanh, {a.id}, std::move(out));
}

/// Concatenate along the last axis. All parts share rank and leading extent.
inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& t = *parts[0].tape;
  const std::size_t rank = parts[0].value().rank();
  if (rank != 1 && rank != 2) throw ShapeError("concat: rank must be 1 or 2");
  const std::size_t rows = rank == 2 ? parts[0].value().shape()[0] : 1;
  std::size_t width = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    detail::same_tape(parts[0], p);
    const Tensor& v = p.value();
    if (v.rank() != rank || (rank == 2 && v.shape()[0] != rows))
      throw ShapeError("concat: incompatible part " + shape_str(v.shape()));
    width += v.shape().back();
    ids.push_back(p.id);
  }
  Tensor out(rank == 2 ? Shape{rows, width} : Shape{width});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    const std::size_t w = v.shape().back();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) out[r * width + offset + c] = v[r * w + c];
    offset += w;
  }
  return t.record(OpKind::kConcat, std::move(ids), std::move(out));
}

inline Var concat(std::initializer_list<Var> parts) {
  return concat(std::span<const Var>(parts.begin(), parts.size()));
}

/// Row i of the result is the mean of table rows `groups[i]`.
inline Var embed_mean(Var table, IndexGroups groups) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("embed_mean: table must be rank 2");
  const std::size_t vocab = tv.shape()[0], width = tv.shape()[1];
  Tensor out(Shape{groups.size(), width});
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto& g = groups[i];
    if (g.empty()) throw ShapeError("embed_mean: empty index group");
    for (std::size_t r : g) {
      if (r >= vocab) throw ShapeError("embed_mean: row index out of range");
      kernels::axpy(out.data().data() + i * width, 1.0, tv.data().data() + r * width, width);
    }
    const double inv = 1.0 / static_cast<double>(g.size());
    for (std::size_t c = 0; c < width; ++c) out[i * width + c] *= inv;
  }
  return table.tape->record(OpKind::kEmbedMean, {table.id}, std::move(out), 0.0,
                            std::make_shared<const IndexGroups>(std::move(groups)));
}

inline Var sum(Var a) { return a.tape->record(OpKind::kSum, {a.id}, Tensor::scalar(sum(a.value()))); }

inline Var mean(Var a) {
  const Tensor& x = a.value();
  return a.tape->record(OpKind::kMean, {a.id},
                        Tensor::scalar(sum(x) / static_cast<double>(x.size())));
}

/// Mean squared difference over all elements.
inline Var mse(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::require_same_shape(x, y, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return t.record(OpKind::kMse, {a.id, b.id}, Tensor::scalar(s / static_cast<double>(x.size())));
}

/// Full contraction sum(a * b).
inline Var dot(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return t.record(OpKind::kDot, {a.id, b.id}, Tensor::scalar(dot(a.value(), b.value())));
}

/// Op with a caller supplied value and backward rule.
inline Var custom(std::span<const Var> inputs, Tensor value, CustomBackward backward) {
  if (inputs.empty()) throw Error("custom: needs at least one input");
  std::vector<std::size_t> ids;
  for (const Var& v : inputs) {
    detail::same_tape(inputs[0], v);
    ids.push_back(v.id);
  }
  return inputs[0].tape->record(OpKind::kCustom, std::move(ids), std::move(value), 0.0, nullptr,
                                std::move(backward));
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }

/// Gradient of a scalar root with respect to each leaf, in order.
inline std::vector<Tensor> grad(Var root, std::span<const Var> leaves) {
  if (!root.tape) throw Error("grad: empty root");
  return root.tape->gradient(root, leaves);
}

inline std::vector<Tensor> grad(Var root, std::initializer_list<Var> leaves) {
  return grad(root, std::span<const Var>(leaves.begin(), leaves.size()));
}

// ---- reverse sweep ---------------------------------------------------------

inline std::vector<Tensor> Tape::gradient(Var root, std::span<const Var> leaves) const {
  const Tensor& rv = value(root);
  if (rv.size() != 1) throw ShapeError("gradient: root must be scalar, got " + shape_str(rv.shape()));
  for (const Var& l : leaves) node(l);

  std::vector<Tensor> grads(root.id + 1);
  std::vector<bool> has(root.id + 1, false);
  if (nodes_[root.id].requires_grad) {
    grads[root.id] = Tensor(rv.shape(), 1.0);
    has[root.id] = true;
  }
  for (std::size_t id = root.id + 1; id-- > 0;) {
    if (!has[id]) continue;
    const Node& n = nodes_[id];
    if (!grads[id].all_finite()) {
      throw NumericError(std::string("non-finite gradient at ") + op_name(n.kind) + " node " +
                         std::to_string(id));
    }
    if (n.kind == OpKind::kLeaf || n.kind == OpKind::kConstant) continue;
    backward_node(id, grads[id], grads, has);
  }

  std::vector<Tensor> out;
  out.reserve(leaves.size());
  for (const Var& l : leaves) {
    if (l.id <= root.id && has[l.id]) {
      out.push_back(grads[l.id]);
    } else {
      out.emplace_back(value(l).shape(), 0.0);
    }
  }
  return out;
}

inline void Tape::backward_node(std::size_t id, const Tensor& g, std::vector<Tensor>& grads,
                                std::vector<bool>& has) const {
  const Node& n = nodes_[id];
  // Returns the gradient accumulator for input slot k, or nullptr if that
  // input does not need a gradient.
  auto acc = [&](std::size_t k) -> Tensor* {
    const std::size_t in = n.inputs[k];
    if (!nodes_[in].requires_grad) return nullptr;
    if (!has[in]) {
      grads[in] = Tensor(val(in).shape(), 0.0);
      has[in] = true;
    }
    return &grads[in];
  };

  switch (n.kind) {
    case OpKind::kLeaf:
    case OpKind::kConstant:
      return;
    case OpKind::kAdd:
      if (Tensor* ga = acc(0)) *ga += g;
      if (Tensor* gb = acc(1)) *gb += g;
      return;
    case OpKind::kSub:
      if (Tensor* ga = acc(0)) *ga += g;
      if (Tensor* gb = acc(1)) *gb -= g;
      return;
    case OpKind::kMul: {
      const Tensor& a = val(n.inputs[0]);
      const Tensor& b = val(n.inputs[1]);
      if (Tensor* ga = acc(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b[i];
      if (Tensor* gb = acc(1))
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a[i];
      return;
    }
    case OpKind::kScale:
      if (Tensor* ga = acc(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += n.scalar * g[i];
      return;
    case OpKind::kAffine: {
      const Tensor& x = val(n.inputs[0]);
      const Tensor& w = val(n.inputs[1]);
      const auto [rows, in] = detail::as_matrix(x);
      const std::size_t out_dim = w.shape()[0];
      if (Tensor* gx = acc(0))
        kernels::gemm_nn_acc(g.data().data(), w.data().data(), gx->data().data(), rows, in,
                             out_dim);
      if (Tensor* gw = acc(1))
        kernels::gemm_tn_acc(g.data().data(), x.data().data(), gw->data().data(), rows, in,
                             out_dim);
      if (n.inputs.size() > 2) {
        if (Tensor* gb = acc(2))
          for (std::size_t r = 0; r < rows; ++r)
            kernels::axpy(gb->data().data(), 1.0, g.data().data() + r * out_dim, out_dim);
      }
      return;
    }
    case OpKind::kMatMul: {
      const Tensor& a = val(n.inputs[0]);
      const Tensor& b = val(n.inputs[1]);
      const std::size_t m = a.shape()[0], k = a.shape()[1];
      const std::size_t cols = b.rank() == 2 ? b.shape()[1] : 1;
      if (Tensor* ga = acc(0))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p)
            (*ga)[i * k + p] += kernels::dot(g.data().data() + i * cols,
                                             b.data().data() + p * cols, cols);
      if (Tensor* gb = acc(1))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p)
            kernels::axpy(gb->data().data() + p * cols, a[i * k + p],
                          g.data().data() + i * cols, cols);
      return;
    }
    case OpKind::kSilu: {
      const Tensor& x = val(n.inputs[0]);
      if (Tensor* ga = acc(0))
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = detail::sigmoid(x[i]);
          (*ga)[i] += g[i] * (s + x[i] * s * (1.0 - s));
        }
      return;
    }
    case OpKind::kTanh: {
      const Tensor& y = n.value;
      if (Tensor* ga = acc(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * (1.0 - y[i] * y[i]);
      return;
    }
    case OpKind::kConcat: {
      const std::size_t width = n.value.shape().back();
      const std::size_t rows = n.value.size() / width;
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t w = val(n.inputs[k]).shape().back();
        if (Tensor* gk = acc(k))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) (*gk)[r * w + c] += g[r * width + offset + c];
        offset += w;
      }
      return;
    }
    case OpKind::kEmbedMean: {
      if (Tensor* gt = acc(0)) {
        const std::size_t width = n.value.shape()[1];
        const auto& groups = *n.groups;
        for (std::size_t i = 0; i < groups.size(); ++i) {
          const double inv = 1.0 / static_cast<double>(groups[i].size());
          for (std::size_t r : groups[i])
            kernels::axpy(gt->data().data() + r * width, inv, g.data().data() + i * width, width);
        }
      }
      return;
    }
    case OpKind::kSum: {
      if (Tensor* ga = acc(0))
        for (double& v : ga->data()) v += g[0];
      return;
    }
    case OpKind::kMean: {
      if (Tensor* ga = acc(0)) {
        const double s = g[0] / static_cast<double>(ga->size());
        for (double& v : ga->data()) v += s;
      }
      return;
    }
    case OpKind::kMse: {
      const Tensor& a = val(n.inputs[0]);
      const Tensor& b = val(n.inputs[1]);
      const double s = 2.0 * g[0] / static_cast<double>(a.size());
      if (Tensor* ga = acc(0))
        for (std::size_t i = 0; i < a.size(); ++i) (*ga)[i] += s * (a[i] - b[i]);
      if (Tensor* gb = acc(1))
        for (std::size_t i = 0; i < a.size(); ++i) (*gb)[i] -= s * (a[i] - b[i]);
      return;
    }
    case OpKind::kDot: {
      const Tensor& a = val(n.inputs[0]);
      const Tensor& b = val(n.inputs[1]);
      if (Tensor* ga = acc(0))
        for (std::size_t i = 0; i < a.size(); ++i) (*ga)[i] += g[0] * b[i];
      if (Tensor* gb = acc(1))
        for (std::size_t i = 0; i < a.size(); ++i) (*gb)[i] += g[0] * a[i];
      return;
    }
    case OpKind::kCustom: {
      std::vector<const Tensor*> ins;
      for (std::size_t in : n.inputs) ins.push_back(&val(in));
      std::vector<Tensor> parts = n.custom(g, ins);
      if (parts.size() != n.inputs.size()) throw Error("custom backward: wrong gradient count");
      for (std::size_t k = 0; k < parts.size(); ++k)
        if (Tensor* gk = acc(k)) *gk += parts[k];
      return;
    }
  }
}

}  // namespace palp
