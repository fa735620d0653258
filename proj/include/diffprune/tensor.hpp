#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "diffprune/error.hpp"

namespace diffprune {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

/// Dense row-major array. Rank 0 is a scalar, rank 1 a vector, rank 2 a matrix.
template <std::floating_point T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    require(shape_size(shape) == data.size(), ErrorCode::kShapeMismatch,
            "tensor shape " + shape_string(shape) + " does not match " +
                std::to_string(data.size()) + " values");
  }

  static Tensor zeros(Shape s) {
    std::vector<T> d(shape_size(s), T{0});
    return Tensor(std::move(s), std::move(d));
  }
  static Tensor scalar(T v) { return Tensor({}, {v}); }
  static Tensor vector(std::vector<T> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  T item() const {
    require(data.size() == 1, ErrorCode::kShapeMismatch, "item() on tensor of shape " + shape_string(shape));
    return data[0];
  }
};

namespace ops {

template <std::floating_point T>
inline T sigmoid(T x) {
  if (x >= T{0}) {
    return T{1} / (T{1} + std::exp(-x));
  }
  T e = std::exp(x);
  return e / (T{1} + e);
}

inline double logit(double u) { return std::log(u) - std::log1p(-u); }

}  // namespace ops

/// Handle to a node in a Graph.
struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const { return id != kNone; }
};

enum class OpKind {
  kLeaf,
  kMatMul,
  kAdd,
  kMul,
  kSigmoid,
  kLog,
  kTanh,
  kRelu,
  kClamp,
  kAffine,
  kSum,
  kSoftmaxCrossEntropy,
  kSlice,
  kGather,
  kScatter,
  kTranspose,
  kSoftmaxRows,
  kGatherRows,
  kMeanRows,
  kSliceCols,
  kConcatCols,
  kConcatRows,
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kLog: return "log";
    case OpKind::kTanh: return "tanh";
    case OpKind::kRelu: return "relu";
    case OpKind::kClamp: return "clamp";
    case OpKind::kAffine: return "affine";
    case OpKind::kSum: return "sum";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kSlice: return "slice";
    case OpKind::kGather: return "gather";
    case OpKind::kScatter: return "scatter";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kSoftmaxRows: return "softmax_rows";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kMeanRows: return "mean_rows";
    case OpKind::kSliceCols: return "slice_cols";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kConcatRows: return "concat_rows";
  }
  return "?";
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so a node's
/// inputs always precede it and backward is a single reverse sweep.
///
/// Subgradient conventions: relu'(0) = 0; clamp passes the gradient through
/// on the closed interval [lo, hi] and blocks it strictly outside.
template <std::floating_point T>
class Graph {
 public:
  Var leaf(Tensor<T> value, bool requires_grad = true) {
    check_finite(value, OpKind::kLeaf);
    Node node;
    node.kind = OpKind::kLeaf;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    return push(std::move(node));
  }
  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  const Tensor<T>& value(Var v) const { return at(v).value; }
  const Shape& shape(Var v) const { return at(v).value.shape; }
  bool requires_grad(Var v) const { return at(v).requires_grad; }

  /// Gradient of the last backward root w.r.t. v; zeros if none flowed.
  std::vector<T> grad(Var v) const {
    const Node& n = at(v);
    if (n.grad.empty()) return std::vector<T>(n.value.size(), T{0});
    return n.grad;
  }

  void zero_grad() {
    for (Node& n : nodes_) n.grad.clear();
  }

  std::size_t node_count() const { return nodes_.size(); }
  OpKind kind(Var v) const { return at(v).kind; }

  // ---- forward ops ------------------------------------------------------

  Var matmul(Var a, Var b) {
    const Tensor<T>& x = value(a);
    const Tensor<T>& y = value(b);
    if (x.rank() != 2 || y.rank() != 2 || x.shape[1] != y.shape[0]) shape_error(OpKind::kMatMul, a, b);
    const std::size_t m = x.shape[0], k = x.shape[1], n = y.shape[1];
    Tensor<T> out = Tensor<T>::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      T* row = &out.data[i * n];
      for (std::size_t p = 0; p < k; ++p) {
        const T xv = x.data[i * k + p];
        if (xv == T{0}) continue;
        const T* yrow = &y.data[p * n];
        for (std::size_t j = 0; j < n; ++j) row[j] += xv * yrow[j];
      }
    }
    return emit(OpKind::kMatMul, {a, b}, std::move(out));
  }

  /// Elementwise sum of equal shapes, or matrix plus row-vector bias.
  Var add(Var a, Var b) {
    const Tensor<T>& x = value(a);
    const Tensor<T>& y = value(b);
    Tensor<T> out = x;
    if (x.shape == y.shape) {
      for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += y.data[i];
    } else if (x.rank() == 2 && y.rank() == 1 && y.shape[0] == x.shape[1]) {
      const std::size_t n = x.shape[1];
      for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += y.data[i % n];
    } else {
      shape_error(OpKind::kAdd, a, b);
    }
    return emit(OpKind::kAdd, {a, b}, std::move(out));
  }

  Var mul(Var a, Var b) {
    const Tensor<T>& x = value(a);
    const Tensor<T>& y = value(b);
    if (x.shape != y.shape) shape_error(OpKind::kMul, a, b);
    Tensor<T> out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= y.data[i];
    return emit(OpKind::kMul, {a, b}, std::move(out));
  }

  Var sigmoid(Var a) {
    return unary(OpKind::kSigmoid, a, [](T x) { return ops::sigmoid(x); });
  }
  Var log(Var a) {
    return unary(OpKind::kLog, a, [](T x) { return std::log(x); });
  }
  Var tanh(Var a) {
    return unary(OpKind::kTanh, a, [](T x) { return std::tanh(x); });
  }
  Var relu(Var a) {
    return unary(OpKind::kRelu, a, [](T x) { return x > T{0} ? x : T{0}; });
  }

  Var clamp(Var a, T lo, T hi) {
    require(lo < hi, ErrorCode::kInvalidArgument, "clamp requires lo < hi");
    Var out = unary(OpKind::kClamp, a, [lo, hi](T x) { return std::min(hi, std::max(lo, x)); });
    nodes_[out.id].lo = lo;
    nodes_[out.id].hi = hi;
    return out;
  }

  /// scale * x + shift, elementwise. Used for the gate stretch (r - l) s + l.
  Var affine(Var a, T scale, T shift) {
    Var out = unary(OpKind::kAffine, a, [scale, shift](T x) { return scale * x + shift; });
    nodes_[out.id].lo = scale;
    return out;
  }

  /// Sum of all entries, accumulated in double.
  Var sum(Var a) {
    double acc = 0.0;
    for (T v : value(a).data) acc += static_cast<double>(v);
    return emit(OpKind::kSum, {a}, Tensor<T>::scalar(static_cast<T>(acc)));
  }

  /// Mean softmax cross-entropy of logits [batch, classes] against labels.
  Var softmax_cross_entropy(Var logits, std::span<const std::uint32_t> labels) {
    const Tensor<T>& x = value(logits);
    if (x.rank() != 2 || x.shape[0] != labels.size() || labels.empty()) {
      fail(ErrorCode::kShapeMismatch, std::string("softmax_cross_entropy: logits ") + shape_string(x.shape) +
                                          " vs " + std::to_string(labels.size()) + " labels");
    }
    const std::size_t batch = x.shape[0], classes = x.shape[1];
    Tensor<T> probs = Tensor<T>::zeros(x.shape);
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
      require(labels[i] < classes, ErrorCode::kInvalidArgument,
              "label " + std::to_string(labels[i]) + " out of range for " + std::to_string(classes) + " classes");
      const T* row = &x.data[i * classes];
      const double mx = *std::max_element(row, row + classes);
      double z = 0.0;
      for (std::size_t j = 0; j < classes; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
      const double log_z = std::log(z) + mx;
      for (std::size_t j = 0; j < classes; ++j) {
        probs.data[i * classes + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - log_z));
      }
      total += log_z - static_cast<double>(row[labels[i]]);
    }
    Var out = emit(OpKind::kSoftmaxCrossEntropy, {logits},
                   Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(batch))));
    nodes_[out.id].saved = std::move(probs.data);
    nodes_[out.id].index.assign(labels.begin(), labels.end());
    return out;
  }

  /// Copy of `count = shape_size(shape)` contiguous entries of a's flat data.
  Var slice(Var a, std::size_t offset, Shape shape) {
    const Tensor<T>& x = value(a);
    const std::size_t count = shape_size(shape);
    require(offset + count <= x.size(), ErrorCode::kShapeMismatch,
            "slice: [" + std::to_string(offset) + ", " + std::to_string(offset + count) + ") exceeds " +
                shape_string(x.shape));
    std::vector<T> d(x.data.begin() + static_cast<std::ptrdiff_t>(offset),
                     x.data.begin() + static_cast<std::ptrdiff_t>(offset + count));
    Var out = emit(OpKind::kSlice, {a}, Tensor<T>(std::move(shape), std::move(d)));
    nodes_[out.id].offset = offset;
    return out;
  }

  /// out[k] = a.flat[index[k]]; result is a vector.
  Var gather(Var a, std::span<const std::uint32_t> index) {
    const Tensor<T>& x = value(a);
    std::vector<T> d(index.size());
    for (std::size_t k = 0; k < index.size(); ++k) {
      require(index[k] < x.size(), ErrorCode::kShapeMismatch, "gather: index out of range");
      d[k] = x.data[index[k]];
    }
    Var out = emit(OpKind::kGather, {a}, Tensor<T>::vector(std::move(d)));
    nodes_[out.id].index.assign(index.begin(), index.end());
    return out;
  }

  /// Vector of length n, zero except out[index[k]] += a.flat[k].
  Var scatter(Var a, std::span<const std::uint32_t> index, std::size_t n) {
    const Tensor<T>& x = value(a);
    require(index.size() == x.size(), ErrorCode::kShapeMismatch, "scatter: index/value length mismatch");
    std::vector<T> d(n, T{0});
    for (std::size_t k = 0; k < index.size(); ++k) {
      require(index[k] < n, ErrorCode::kShapeMismatch, "scatter: index out of range");
      d[index[k]] += x.data[k];
    }
    Var out = emit(OpKind::kScatter, {a}, Tensor<T>::vector(std::move(d)));
    nodes_[out.id].index.assign(index.begin(), index.end());
    return out;
  }

  Var transpose(Var a) {
    const Tensor<T>& x = value(a);
    if (x.rank() != 2) shape_error(OpKind::kTranspose, a);
    const std::size_t m = x.shape[0], n = x.shape[1];
    Tensor<T> out = Tensor<T>::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = x.data[i * n + j];
    return emit(OpKind::kTranspose, {a}, std::move(out));
  }

  Var softmax_rows(Var a) {
    const Tensor<T>& x = value(a);
    if (x.rank() != 2) shape_error(OpKind::kSoftmaxRows, a);
    const std::size_t m = x.shape[0], n = x.shape[1];
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (std::size_t i = 0; i < m; ++i) {
      const T* row = &x.data[i * n];
      const double mx = *std::max_element(row, row + n);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
      for (std::size_t j = 0; j < n; ++j) {
        out.data[i * n + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - mx) / z);
      }
    }
    return emit(OpKind::kSoftmaxRows, {a}, std::move(out));
  }

  /// Embedding lookup: rows of table [V, D] selected by ids -> [|ids|, D].
  Var gather_rows(Var table, std::span<const std::uint32_t> ids) {
    const Tensor<T>& x = value(table);
    if (x.rank() != 2) shape_error(OpKind::kGatherRows, table);
    const std::size_t n = x.shape[1];
    Tensor<T> out = Tensor<T>::zeros({ids.size(), n});
    for (std::size_t k = 0; k < ids.size(); ++k) {
      require(ids[k] < x.shape[0], ErrorCode::kShapeMismatch, "gather_rows: id out of range");
      std::copy_n(&x.data[ids[k] * n], n, &out.data[k * n]);
    }
    Var out_var = emit(OpKind::kGatherRows, {table}, std::move(out));
    nodes_[out_var.id].index.assign(ids.begin(), ids.end());
    return out_var;
  }

  /// [m, n] -> [1, n] column means.
  Var mean_rows(Var a) {
    const Tensor<T>& x = value(a);
    if (x.rank() != 2 || x.shape[0] == 0) shape_error(OpKind::kMeanRows, a);
    const std::size_t m = x.shape[0], n = x.shape[1];
    std::vector<double> acc(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) acc[j] += x.data[i * n + j];
    Tensor<T> out = Tensor<T>::zeros({1, n});
    for (std::size_t j = 0; j < n; ++j) out.data[j] = static_cast<T>(acc[j] / static_cast<double>(m));
    return emit(OpKind::kMeanRows, {a}, std::move(out));
  }

  /// Columns [begin, end) of a matrix.
  Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    const Tensor<T>& x = value(a);
    if (x.rank() != 2 || begin >= end || end > x.shape[1]) shape_error(OpKind::kSliceCols, a);
    const std::size_t m = x.shape[0], n = x.shape[1], w = end - begin;
    Tensor<T> out = Tensor<T>::zeros({m, w});
    for (std::size_t i = 0; i < m; ++i) std::copy_n(&x.data[i * n + begin], w, &out.data[i * w]);
    Var v = emit(OpKind::kSliceCols, {a}, std::move(out));
    nodes_[v.id].offset = begin;
    return v;
  }

  Var concat_cols(std::span<const Var> parts) { return concat(OpKind::kConcatCols, parts); }
  Var concat_rows(std::span<const Var> parts) { return concat(OpKind::kConcatRows, parts); }

  // ---- backward ---------------------------------------------------------

  /// Populates gradients of the scalar `root`. Intermediate gradients are
  /// recomputed on every call; leaf gradients accumulate across calls until
  /// zero_grad().
  void backward(Var root) {
    const Node& r = at(root);
    require(r.value.size() == 1, ErrorCode::kShapeMismatch,
            "backward requires a scalar root, got " + shape_string(r.value.shape));
    for (std::size_t i = 0; i <= root.id; ++i) {
      if (nodes_[i].kind != OpKind::kLeaf) nodes_[i].grad.clear();
    }
    if (!r.requires_grad) return;
    grad_buffer(root)[0] += T{1};
    for (std::size_t id = root.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.kind == OpKind::kLeaf || n.grad.empty() || !n.requires_grad) continue;
      propagate(id);
    }
  }

 private:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    T lo{0};
    T hi{0};
    std::size_t offset = 0;
    std::vector<T> saved;
    std::vector<std::uint32_t> index;
  };

  const Node& at(Var v) const {
    require(v.id < nodes_.size(), ErrorCode::kInvalidArgument, "unknown graph variable");
    return nodes_[v.id];
  }

  Var push(Node node) {
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
  }

  static void check_finite(const Tensor<T>& t, OpKind kind) {
    for (T v : t.data) {
      if (!std::isfinite(v)) fail(ErrorCode::kNonFinite, std::string(op_name(kind)) + " produced a non-finite value");
    }
  }

  [[noreturn]] void shape_error(OpKind kind, Var a, Var b = {}) const {
    std::string msg = std::string(op_name(kind)) + ": incompatible shape " + shape_string(shape(a));
    if (b.valid()) msg += " and " + shape_string(shape(b));
    fail(ErrorCode::kShapeMismatch, msg);
  }

  Var emit(OpKind kind, std::initializer_list<Var> inputs, Tensor<T> value) {
    check_finite(value, kind);
    Node node;
    node.kind = kind;
    node.value = std::move(value);
    for (Var v : inputs) {
      node.inputs.push_back(v.id);
      node.requires_grad = node.requires_grad || nodes_[v.id].requires_grad;
    }
    return push(std::move(node));
  }

  template <class F>
  Var unary(OpKind kind, Var a, F f) {
    Tensor<T> out = value(a);
    for (T& v : out.data) v = f(v);
    return emit(kind, {a}, std::move(out));
  }

  Var concat(OpKind kind, std::span<const Var> parts) {
    require(!parts.empty(), ErrorCode::kInvalidArgument, std::string(op_name(kind)) + ": no inputs");
    const Tensor<T>& first = value(parts[0]);
    if (first.rank() != 2) shape_error(kind, parts[0]);
    const bool by_cols = kind == OpKind::kConcatCols;
    std::size_t m = first.shape[0], n = first.shape[1];
    std::size_t total = 0;
    for (Var p : parts) {
      const Tensor<T>& x = value(p);
      if (x.rank() != 2 || (by_cols ? x.shape[0] != m : x.shape[1] != n)) shape_error(kind, parts[0], p);
      total += by_cols ? x.shape[1] : x.shape[0];
    }
    Tensor<T> out = by_cols ? Tensor<T>::zeros({m, total}) : Tensor<T>::zeros({total, n});
    std::size_t at_pos = 0;
    for (Var p : parts) {
      const Tensor<T>& x = value(p);
      if (by_cols) {
        const std::size_t w = x.shape[1];
        for (std::size_t i = 0; i < m; ++i) std::copy_n(&x.data[i * w], w, &out.data[i * total + at_pos]);
        at_pos += w;
      } else {
        std::copy(x.data.begin(), x.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(at_pos * n));
        at_pos += x.shape[0];
      }
    }
    check_finite(out, kind);
    Node node;
    node.kind = kind;
    node.value = std::move(out);
    for (Var p : parts) {
      node.inputs.push_back(p.id);
      node.requires_grad = node.requires_grad || nodes_[p.id].requires_grad;
    }
    return push(std::move(node));
  }

  std::vector<T>& grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad;
  }

  // Input gradient buffer, or nullptr when that input does not need one.
  T* input_grad(std::size_t node_id, std::size_t which) {
    const std::size_t in = nodes_[node_id].inputs[which];
    if (!nodes_[in].requires_grad) return nullptr;
    return grad_buffer(Var{in}).data();
  }

  void propagate(std::size_t id) {
    const OpKind kind = nodes_[id].kind;
    switch (kind) {
      case OpKind::kMatMul: {
        T* ga = input_grad(id, 0);
        T* gb = input_grad(id, 1);
        const Node& n = nodes_[id];
        const Tensor<T>& x = nodes_[n.inputs[0]].value;
        const Tensor<T>& y = nodes_[n.inputs[1]].value;
        const std::size_t m = x.shape[0], k = x.shape[1], c = y.shape[1];
        const std::vector<T>& g = n.grad;
        if (ga) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T acc{0};
              for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * y.data[p * c + j];
              ga[i * k + p] += acc;
            }
        }
        if (gb) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const T xv = x.data[i * k + p];
              if (xv == T{0}) continue;
              for (std::size_t j = 0; j < c; ++j) gb[p * c + j] += xv * g[i * c + j];
            }
        }
        break;
      }
      case OpKind::kAdd: {
        T* ga = input_grad(id, 0);
        T* gb = input_grad(id, 1);
        const Node& n = nodes_[id];
        const std::vector<T>& g = n.grad;
        const std::size_t nb = nodes_[n.inputs[1]].value.size();
        if (ga)
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        if (gb) {
          if (nb == g.size()) {
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
          } else {
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
          }
        }
        break;
      }
      case OpKind::kMul: {
        T* ga = input_grad(id, 0);
        T* gb = input_grad(id, 1);
        const Node& n = nodes_[id];
        const std::vector<T>& x = nodes_[n.inputs[0]].value.data;
        const std::vector<T>& y = nodes_[n.inputs[1]].value.data;
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          if (ga) ga[i] += n.grad[i] * y[i];
          if (gb) gb[i] += n.grad[i] * x[i];
        }
        break;
      }
      case OpKind::kSigmoid:
      case OpKind::kLog:
      case OpKind::kTanh:
      case OpKind::kRelu:
      case OpKind::kClamp:
      case OpKind::kAffine: {
        T* ga = input_grad(id, 0);
        if (!ga) break;
        const Node& n = nodes_[id];
        const std::vector<T>& x = nodes_[n.inputs[0]].value.data;
        const std::vector<T>& y = n.value.data;
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          T d{0};
          switch (kind) {
            case OpKind::kSigmoid: d = y[i] * (T{1} - y[i]); break;
            case OpKind::kLog: d = T{1} / x[i]; break;
            case OpKind::kTanh: d = T{1} - y[i] * y[i]; break;
            case OpKind::kRelu: d = x[i] > T{0} ? T{1} : T{0}; break;
            case OpKind::kClamp: d = (x[i] >= n.lo && x[i] <= n.hi) ? T{1} : T{0}; break;
            case OpKind::kAffine: d = n.lo; break;
            default: break;
          }
          ga[i] += n.grad[i] * d;
        }
        break;
      }
      case OpKind::kSum: {
        T* ga = input_grad(id, 0);
        if (!ga) break;
        const Node& n = nodes_[id];
        const std::size_t len = nodes_[n.inputs[0]].value.size();
        for (std::size_t i = 0; i < len; ++i) ga[i] += n.grad[0];
        break;
      }
      case OpKind::kSoftmaxCrossEntropy: {
        T* ga = input_grad(id, 0);
        if (!ga) break;
        const Node& n = nodes_[id];
        const std::size_t batch = n.index.size();
        const std::size_t classes = n.saved.size() / batch;
        const T scale = n.grad[0] / static_cast<T>(batch);
        for (std::size_t i = 0; i < batch; ++i)
          for (std::size_t j = 0; j < classes; ++j) {
            const T target = j == n.index[i] ? T{1} : T{0};
            ga[i * classes + j] += scale * (n.saved[i * classes + j] - target);
          }
        break;
      }
      case OpKind::kSlice: {
        T* ga = input_grad(id, 0);
        if (!ga) break;
        const Node& n = nodes_[id];
        for (std::size_t k = 0; k < n.grad.size(); ++k) ga[n.offset + k] += n.grad[k];
        break;
      }
      case OpKind::kGather: {
        T* ga = input_grad(id, 0);
        if (!ga) break;
        const Node& n = nodes_[id];
        for (std::size_t k = 0; k < n.index.size(); ++k) ga[n.index[k]] += n.grad[k];
        break;
      }
      case OpKind::kScatter: {
        T* ga = input_grad(id, 0);
        if (!ga) break;
        const Node& n = nodes_[id];
        for (std::size_t k = 0; k < n.index.size(); ++k) ga[k] += n.grad[n.index[k]];
        break;
      }
      case OpKind::kTranspose: {
        T* ga = input_grad(id, 0);
        if (!ga) break;
        const Node& n = nodes_[id];
        const std::size_t rows = n.value.shape[0], cols = n.value.shape[1];
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) ga[j * rows + i] += n.grad[i * cols + j];
        break;
      }
      case OpKind::kSoftmaxRows: {
        T* ga = input_grad(id, 0);
        if (!ga) break;
        const Node& n = nodes_[id];
        const std::size_t rows = n.value.shape[0], cols = n.value.shape[1];
        for (std::size_t i = 0; i < rows; ++i) {
          T dot{0};
          for (std::size_t j = 0; j < cols; ++j) dot += n.grad[i * cols + j] * n.value.data[i * cols + j];
          for (std::size_t j = 0; j < cols; ++j)
            ga[i * cols + j] += n.value.data[i * cols + j] * (n.grad[i * cols + j] - dot);
        }
        break;
      }
      case OpKind::kGatherRows: {
        T* ga = input_grad(id, 0);
        if (!ga) break;
        const Node& n = nodes_[id];
        const std::size_t cols = n.value.shape[1];
        for (std::size_t k = 0; k < n.index.size(); ++k)
          for (std::size_t j = 0; j < cols; ++j) ga[n.index[k] * cols + j] += n.grad[k * cols + j];
        break;
      }
      case OpKind::kMeanRows: {
        T* ga = input_grad(id, 0);
        if (!ga) break;
        const Node& n = nodes_[id];
        const Shape& in_shape = nodes_[n.inputs[0]].value.shape;
        const std::size_t rows = in_shape[0], cols = in_shape[1];
        const T inv = T{1} / static_cast<T>(rows);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) ga[i * cols + j] += n.grad[j] * inv;
        break;
      }
      case OpKind::kSliceCols: {
        T* ga = input_grad(id, 0);
        if (!ga) break;
        const Node& n = nodes_[id];
        const std::size_t in_cols = nodes_[n.inputs[0]].value.shape[1];
        const std::size_t rows = n.value.shape[0], w = n.value.shape[1];
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < w; ++j) ga[i * in_cols + n.offset + j] += n.grad[i * w + j];
        break;
      }
      case OpKind::kConcatCols:
      case OpKind::kConcatRows: {
        const std::size_t count = nodes_[id].inputs.size();
        std::size_t at_pos = 0;
        for (std::size_t p = 0; p < count; ++p) {
          T* ga = input_grad(id, p);
          const Node& n = nodes_[id];
          const Shape& in_shape = nodes_[n.inputs[p]].value.shape;
          const std::size_t rows = in_shape[0], cols = in_shape[1];
          if (kind == OpKind::kConcatCols) {
            const std::size_t total = n.value.shape[1];
            if (ga)
              for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) ga[i * cols + j] += n.grad[i * total + at_pos + j];
            at_pos += cols;
          } else {
            if (ga)
              for (std::size_t k = 0; k < rows * cols; ++k) ga[k] += n.grad[at_pos * cols + k];
            at_pos += rows;
          }
        }
        break;
      }
      case OpKind::kLeaf:
        break;
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace diffprune
