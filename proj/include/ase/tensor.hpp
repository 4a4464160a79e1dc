#pragma once

// Dense tensors with reverse-mode differentiation over a recorded tape.
//
// A Tensor is an immutable value (shape + row-major Eigen storage) with an
// optional node on a Tape. Free functions (matmul, add, layer_norm, ...)
// compute the value eagerly and, when any operand is recorded, append a node
// whose closure knows how to push the upstream gradient to its operands.
// Gradients can be read back for every reachable node, intermediate ones
// included.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ase/errors.hpp"

namespace ase {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using NodeId = std::int64_t;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

#ifdef ASE_DOUBLE
using Real = double;
#else
using Real = float;
#endif

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Rows/cols of the row-major matrix backing a tensor of the given shape:
/// all leading axes are folded into rows, the last axis is the column axis.
inline std::pair<Index, Index> matrix_dims(const Shape& shape) {
  if (shape.empty()) return {1, 1};
  const Index cols = shape.back();
  return {cols == 0 ? 0 : numel(shape) / cols, cols};
}

enum class OpKind {
  Leaf,
  Parameter,
  MatMul,
  Transpose,
  Reshape,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  AddBias,
  ScaleRows,
  Relu,
  Gelu,
  LayerNorm,
  SoftmaxRows,
  Attention,
  MeanRows,
  Sum,
  Mean,
  Select,
  ConcatRows,
  SliceRows,
  GatherRows,
  Gather,
  CrossEntropy,
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Parameter: return "parameter";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Reshape: return "reshape";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::AddBias: return "add_bias";
    case OpKind::ScaleRows: return "scale_rows";
    case OpKind::Relu: return "relu";
    case OpKind::Gelu: return "gelu";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::Attention: return "attention";
    case OpKind::MeanRows: return "mean_rows";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Select: return "select";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::Gather: return "gather";
    case OpKind::CrossEntropy: return "cross_entropy";
  }
  return "?";
}

template <typename Scalar>
class Tape;

template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Matrix = MatrixX<Scalar>;

  Tensor() : Tensor(Shape{}, Matrix::Zero(1, 1)) {}

  /// `values` may have any dimensions holding numel(shape) elements in
  /// row-major order; it is re-laid out to the canonical matrix_dims(shape).
  Tensor(Shape shape, Matrix values) : shape_(std::move(shape)) {
    for (Index d : shape_) {
      if (d <= 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape_));
    }
    if (values.size() != ase::numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + to_string(shape_));
    }
    const auto [r, c] = matrix_dims(shape_);
    if (values.rows() != r || values.cols() != c) {
      Matrix relaid = Eigen::Map<const Matrix>(values.data(), r, c);
      values = std::move(relaid);
    }
    value_ = std::make_shared<const Matrix>(std::move(values));
  }

  explicit Tensor(const Matrix& values) : Tensor(Shape{values.rows(), values.cols()}, values) {}

  static Tensor zeros(Shape shape) { return constant(std::move(shape), Scalar(0)); }
  static Tensor ones(Shape shape) { return constant(std::move(shape), Scalar(1)); }
  static Tensor constant(Shape shape, Scalar v) {
    const auto [r, c] = matrix_dims(shape);
    return Tensor(std::move(shape), Matrix::Constant(r, c, v));
  }
  static Tensor scalar(Scalar v) { return constant(Shape{}, v); }
  static Tensor from(Shape shape, std::initializer_list<Scalar> values) {
    return from_span(std::move(shape), std::span<const Scalar>(values.begin(), values.size()));
  }
  static Tensor from_span(Shape shape, std::span<const Scalar> values) {
    if (static_cast<Index>(values.size()) != ase::numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + to_string(shape));
    }
    const auto [r, c] = matrix_dims(shape);
    return Tensor(std::move(shape), Matrix(Eigen::Map<const Matrix>(values.data(), r, c)));
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index numel() const { return value_->size(); }
  Index rows() const { return value_->rows(); }
  Index cols() const { return value_->cols(); }

  const Matrix& value() const { return *value_; }
  const std::shared_ptr<const Matrix>& storage() const { return value_; }
  std::span<const Scalar> data() const { return {value_->data(), static_cast<std::size_t>(value_->size())}; }

  Scalar operator[](Index flat) const { return value_->data()[flat]; }
  Scalar operator()(Index r, Index c) const { return (*value_)(r, c); }
  Scalar item() const {
    if (numel() != 1) throw ContractError("item() on a tensor of shape " + to_string(shape_));
    return (*value_)(0, 0);
  }

  bool recorded() const { return tape_ != nullptr; }
  std::optional<NodeId> node() const { return recorded() ? std::optional<NodeId>(node_) : std::nullopt; }
  NodeId node_or_none() const { return recorded() ? node_ : NodeId{-1}; }
  Tape<Scalar>* tape() const { return tape_; }

  /// Same values, detached from any tape.
  Tensor detached() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
  }

  bool all_finite() const { return value_->allFinite(); }
  void check_finite(std::string_view what) const {
    if (!all_finite()) throw NumericError(std::string(what) + ": non-finite value in tensor " + to_string(shape_));
  }

 private:
  friend class Tape<Scalar>;

  Shape shape_;
  std::shared_ptr<const Matrix> value_;
  Tape<Scalar>* tape_ = nullptr;
  NodeId node_ = -1;
};

/// A trainable array owned by a model. The tape binds it as a leaf; the
/// owner folds the leaf gradient back into `grad` (see ParameterList).
template <typename Scalar>
struct Parameter {
  using Matrix = MatrixX<Scalar>;

  Parameter() = default;
  Parameter(std::string name_, Shape shape_) : name(std::move(name_)), shape(std::move(shape_)) {
    const auto [r, c] = matrix_dims(shape);
    value = Matrix::Zero(r, c);
    grad = Matrix::Zero(r, c);
  }

  Index numel() const { return value.size(); }
  void zero_grad() { grad.setZero(); }
  Tensor<Scalar> tensor() const { return Tensor<Scalar>(shape, value); }

  std::string name;
  Shape shape;
  Matrix value;
  Matrix grad;
};

/// Write access to the gradient slots during a backward sweep.
template <typename Scalar>
class GradSink {
 public:
  using Matrix = MatrixX<Scalar>;

  explicit GradSink(std::vector<Matrix>& slots) : slots_(slots) {}

  /// Accumulates into node `id`; ids < 0 denote unrecorded operands.
  template <typename Derived>
  void add(NodeId id, const Eigen::MatrixBase<Derived>& g) {
    if (id < 0) return;
    Matrix& slot = slots_[static_cast<std::size_t>(id)];
    if (slot.size() == 0) {
      slot = g;
    } else {
      slot += g;
    }
  }

 private:
  std::vector<Matrix>& slots_;
};

template <typename Scalar>
class Gradients {
 public:
  using Matrix = MatrixX<Scalar>;

  Gradients(const Tape<Scalar>* tape, std::vector<Matrix> slots, std::vector<Shape> shapes)
      : tape_(tape), slots_(std::move(slots)), shapes_(std::move(shapes)) {}

  bool contains(NodeId id) const {
    return id >= 0 && id < static_cast<NodeId>(slots_.size()) && slots_[static_cast<std::size_t>(id)].size() != 0;
  }
  bool contains(const Tensor<Scalar>& t) const { return t.tape() == tape_ && contains(t.node_or_none()); }

  /// Gradient of the root with respect to `t`; `t` must be reachable.
  Tensor<Scalar> at(const Tensor<Scalar>& t) const {
    if (!contains(t)) throw ContractError("no gradient recorded for this tensor (not reachable from root)");
    const auto id = static_cast<std::size_t>(t.node_or_none());
    return Tensor<Scalar>(shapes_[id], slots_[id]);
  }

  std::optional<Tensor<Scalar>> find(NodeId id) const {
    if (!contains(id)) return std::nullopt;
    const auto i = static_cast<std::size_t>(id);
    return Tensor<Scalar>(shapes_[i], slots_[i]);
  }

  /// Raw slot; empty when unreachable.
  const Matrix& raw(NodeId id) const { return slots_[static_cast<std::size_t>(id)]; }

  std::size_t reachable_count() const {
    std::size_t n = 0;
    for (const auto& s : slots_) n += s.size() != 0;
    return n;
  }

 private:
  const Tape<Scalar>* tape_;
  std::vector<Matrix> slots_;
  std::vector<Shape> shapes_;
};

template <typename Scalar>
class Tape {
 public:
  using Matrix = MatrixX<Scalar>;
  using BackwardFn = std::function<void(const Matrix&, GradSink<Scalar>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Records `value` as a differentiable input.
  Tensor<Scalar> leaf(const Tensor<Scalar>& value) {
    return push(OpKind::Leaf, {}, value.shape(), value.storage(), nullptr);
  }

  /// Binds a parameter; repeated binds of the same parameter share one node.
  Tensor<Scalar> parameter(const Parameter<Scalar>& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return tensor_of(it->second);
    auto t = push(OpKind::Parameter, {}, p.shape, std::make_shared<const Matrix>(p.value), nullptr);
    bound_.emplace(&p, t.node_);
    bindings_.emplace_back(t.node_, &p);
    return t;
  }

  Tensor<Scalar> record(OpKind kind, std::vector<NodeId> inputs, Shape shape, Matrix value, BackwardFn backward) {
    return push(kind, std::move(inputs), std::move(shape), std::make_shared<const Matrix>(std::move(value)),
                std::move(backward));
  }

  Gradients<Scalar> backward(const Tensor<Scalar>& root) const {
    if (root.tape() != this) throw ContractError("backward: root is not recorded on this tape");
    if (root.numel() != 1) throw ContractError("backward: root must be a scalar, got shape " + to_string(root.shape()));
    std::vector<Matrix> slots(nodes_.size());
    slots[static_cast<std::size_t>(root.node_)] = Matrix::Ones(1, 1);
    GradSink<Scalar> sink(slots);
    // Nodes are appended after their inputs, so a reverse sweep is a
    // reverse topological order and touches every node once.
    for (NodeId id = root.node_; id >= 0; --id) {
      const auto i = static_cast<std::size_t>(id);
      if (slots[i].size() == 0 || !nodes_[i].backward) continue;
      nodes_[i].backward(slots[i], sink);
    }
    std::vector<Shape> shapes;
    shapes.reserve(nodes_.size());
    for (const auto& n : nodes_) shapes.push_back(n.shape);
    return Gradients<Scalar>(this, std::move(slots), std::move(shapes));
  }

  /// Calls f(const Parameter&, const Matrix& grad) for bound, reachable parameters.
  template <typename F>
  void for_each_parameter_gradient(const Gradients<Scalar>& grads, F&& f) const {
    for (const auto& [id, p] : bindings_) {
      if (grads.contains(id)) f(*p, grads.raw(id));
    }
  }

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).kind; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).inputs; }

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Shape shape;
    std::shared_ptr<const Matrix> value;
    BackwardFn backward;
  };

  Tensor<Scalar> push(OpKind kind, std::vector<NodeId> inputs, Shape shape, std::shared_ptr<const Matrix> value,
                      BackwardFn backward) {
    std::erase(inputs, NodeId{-1});
    const auto id = static_cast<NodeId>(nodes_.size());
    for (NodeId in : inputs) {
      if (in >= id) throw ContractError("tape: input recorded after its consumer");
    }
    nodes_.push_back(Node{kind, std::move(inputs), std::move(shape), std::move(value), std::move(backward)});
    return tensor_of(id);
  }

  Tensor<Scalar> tensor_of(NodeId id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    Tensor<Scalar> t;
    t.shape_ = n.shape;
    t.value_ = n.value;
    t.tape_ = this;
    t.node_ = id;
    return t;
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<Scalar>*, NodeId> bound_;
  std::vector<std::pair<NodeId, const Parameter<Scalar>*>> bindings_;
};

template <typename Scalar>
Gradients<Scalar> backward(const Tape<Scalar>& tape, const Tensor<Scalar>& root) {
  return tape.backward(root);
}

template <typename Scalar>
Gradients<Scalar> backward(const Tensor<Scalar>& root) {
  if (!root.recorded()) throw ContractError("backward: root is not recorded on any tape");
  return root.tape()->backward(root);
}

namespace detail {

template <typename S>
Tape<S>* common_tape(std::span<const Tensor<S>* const> xs) {
  Tape<S>* tape = nullptr;
  for (const auto* x : xs) {
    if (!x->recorded()) continue;
    if (tape && tape != x->tape()) throw ContractError("operands are recorded on different tapes");
    tape = x->tape();
  }
  return tape;
}

/// Wraps an eagerly computed value; records a node only when an operand is.
template <typename S, typename Fn>
Tensor<S> result(std::span<const Tensor<S>* const> operands, OpKind kind, Shape shape, MatrixX<S> value,
                 Fn&& backward) {
  Tape<S>* tape = common_tape<S>(operands);
  if (!tape) return Tensor<S>(std::move(shape), std::move(value));
  std::vector<NodeId> ids;
  ids.reserve(operands.size());
  for (const auto* x : operands) ids.push_back(x->node_or_none());
  return tape->record(kind, std::move(ids), std::move(shape), std::move(value),
                      typename Tape<S>::BackwardFn(std::forward<Fn>(backward)));
}

template <typename S, typename Fn>
Tensor<S> result(std::initializer_list<const Tensor<S>*> operands, OpKind kind, Shape shape, MatrixX<S> value,
                 Fn&& backward) {
  return result<S>(std::span<const Tensor<S>* const>(operands.begin(), operands.size()), kind, std::move(shape),
                   std::move(value), std::forward<Fn>(backward));
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

template <typename S>
void require_rank2(const Tensor<S>& a, const char* op) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a rank-2 tensor, got " + to_string(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and shape manipulation

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents differ " + to_string(a.shape()) + " * " + to_string(b.shape()));
  }
  MatrixX<S> out = a.value() * b.value();
  return detail::result<S>({&a, &b}, OpKind::MatMul, Shape{a.rows(), b.cols()}, std::move(out),
                           [av = a.storage(), bv = b.storage(), ia = a.node_or_none(), ib = b.node_or_none()](
                               const MatrixX<S>& g, GradSink<S>& sink) {
                             if (ia >= 0) sink.add(ia, g * bv->transpose());
                             if (ib >= 0) sink.add(ib, av->transpose() * g);
                           });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  detail::require_rank2(a, "transpose");
  MatrixX<S> out = a.value().transpose();
  return detail::result<S>({&a}, OpKind::Transpose, Shape{a.cols(), a.rows()}, std::move(out),
                           [ia = a.node_or_none()](const MatrixX<S>& g, GradSink<S>& sink) {
                             sink.add(ia, g.transpose());
                           });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + to_string(a.shape()) + " has " + std::to_string(a.numel()) +
                         " elements, target " + to_string(shape) + " has " + std::to_string(numel(shape)));
  }
  const auto [r, c] = matrix_dims(shape);
  MatrixX<S> out = Eigen::Map<const MatrixX<S>>(a.value().data(), r, c);
  return detail::result<S>({&a}, OpKind::Reshape, std::move(shape), std::move(out),
                           [ia = a.node_or_none(), ir = a.rows(), ic = a.cols()](const MatrixX<S>& g,
                                                                                 GradSink<S>& sink) {
                             sink.add(ia, Eigen::Map<const MatrixX<S>>(g.data(), ir, ic));
                           });
}

template <typename S>
Tensor<S> concat_rows(std::span<const Tensor<S>> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no operands");
  const Index cols = parts.front().cols();
  Index rows = 0;
  std::vector<const Tensor<S>*> ptrs;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_rows");
    if (p.cols() != cols) throw DimensionError("concat_rows: column extents differ");
    rows += p.rows();
    ptrs.push_back(&p);
  }
  MatrixX<S> out(rows, cols);
  std::vector<std::pair<NodeId, Index>> pieces;  // (node, row count)
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
    pieces.emplace_back(p.node_or_none(), p.rows());
  }
  return detail::result<S>(std::span<const Tensor<S>* const>(ptrs), OpKind::ConcatRows, Shape{rows, cols},
                           std::move(out), [pieces](const MatrixX<S>& g, GradSink<S>& sink) {
                             Index at = 0;
                             for (const auto& [id, n] : pieces) {
                               sink.add(id, g.middleRows(at, n));
                               at += n;
                             }
                           });
}

template <typename S>
Tensor<S> concat_rows(std::initializer_list<Tensor<S>> parts) {
  return concat_rows<S>(std::span<const Tensor<S>>(parts.begin(), parts.size()));
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& a, Index begin, Index count) {
  detail::require_rank2(a, "slice_rows");
  if (begin < 0 || count <= 0 || begin + count > a.rows()) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + to_string(a.shape()));
  }
  MatrixX<S> out = a.value().middleRows(begin, count);
  return detail::result<S>({&a}, OpKind::SliceRows, Shape{count, a.cols()}, std::move(out),
                           [ia = a.node_or_none(), begin, rows = a.rows()](const MatrixX<S>& g, GradSink<S>& sink) {
                             MatrixX<S> full = MatrixX<S>::Zero(rows, g.cols());
                             full.middleRows(begin, g.rows()) = g;
                             sink.add(ia, full);
                           });
}

/// Row lookup (embedding): out[i] = table[ids[i]].
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& table, std::span<const Index> ids) {
  detail::require_rank2(table, "gather_rows");
  if (ids.empty()) throw ContractError("gather_rows: empty index list");
  MatrixX<S> out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) throw DimensionError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<Index> idx(ids.begin(), ids.end());
  return detail::result<S>({&table}, OpKind::GatherRows, Shape{static_cast<Index>(ids.size()), table.cols()},
                           std::move(out),
                           [it = table.node_or_none(), idx = std::move(idx), rows = table.rows()](
                               const MatrixX<S>& g, GradSink<S>& sink) {
                             MatrixX<S> full = MatrixX<S>::Zero(rows, g.cols());
                             for (std::size_t i = 0; i < idx.size(); ++i) full.row(idx[i]) += g.row(static_cast<Index>(i));
                             sink.add(it, full);
                           });
}

/// Element permutation/selection by flat index: out.flat[i] = a.flat[index[i]].
template <typename S>
Tensor<S> gather(const Tensor<S>& a, std::vector<Index> index, Shape shape) {
  if (static_cast<Index>(index.size()) != numel(shape)) throw DimensionError("gather: index length != numel(shape)");
  const auto [r, c] = matrix_dims(shape);
  MatrixX<S> out(r, c);
  const S* src = a.value().data();
  S* dst = out.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.numel()) throw DimensionError("gather: index out of range");
    dst[i] = src[index[i]];
  }
  return detail::result<S>({&a}, OpKind::Gather, std::move(shape), std::move(out),
                           [ia = a.node_or_none(), index = std::move(index), ar = a.rows(), ac = a.cols()](
                               const MatrixX<S>& g, GradSink<S>& sink) {
                             MatrixX<S> full = MatrixX<S>::Zero(ar, ac);
                             S* d = full.data();
                             const S* gs = g.data();
                             for (std::size_t i = 0; i < index.size(); ++i) d[index[i]] += gs[i];
                             sink.add(ia, full);
                           });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  MatrixX<S> out = a.value() + b.value();
  return detail::result<S>({&a, &b}, OpKind::Add, a.shape(), std::move(out),
                           [ia = a.node_or_none(), ib = b.node_or_none()](const MatrixX<S>& g, GradSink<S>& sink) {
                             sink.add(ia, g);
                             sink.add(ib, g);
                           });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "sub");
  MatrixX<S> out = a.value() - b.value();
  return detail::result<S>({&a, &b}, OpKind::Sub, a.shape(), std::move(out),
                           [ia = a.node_or_none(), ib = b.node_or_none()](const MatrixX<S>& g, GradSink<S>& sink) {
                             sink.add(ia, g);
                             sink.add(ib, -g);
                           });
}

/// Hadamard product.
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  MatrixX<S> out = a.value().cwiseProduct(b.value());
  return detail::result<S>({&a, &b}, OpKind::Mul, a.shape(), std::move(out),
                           [av = a.storage(), bv = b.storage(), ia = a.node_or_none(), ib = b.node_or_none()](
                               const MatrixX<S>& g, GradSink<S>& sink) {
                             if (ia >= 0) sink.add(ia, g.cwiseProduct(*bv));
                             if (ib >= 0) sink.add(ib, g.cwiseProduct(*av));
                           });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S s) {
  MatrixX<S> out = a.value() * s;
  return detail::result<S>({&a}, OpKind::Scale, a.shape(), std::move(out),
                           [ia = a.node_or_none(), s](const MatrixX<S>& g, GradSink<S>& sink) { sink.add(ia, g * s); });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S s) {
  MatrixX<S> out = a.value().array() + s;
  return detail::result<S>({&a}, OpKind::AddScalar, a.shape(), std::move(out),
                           [ia = a.node_or_none()](const MatrixX<S>& g, GradSink<S>& sink) { sink.add(ia, g); });
}

/// x[r, :] + b for every row; b is a vector with x.cols() entries.
template <typename S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
  if (b.rank() != 1 || b.numel() != x.cols()) {
    throw DimensionError("add_bias: bias " + to_string(b.shape()) + " does not match last axis of " +
                         to_string(x.shape()));
  }
  MatrixX<S> out = x.value().rowwise() + b.value().row(0);
  return detail::result<S>({&x, &b}, OpKind::AddBias, x.shape(), std::move(out),
                           [ix = x.node_or_none(), ib = b.node_or_none()](const MatrixX<S>& g, GradSink<S>& sink) {
                             sink.add(ix, g);
                             if (ib >= 0) sink.add(ib, g.colwise().sum());
                           });
}

/// x[r, :] * s[r] for every row; s is a vector with x.rows() entries.
template <typename S>
Tensor<S> scale_rows(const Tensor<S>& x, const Tensor<S>& s) {
  detail::require_rank2(x, "scale_rows");
  if (s.numel() != x.rows() || s.rank() != 1) {
    throw DimensionError("scale_rows: scale " + to_string(s.shape()) + " does not match rows of " +
                         to_string(x.shape()));
  }
  MatrixX<S> out = s.value().row(0).transpose().asDiagonal() * x.value();
  return detail::result<S>({&x, &s}, OpKind::ScaleRows, x.shape(), std::move(out),
                           [xv = x.storage(), sv = s.storage(), ix = x.node_or_none(), is = s.node_or_none()](
                               const MatrixX<S>& g, GradSink<S>& sink) {
                             if (ix >= 0) sink.add(ix, sv->row(0).transpose().asDiagonal() * g);
                             if (is >= 0) sink.add(is, g.cwiseProduct(*xv).rowwise().sum().transpose());
                           });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  MatrixX<S> out = a.value().cwiseMax(S(0));
  return detail::result<S>({&a}, OpKind::Relu, a.shape(), std::move(out),
                           [av = a.storage(), ia = a.node_or_none()](const MatrixX<S>& g, GradSink<S>& sink) {
                             sink.add(ia, (av->array() > S(0)).select(g.array(), S(0)).matrix());
                           });
}

/// Exact GELU, x * Phi(x).
template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  MatrixX<S> out = a.value().unaryExpr([inv_sqrt2](S x) { return S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2)); });
  return detail::result<S>({&a}, OpKind::Gelu, a.shape(), std::move(out),
                           [av = a.storage(), ia = a.node_or_none(), inv_sqrt2](const MatrixX<S>& g,
                                                                                 GradSink<S>& sink) {
                             const S inv_sqrt_2pi = S(1) / std::sqrt(S(2) * std::numbers::pi_v<S>);
                             MatrixX<S> d = av->unaryExpr([&](S x) {
                               return S(0.5) * (S(1) + std::erf(x * inv_sqrt2)) +
                                      x * inv_sqrt_2pi * std::exp(S(-0.5) * x * x);
                             });
                             sink.add(ia, g.cwiseProduct(d));
                           });
}

// ---------------------------------------------------------------------------
// Normalization and reductions

/// Normalizes over the last axis, then applies per-feature gamma/beta.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps = S(1e-5)) {
  const Index n = x.cols();
  if (gamma.numel() != n || beta.numel() != n || gamma.rank() != 1 || beta.rank() != 1) {
    throw DimensionError("layer_norm: affine parameters do not match last axis of " + to_string(x.shape()));
  }
  const MatrixX<S>& xv = x.value();
  MatrixX<S> xhat(xv.rows(), n);
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const S mu = xv.row(r).mean();
    const S var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  MatrixX<S> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  auto saved_xhat = std::make_shared<const MatrixX<S>>(std::move(xhat));
  return detail::result<S>(
      {&x, &gamma, &beta}, OpKind::LayerNorm, x.shape(), std::move(out),
      [saved_xhat, inv_std, gv = gamma.storage(), ix = x.node_or_none(), ig = gamma.node_or_none(),
       ibeta = beta.node_or_none()](const MatrixX<S>& g, GradSink<S>& sink) {
        const MatrixX<S>& xh = *saved_xhat;
        if (ix >= 0) {
          MatrixX<S> dxhat = g.array().rowwise() * gv->row(0).array();
          const auto m = static_cast<S>(dxhat.cols());
          MatrixX<S> dx(dxhat.rows(), dxhat.cols());
          for (Index r = 0; r < dxhat.rows(); ++r) {
            const S mean_d = dxhat.row(r).sum() / m;
            const S mean_dx = dxhat.row(r).dot(xh.row(r)) / m;
            dx.row(r) = inv_std(r) * (dxhat.row(r).array() - mean_d - xh.row(r).array() * mean_dx);
          }
          sink.add(ix, dx);
        }
        if (ig >= 0) sink.add(ig, g.cwiseProduct(xh).colwise().sum());
        if (ibeta >= 0) sink.add(ibeta, g.colwise().sum());
      });
}

namespace detail {
template <typename S>
void softmax_rows_inplace(MatrixX<S>& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    const S mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}
}  // namespace detail

template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
  MatrixX<S> y = x.value();
  detail::softmax_rows_inplace(y);
  auto saved = std::make_shared<const MatrixX<S>>(y);
  return detail::result<S>({&x}, OpKind::SoftmaxRows, x.shape(), std::move(y),
                           [saved, ix = x.node_or_none()](const MatrixX<S>& g, GradSink<S>& sink) {
                             const MatrixX<S>& p = *saved;
                             Eigen::Matrix<S, Eigen::Dynamic, 1> dot = g.cwiseProduct(p).rowwise().sum();
                             sink.add(ix, p.cwiseProduct(g.colwise() - dot));
                           });
}

/// Mean over rows: [r x c] -> {c}. Used for token pooling.
template <typename S>
Tensor<S> mean_rows(const Tensor<S>& x) {
  MatrixX<S> out = x.value().colwise().mean();
  return detail::result<S>({&x}, OpKind::MeanRows, Shape{x.cols()}, std::move(out),
                           [ix = x.node_or_none(), rows = x.rows()](const MatrixX<S>& g, GradSink<S>& sink) {
                             sink.add(ix, g.replicate(rows, 1) / static_cast<S>(rows));
                           });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  MatrixX<S> out = MatrixX<S>::Constant(1, 1, x.value().sum());
  return detail::result<S>({&x}, OpKind::Sum, Shape{}, std::move(out),
                           [ix = x.node_or_none(), r = x.rows(), c = x.cols()](const MatrixX<S>& g,
                                                                               GradSink<S>& sink) {
                             sink.add(ix, MatrixX<S>::Constant(r, c, g(0, 0)));
                           });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  MatrixX<S> out = MatrixX<S>::Constant(1, 1, x.value().mean());
  return detail::result<S>({&x}, OpKind::Mean, Shape{}, std::move(out),
                           [ix = x.node_or_none(), r = x.rows(), c = x.cols()](const MatrixX<S>& g,
                                                                               GradSink<S>& sink) {
                             sink.add(ix, MatrixX<S>::Constant(r, c, g(0, 0) / static_cast<S>(r * c)));
                           });
}

/// Scalar element at a flat (row-major) index.
template <typename S>
Tensor<S> select(const Tensor<S>& x, Index flat) {
  if (flat < 0 || flat >= x.numel()) throw DimensionError("select: index out of range");
  MatrixX<S> out = MatrixX<S>::Constant(1, 1, x.value().data()[flat]);
  return detail::result<S>({&x}, OpKind::Select, Shape{}, std::move(out),
                           [ix = x.node_or_none(), flat, r = x.rows(), c = x.cols()](const MatrixX<S>& g,
                                                                                     GradSink<S>& sink) {
                             MatrixX<S> d = MatrixX<S>::Zero(r, c);
                             d.data()[flat] = g(0, 0);
                             sink.add(ix, d);
                           });
}

/// Sum over rows of -log softmax(logits[t])[targets[t]]; rows whose target is
/// negative are ignored and receive exactly zero gradient.
template <typename S>
Tensor<S> cross_entropy_sum(const Tensor<S>& logits, std::span<const Index> targets) {
  detail::require_rank2(logits, "cross_entropy_sum");
  if (static_cast<Index>(targets.size()) != logits.rows()) {
    throw DimensionError("cross_entropy_sum: one target per logits row required");
  }
  MatrixX<S> p = logits.value();
  detail::softmax_rows_inplace(p);
  S total = 0;
  for (Index t = 0; t < p.rows(); ++t) {
    const Index y = targets[static_cast<std::size_t>(t)];
    if (y < 0) continue;
    if (y >= p.cols()) throw DimensionError("cross_entropy_sum: target index out of range");
    const auto row = logits.value().row(t);
    const S mx = row.maxCoeff();
    total += -(row(y) - mx - std::log((row.array() - mx).exp().sum()));
  }
  std::vector<Index> tg(targets.begin(), targets.end());
  auto saved = std::make_shared<const MatrixX<S>>(std::move(p));
  return detail::result<S>({&logits}, OpKind::CrossEntropy, Shape{}, MatrixX<S>::Constant(1, 1, total),
                           [saved, tg = std::move(tg), il = logits.node_or_none()](const MatrixX<S>& g,
                                                                                   GradSink<S>& sink) {
                             MatrixX<S> d = MatrixX<S>::Zero(saved->rows(), saved->cols());
                             for (Index t = 0; t < d.rows(); ++t) {
                               const Index y = tg[static_cast<std::size_t>(t)];
                               if (y < 0) continue;
                               d.row(t) = saved->row(t) * g(0, 0);
                               d(t, y) -= g(0, 0);
                             }
                             sink.add(il, d);
                           });
}

// ---------------------------------------------------------------------------
// Attention

/// Visibility rule for attention scores. With `causal`, query i sees key j
/// iff j <= i or j < prefix (prefix tokens are mutually visible).
struct AttentionMask {
  bool causal = false;
  Index prefix = 0;

  bool visible(Index query, Index key) const { return !causal || key <= query || key < prefix; }
};

/// Multi-head scaled dot-product attention over already-projected q, k, v.
/// q: [tq x d], k and v: [tk x d], d divisible by heads. Returns [tq x d]
/// with heads concatenated along columns.
template <typename S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, Index heads,
                    AttentionMask mask = {}) {
  detail::require_rank2(q, "attention");
  detail::require_rank2(k, "attention");
  detail::require_rank2(v, "attention");
  const Index d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw DimensionError("attention: q/k/v extents differ");
  }
  if (heads <= 0 || d % heads != 0) throw DimensionError("attention: model width not divisible by head count");
  if (mask.causal && q.rows() != k.rows()) throw DimensionError("attention: causal mask needs a square score matrix");
  const Index dh = d / heads;
  const Index tq = q.rows();
  const Index tk = k.rows();
  const S inv_scale = S(1) / std::sqrt(static_cast<S>(dh));

  auto probs = std::make_shared<std::vector<MatrixX<S>>>(static_cast<std::size_t>(heads));
  MatrixX<S> out(tq, d);
  for (Index h = 0; h < heads; ++h) {
    MatrixX<S> s = (q.value().middleCols(h * dh, dh) * k.value().middleCols(h * dh, dh).transpose()) * inv_scale;
    if (mask.causal) {
      for (Index i = 0; i < tq; ++i)
        for (Index j = 0; j < tk; ++j)
          if (!mask.visible(i, j)) s(i, j) = -std::numeric_limits<S>::infinity();
    }
    detail::softmax_rows_inplace(s);
    out.middleCols(h * dh, dh) = s * v.value().middleCols(h * dh, dh);
    (*probs)[static_cast<std::size_t>(h)] = std::move(s);
  }

  return detail::result<S>(
      {&q, &k, &v}, OpKind::Attention, Shape{tq, d}, std::move(out),
      [probs, qv = q.storage(), kv = k.storage(), vv = v.storage(), iq = q.node_or_none(), ik = k.node_or_none(),
       iv = v.node_or_none(), heads, dh, inv_scale](const MatrixX<S>& g, GradSink<S>& sink) {
        MatrixX<S> dq = MatrixX<S>::Zero(qv->rows(), qv->cols());
        MatrixX<S> dk = MatrixX<S>::Zero(kv->rows(), kv->cols());
        MatrixX<S> dv = MatrixX<S>::Zero(vv->rows(), vv->cols());
        for (Index h = 0; h < heads; ++h) {
          const MatrixX<S>& p = (*probs)[static_cast<std::size_t>(h)];
          const auto gh = g.middleCols(h * dh, dh);
          dv.middleCols(h * dh, dh).noalias() = p.transpose() * gh;
          MatrixX<S> dp = gh * vv->middleCols(h * dh, dh).transpose();
          Eigen::Matrix<S, Eigen::Dynamic, 1> dot = dp.cwiseProduct(p).rowwise().sum();
          MatrixX<S> ds = p.cwiseProduct(dp.colwise() - dot) * inv_scale;
          dq.middleCols(h * dh, dh).noalias() = ds * kv->middleCols(h * dh, dh);
          dk.middleCols(h * dh, dh).noalias() = ds.transpose() * qv->middleCols(h * dh, dh);
        }
        sink.add(iq, dq);
        sink.add(ik, dk);
        sink.add(iv, dv);
      });
}

}  // namespace ase
