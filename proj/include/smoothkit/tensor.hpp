#ifndef SMOOTHKIT_TENSOR_HPP
#define SMOOTHKIT_TENSOR_HPP

// Dense/sparse storage and the define-by-run gradient tape.
//
// A Tape owns every value produced during one forward pass. Tensors are
// lightweight handles (tape pointer + node id); they stay valid for as long
// as the tape does. Parameters live outside the tape as plain matrices and
// are bound as leaves at the start of each pass.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace smoothkit {

using Index = std::ptrdiff_t;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Column = Eigen::VectorXd;

/// Boolean vector stored as bytes (std::vector<bool> is not addressable).
using Mask = std::vector<std::uint8_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(Index r, Index c) {
  return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

inline std::size_t mask_count(const Mask& m) {
  return static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
}

// ---------------------------------------------------------------------------
// SparseMatrix (CSR)
// ---------------------------------------------------------------------------

struct Triplet {
  Index row;
  Index col;
  double value;
};

class SparseMatrix {
 public:
  SparseMatrix() = default;

  SparseMatrix(Index rows, Index cols, std::vector<Index> row_ptr,
               std::vector<Index> col_idx, std::vector<double> values)
      : rows_(rows), cols_(cols), row_ptr_(std::move(row_ptr)),
        col_idx_(std::move(col_idx)), values_(std::move(values)) {
    validate();
  }

  /// Duplicate coordinates are summed.
  static SparseMatrix from_triplets(Index rows, Index cols, std::vector<Triplet> t) {
    for (const auto& e : t) {
      if (e.row < 0 || e.row >= rows || e.col < 0 || e.col >= cols) {
        throw DimensionError("sparse triplet out of bounds");
      }
    }
    std::sort(t.begin(), t.end(), [](const Triplet& a, const Triplet& b) {
      return a.row != b.row ? a.row < b.row : a.col < b.col;
    });
    std::vector<Index> ptr(static_cast<std::size_t>(rows) + 1, 0);
    std::vector<Index> idx;
    std::vector<double> val;
    idx.reserve(t.size());
    val.reserve(t.size());
    for (std::size_t k = 0; k < t.size(); ++k) {
      if (!idx.empty() && k > 0 && t[k].row == t[k - 1].row && t[k].col == t[k - 1].col) {
        val.back() += t[k].value;
        continue;
      }
      idx.push_back(t[k].col);
      val.push_back(t[k].value);
      ++ptr[static_cast<std::size_t>(t[k].row) + 1];
    }
    for (std::size_t r = 0; r < static_cast<std::size_t>(rows); ++r) ptr[r + 1] += ptr[r];
    return SparseMatrix(rows, cols, std::move(ptr), std::move(idx), std::move(val));
  }

  static SparseMatrix identity(Index n) {
    std::vector<Index> ptr(static_cast<std::size_t>(n) + 1);
    std::vector<Index> idx(static_cast<std::size_t>(n));
    for (Index i = 0; i <= n; ++i) ptr[static_cast<std::size_t>(i)] = i;
    for (Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    return SparseMatrix(n, n, std::move(ptr), std::move(idx),
                        std::vector<double>(static_cast<std::size_t>(n), 1.0));
  }

  static SparseMatrix empty(Index rows, Index cols) {
    return SparseMatrix(rows, cols, std::vector<Index>(static_cast<std::size_t>(rows) + 1, 0), {}, {});
  }

  Index rows() const { return rows_; }
  Index cols() const { return cols_; }
  std::size_t nnz() const { return col_idx_.size(); }

  std::span<const Index> row_ptr() const { return row_ptr_; }
  std::span<const Index> col_idx() const { return col_idx_; }
  std::span<const double> values() const { return values_; }

  Index row_begin(Index r) const { return row_ptr_[static_cast<std::size_t>(r)]; }
  Index row_end(Index r) const { return row_ptr_[static_cast<std::size_t>(r) + 1]; }
  Index row_nnz(Index r) const { return row_end(r) - row_begin(r); }
  Index col_at(Index k) const { return col_idx_[static_cast<std::size_t>(k)]; }
  double value_at(Index k) const { return values_[static_cast<std::size_t>(k)]; }

  double coeff(Index r, Index c) const {
    auto first = col_idx_.begin() + row_begin(r);
    auto last = col_idx_.begin() + row_end(r);
    auto it = std::lower_bound(first, last, c);
    if (it == last || *it != c) return 0.0;
    return values_[static_cast<std::size_t>(it - col_idx_.begin())];
  }

  Matrix densify() const {
    Matrix d = Matrix::Zero(rows_, cols_);
    for (Index r = 0; r < rows_; ++r) {
      for (Index k = row_begin(r); k < row_end(r); ++k) d(r, col_at(k)) += value_at(k);
    }
    return d;
  }

  bool is_symmetric() const {
    if (rows_ != cols_) return false;
    for (Index r = 0; r < rows_; ++r) {
      for (Index k = row_begin(r); k < row_end(r); ++k) {
        if (coeff(col_at(k), r) != value_at(k)) return false;
      }
    }
    return true;
  }

  bool has_diagonal_entries() const {
    for (Index r = 0; r < std::min(rows_, cols_); ++r) {
      if (coeff(r, r) != 0.0) return true;
    }
    return false;
  }

  /// Same structure, values replaced.
  SparseMatrix with_values(std::vector<double> values) const {
    return SparseMatrix(rows_, cols_, row_ptr_, col_idx_, std::move(values));
  }

  friend bool operator==(const SparseMatrix&, const SparseMatrix&) = default;

 private:
  void validate() const {
    if (rows_ < 0 || cols_ < 0) throw DimensionError("negative sparse shape");
    if (row_ptr_.size() != static_cast<std::size_t>(rows_) + 1) {
      throw DimensionError("row_ptr length must be rows + 1");
    }
    if (row_ptr_.front() != 0 || static_cast<std::size_t>(row_ptr_.back()) != col_idx_.size() ||
        col_idx_.size() != values_.size()) {
      throw DimensionError("inconsistent CSR arrays");
    }
    for (std::size_t r = 0; r < static_cast<std::size_t>(rows_); ++r) {
      if (row_ptr_[r] > row_ptr_[r + 1]) throw DimensionError("row offsets must be nondecreasing");
      for (Index k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
        const Index c = col_idx_[static_cast<std::size_t>(k)];
        if (c < 0 || c >= cols_) throw DimensionError("column index out of bounds");
        if (k > row_ptr_[r] && col_idx_[static_cast<std::size_t>(k) - 1] >= c) {
          throw DimensionError("column indices must be strictly increasing within a row");
        }
      }
    }
  }

  Index rows_ = 0;
  Index cols_ = 0;
  std::vector<Index> row_ptr_{0};
  std::vector<Index> col_idx_;
  std::vector<double> values_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

using NodeId = std::size_t;

enum class OpKind {
  Leaf,
  Constant,
  StopGradient,
  MatMul,
  SpMM,
  Add,
  AddRowVector,
  Sub,
  Mul,
  Scale,
  Relu,
  LeakyRelu,
  Elu,
  Dropout,
  ConcatCols,
  ConcatRows,
  SliceCols,
  MeanRows,
  SumRows,
  MaxRows,
  Sum,
  SumSquares,
  WeightedSumSquares,
  CosineDistance,
  Softmax,
  SoftmaxCrossEntropy,
  KlDivergence,
  GatAttention,
};

class Tape;

/// Handle to a value recorded on a Tape.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  NodeId id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, NodeId)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable leaf.
  Tensor variable(Matrix value) { return push(OpKind::Leaf, std::move(value), {}, true, nullptr); }

  /// Leaf that never receives an adjoint.
  Tensor constant(Matrix value) { return push(OpKind::Constant, std::move(value), {}, false, nullptr); }

  /// Records an op. It requires grad when any input does.
  Tensor record(OpKind kind, Matrix value, std::vector<NodeId> inputs, Backward backward) {
    bool rg = false;
    for (NodeId i : inputs) rg = rg || nodes_.at(i).requires_grad;
    return push(kind, std::move(value), std::move(inputs), rg, std::move(backward));
  }

  /// Forward identity that cuts the adjoint path to `input`.
  Tensor stop_gradient_of(NodeId input) {
    Matrix v = nodes_.at(input).value;
    if (sg_replay_ < frozen_sg_.size()) {
      const Matrix& f = frozen_sg_[sg_replay_++];
      if (f.rows() != v.rows() || f.cols() != v.cols()) throw DimensionError("frozen stop-gradient shape mismatch");
      v = f;
    }
    return push(OpKind::StopGradient, std::move(v), {input}, false,
                [](Tape& t, NodeId self) { t.block(self, 0); });
  }

  /// Outputs of every StopGradient node, in creation order.
  std::vector<Matrix> stop_gradient_values() const {
    std::vector<Matrix> out;
    for (const auto& n : nodes_) {
      if (n.kind == OpKind::StopGradient) out.push_back(n.value);
    }
    return out;
  }

  /// Makes the k-th StopGradient node created from now on output values[k]
  /// instead of its input. Finite-difference checks use this to hold targets
  /// fixed while the online side is perturbed.
  void freeze_stop_gradients(std::vector<Matrix> values) {
    frozen_sg_ = std::move(values);
    sg_replay_ = 0;
  }

  const Matrix& value(NodeId id) const { return nodes_.at(id).value; }
  OpKind kind(NodeId id) const { return nodes_.at(id).kind; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

  /// Whether backward should compute an adjoint for `id`: trainable paths,
  /// plus StopGradient nodes while tracing.
  bool wants_adjoint(NodeId id) const {
    const Node& n = nodes_.at(id);
    return n.requires_grad || (tracing_ && n.kind == OpKind::StopGradient);
  }
  std::size_t size() const { return nodes_.size(); }

  /// Adjoint of `t` after backward(); zeros when nothing reached it.
  Matrix grad(const Tensor& t) const {
    const Node& n = nodes_.at(t.id());
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  const Matrix& upstream(NodeId self) const { return nodes_.at(self).grad; }

  /// Adds an adjoint contribution into input `slot` of node `from`.
  void accumulate(NodeId from, std::size_t slot, const Matrix& contribution) {
    const NodeId target = nodes_.at(from).inputs.at(slot);
    if (tracing_) {
      double& m = trace_[{from, slot}];
      m = std::max(m, contribution.size() ? contribution.cwiseAbs().maxCoeff() : 0.0);
    }
    Node& n = nodes_[target];
    if (!wants_adjoint(target)) return;
    if (contribution.rows() != n.value.rows() || contribution.cols() != n.value.cols()) {
      throw DimensionError("adjoint shape mismatch in backward");
    }
    if (n.grad.size() == 0) {
      n.grad = contribution;
    } else {
      n.grad += contribution;
    }
  }

  /// Records that node `from` forwards nothing into `slot`.
  void block(NodeId from, std::size_t slot) {
    if (tracing_) trace_[{from, slot}] = std::max(trace_[{from, slot}], 0.0);
  }

  /// When on, every (node, input slot) adjoint transfer is recorded as its
  /// max-abs magnitude, and StopGradient nodes keep the adjoint they receive.
  void set_tracing(bool on) { tracing_ = on; }

  /// Max-abs adjoint that `from` sent to its input `slot`; -1 when never visited.
  double traced_adjoint(NodeId from, std::size_t slot) const {
    auto it = trace_.find({from, slot});
    return it == trace_.end() ? -1.0 : it->second;
  }

  /// Ids of nodes that take `id` as an input.
  std::vector<NodeId> consumers(NodeId id) const {
    std::vector<NodeId> out;
    for (NodeId k = id + 1; k < nodes_.size(); ++k) {
      for (NodeId in : nodes_[k].inputs) {
        if (in == id) {
          out.push_back(k);
          break;
        }
      }
    }
    return out;
  }

  void backward(const Tensor& loss) {
    if (loss.tape() != this) throw std::invalid_argument("loss is not on this tape");
    Node& root = nodes_.at(loss.id());
    if (root.value.rows() != 1 || root.value.cols() != 1) {
      throw DimensionError("backward requires a scalar loss, got " +
                           shape_str(root.value.rows(), root.value.cols()));
    }
    for (auto& n : nodes_) n.grad.resize(0, 0);
    trace_.clear();
    root.grad = Matrix::Ones(1, 1);
    for (NodeId k = loss.id() + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (n.grad.size() == 0 || !n.backward) continue;
      if (!wants_adjoint(k)) continue;
      n.backward(*this, k);
    }
  }

 private:
  struct Node {
    OpKind kind;
    Matrix value;
    Matrix grad;
    std::vector<NodeId> inputs;
    bool requires_grad;
    Backward backward;
  };

  Tensor push(OpKind kind, Matrix value, std::vector<NodeId> inputs, bool rg, Backward bw) {
    nodes_.push_back(Node{kind, std::move(value), Matrix(), std::move(inputs), rg, std::move(bw)});
    return Tensor(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;  // stable addresses: value() references survive later records
  bool tracing_ = false;
  std::map<std::pair<NodeId, std::size_t>, double> trace_;
  std::vector<Matrix> frozen_sg_;
  std::size_t sg_replay_ = 0;
};

inline const Matrix& Tensor::value() const { return tape_->value(id_); }
inline bool Tensor::requires_grad() const { return tape_->requires_grad(id_); }
inline double Tensor::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw DimensionError("tensor is not a scalar");
  return v(0, 0);
}

}  // namespace smoothkit

#endif  // SMOOTHKIT_TENSOR_HPP
