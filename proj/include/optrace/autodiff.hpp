#pragma once

// Reverse-mode differentiation over dense row/column matrices.
//
// A Graph records primitive applications in creation order, which is a
// topological order, so backward() is a single reverse sweep. Graphs are
// rebuilt for every batch; there is no persistent tape.

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace ot::ad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;
using NodeId = std::size_t;

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while its Graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, NodeId id) : graph_(graph), id_(id) {}

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Index rows() const { return value().rows(); }
  [[nodiscard]] Index cols() const { return value().cols(); }
  [[nodiscard]] std::vector<Index> shape() const { return {rows(), cols()}; }
  [[nodiscard]] NodeId id() const { return id_; }
  [[nodiscard]] Graph* graph() const { return graph_; }
  [[nodiscard]] bool requires_grad() const;
  [[nodiscard]] bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

/// Gradient sink handed to vector-Jacobian products during backward().
class GradientAccumulator {
 public:
  explicit GradientAccumulator(std::vector<Matrix>& grads, const Graph& graph)
      : grads_(grads), graph_(graph) {}

  /// grads[id] += contribution (allocating zeros on first touch).
  template <typename Derived>
  void add(NodeId id, const Eigen::MatrixBase<Derived>& contribution);

  /// Mutable gradient buffer of `id`, zero-initialised on first touch.
  Matrix& buffer(NodeId id);

  [[nodiscard]] bool wants(NodeId id) const;

 private:
  std::vector<Matrix>& grads_;
  const Graph& graph_;
};

using Backward = std::function<void(const Matrix& out_grad, GradientAccumulator& acc)>;

/// Per-node gradients produced by Graph::backward.
class Gradients {
 public:
  Gradients() = default;
  Gradients(std::vector<Matrix> grads, const Graph& graph);

  /// Gradient of `v`; a zero matrix of v's shape when v was not reached.
  [[nodiscard]] Matrix of(const Var& v) const;
  [[nodiscard]] Matrix of(NodeId id) const;
  [[nodiscard]] bool reached(NodeId id) const { return id < grads_.size() && grads_[id].size() > 0; }

 private:
  std::vector<Matrix> grads_;
  std::vector<std::pair<Index, Index>> shapes_;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that does not receive gradients.
  Var constant(Matrix value);
  /// Leaf that receives gradients.
  Var leaf(Matrix value);

  /// Records a node. `backward` may be empty for nodes without differentiable inputs.
  Var record(Matrix value, std::vector<NodeId> parents, Backward backward, const char* op);

  [[nodiscard]] const Matrix& value(NodeId id) const { return nodes_[id].value; }
  [[nodiscard]] bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  [[nodiscard]] const char* op(NodeId id) const { return nodes_[id].op; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a 1x1 loss. Fan-out contributions are summed.
  /// Throws ShapeError when `loss` is not scalar.
  Gradients backward(const Var& loss) const;

 private:
  struct Node {
    Matrix value;
    std::vector<NodeId> parents;
    Backward backward;
    bool requires_grad = false;
    const char* op = "";
  };
  std::deque<Node> nodes_;
};

template <typename Derived>
void GradientAccumulator::add(NodeId id, const Eigen::MatrixBase<Derived>& contribution) {
  if (!wants(id)) return;
  Matrix& g = grads_[id];
  if (g.size() == 0) {
    g = contribution;
  } else {
    g += contribution;
  }
}

enum class Axis { Rows, Cols };

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Primitives. Each throws ShapeError naming the primitive and both shapes on
// incompatible inputs.

/// a (n x k) times b (k x m).
Var matmul(const Var& a, const Var& b);
/// Elementwise sum. `b` may also be a 1 x cols row broadcast over the rows of `a`.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
/// Elementwise (Hadamard) product.
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var concat(std::span<const Var> parts, Axis axis = Axis::Cols);
Var concat(std::initializer_list<Var> parts, Axis axis = Axis::Cols);
Var slice(const Var& a, Index start, Index length, Axis axis = Axis::Rows);
Var transpose(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
/// Row gather: result row r is table row indices[r].
Var gather(const Var& table, std::span<const int> indices);
/// Bag gather: result row r is the sum of table rows in bags[r] (bags non-empty).
Var gather_sum(const Var& table, const std::vector<std::vector<int>>& bags);
/// rows x 1 column of row sums.
Var row_sum(const Var& a);
/// 1 x 1 sum of all entries.
Var sum(const Var& a);
/// Row-wise softmax with max subtraction. Entries equal to -inf get weight 0;
/// a row that is entirely -inf yields a zero row.
Var softmax(const Var& a);
/// Replaces entries where mask is true by `fill`; no gradient flows to them.
using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;
Var masked_fill(const Var& a, const BoolMatrix& mask, double fill);

/// Plain value helpers mirroring the primitives, for inference code.
Matrix softmax_rows(const Matrix& logits);

// ---------------------------------------------------------------------------
// Central finite-difference checking.

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_input = 0;
  Index worst_row = 0;
  Index worst_col = 0;
  std::size_t entries_checked = 0;
};

/// Relative error between an analytic and numeric derivative, floored so that
/// entries near zero are compared absolutely.
double relative_error(double analytic, double numeric);

using ScalarFn = std::function<Var(Graph&, std::span<const Var>)>;

/// Compares backward() against (f(x+εe) − f(x−εe)) / 2ε entrywise for every
/// input matrix. `f` must return a 1x1 Var.
GradCheckResult finite_difference_check(const ScalarFn& f, std::span<const Matrix> inputs, double eps = 1e-5);

/// Single-input form.
GradCheckResult finite_difference_check(const std::function<Var(Graph&, const Var&)>& f, const Matrix& x,
                                        double eps = 1e-5);

}  // namespace ot::ad
