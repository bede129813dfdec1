#include "optrace/autodiff.hpp"

#include "optrace/errors.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

namespace ot::ad {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

Graph& graph_of(const Var& a) {
  if (!a.valid()) throw ShapeError("operation on an unbound Var");
  return *a.graph();
}

Graph& graph_of(const Var& a, const Var& b) {
  Graph& g = graph_of(a);
  if (b.graph() != &g) throw ShapeError("operands belong to different graphs");
  return g;
}

}  // namespace

const Matrix& Var::value() const { return graph_->value(id_); }

bool Var::requires_grad() const { return graph_->requires_grad(id_); }

Matrix& GradientAccumulator::buffer(NodeId id) {
  Matrix& g = grads_[id];
  if (g.size() == 0) g = Matrix::Zero(graph_.value(id).rows(), graph_.value(id).cols());
  return g;
}

bool GradientAccumulator::wants(NodeId id) const { return graph_.requires_grad(id); }

Gradients::Gradients(std::vector<Matrix> grads, const Graph& graph) : grads_(std::move(grads)) {
  shapes_.reserve(graph.size());
  for (NodeId i = 0; i < graph.size(); ++i) shapes_.emplace_back(graph.value(i).rows(), graph.value(i).cols());
}

Matrix Gradients::of(NodeId id) const {
  if (id >= shapes_.size()) throw LookupError("gradient requested for unknown node");
  if (grads_[id].size() > 0) return grads_[id];
  return Matrix::Zero(shapes_[id].first, shapes_[id].second);
}

Matrix Gradients::of(const Var& v) const { return of(v.id()); }

Var Graph::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, "constant"});
  return {this, nodes_.size() - 1};
}

Var Graph::leaf(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, "leaf"});
  return {this, nodes_.size() - 1};
}

Var Graph::record(Matrix value, std::vector<NodeId> parents, Backward backward, const char* op) {
  bool rg = false;
  for (NodeId p : parents) rg = rg || nodes_[p].requires_grad;
  if (!rg) backward = nullptr;
  nodes_.push_back(Node{std::move(value), std::move(parents), std::move(backward), rg, op});
  return {this, nodes_.size() - 1};
}

Gradients Graph::backward(const Var& loss) const {
  if (loss.graph() != this) throw ShapeError("backward: loss belongs to another graph");
  const Matrix& lv = value(loss.id());
  if (lv.rows() != 1 || lv.cols() != 1) throw ShapeError("backward: loss must be 1x1, got " + shape_str(lv));
  std::vector<Matrix> grads(nodes_.size());
  GradientAccumulator acc(grads, *this);
  if (nodes_[loss.id()].requires_grad) grads[loss.id()] = Matrix::Ones(1, 1);
  for (NodeId i = loss.id() + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (!n.backward || grads[i].size() == 0) continue;
    n.backward(grads[i], acc);
  }
  return Gradients(std::move(grads), *this);
}

// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Graph& g = graph_of(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) shape_error("matmul", av, bv);
  NodeId ia = a.id(), ib = b.id();
  return g.record(av * bv, {ia, ib},
                  [&g, ia, ib](const Matrix& go, GradientAccumulator& acc) {
                    if (acc.wants(ia)) acc.buffer(ia).noalias() += go * g.value(ib).transpose();
                    if (acc.wants(ib)) acc.buffer(ib).noalias() += g.value(ia).transpose() * go;
                  },
                  "matmul");
}

Var add(const Var& a, const Var& b) {
  Graph& g = graph_of(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  NodeId ia = a.id(), ib = b.id();
  if (av.rows() == bv.rows() && av.cols() == bv.cols()) {
    return g.record(av + bv, {ia, ib},
                    [ia, ib](const Matrix& go, GradientAccumulator& acc) {
                      acc.add(ia, go);
                      acc.add(ib, go);
                    },
                    "add");
  }
  if (bv.rows() == 1 && bv.cols() == av.cols()) {
    Matrix out = av.rowwise() + bv.row(0);
    return g.record(std::move(out), {ia, ib},
                    [ia, ib](const Matrix& go, GradientAccumulator& acc) {
                      acc.add(ia, go);
                      acc.add(ib, go.colwise().sum());
                    },
                    "add");
  }
  shape_error("add", av, bv);
}

Var sub(const Var& a, const Var& b) {
  Graph& g = graph_of(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error("sub", av, bv);
  NodeId ia = a.id(), ib = b.id();
  return g.record(av - bv, {ia, ib},
                  [ia, ib](const Matrix& go, GradientAccumulator& acc) {
                    acc.add(ia, go);
                    acc.add(ib, -go);
                  },
                  "sub");
}

Var mul(const Var& a, const Var& b) {
  Graph& g = graph_of(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error("mul", av, bv);
  NodeId ia = a.id(), ib = b.id();
  return g.record(av.cwiseProduct(bv), {ia, ib},
                  [&g, ia, ib](const Matrix& go, GradientAccumulator& acc) {
                    acc.add(ia, go.cwiseProduct(g.value(ib)));
                    acc.add(ib, go.cwiseProduct(g.value(ia)));
                  },
                  "mul");
}

Var scale(const Var& a, double factor) {
  Graph& g = graph_of(a);
  NodeId ia = a.id();
  return g.record(a.value() * factor, {ia},
                  [ia, factor](const Matrix& go, GradientAccumulator& acc) { acc.add(ia, go * factor); }, "scale");
}

Var concat(std::span<const Var> parts, Axis axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Graph& g = graph_of(parts[0]);
  Index rows = 0, cols = 0;
  const Matrix& first = parts[0].value();
  for (const Var& p : parts) {
    if (p.graph() != &g) throw ShapeError("concat: operands belong to different graphs");
    const Matrix& v = p.value();
    if (axis == Axis::Cols) {
      if (v.rows() != first.rows()) shape_error("concat", first, v);
      cols += v.cols();
    } else {
      if (v.cols() != first.cols()) shape_error("concat", first, v);
      rows += v.rows();
    }
  }
  if (axis == Axis::Cols) rows = first.rows();
  else cols = first.cols();

  Matrix out(rows, cols);
  std::vector<NodeId> ids;
  std::vector<Index> offsets;
  std::vector<Index> extents;
  Index off = 0;
  for (const Var& p : parts) {
    const Matrix& v = p.value();
    ids.push_back(p.id());
    offsets.push_back(off);
    if (axis == Axis::Cols) {
      out.middleCols(off, v.cols()) = v;
      extents.push_back(v.cols());
      off += v.cols();
    } else {
      out.middleRows(off, v.rows()) = v;
      extents.push_back(v.rows());
      off += v.rows();
    }
  }
  std::vector<NodeId> parents = ids;
  return g.record(std::move(out), std::move(parents),
                  [ids, offsets, extents, axis](const Matrix& go, GradientAccumulator& acc) {
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (axis == Axis::Cols) acc.add(ids[k], go.middleCols(offsets[k], extents[k]));
                      else acc.add(ids[k], go.middleRows(offsets[k], extents[k]));
                    }
                  },
                  "concat");
}

Var concat(std::initializer_list<Var> parts, Axis axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var slice(const Var& a, Index start, Index length, Axis axis) {
  Graph& g = graph_of(a);
  const Matrix& av = a.value();
  const Index extent = axis == Axis::Rows ? av.rows() : av.cols();
  if (start < 0 || length < 0 || start + length > extent) {
    std::ostringstream os;
    os << "slice: range [" << start << ", " << start + length << ") out of bounds for shape " << shape_str(av);
    throw ShapeError(os.str());
  }
  NodeId ia = a.id();
  Matrix out = axis == Axis::Rows ? Matrix(av.middleRows(start, length)) : Matrix(av.middleCols(start, length));
  return g.record(std::move(out), {ia},
                  [ia, start, length, axis](const Matrix& go, GradientAccumulator& acc) {
                    if (!acc.wants(ia)) return;
                    Matrix& buf = acc.buffer(ia);
                    if (axis == Axis::Rows) buf.middleRows(start, length) += go;
                    else buf.middleCols(start, length) += go;
                  },
                  "slice");
}

Var transpose(const Var& a) {
  Graph& g = graph_of(a);
  NodeId ia = a.id();
  return g.record(a.value().transpose(), {ia},
                  [ia](const Matrix& go, GradientAccumulator& acc) { acc.add(ia, go.transpose()); }, "transpose");
}

Var tanh(const Var& a) {
  Graph& g = graph_of(a);
  NodeId ia = a.id();
  Matrix out = a.value().array().tanh().matrix();
  auto y = std::make_shared<Matrix>(out);
  return g.record(std::move(out), {ia},
                  [ia, y](const Matrix& go, GradientAccumulator& acc) {
                    acc.add(ia, (go.array() * (1.0 - y->array().square())).matrix());
                  },
                  "tanh");
}

Var sigmoid(const Var& a) {
  Graph& g = graph_of(a);
  NodeId ia = a.id();
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  auto y = std::make_shared<Matrix>(out);
  return g.record(std::move(out), {ia},
                  [ia, y](const Matrix& go, GradientAccumulator& acc) {
                    acc.add(ia, (go.array() * y->array() * (1.0 - y->array())).matrix());
                  },
                  "sigmoid");
}

Var exp(const Var& a) {
  Graph& g = graph_of(a);
  NodeId ia = a.id();
  Matrix out = a.value().array().exp().matrix();
  auto y = std::make_shared<Matrix>(out);
  return g.record(std::move(out), {ia},
                  [ia, y](const Matrix& go, GradientAccumulator& acc) { acc.add(ia, go.cwiseProduct(*y)); }, "exp");
}

Var gather(const Var& table, std::span<const int> indices) {
  Graph& g = graph_of(table);
  const Matrix& tv = table.value();
  Matrix out(static_cast<Index>(indices.size()), tv.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const int i = indices[r];
    if (i < 0 || i >= tv.rows()) {
      throw LookupError("gather: row " + std::to_string(i) + " outside table of " + std::to_string(tv.rows()) +
                        " rows");
    }
    out.row(static_cast<Index>(r)) = tv.row(i);
  }
  NodeId it = table.id();
  std::vector<int> idx(indices.begin(), indices.end());
  return g.record(std::move(out), {it},
                  [it, idx = std::move(idx)](const Matrix& go, GradientAccumulator& acc) {
                    if (!acc.wants(it)) return;
                    Matrix& buf = acc.buffer(it);
                    for (std::size_t r = 0; r < idx.size(); ++r) buf.row(idx[r]) += go.row(static_cast<Index>(r));
                  },
                  "gather");
}

Var gather_sum(const Var& table, const std::vector<std::vector<int>>& bags) {
  Graph& g = graph_of(table);
  const Matrix& tv = table.value();
  Matrix out = Matrix::Zero(static_cast<Index>(bags.size()), tv.cols());
  for (std::size_t r = 0; r < bags.size(); ++r) {
    if (bags[r].empty()) throw LookupError("gather_sum: empty index set at row " + std::to_string(r));
    for (int i : bags[r]) {
      if (i < 0 || i >= tv.rows()) {
        throw LookupError("gather_sum: row " + std::to_string(i) + " outside table of " + std::to_string(tv.rows()) +
                          " rows");
      }
      out.row(static_cast<Index>(r)) += tv.row(i);
    }
  }
  NodeId it = table.id();
  return g.record(std::move(out), {it},
                  [it, bags](const Matrix& go, GradientAccumulator& acc) {
                    if (!acc.wants(it)) return;
                    Matrix& buf = acc.buffer(it);
                    for (std::size_t r = 0; r < bags.size(); ++r)
                      for (int i : bags[r]) buf.row(i) += go.row(static_cast<Index>(r));
                  },
                  "gather_sum");
}

Var row_sum(const Var& a) {
  Graph& g = graph_of(a);
  NodeId ia = a.id();
  const Index cols = a.cols();
  return g.record(a.value().rowwise().sum(), {ia},
                  [ia, cols](const Matrix& go, GradientAccumulator& acc) { acc.add(ia, go.replicate(1, cols)); },
                  "row_sum");
}

Var sum(const Var& a) {
  Graph& g = graph_of(a);
  NodeId ia = a.id();
  const Index rows = a.rows(), cols = a.cols();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return g.record(std::move(out), {ia},
                  [ia, rows, cols](const Matrix& go, GradientAccumulator& acc) {
                    acc.add(ia, Matrix::Constant(rows, cols, go(0, 0)));
                  },
                  "sum");
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    if (m == kNegInf) {
      out.row(r).setZero();
      continue;
    }
    double z = 0.0;
    for (Index c = 0; c < logits.cols(); ++c) {
      const double e = logits(r, c) == kNegInf ? 0.0 : std::exp(logits(r, c) - m);
      out(r, c) = e;
      z += e;
    }
    out.row(r) /= z;
  }
  return out;
}

Var softmax(const Var& a) {
  Graph& g = graph_of(a);
  NodeId ia = a.id();
  Matrix out = softmax_rows(a.value());
  auto y = std::make_shared<Matrix>(out);
  return g.record(std::move(out), {ia},
                  [ia, y](const Matrix& go, GradientAccumulator& acc) {
                    // dx = y ⊙ (go − <go, y>) per row
                    const Eigen::VectorXd dots = go.cwiseProduct(*y).rowwise().sum();
                    Matrix dx = y->cwiseProduct(go - dots.replicate(1, go.cols()));
                    acc.add(ia, dx);
                  },
                  "softmax");
}

Var masked_fill(const Var& a, const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>& mask, double fill) {
  Graph& g = graph_of(a);
  const Matrix& av = a.value();
  if (mask.rows() != av.rows() || mask.cols() != av.cols()) {
    throw ShapeError("masked_fill: incompatible shapes " + shape_str(av) + " and " + std::to_string(mask.rows()) +
                     "x" + std::to_string(mask.cols()));
  }
  Matrix out = mask.select(Matrix::Constant(av.rows(), av.cols(), fill), av);
  NodeId ia = a.id();
  return g.record(std::move(out), {ia},
                  [ia, mask](const Matrix& go, GradientAccumulator& acc) {
                    acc.add(ia, mask.select(Matrix::Zero(go.rows(), go.cols()), go));
                  },
                  "masked_fill");
}

// ---------------------------------------------------------------------------

double relative_error(double analytic, double numeric) {
  constexpr double kFloor = 1e-6;
  const double diff = std::abs(analytic - numeric);
  if (diff == 0.0) return 0.0;
  return diff / std::max({std::abs(analytic), std::abs(numeric), kFloor});
}

GradCheckResult finite_difference_check(const ScalarFn& f, std::span<const Matrix> inputs, double eps) {
  std::vector<Matrix> analytic;
  {
    Graph g;
    std::vector<Var> vars;
    for (const Matrix& m : inputs) vars.push_back(g.leaf(m));
    Var loss = f(g, vars);
    Gradients grads = g.backward(loss);
    for (const Var& v : vars) analytic.push_back(grads.of(v));
  }

  auto evaluate = [&](const std::vector<Matrix>& xs) {
    Graph g;
    std::vector<Var> vars;
    for (const Matrix& m : xs) vars.push_back(g.constant(m));
    return f(g, vars).value()(0, 0);
  };

  GradCheckResult res;
  std::vector<Matrix> xs(inputs.begin(), inputs.end());
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (Index r = 0; r < xs[k].rows(); ++r) {
      for (Index c = 0; c < xs[k].cols(); ++c) {
        const double orig = xs[k](r, c);
        xs[k](r, c) = orig + eps;
        const double fp = evaluate(xs);
        xs[k](r, c) = orig - eps;
        const double fm = evaluate(xs);
        xs[k](r, c) = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = analytic[k](r, c);
        const double rel = relative_error(a, numeric);
        res.max_abs_error = std::max(res.max_abs_error, std::abs(a - numeric));
        if (rel > res.max_rel_error || !std::isfinite(rel)) {
          res.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
          res.worst_input = k;
          res.worst_row = r;
          res.worst_col = c;
        }
        ++res.entries_checked;
      }
    }
  }
  return res;
}

GradCheckResult finite_difference_check(const std::function<Var(Graph&, const Var&)>& f, const Matrix& x,
                                        double eps) {
  const Matrix inputs[] = {x};
  return finite_difference_check([&f](Graph& g, std::span<const Var> v) { return f(g, v[0]); },
                                 std::span<const Matrix>(inputs, 1), eps);
}

}  // namespace ot::ad
