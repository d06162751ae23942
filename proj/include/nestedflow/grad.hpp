#pragma once

// Reverse-mode differentiation over matrix-valued nodes.
//
// Every node holds a dense Matrix. Batches are laid out one datapoint per
// row, so a single node carries a whole minibatch and the tape stays short.
// Nodes are appended in evaluation order, which is a topological order, and
// the backward pass walks them in reverse.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nestedflow/errors.hpp"
#include "nestedflow/linalg.hpp"

namespace nestedflow {

struct ParameterBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const noexcept { return rows * cols; }
  bool operator==(const ParameterBlock&) const = default;
};

/// Flat parameter storage with a registry of named, disjoint blocks that
/// together cover the whole vector.
class ParameterVector {
 public:
  std::size_t add_block(std::string name, std::size_t rows, std::size_t cols,
                        std::span<const double> init) {
    if (init.size() != rows * cols) throw DomainError("add_block: size mismatch for " + name);
    if (!all_finite(init)) throw DomainError("add_block: non-finite values in " + name);
    for (const auto& b : blocks_)
      if (b.name == name) throw DomainError("add_block: duplicate block " + name);
    blocks_.push_back({std::move(name), values_.size(), rows, cols});
    values_.insert(values_.end(), init.begin(), init.end());
    return blocks_.size() - 1;
  }

  const std::vector<ParameterBlock>& blocks() const noexcept { return blocks_; }
  const ParameterBlock& block(std::string_view name) const {
    for (const auto& b : blocks_)
      if (b.name == name) return b;
    throw DomainError("unknown parameter block " + std::string(name));
  }

  std::size_t size() const noexcept { return values_.size(); }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::span<const double> values(const ParameterBlock& b) const {
    return std::span<const double>(values_).subspan(b.offset, b.size());
  }
  std::span<double> values(const ParameterBlock& b) {
    return std::span<double>(values_).subspan(b.offset, b.size());
  }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  friend bool operator==(const ParameterVector&, const ParameterVector&) = default;

 private:
  std::vector<double> values_;
  std::vector<ParameterBlock> blocks_;
};

struct GradientRecord {
  double value = 0.0;
  std::vector<double> gradient;
};

namespace ad {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double scalar() const { return value()[0]; }
};

class Graph {
 public:
  using Backprop = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value) { return record(std::move(value), "constant", false, nullptr); }
  Var variable(Matrix value) { return record(std::move(value), "variable", true, nullptr); }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of the last backward() target w.r.t. v; zero matrix if v did
  /// not influence it.
  Matrix gradient(Var v) const {
    const auto& n = nodes_[v.id];
    if (n.grad.size() == 0) return Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(Var loss) {
    if (loss.value().size() != 1) throw DomainError("backward: loss must be a 1x1 node");
    for (auto& n : nodes_) n.grad = Matrix();
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = Matrix(1, 1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || !n.backprop || n.grad.size() == 0) continue;
      n.backprop(*this, i);
    }
  }

  /// Upstream gradient of node id during backprop.
  const Matrix& upstream(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient accumulator for a parent; allocated on first use. Callers
  /// check requires_grad first.
  Matrix& accumulator(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Var record(Matrix value, const char* op, bool requires_grad, Backprop backprop) {
    if (!value.all_finite()) {
      const auto& d = value.data();
      std::size_t bad = 0;
      while (bad < d.size() && std::isfinite(d[bad])) ++bad;
      const std::size_t row = value.cols() == 0 ? 0 : bad / value.cols();
      std::ostringstream msg;
      msg << "non-finite value produced by '" << op << "' (node " << nodes_.size() << ", row "
          << row << ")";
      throw NonFiniteError(msg.str(), op, row);
    }
    nodes_.push_back({std::move(value), Matrix(), requires_grad,
                      requires_grad ? std::move(backprop) : Backprop{}, op});
    return Var{this, nodes_.size() - 1};
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad;
    Backprop backprop;
    const char* op;
  };
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return graph->value(id); }

namespace detail {

inline Graph& graph_of(Var a, Var b) {
  if (a.graph != b.graph) throw DomainError("autodiff: operands belong to different graphs");
  return *a.graph;
}

inline std::size_t broadcast_extent(std::size_t x, std::size_t y, const char* op) {
  if (x == y || y == 1) return x;
  if (x == 1) return y;
  throw DomainError(std::string(op) + ": incompatible shapes for broadcasting");
}

struct Broadcast {
  std::size_t rows, cols;
  std::size_t ar, ac, br, bc;
  std::size_t a_index(std::size_t r, std::size_t c) const {
    return (ar == 1 ? 0 : r) * ac + (ac == 1 ? 0 : c);
  }
  std::size_t b_index(std::size_t r, std::size_t c) const {
    return (br == 1 ? 0 : r) * bc + (bc == 1 ? 0 : c);
  }
};

inline Broadcast broadcast(const Matrix& a, const Matrix& b, const char* op) {
  return {broadcast_extent(a.rows(), b.rows(), op), broadcast_extent(a.cols(), b.cols(), op),
          a.rows(), a.cols(), b.rows(), b.cols()};
}

template <class Fn>
Var unary(Var a, const char* op, Fn&& fn, Graph::Backprop backprop) {
  Graph& g = *a.graph;
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fn(x[i]);
  return g.record(std::move(out), op, g.requires_grad(a), std::move(backprop));
}

}  // namespace detail

inline Var add(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  const auto bc = detail::broadcast(a.value(), b.value(), "add");
  Matrix out(bc.rows, bc.cols);
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  for (std::size_t r = 0; r < bc.rows; ++r)
    for (std::size_t c = 0; c < bc.cols; ++c)
      out(r, c) = x[bc.a_index(r, c)] + y[bc.b_index(r, c)];
  const std::size_t ia = a.id, ib = b.id;
  return g.record(std::move(out), "add", g.requires_grad(a) || g.requires_grad(b),
                  [ia, ib, bc](Graph& g, std::size_t self) {
                    const Matrix& up = g.upstream(self);
                    if (g.requires_grad(ia)) {
                      Matrix& ga = g.accumulator(ia);
                      for (std::size_t r = 0; r < bc.rows; ++r)
                        for (std::size_t c = 0; c < bc.cols; ++c) ga[bc.a_index(r, c)] += up(r, c);
                    }
                    if (g.requires_grad(ib)) {
                      Matrix& gb = g.accumulator(ib);
                      for (std::size_t r = 0; r < bc.rows; ++r)
                        for (std::size_t c = 0; c < bc.cols; ++c) gb[bc.b_index(r, c)] += up(r, c);
                    }
                  });
}

inline Var sub(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  const auto bc = detail::broadcast(a.value(), b.value(), "sub");
  Matrix out(bc.rows, bc.cols);
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  for (std::size_t r = 0; r < bc.rows; ++r)
    for (std::size_t c = 0; c < bc.cols; ++c)
      out(r, c) = x[bc.a_index(r, c)] - y[bc.b_index(r, c)];
  const std::size_t ia = a.id, ib = b.id;
  return g.record(std::move(out), "sub", g.requires_grad(a) || g.requires_grad(b),
                  [ia, ib, bc](Graph& g, std::size_t self) {
                    const Matrix& up = g.upstream(self);
                    if (g.requires_grad(ia)) {
                      Matrix& ga = g.accumulator(ia);
                      for (std::size_t r = 0; r < bc.rows; ++r)
                        for (std::size_t c = 0; c < bc.cols; ++c) ga[bc.a_index(r, c)] += up(r, c);
                    }
                    if (g.requires_grad(ib)) {
                      Matrix& gb = g.accumulator(ib);
                      for (std::size_t r = 0; r < bc.rows; ++r)
                        for (std::size_t c = 0; c < bc.cols; ++c) gb[bc.b_index(r, c)] -= up(r, c);
                    }
                  });
}

inline Var mul(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  const auto bc = detail::broadcast(a.value(), b.value(), "mul");
  Matrix out(bc.rows, bc.cols);
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  for (std::size_t r = 0; r < bc.rows; ++r)
    for (std::size_t c = 0; c < bc.cols; ++c)
      out(r, c) = x[bc.a_index(r, c)] * y[bc.b_index(r, c)];
  const std::size_t ia = a.id, ib = b.id;
  return g.record(std::move(out), "mul", g.requires_grad(a) || g.requires_grad(b),
                  [ia, ib, bc](Graph& g, std::size_t self) {
                    const Matrix& up = g.upstream(self);
                    const Matrix& x = g.value(ia);
                    const Matrix& y = g.value(ib);
                    if (g.requires_grad(ia)) {
                      Matrix& ga = g.accumulator(ia);
                      for (std::size_t r = 0; r < bc.rows; ++r)
                        for (std::size_t c = 0; c < bc.cols; ++c)
                          ga[bc.a_index(r, c)] += up(r, c) * y[bc.b_index(r, c)];
                    }
                    if (g.requires_grad(ib)) {
                      Matrix& gb = g.accumulator(ib);
                      for (std::size_t r = 0; r < bc.rows; ++r)
                        for (std::size_t c = 0; c < bc.cols; ++c)
                          gb[bc.b_index(r, c)] += up(r, c) * x[bc.a_index(r, c)];
                    }
                  });
}

inline Var scale(Var a, double k) {
  const std::size_t ia = a.id;
  return detail::unary(a, "scale", [k](double x) { return k * x; },
                       [ia, k](Graph& g, std::size_t self) {
                         const Matrix& up = g.upstream(self);
                         Matrix& ga = g.accumulator(ia);
                         for (std::size_t i = 0; i < up.size(); ++i) ga[i] += k * up[i];
                       });
}

inline Var add_scalar(Var a, double k) {
  const std::size_t ia = a.id;
  return detail::unary(a, "add_scalar", [k](double x) { return x + k; },
                       [ia](Graph& g, std::size_t self) {
                         const Matrix& up = g.upstream(self);
                         Matrix& ga = g.accumulator(ia);
                         for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i];
                       });
}

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var exp(Var a) {
  const std::size_t ia = a.id;
  return detail::unary(a, "exp", [](double x) { return std::exp(x); },
                       [ia](Graph& g, std::size_t self) {
                         const Matrix& up = g.upstream(self);
                         const Matrix& y = g.value(self);
                         Matrix& ga = g.accumulator(ia);
                         for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] * y[i];
                       });
}

inline Var log(Var a) {
  const std::size_t ia = a.id;
  return detail::unary(a, "log", [](double x) { return std::log(x); },
                       [ia](Graph& g, std::size_t self) {
                         const Matrix& up = g.upstream(self);
                         const Matrix& x = g.value(ia);
                         Matrix& ga = g.accumulator(ia);
                         for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] / x[i];
                       });
}

inline Var tanh(Var a) {
  const std::size_t ia = a.id;
  return detail::unary(a, "tanh", [](double x) { return std::tanh(x); },
                       [ia](Graph& g, std::size_t self) {
                         const Matrix& up = g.upstream(self);
                         const Matrix& y = g.value(self);
                         Matrix& ga = g.accumulator(ia);
                         for (std::size_t i = 0; i < up.size(); ++i)
                           ga[i] += up[i] * (1.0 - y[i] * y[i]);
                       });
}

inline Var square(Var a) {
  const std::size_t ia = a.id;
  return detail::unary(a, "square", [](double x) { return x * x; },
                       [ia](Graph& g, std::size_t self) {
                         const Matrix& up = g.upstream(self);
                         const Matrix& x = g.value(ia);
                         Matrix& ga = g.accumulator(ia);
                         for (std::size_t i = 0; i < up.size(); ++i) ga[i] += 2.0 * up[i] * x[i];
                       });
}

/// Sum of all entries, 1x1.
inline Var sum(Var a) {
  Graph& g = *a.graph;
  double acc = 0.0;
  for (double x : a.value().data()) acc += x;
  const std::size_t ia = a.id;
  return g.record(Matrix(1, 1, acc), "sum", g.requires_grad(a),
                  [ia](Graph& g, std::size_t self) {
                    const double up = g.upstream(self)[0];
                    Matrix& ga = g.accumulator(ia);
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += up;
                  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Per-row sums, R x 1.
inline Var sum_rows(Var a) {
  Graph& g = *a.graph;
  const Matrix& x = a.value();
  Matrix out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double acc = 0.0;
    for (double v : x.row_span(r)) acc += v;
    out(r, 0) = acc;
  }
  const std::size_t ia = a.id;
  return g.record(std::move(out), "sum_rows", g.requires_grad(a),
                  [ia](Graph& g, std::size_t self) {
                    const Matrix& up = g.upstream(self);
                    Matrix& ga = g.accumulator(ia);
                    for (std::size_t r = 0; r < ga.rows(); ++r)
                      for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += up(r, 0);
                  });
}

/// A (n x k) times B (k x m).
inline Var matmul(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  Matrix out = nestedflow::matmul(a.value(), b.value());
  const std::size_t ia = a.id, ib = b.id;
  return g.record(std::move(out), "matmul", g.requires_grad(a) || g.requires_grad(b),
                  [ia, ib](Graph& g, std::size_t self) {
                    const Matrix& up = g.upstream(self);
                    const Matrix& x = g.value(ia);
                    const Matrix& y = g.value(ib);
                    if (g.requires_grad(ia)) {
                      Matrix& ga = g.accumulator(ia);
                      for (std::size_t i = 0; i < x.rows(); ++i)
                        for (std::size_t k = 0; k < x.cols(); ++k) {
                          double acc = 0.0;
                          for (std::size_t j = 0; j < y.cols(); ++j) acc += up(i, j) * y(k, j);
                          ga(i, k) += acc;
                        }
                    }
                    if (g.requires_grad(ib)) {
                      Matrix& gb = g.accumulator(ib);
                      for (std::size_t i = 0; i < x.rows(); ++i)
                        for (std::size_t k = 0; k < x.cols(); ++k) {
                          const double xik = x(i, k);
                          for (std::size_t j = 0; j < y.cols(); ++j) gb(k, j) += xik * up(i, j);
                        }
                    }
                  });
}

/// A (n x k) times B^T for B (m x k). With rows as datapoints this applies
/// the linear map B to every row.
inline Var matmul_bt(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  const Matrix& x = a.value();
  const Matrix& w = b.value();
  if (x.cols() != w.cols()) throw DomainError("matmul_bt: inner dimensions differ");
  Matrix out(x.rows(), w.rows());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < w.rows(); ++j) out(i, j) = dot(x.row_span(i), w.row_span(j));
  const std::size_t ia = a.id, ib = b.id;
  return g.record(std::move(out), "matmul_bt", g.requires_grad(a) || g.requires_grad(b),
                  [ia, ib](Graph& g, std::size_t self) {
                    const Matrix& up = g.upstream(self);
                    const Matrix& x = g.value(ia);
                    const Matrix& w = g.value(ib);
                    if (g.requires_grad(ia)) {
                      Matrix& ga = g.accumulator(ia);
                      for (std::size_t i = 0; i < x.rows(); ++i)
                        for (std::size_t j = 0; j < w.rows(); ++j) {
                          const double u = up(i, j);
                          for (std::size_t k = 0; k < x.cols(); ++k) ga(i, k) += u * w(j, k);
                        }
                    }
                    if (g.requires_grad(ib)) {
                      Matrix& gb = g.accumulator(ib);
                      for (std::size_t i = 0; i < x.rows(); ++i)
                        for (std::size_t j = 0; j < w.rows(); ++j) {
                          const double u = up(i, j);
                          for (std::size_t k = 0; k < x.cols(); ++k) gb(j, k) += u * x(i, k);
                        }
                    }
                  });
}

/// Columns idx of a, in the given order.
inline Var select_cols(Var a, std::vector<std::size_t> idx) {
  Graph& g = *a.graph;
  const Matrix& x = a.value();
  for (std::size_t c : idx)
    if (c >= x.cols()) throw DomainError("select_cols: column out of range");
  Matrix out(x.rows(), idx.size());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < idx.size(); ++j) out(r, j) = x(r, idx[j]);
  const std::size_t ia = a.id;
  return g.record(std::move(out), "select_cols", g.requires_grad(a),
                  [ia, idx = std::move(idx)](Graph& g, std::size_t self) {
                    const Matrix& up = g.upstream(self);
                    Matrix& ga = g.accumulator(ia);
                    for (std::size_t r = 0; r < up.rows(); ++r)
                      for (std::size_t j = 0; j < idx.size(); ++j) ga(r, idx[j]) += up(r, j);
                  });
}

/// Copy of base with columns idx replaced by the columns of values.
inline Var scatter_cols(Var base, std::vector<std::size_t> idx, Var values) {
  Graph& g = detail::graph_of(base, values);
  const Matrix& x = base.value();
  const Matrix& v = values.value();
  if (v.rows() != x.rows() || v.cols() != idx.size())
    throw DomainError("scatter_cols: shape mismatch");
  Matrix out = x;
  std::vector<bool> replaced(x.cols(), false);
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] >= x.cols()) throw DomainError("scatter_cols: column out of range");
    replaced[idx[j]] = true;
    for (std::size_t r = 0; r < x.rows(); ++r) out(r, idx[j]) = v(r, j);
  }
  const std::size_t ib = base.id, iv = values.id;
  return g.record(std::move(out), "scatter_cols",
                  g.requires_grad(base) || g.requires_grad(values),
                  [ib, iv, idx = std::move(idx), replaced = std::move(replaced)](
                      Graph& g, std::size_t self) {
                    const Matrix& up = g.upstream(self);
                    if (g.requires_grad(ib)) {
                      Matrix& gb = g.accumulator(ib);
                      for (std::size_t r = 0; r < up.rows(); ++r)
                        for (std::size_t c = 0; c < up.cols(); ++c)
                          if (!replaced[c]) gb(r, c) += up(r, c);
                    }
                    if (g.requires_grad(iv)) {
                      Matrix& gv = g.accumulator(iv);
                      for (std::size_t r = 0; r < up.rows(); ++r)
                        for (std::size_t j = 0; j < idx.size(); ++j) gv(r, j) += up(r, idx[j]);
                    }
                  });
}

/// Contiguous flat range [offset, offset + rows*cols) of a, reshaped.
inline Var slice(Var a, std::size_t offset, std::size_t rows, std::size_t cols) {
  Graph& g = *a.graph;
  const Matrix& x = a.value();
  if (offset + rows * cols > x.size()) throw DomainError("slice: range out of bounds");
  std::vector<double> data(x.data().begin() + static_cast<std::ptrdiff_t>(offset),
                           x.data().begin() + static_cast<std::ptrdiff_t>(offset + rows * cols));
  const std::size_t ia = a.id;
  return g.record(Matrix(rows, cols, std::move(data)), "slice", g.requires_grad(a),
                  [ia, offset](Graph& g, std::size_t self) {
                    const Matrix& up = g.upstream(self);
                    Matrix& ga = g.accumulator(ia);
                    for (std::size_t i = 0; i < up.size(); ++i) ga[offset + i] += up[i];
                  });
}

/// Applies the reflection defined by v (D entries) to every row of x.
inline Var householder_rows(Var v, Var x) {
  Graph& g = detail::graph_of(v, x);
  const Matrix& vm = v.value();
  const Matrix& xm = x.value();
  const std::size_t d = xm.cols();
  if (vm.size() != d) throw DomainError("householder_rows: vector length mismatch");
  const std::span<const double> vs(vm.data());
  const double vv = dot(vs, vs);
  if (!(vv > 0.0)) throw DomainError("householder_rows: zero reflection vector");
  Matrix out = xm;
  for (std::size_t r = 0; r < xm.rows(); ++r) {
    auto row = out.row_span(r);
    const double k = 2.0 * dot(vs, row) / vv;
    for (std::size_t i = 0; i < d; ++i) row[i] -= k * vs[i];
  }
  const std::size_t iv = v.id, ix = x.id;
  return g.record(
      std::move(out), "householder", g.requires_grad(v) || g.requires_grad(x),
      [iv, ix, vv](Graph& g, std::size_t self) {
        const Matrix& up = g.upstream(self);
        const Matrix& vm = g.value(iv);
        const Matrix& xm = g.value(ix);
        const std::span<const double> vs(vm.data());
        const std::size_t d = xm.cols();
        const bool need_v = g.requires_grad(iv);
        const bool need_x = g.requires_grad(ix);
        std::vector<double> gv(d, 0.0);
        for (std::size_t r = 0; r < xm.rows(); ++r) {
          const auto u = up.row_span(r);
          const auto xr = xm.row_span(r);
          const double vu = dot(vs, u);
          if (need_x) {
            auto gx = g.accumulator(ix).row_span(r);
            for (std::size_t i = 0; i < d; ++i) gx[i] += u[i] - 2.0 * vu / vv * vs[i];
          }
          if (need_v) {
            const double vx = dot(vs, xr);
            for (std::size_t i = 0; i < d; ++i)
              gv[i] += -2.0 / vv * (vu * xr[i] + vx * u[i]) + 4.0 * vx * vu / (vv * vv) * vs[i];
          }
        }
        if (need_v) {
          Matrix& ga = g.accumulator(iv);
          for (std::size_t i = 0; i < d; ++i) ga[i] += gv[i];
        }
      });
}

/// Solves T x_n = y_n for every row y_n of y.
inline Var triangular_solve_rows(Var t, Var y, Triangle tri,
                                 Diagonal diag = Diagonal::explicit_values) {
  Graph& g = detail::graph_of(t, y);
  const Matrix& tm = t.value();
  const Matrix& ym = y.value();
  if (!tm.square() || tm.rows() != ym.cols())
    throw DomainError("triangular_solve_rows: dimension mismatch");
  Matrix out(ym.rows(), ym.cols());
  for (std::size_t r = 0; r < ym.rows(); ++r) {
    const Vector sol = triangular_solve(tm, ym.row_span(r), tri, diag);
    std::copy(sol.begin(), sol.end(), out.row_span(r).begin());
  }
  const std::size_t it = t.id, iy = y.id;
  return g.record(
      std::move(out), "triangular_solve", g.requires_grad(t) || g.requires_grad(y),
      [it, iy, tri, diag](Graph& g, std::size_t self) {
        const Matrix& up = g.upstream(self);
        const Matrix& tm = g.value(it);
        const Matrix& xm = g.value(self);
        const std::size_t n = tm.rows();
        // ybar = T^{-T} xbar; Tbar = -ybar x^T on the structural triangle.
        const Matrix tt = tm.transposed();
        const Triangle opposite = tri == Triangle::lower ? Triangle::upper : Triangle::lower;
        const bool need_t = g.requires_grad(it);
        const bool need_y = g.requires_grad(iy);
        for (std::size_t r = 0; r < up.rows(); ++r) {
          const Vector yb = triangular_solve(tt, up.row_span(r), opposite, diag);
          if (need_y) {
            auto gy = g.accumulator(iy).row_span(r);
            for (std::size_t i = 0; i < n; ++i) gy[i] += yb[i];
          }
          if (need_t) {
            Matrix& gt = g.accumulator(it);
            const auto xr = xm.row_span(r);
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < n; ++j) {
                const bool structural = tri == Triangle::lower ? j < i : j > i;
                const bool diagonal = i == j && diag == Diagonal::explicit_values;
                if (structural || diagonal) gt(i, j) -= yb[i] * xr[j];
              }
          }
        }
      });
}

/// Unit lower-triangular D x D matrix whose strictly-lower entries are read
/// row by row from params.
inline Var unit_lower(Var params, std::size_t d) {
  Graph& g = *params.graph;
  const Matrix& p = params.value();
  if (p.size() != d * (d - 1) / 2) throw DomainError("unit_lower: wrong parameter count");
  Matrix out = Matrix::identity(d);
  std::size_t k = 0;
  for (std::size_t i = 1; i < d; ++i)
    for (std::size_t j = 0; j < i; ++j) out(i, j) = p[k++];
  const std::size_t ip = params.id;
  return g.record(std::move(out), "unit_lower", g.requires_grad(params),
                  [ip, d](Graph& g, std::size_t self) {
                    const Matrix& up = g.upstream(self);
                    Matrix& gp = g.accumulator(ip);
                    std::size_t k = 0;
                    for (std::size_t i = 1; i < d; ++i)
                      for (std::size_t j = 0; j < i; ++j) gp[k++] += up(i, j);
                  });
}

/// Upper-triangular matrix with strictly-upper entries from offdiag (row by
/// row) and diagonal exp(logdiag).
inline Var upper_exp(Var offdiag, Var logdiag, std::size_t d) {
  Graph& g = detail::graph_of(offdiag, logdiag);
  const Matrix& o = offdiag.value();
  const Matrix& s = logdiag.value();
  if (o.size() != d * (d - 1) / 2 || s.size() != d)
    throw DomainError("upper_exp: wrong parameter count");
  Matrix out(d, d);
  std::size_t k = 0;
  for (std::size_t i = 0; i < d; ++i) {
    out(i, i) = std::exp(s[i]);
    for (std::size_t j = i + 1; j < d; ++j) out(i, j) = o[k++];
  }
  const std::size_t io = offdiag.id, is = logdiag.id;
  return g.record(std::move(out), "upper_exp", g.requires_grad(offdiag) || g.requires_grad(logdiag),
                  [io, is, d](Graph& g, std::size_t self) {
                    const Matrix& up = g.upstream(self);
                    const Matrix& u = g.value(self);
                    if (g.requires_grad(io)) {
                      Matrix& go = g.accumulator(io);
                      std::size_t k = 0;
                      for (std::size_t i = 0; i < d; ++i)
                        for (std::size_t j = i + 1; j < d; ++j) go[k++] += up(i, j);
                    }
                    if (g.requires_grad(is)) {
                      Matrix& gs = g.accumulator(is);
                      for (std::size_t i = 0; i < d; ++i) gs[i] += up(i, i) * u(i, i);
                    }
                  });
}

}  // namespace ad

/// A scalar loss built on the tape from the full parameter vector, given as
/// a single 1 x P node.
using DifferentiableLoss = std::function<ad::Var(ad::Graph&, ad::Var theta)>;

inline GradientRecord evaluate_with_gradient(const DifferentiableLoss& loss,
                                             const ParameterVector& theta) {
  ad::Graph g;
  const ad::Var th = g.variable(Matrix::row(theta.values()));
  const ad::Var l = loss(g, th);
  if (l.value().size() != 1) throw DomainError("evaluate_with_gradient: loss is not scalar");
  g.backward(l);
  GradientRecord rec;
  rec.value = l.scalar();
  rec.gradient = g.gradient(th).data();
  if (!all_finite(rec.gradient))
    throw NonFiniteError("evaluate_with_gradient: non-finite gradient", "backward");
  return rec;
}

/// Value of a tape loss without recording gradients.
inline double evaluate(const DifferentiableLoss& loss, std::span<const double> theta) {
  ad::Graph g;
  const ad::Var th = g.constant(Matrix::row(theta));
  return loss(g, th).scalar();
}

/// Central differences with per-coordinate step base_step * max(1, |theta_i|).
inline std::vector<double> finite_difference_gradient(
    const std::function<double(std::span<const double>)>& loss, std::span<const double> theta,
    double base_step = 1e-5) {
  if (!(base_step > 0.0)) throw DomainError("finite_difference_gradient: step must be positive");
  std::vector<double> point(theta.begin(), theta.end());
  std::vector<double> grad(theta.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = point[i];
    const double h = base_step * std::max(1.0, std::abs(orig));
    point[i] = orig + h;
    const double up = loss(point);
    point[i] = orig - h;
    const double down = loss(point);
    point[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

inline std::vector<double> finite_difference_gradient(const DifferentiableLoss& loss,
                                                      std::span<const double> theta,
                                                      double base_step = 1e-5) {
  return finite_difference_gradient(
      [&](std::span<const double> p) { return evaluate(loss, p); }, theta, base_step);
}

}  // namespace nestedflow
