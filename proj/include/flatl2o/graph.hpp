// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "flatl2o/errors.hpp"

namespace flatl2o {

enum class Op : std::uint8_t {
  Leaf,
  Const,
  Add,
  Mul,
  Neg,
  Div,
  Exp,
  Log,
  Tanh,
  Sigmoid,
  Relu,
  Max,
  Dot,
  Sum,
  Square,
  // Derivative kernels emitted by grad() for the kinked primitives; their own
  // derivative is zero everywhere.
  CmpGt,
  CmpGe,
};

/// Ordinal into Graph::nodes.
struct NodeRef {
  std::uint32_t index = 0;
  friend bool operator==(NodeRef, NodeRef) = default;
};

/// Append-only reverse-mode tape. Every node caches one 64-bit value, computed
/// eagerly at emission from the inputs' cached values. Gradients are recorded
/// as new nodes on the same tape, so grad-of-grad is legal to any order.
///
/// Single-owner: not safe to share during mutation. Distinct graphs may be
/// used from distinct threads.
class Graph {
 public:
  struct Node {
    double value;
    std::uint32_t a;  // first input, or args-pool offset for Dot/Sum
    std::uint32_t b;  // second input, or span length for Dot/Sum
    Op op;
    std::uint8_t bound;  // leaves only
  };

  std::size_t size() const { return nodes_.size(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }

  NodeRef leaf() { return push(Op::Leaf, nan_, 0, 0, 0); }

  NodeRef leaf(double v) { return push(Op::Leaf, v, 0, 0, 1); }

  NodeRef constant(double v) { return push(Op::Const, v, 0, 0, 1); }

  void bind(NodeRef r, double v) {
    Node& n = nodes_[r.index];
    n.value = v;
    n.bound = 1;
  }

  double value(NodeRef r) const { return nodes_[r.index].value; }

  Eigen::VectorXd values(std::span<const NodeRef> refs) const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(refs.size()));
    for (std::size_t i = 0; i < refs.size(); ++i) out[static_cast<Eigen::Index>(i)] = value(refs[i]);
    return out;
  }

  NodeRef add(NodeRef x, NodeRef y) {
    return push(Op::Add, val(x) + val(y), x.index, y.index);
  }
  NodeRef mul(NodeRef x, NodeRef y) {
    return push(Op::Mul, val(x) * val(y), x.index, y.index);
  }
  NodeRef neg(NodeRef x) { return push(Op::Neg, -val(x), x.index, 0); }
  NodeRef div(NodeRef x, NodeRef y) {
    return push(Op::Div, val(x) / val(y), x.index, y.index);
  }
  NodeRef exp(NodeRef x) { return push(Op::Exp, std::exp(val(x)), x.index, 0); }
  NodeRef log(NodeRef x) { return push(Op::Log, std::log(val(x)), x.index, 0); }
  NodeRef tanh(NodeRef x) { return push(Op::Tanh, std::tanh(val(x)), x.index, 0); }
  NodeRef sigmoid(NodeRef x) {
    return push(Op::Sigmoid, sigmoid_value(val(x)), x.index, 0);
  }
  NodeRef relu(NodeRef x) {
    const double v = val(x);
    return push(Op::Relu, v > 0.0 ? v : 0.0, x.index, 0);
  }
  NodeRef max(NodeRef x, NodeRef y) {
    return push(Op::Max, std::max(val(x), val(y)), x.index, y.index);
  }
  NodeRef square(NodeRef x) {
    const double v = val(x);
    return push(Op::Square, v * v, x.index, 0);
  }
  NodeRef cmp_gt(NodeRef x, NodeRef y) {
    return push(Op::CmpGt, val(x) > val(y) ? 1.0 : 0.0, x.index, y.index);
  }
  NodeRef cmp_ge(NodeRef x, NodeRef y) {
    return push(Op::CmpGe, val(x) >= val(y) ? 1.0 : 0.0, x.index, y.index);
  }

  /// Inner product of two equal-length spans; a single scalar node.
  NodeRef dot(std::span<const NodeRef> xs, std::span<const NodeRef> ys) {
    if (xs.size() != ys.size()) throw DimMismatch(xs.size(), ys.size());
    const std::uint32_t ofs = static_cast<std::uint32_t>(args_.size());
    const std::uint32_t n = static_cast<std::uint32_t>(xs.size());
    args_.reserve(args_.size() + 2 * n);
    double acc = 0.0;
    for (std::uint32_t k = 0; k < n; ++k) args_.push_back(xs[k].index);
    for (std::uint32_t k = 0; k < n; ++k) args_.push_back(ys[k].index);
    for (std::uint32_t k = 0; k < n; ++k)
      acc += nodes_[args_[ofs + k]].value * nodes_[args_[ofs + n + k]].value;
    return push(Op::Dot, acc, ofs, n);
  }

  NodeRef sum(std::span<const NodeRef> xs) {
    const std::uint32_t ofs = static_cast<std::uint32_t>(args_.size());
    const std::uint32_t n = static_cast<std::uint32_t>(xs.size());
    args_.reserve(args_.size() + n);
    double acc = 0.0;
    for (const NodeRef x : xs) {
      args_.push_back(x.index);
      acc += nodes_[x.index].value;
    }
    return push(Op::Sum, acc, ofs, n);
  }

  /// Row-major (rows x cols) matrix times vector; one Dot node per row.
  std::vector<NodeRef> matvec(std::span<const NodeRef> m, int rows, int cols,
                              std::span<const NodeRef> v) {
    if (m.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols))
      throw DimMismatch(static_cast<std::size_t>(rows) * cols, m.size());
    if (v.size() != static_cast<std::size_t>(cols)) throw DimMismatch(cols, v.size());
    std::vector<NodeRef> out;
    out.reserve(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r)
      out.push_back(dot(m.subspan(static_cast<std::size_t>(r) * cols, cols), v));
    return out;
  }

  /// Recompute and validate every node in [0, root], then return the root's
  /// value. Throws UnboundLeaf or NonFinite (with the offending node index).
  double eval(NodeRef root) {
    if (root.index >= nodes_.size()) throw DimMismatch(nodes_.size(), root.index);
    for (std::uint32_t i = 0; i <= root.index; ++i) {
      Node& n = nodes_[i];
      switch (n.op) {
        case Op::Leaf:
          if (!n.bound) throw UnboundLeaf(i);
          break;
        case Op::Const:
          break;
        default:
          n.value = recompute(n);
      }
      if (!std::isfinite(n.value)) throw NonFinite(i);
    }
    return nodes_[root.index].value;
  }

  const Node& node(NodeRef r) const { return nodes_[r.index]; }
  std::span<const std::uint32_t> node_args(const Node& n) const {
    return {args_.data() + n.a, (n.op == Op::Dot ? 2u * n.b : n.b)};
  }

 private:
  friend struct GradWorkspace;

  static double sigmoid_value(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                    : std::exp(x) / (1.0 + std::exp(x));
  }

  double val(NodeRef r) const { return nodes_[r.index].value; }

  NodeRef push(Op op, double value, std::uint32_t a, std::uint32_t b,
               std::uint8_t bound = 1) {
    nodes_.push_back(Node{value, a, b, op, bound});
    return NodeRef{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  double recompute(const Node& n) const {
    const auto v = [&](std::uint32_t i) { return nodes_[i].value; };
    switch (n.op) {
      case Op::Add: return v(n.a) + v(n.b);
      case Op::Mul: return v(n.a) * v(n.b);
      case Op::Neg: return -v(n.a);
      case Op::Div: return v(n.a) / v(n.b);
      case Op::Exp: return std::exp(v(n.a));
      case Op::Log: return std::log(v(n.a));
      case Op::Tanh: return std::tanh(v(n.a));
      case Op::Sigmoid: return sigmoid_value(v(n.a));
      case Op::Relu: return v(n.a) > 0.0 ? v(n.a) : 0.0;
      case Op::Max: return std::max(v(n.a), v(n.b));
      case Op::Square: return v(n.a) * v(n.a);
      case Op::CmpGt: return v(n.a) > v(n.b) ? 1.0 : 0.0;
      case Op::CmpGe: return v(n.a) >= v(n.b) ? 1.0 : 0.0;
      case Op::Dot: {
        double acc = 0.0;
        for (std::uint32_t k = 0; k < n.b; ++k)
          acc += nodes_[args_[n.a + k]].value * nodes_[args_[n.a + n.b + k]].value;
        return acc;
      }
      case Op::Sum: {
        double acc = 0.0;
        for (std::uint32_t k = 0; k < n.b; ++k) acc += nodes_[args_[n.a + k]].value;
        return acc;
      }
      case Op::Leaf:
      case Op::Const:
        return n.value;
    }
    return nan_;
  }

  static constexpr double nan_ = std::numeric_limits<double>::quiet_NaN();

  std::vector<Node> nodes_;
  std::vector<std::uint32_t> args_;
};

/// Convenience: bind a span of leaves to the entries of a vector.
inline void bind_all(Graph& g, std::span<const NodeRef> leaves,
                     const Eigen::VectorXd& v) {
  if (leaves.size() != static_cast<std::size_t>(v.size()))
    throw DimMismatch(leaves.size(), static_cast<std::size_t>(v.size()));
  for (std::size_t i = 0; i < leaves.size(); ++i) g.bind(leaves[i], v[static_cast<Eigen::Index>(i)]);
}

/// Emit a span of fresh leaves bound to the entries of a vector.
inline std::vector<NodeRef> make_leaves(Graph& g, const Eigen::VectorXd& v) {
  std::vector<NodeRef> out;
  out.reserve(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(g.leaf(v[i]));
  return out;
}

/// Emit a span of constants from the entries of a vector.
inline std::vector<NodeRef> make_consts(Graph& g, const Eigen::VectorXd& v) {
  std::vector<NodeRef> out;
  out.reserve(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(g.constant(v[i]));
  return out;
}

}  // namespace flatl2o
